// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance --criterion N [--workdir DIR]
//   acceptance --property stage1-loss [--workdir DIR]
//
// Long-running criteria keep their data and results under the work dir so
// later criteria (8 reuses 6's trajectory) and humans can inspect them.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cli.hpp"
#include "derain/bench.hpp"
#include "derain/gradcheck.hpp"
#include "derain/losses.hpp"
#include "derain/net.hpp"
#include "derain/ops.hpp"
#include "derain/pfilt.hpp"
#include "derain/rainmix.hpp"
#include "derain/train.hpp"
#include "oracles.hpp"

using namespace derain;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Criterion 6 schedule. Batch 6 instead of 8 keeps the run inside the
// 15 minute budget on a single core; see the README.
constexpr int kToyBatch = 6;
constexpr double kToyGainDb = 3.0;
constexpr double kToyBudgetS = 900.0;

// Criterion 7 schedule: 40 runs, so each is much shorter than criterion 6.
constexpr int kAblationSeeds = 5;
constexpr int kAblationBatch = 4;
constexpr int kAblationStageSteps = 300;

// ---------------------------------------------------------------- 1

Outcome criterion1() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst_materialized = 0, worst_oracle = 0;
  for (int draw = 0; draw < 50; ++draw) {
    const int s = std::uniform_int_distribution<int>(1, 4)(rng);
    const int h = std::uniform_int_distribution<int>(5, 24)(rng);
    const int w = std::uniform_int_distribution<int>(5, 24)(rng);
    const int b = std::uniform_int_distribution<int>(1, 2)(rng);
    const auto img = oracle::random_tensor(Shape{b, 3, h, w}, rng(), 0, 1);
    const auto k = oracle::random_tensor(Shape{b, 27, h, w}, rng(), -1, 1);
    const KernelField<double> field(k, 3, 3);
    const auto fast = apply_dilated_filter(img, field, s);
    const auto dense = materialize_dilated_kernels(field, s);
    const auto ref = apply_spfilt(img, dense);
    const auto indep = oracle::filter(img, k, 3, s);
    worst_materialized = std::max(worst_materialized, oracle::max_abs_diff(fast, ref));
    worst_oracle = std::max(worst_oracle, oracle::max_abs_diff(fast, indep));
  }
  const double secs = seconds_since(t0);
  o.check(worst_materialized <= 1e-6, "dilated vs materialized dense > 1e-6");
  o.check(worst_oracle <= 1e-6, "dilated vs independent dense oracle > 1e-6");
  o.check(secs < 10, "runtime >= 10 s");
  o.detail << "draws=50 max_abs_vs_materialized=" << worst_materialized
           << " max_abs_vs_oracle=" << worst_oracle << " runtime_s=" << secs;
  return o;
}

// ---------------------------------------------------------------- 2

Outcome criterion2() {
  Outcome o;
  const std::uint64_t ws4 = flop_count(1, 1, 1, 3, 4, MultiScaleStrategy::kWeightSharing);
  const std::uint64_t mh4 = flop_count(1, 1, 1, 3, 4, MultiScaleStrategy::kMultiHead);
  const double ratio = static_cast<double>(mh4) / static_cast<double>(ws4);
  o.check(std::abs(ratio - 4.5556) <= 1e-4, "MH/WS analytic ratio at S=4");

  // Closed forms written out here, independently of flop_count.
  BenchConfig counts;
  counts.sizes = {32, 64, 128};
  counts.runs = 1;
  counts.warmup = 0;
  const BenchReport small = run_bench(counts);
  BenchConfig timed;  // 256x256, 5 warmup + 20 timed runs
  const BenchReport big = run_bench(timed);
  bool exact = true;
  for (const auto* report : {&small, &big}) {
    for (const BenchRow& r : report->rows) {
      std::uint64_t expect = 0;
      const std::uint64_t chw = 3ull * r.height * r.width;
      if (r.strategy == MultiScaleStrategy::kWeightSharing) {
        expect = static_cast<std::uint64_t>(r.scales) * 9 * chw;
      } else {
        for (int s = 1; s <= r.scales; ++s) expect += chw * (2 * s + 1) * (2 * s + 1);
      }
      exact &= r.counted_macs == expect && r.analytic_macs == expect;
    }
  }
  o.check(exact, "counted MACs differ from closed form");
  const auto time_ratio = big.ws_time_ratio(256);
  o.check(time_ratio.has_value() && *time_ratio <= 1.5, "WS S=4 vs S=1 wall time > 1.5x at 256");
  const BenchRow* w1 = big.find(MultiScaleStrategy::kWeightSharing, 1, 256);
  const BenchRow* w4 = big.find(MultiScaleStrategy::kWeightSharing, 4, 256);
  const BenchRow* m4 = big.find(MultiScaleStrategy::kMultiHead, 4, 256);
  o.detail << "mh_ws_ratio=" << std::setprecision(6) << ratio << " macs_exact=" << (exact ? "yes" : "no")
           << " sizes=32,64,128,256";
  if (time_ratio) o.detail << " ws_time_ratio_256=" << std::setprecision(4) << *time_ratio;
  if (w1 && w4 && m4) {
    o.detail << " ws1_ms=" << w1->total_ms << " ws4_ms=" << w4->total_ms << " mh4_ms=" << m4->total_ms
             << " ws4_filter_ms=" << w4->filter_ms << " ws4_kernel_bytes=" << w4->kernel_bytes
             << " mh4_kernel_bytes=" << m4->kernel_bytes;
  }
  return o;
}

// ---------------------------------------------------------------- 3

struct GradCase {
  std::string name;
  std::function<Tensor<double>(const Tensor<double>&)> f;
  Tensor<double> x;
  double tol;
};

Outcome criterion3() {
  Outcome o;
  const auto t0 = Clock::now();
  using oracle::random_tensor;
  auto rnd = [](Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
    return random_tensor(s, seed, lo, hi);
  };
  const auto x = rnd(Shape{2, 3, 6, 6}, 1);
  const auto w = rnd(Shape{4, 3, 3, 3}, 2);
  const auto bias = rnd(Shape{1, 4, 1, 1}, 3);
  const auto proj4 = rnd(Shape{2, 4, 6, 6}, 4);
  const auto proj3 = rnd(Shape{2, 3, 6, 6}, 5);
  const auto gamma = rnd(Shape{1, 3, 1, 1}, 6, 0.5, 1.5);
  const auto beta = rnd(Shape{1, 3, 1, 1}, 7);
  const auto y = rnd(Shape{2, 3, 6, 6}, 8);
  const auto proj_small = rnd(Shape{2, 3, 3, 3}, 9);
  const auto proj_big = rnd(Shape{2, 3, 12, 12}, 10);
  const auto proj_cat = rnd(Shape{2, 6, 6, 6}, 11);
  // relu away from its kink
  auto xr = x.clone();
  for (double& v : xr.mutable_data()) v += v >= 0 ? 0.05 : -0.05;

  auto dot = [](const Tensor<double>& a, const Tensor<double>& p) { return sum(mul(a, p)); };
  BatchNormStats<double> bn_stats(3);
  std::vector<GradCase> cases = {
      {"conv2d.x", [&](const Tensor<double>& t) { return dot(conv2d(t, w, bias, 1, 1), proj4); }, x, 1e-4},
      {"conv2d.w", [&](const Tensor<double>& t) { return dot(conv2d(x, t, bias, 1, 1), proj4); }, w, 1e-4},
      {"conv2d.b", [&](const Tensor<double>& t) { return dot(conv2d(x, w, t, 1, 1), proj4); }, bias, 1e-4},
      {"batch_norm.x",
       [&](const Tensor<double>& t) { return dot(batch_norm(t, gamma, beta, bn_stats, true), proj3); }, x, 1e-4},
      {"batch_norm.gamma",
       [&](const Tensor<double>& t) { return dot(batch_norm(x, t, beta, bn_stats, true), proj3); }, gamma, 1e-4},
      {"batch_norm.beta",
       [&](const Tensor<double>& t) { return dot(batch_norm(x, gamma, t, bn_stats, true), proj3); }, beta, 1e-4},
      {"relu", [&](const Tensor<double>& t) { return dot(relu(t), proj3); }, xr, 1e-4},
      {"avg_pool2", [&](const Tensor<double>& t) { return dot(avg_pool2(t), proj_small); }, x, 1e-4},
      {"bilinear_upsample2", [&](const Tensor<double>& t) { return dot(bilinear_upsample2(t), proj_big); }, x,
       1e-4},
      {"concat_channels", [&](const Tensor<double>& t) { return dot(concat_channels<double>({t, y}), proj_cat); },
       x, 1e-4},
      {"add", [&](const Tensor<double>& t) { return dot(add(t, y), proj3); }, x, 1e-4},
      {"mul", [&](const Tensor<double>& t) { return dot(mul(t, y), proj3); }, x, 1e-4},
      {"scale", [&](const Tensor<double>& t) { return dot(scale(t, 0.7), proj3); }, x, 1e-4},
      // Kept away from the kink at zero difference.
      {"mean_abs_diff", [&](const Tensor<double>& t) { return mean_abs_diff(t, x); },
       add(x, rnd(Shape{2, 3, 6, 6}, 12, 0.05, 0.2)), 1e-4},
  };

  const auto img = rnd(Shape{1, 3, 8, 8}, 20, 0, 1);
  const auto kw = rnd(Shape{1, 27, 8, 8}, 21, -0.3, 0.5);
  const auto proj_k = rnd(Shape{1, 1, 8, 8}, 22);
  const auto proj_img = rnd(Shape{1, 3, 8, 8}, 26);
  for (int s = 1; s <= 4; ++s) {
    cases.push_back({"dilated_filter.image.s" + std::to_string(s),
                     [&, s](const Tensor<double>& t) {
                       return dot(apply_dilated_filter(t, KernelField<double>(kw, 3, 3), s), proj_img);
                     },
                     img, 1e-4});
    cases.push_back({"dilated_filter.kernels.s" + std::to_string(s),
                     [&, s](const Tensor<double>& t) {
                       return dot(apply_dilated_filter(img, KernelField<double>(t, 3, 3), s), proj_img);
                     },
                     kw, 1e-4});
  }
  cases.push_back({"uncertainty_map",
                   [&](const Tensor<double>& t) { return dot(uncertainty_map(KernelField<double>(t, 3, 3)), proj_k); },
                   kw, 1e-4});
  Fusion<double> fusion(2, 3);
  const auto f_in = rnd(Shape{1, 3, 8, 8}, 23, 0, 1);
  const auto f_proj = rnd(Shape{1, 3, 8, 8}, 24);
  cases.push_back({"fusion.input", [&](const Tensor<double>& t) { return dot(fusion({t, f_in}), f_proj); }, img,
                   1e-4});

  const auto target = rnd(Shape{1, 3, 8, 8}, 25, 0, 1);
  cases.push_back({"spfilt_loss.image",
                   [&](const Tensor<double>& t) {
                     return l1_ssim_loss(apply_spfilt(t, KernelField<double>(kw, 3, 3)), target);
                   },
                   img, 1e-4});
  cases.push_back({"spfilt_loss.kernels",
                   [&](const Tensor<double>& t) {
                     return l1_ssim_loss(apply_spfilt(img, KernelField<double>(t, 3, 3)), target);
                   },
                   kw, 1e-4});

  int checked = 0;
  double worst_op = 0;
  for (const auto& c : cases) {
    const auto r = finite_difference_check(c.f, c.x, 1e-6, 128, 7);
    const auto r5 = finite_difference_check(c.f, c.x, 1e-5, 128, 7);
    // Whichever step is less affected by truncation/rounding for this op.
    const double err = std::min(r.max_rel_error, r5.max_rel_error);
    worst_op = std::max(worst_op, err);
    o.check(r.finite && err < c.tol, c.name + " rel err " + std::to_string(err));
    ++checked;
  }

  // Full cascade loss, through every parameter tensor of a tiny model.
  CascadeModel<double> model(ModelConfig(), 3);
  const auto mx = rnd(Shape{2, 3, 16, 16}, 30, 0, 1);
  const auto mt = rnd(Shape{2, 3, 16, 16}, 31, 0, 1);
  auto loss = [&](const Tensor<double>&) {
    const auto out = ucpfilt_forward(model, mx);
    return uc_loss(out.fused, out.first, out.second, mt);
  };
  double worst_e2e = 0;
  int params_checked = 0;
  for (const auto& [name, p] : model.parameters()) {
    const auto r = finite_difference_check(loss, p, 1e-5, 2, 17 + params_checked);
    worst_e2e = std::max(worst_e2e, r.max_rel_error);
    o.check(r.finite, name + " non-finite");
    ++params_checked;
  }
  o.check(worst_e2e < 1e-3, "end-to-end cascade loss rel err " + std::to_string(worst_e2e));
  const double secs = seconds_since(t0);
  o.check(secs < 300, "runtime >= 5 min");
  o.detail << "op_checks=" << checked << " worst_op_rel=" << worst_op << " e2e_param_tensors=" << params_checked
           << " worst_e2e_rel=" << worst_e2e << " runtime_s=" << secs;
  return o;
}

// ---------------------------------------------------------------- 4

template <typename T>
KernelField<T> delta_field(int b, int h, int w) {
  Tensor<T> k(Shape{b, 27, h, w});
  for (int n = 0; n < b; ++n)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) k.at(n, c * 9 + 4, y, x) = T(1);
  return KernelField<T>(k, 3, 3);
}

Outcome criterion4() {
  Outcome o;
  const auto img = oracle::random_tensor<float>(Shape{2, 3, 20, 28}, 1, 0, 1);
  const auto delta = delta_field<float>(2, 20, 28);
  bool exact = true;
  for (int s = 1; s <= 4; ++s) {
    const auto out = apply_dilated_filter(img, delta, s);
    exact &= std::equal(out.data().begin(), out.data().end(), img.data().begin());
  }
  const auto sp = apply_spfilt(img, delta);
  exact &= std::equal(sp.data().begin(), sp.data().end(), img.data().begin());
  o.check(exact, "center-delta filtering not bitwise identity");

  // Whole model with forced center-delta kernels, every S.
  double model_err = 0;
  const auto img32 = oracle::random_tensor<float>(Shape{1, 3, 32, 32}, 2, 0, 1);
  for (int scales = 1; scales <= 4; ++scales) {
    ModelConfig cfg;
    cfg.scales = scales;
    cfg.normalize();
    CascadeModel<float> m(cfg, 0);
    m.phi1().net().force_identity_kernels();
    m.phi2().net().force_identity_kernels();
    model_err = std::max(model_err, oracle::max_abs_diff(m.forward(img32).fused, img32));
  }
  o.check(model_err < 1e-6, "identity-kernel model output differs from input");

  bool ninth = true;
  const auto mf = uncertainty_map(delta);
  const auto md = uncertainty_map(delta_field<double>(1, 5, 7));
  for (float v : mf.data()) ninth &= v == 1.0f / 9.0f;
  for (double v : md.data()) ninth &= v == 1.0 / 9.0;
  o.check(ninth, "uncertainty of center-delta kernels != 1/9");

  const auto t = oracle::random_tensor(Shape{1, 3, 16, 16}, 3, 0, 1);
  const double l12 = l1_ssim_loss(t, t).item();
  const double l13 = uc_loss(t, t, t, t).item();
  o.check(std::abs(l12 + 0.2) < 1e-12, "single-output loss at prediction = target");
  o.check(std::abs(l13 + 0.6) < 1e-12, "cascade loss at prediction = target");

  const auto base = oracle::random_tensor(Shape{1, 3, 16, 16}, 4, 0.2, 0.8);
  auto shifted = base.clone();
  for (double& v : shifted.mutable_data()) v += 0.1;
  const double p = psnr(shifted, base);
  o.check(std::abs(p - 20.0) < 1e-9, "PSNR of 0.1 offset");
  o.detail << "delta_bitwise=" << (exact ? "yes" : "no") << " model_identity_max_abs=" << model_err
           << " loss_single=" << std::setprecision(15) << l12 << " loss_cascade=" << l13 << " psnr_offset=" << p;
  return o;
}

// ---------------------------------------------------------------- 5

Outcome criterion5(const fs::path& work) {
  Outcome o;
  const int n = 10000;
  const int paths = 4;
  CountingRng rng(5);
  std::vector<double> mean(paths, 0), sq(paths, 0);
  double worst_sum = 0;
  for (int i = 0; i < n; ++i) {
    const auto w = sample_dirichlet(paths, 1.0, rng);
    double s = 0;
    for (int k = 0; k < paths; ++k) {
      s += w[k];
      mean[k] += w[k];
      sq[k] += w[k] * w[k];
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1));
  }
  double worst_z = 0;
  for (int k = 0; k < paths; ++k) {
    const double m = mean[k] / n;
    const double sd = std::sqrt(std::max(0.0, sq[k] / n - m * m));
    worst_z = std::max(worst_z, std::abs(m - 1.0 / paths) / (sd / std::sqrt(static_cast<double>(n))));
  }
  o.check(worst_sum <= 1e-12, "Dirichlet weights do not sum to 1");
  o.check(worst_z <= 3, "Dirichlet mean beyond 3 SE");

  std::vector<double> b(n);
  for (double& v : b) v = sample_beta(1.0, 1.0, rng);
  std::sort(b.begin(), b.end());
  double d = 0;
  for (int i = 0; i < n; ++i) d = std::max({d, (i + 1.0) / n - b[i], b[i] - static_cast<double>(i) / n});
  const double d_crit = 1.628 / std::sqrt(static_cast<double>(n));  // 1% level
  o.check(d < d_crit, "Beta(1,1) fails KS uniformity at 1%");

  const auto x = oracle::random_tensor<float>(Shape{1, 3, 32, 32}, 6, 0, 1);
  CountingRng draw_rng(7);
  RainMixDraw draw = sample_rainmix_draw(AugmentSpec{}, draw_rng);
  draw.blend = 1.0;
  const auto same = apply_rainmix(x, draw);
  const bool bitwise_blend = std::equal(same.data().begin(), same.data().end(), x.data().begin());
  o.check(bitwise_blend, "blend weight 1 does not return the input bitwise");

  CountingRng r1(11), r2(11);
  const auto a = rainmix(x, AugmentSpec{}, r1), c = rainmix(x, AugmentSpec{}, r2);
  const bool repro = std::equal(a.data().begin(), a.data().end(), c.data().begin()) && r1 == r2;
  o.check(repro, "rainmix not reproducible under a fixed seed");

  const fs::path dir = work / "c5_preview";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "preview.cfg") << "toy.size = 64\n";
  auto preview = [&](const std::string& sub) {
    std::ostringstream out, err;
    const int code = cli::run({"derain_cli", "augment-preview", "--config", (dir / "preview.cfg").string(), "--seed",
                               "3", "--out", (dir / sub).string()},
                              out, err);
    return code;
  };
  const int c1 = preview("a"), c2 = preview("b");
  auto bytes = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  bool preview_same = c1 == 0 && c2 == 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    preview_same &= bytes(e.path()) == bytes(dir / "b" / e.path().filename());
  }
  o.check(preview_same, "augment-preview outputs differ between identical runs");
  o.detail << "dirichlet_max_sum_err=" << worst_sum << " dirichlet_max_z=" << std::setprecision(4) << worst_z
           << " beta_ks_D=" << d << " D_crit=" << d_crit << " blend1_bitwise=" << (bitwise_blend ? "yes" : "no")
           << " rainmix_repro=" << (repro ? "yes" : "no") << " preview_repro=" << (preview_same ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------- 6 and 8

TrainConfig toy_config(const fs::path& work) {
  TrainConfig cfg;  // tiny 49/17-layer cascade, S=4, RainMix N=4 M=3, 2000+2000 steps
  cfg.batch = kToyBatch;
  cfg.seed = 0;
  cfg.plateau_patience = 0;
  cfg.data_dir = work / "toy_data";
  cfg.toy = ToyDatasetSpec{};
  return cfg;
}

std::string trajectory_text(const std::vector<LossRecord>& h) {
  std::ostringstream os;
  for (const auto& r : h) {
    os << r.stage << " " << r.step << " " << std::hex << std::bit_cast<std::uint64_t>(r.loss) << std::dec << "\n";
  }
  return os.str();
}

struct ToyRun {
  std::vector<LossRecord> history;
  HeldOutMetrics metrics;
  std::optional<HeldOutMetrics> stage1;
  double train_s = 0;
  double total_s = 0;
};

ToyRun run_toy(const fs::path& work) {
  const auto t0 = Clock::now();
  const TrainConfig cfg = toy_config(work);
  PairedDataset data = prepare_dataset(cfg);
  const auto t1 = Clock::now();
  Trainer trainer(cfg, std::move(data));
  trainer.run([](const LossRecord& r) {
    if (r.step % 500 == 0) std::cout << "  " << r.str() << std::endl;
  });
  ToyRun run;
  run.train_s = seconds_since(t1);
  run.metrics = trainer.evaluate_heldout();
  run.stage1 = trainer.stage1_metrics();
  run.history = trainer.history();
  run.total_s = seconds_since(t0);
  return run;
}

Outcome criterion6(const fs::path& work) {
  Outcome o;
  const ToyRun run = run_toy(work);
  const double gain = run.metrics.psnr_output - run.metrics.psnr_input;
  o.check(gain >= kToyGainDb, "held-out PSNR gain below 3 dB");
  o.check(run.total_s < kToyBudgetS, "runtime >= 15 min");
  o.check(run.history.size() == 4000u, "schedule did not run 2000 + 2000 steps");
  std::ofstream(work / "c6_trajectory.txt") << trajectory_text(run.history);
  o.detail << std::fixed << std::setprecision(3) << "heldout=" << run.metrics.count
           << " psnr_input=" << run.metrics.psnr_input << " psnr_output=" << run.metrics.psnr_output
           << " gain_db=" << gain << " ssim_output=" << run.metrics.ssim_output;
  if (run.stage1) o.detail << " psnr_stage1=" << run.stage1->psnr_output;
  o.detail << " steps=" << run.history.size() << " batch=" << kToyBatch << " train_s=" << run.train_s
           << " total_s=" << run.total_s;
  return o;
}

Outcome criterion8(const fs::path& work) {
  Outcome o;
  const fs::path saved = work / "c6_trajectory.txt";
  std::string reference;
  if (fs::exists(saved)) {
    std::ifstream in(saved);
    reference.assign(std::istreambuf_iterator<char>(in), {});
    o.detail << "reference=criterion6 ";
  } else {
    reference = trajectory_text(run_toy(work).history);
    o.detail << "reference=fresh_run ";
  }
  const std::string again = trajectory_text(run_toy(work).history);
  std::size_t first_diff = 0, lines = 0;
  {
    std::istringstream a(reference), b(again);
    std::string la, lb;
    bool differ = false;
    while (true) {
      const bool ga = static_cast<bool>(std::getline(a, la));
      const bool gb = static_cast<bool>(std::getline(b, lb));
      if (!ga && !gb) break;
      ++lines;
      if (!differ && (ga != gb || la != lb)) {
        differ = true;
        first_diff = lines;
      }
    }
  }
  o.check(reference == again, "loss trajectory differs");
  o.check(lines == 4000, "trajectory length");
  o.detail << "steps=" << lines << " bitwise_equal=" << (reference == again ? "yes" : "no");
  if (first_diff) o.detail << " first_diff_step=" << first_diff;
  return o;
}

// ------------------------------------------------- stage-1 loss property

double window_mean(const std::vector<LossRecord>& h, std::size_t end_step, std::size_t window) {
  double sum = 0;
  for (std::size_t i = end_step - window; i < end_step; ++i) sum += h[i].loss;
  return sum / static_cast<double>(window);
}

// 100-step windowed stage-1 loss at step 2000 is below the one at step 100,
// for seeds 0..4 on the default toy set. Seed 0 is read from criterion 6's
// run when its trajectory is present.
Outcome stage1_loss_decreases(const fs::path& work) {
  Outcome o;
  const auto t0 = Clock::now();
  for (int seed = 0; seed < 5; ++seed) {
    std::vector<LossRecord> h;
    const fs::path saved = work / "c6_trajectory.txt";
    if (seed == 0 && fs::exists(saved)) {
      std::ifstream in(saved);
      LossRecord r;
      std::uint64_t bits = 0;
      while (in >> r.stage >> r.step >> std::hex >> bits >> std::dec) {
        r.loss = std::bit_cast<double>(bits);
        if (r.stage == 1) h.push_back(r);
      }
    } else {
      TrainConfig cfg = toy_config(work);
      cfg.seed = static_cast<std::uint64_t>(seed);
      cfg.stage2_steps = 0;
      Trainer t(cfg, prepare_dataset(cfg));
      t.run();
      h = t.history();
    }
    if (h.size() < 2000) {
      o.check(false, "seed " + std::to_string(seed) + " has " + std::to_string(h.size()) + " stage-1 steps");
      continue;
    }
    const double early = window_mean(h, 100, 100), late = window_mean(h, 2000, 100);
    o.check(late < early, "seed " + std::to_string(seed) + " windowed loss did not fall");
    o.detail << "seed" << seed << "=" << std::setprecision(5) << early << "->" << late << " ";
    std::cout << "  seed=" << seed << " window@100=" << early << " window@2000=" << late << std::endl;
  }
  o.detail << "runtime_s=" << seconds_since(t0);
  return o;
}

// ---------------------------------------------------------------- 7

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome criterion7(const fs::path& work) {
  Outcome o;
  const auto t0 = Clock::now();
  TrainConfig base = toy_config(work);
  base.model = ModelConfig();  // 17-layer tiny phi1 and phi2
  base.batch = kAblationBatch;
  base.stage1_steps = kAblationStageSteps;
  base.stage2_steps = kAblationStageSteps;
  const PairedDataset data = prepare_dataset(base);

  std::map<std::string, std::vector<double>> psnr_by;
  std::map<std::string, std::vector<double>> stage1_by;
  std::ofstream log(work / "c7_runs.txt");
  double input_psnr = 0;
  for (int seed = 0; seed < kAblationSeeds; ++seed) {
    TrainConfig cfg = base;
    cfg.seed = static_cast<std::uint64_t>(seed);
    for (const AblationVariant& v : ablation_matrix()) {
      TrainConfig vc = v.apply(cfg);
      vc.out_dir.clear();
      Trainer t(vc, data);
      t.run();
      const HeldOutMetrics m = t.evaluate_heldout();
      input_psnr = m.psnr_input;
      psnr_by[v.name].push_back(m.psnr_output);
      const double stage1 = t.stage1_metrics() ? t.stage1_metrics()->psnr_output : m.psnr_output;
      stage1_by[v.name].push_back(stage1);
      log << "seed=" << seed << " variant=" << v.name << " psnr=" << m.psnr_output << " psnr_stage1=" << stage1
          << " ssim=" << m.ssim_output << "\n"
          << std::flush;
      std::cout << "  seed=" << seed << " " << v.name << " psnr=" << m.psnr_output << std::endl;
    }
  }
  std::map<std::string, double> med;
  for (const auto& [name, v] : psnr_by) med[name] = median(v);
  for (const char* removed : {"no_cascade", "no_multiscale", "no_rainmix"}) {
    o.check(med["full"] >= med[removed], std::string("full < ") + removed);
    o.check(med[removed] >= med["baseline"], std::string(removed) + " < baseline");
  }
  // Cascaded vs single-stage predictive filtering, other components off.
  o.check(med["cascade_only"] >= med["baseline"], "UC-PFilt < SPFilt");
  // The same trend inside one model: the jointly trained cascade against its
  // own first stage at the end of stage 1.
  const double full_stage1 = median(stage1_by["full"]);
  o.check(med["full"] >= full_stage1, "full model after stage 2 < after stage 1");
  o.detail << std::fixed << std::setprecision(3) << "seeds=" << kAblationSeeds << " input=" << input_psnr;
  for (const auto& v : ablation_matrix()) o.detail << " " << v.name << "=" << med[v.name];
  o.detail << " full_after_stage1=" << full_stage1 << " runtime_s=" << seconds_since(t0);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Acceptance criteria");
  int criterion = 0;
  std::string property;
  std::string workdir = "acceptance_work";
  auto* crit = app.add_option("--criterion", criterion, "1..8")->check(CLI::Range(1, 8));
  app.add_option("--property", property, "stage1-loss")->check(CLI::IsMember({"stage1-loss"}))->excludes(crit);
  app.add_option("--workdir", workdir, "Scratch and result directory");
  CLI11_PARSE(app, argc, argv);

  tune_allocator();
  const fs::path work = fs::absolute(workdir);
  fs::create_directories(work);
  std::cout << std::setprecision(6);
  if (criterion == 0 && property.empty()) {
    std::cerr << "one of --criterion or --property is required\n";
    return 2;
  }
  Outcome o;
  try {
    if (!property.empty()) o = stage1_loss_decreases(work);
    switch (criterion) {
      case 1: o = criterion1(); break;
      case 2: o = criterion2(); break;
      case 3: o = criterion3(); break;
      case 4: o = criterion4(); break;
      case 5: o = criterion5(work); break;
      case 6: o = criterion6(work); break;
      case 7: o = criterion7(work); break;
      case 8: o = criterion8(work); break;
    }
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << "exception: " << e.what();
  }
  const std::string label = property.empty() ? "criterion " + std::to_string(criterion) : "property " + property;
  const std::string line = label + ": " + (o.pass ? "PASS" : "FAIL") + " " + o.detail.str();
  std::cout << line << std::endl;
  const std::string file = property.empty() ? "criterion" + std::to_string(criterion) : property;
  std::ofstream(work / (file + ".txt")) << line << "\n";
  return o.pass ? 0 : 1;
}
