#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "derain/bench.hpp"
#include "derain/checkpoint.hpp"
#include "derain/image_io.hpp"
#include "derain/losses.hpp"
#include "derain/rainmix.hpp"
#include "derain/train.hpp"

namespace derain::cli {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

/// Input problems that are not the user's command line.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("failed writing " + path.string());
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  bool ablation = false;
  int print_every = 100;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const TrainConfig cfg = TrainConfig::load(a.config);
  if (cfg.out_dir.empty()) throw ConfigParseError(a.config, 0, "out_dir is required for training");
  tune_allocator();
  const PairedDataset data = prepare_dataset(cfg);
  fs::create_directories(cfg.out_dir);

  if (a.ablation) {
    const auto results = run_ablation(cfg, data, [&](const std::string& line) { out << line << "\n"; });
    out << "wrote " << results.size() << " runs and " << (cfg.out_dir / "ablation.txt").string() << "\n";
    return kOk;
  }

  write_file(cfg.out_dir / "config.txt", cfg.to_text());
  Trainer trainer(cfg, data);
  std::ofstream losses(cfg.out_dir / "loss.txt", std::ios::trunc);
  if (!losses) throw DataError("cannot write " + (cfg.out_dir / "loss.txt").string());
  trainer.run([&](const LossRecord& r) {
    losses << r.str() << "\n";
    if (a.print_every > 0 && r.step % a.print_every == 0) out << r.str() << "\n" << std::flush;
  });
  trainer.save(cfg.out_dir / "checkpoint");
  const HeldOutMetrics m = trainer.evaluate_heldout();
  std::ostringstream metrics;
  metrics << "count=" << m.count << " psnr_input=" << fixed(m.psnr_input, 4)
          << " psnr=" << fixed(m.psnr_output, 4) << " ssim=" << fixed(m.ssim_output, 5)
          << " psnr_first=" << fixed(m.psnr_first, 4) << "\n";
  write_file(cfg.out_dir / "metrics.txt", metrics.str());
  out << metrics.str();
  return kOk;
}

// ---------------------------------------------------------------- derain

struct DerainArgs {
  std::string model;
  std::string input;
  std::string output;
  std::string gt;
  bool frames = false;
};

int cmd_derain(const DerainArgs& a, std::ostream& out, std::ostream& err) {
  CascadeModel<float> model = load_checkpoint(a.model);
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    inputs = png_files(a.input);
  } else if (fs::exists(a.input)) {
    inputs.push_back(a.input);
  } else {
    throw DataError("input " + a.input + " does not exist");
  }
  if (inputs.empty()) throw DataError("no PNG files in " + a.input);
  fs::create_directories(a.output);

  std::ostringstream records;
  int ok = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const fs::path& in = inputs[i];
    Tensor<float> image;
    try {
      image = read_png(in);
    } catch (const ImageError& e) {
      err << "skipping " << in.string() << ": " << e.what() << "\n";
      continue;
    }
    const auto t0 = Clock::now();
    const CascadeOutput<float> result = run_padded(model, image);
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    write_png(fs::path(a.output) / in.filename(), result.fused);

    std::string psnr_text, ssim_text;
    if (!a.gt.empty()) {
      const fs::path gt_path = fs::path(a.gt) / in.filename();
      if (!fs::exists(gt_path)) throw DataError("missing ground truth " + gt_path.string());
      const Tensor<float> gt = read_png(gt_path);
      // Score what was written: the 8-bit output.
      const Tensor<float> written = read_png(fs::path(a.output) / in.filename());
      psnr_text = fixed(psnr(written, gt), 4);
      ssim_text = fixed(ssim_index(written, gt), 6);
    }
    std::ostringstream row;
    row << "name=" << in.filename().string();
    if (a.frames) row << " frame=" << i;
    row << " psnr=" << psnr_text << " ssim=" << ssim_text << " ms=" << fixed(ms, 3);
    records << row.str() << "\n";
    out << row.str() << "\n";
    ++ok;
  }
  write_file(fs::path(a.output) / "records.txt", records.str());
  if (ok == 0) {
    err << "no input could be decoded\n";
    return kData;
  }
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string records;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto preds = png_files(a.pred);
  const auto gts = png_files(a.gt);
  for (const auto& g : gts) {
    if (!fs::exists(fs::path(a.pred) / g.filename())) {
      throw DataError("missing prediction for " + g.filename().string() + " in " + a.pred);
    }
  }
  if (preds.empty()) throw DataError("no PNG files in " + a.pred);
  std::ostringstream rec;
  double sum_psnr = 0, sum_ssim = 0;
  for (const auto& p : preds) {
    const fs::path g = fs::path(a.gt) / p.filename();
    if (!fs::exists(g)) throw DataError("missing ground truth for " + p.filename().string() + " in " + a.gt);
    const Tensor<float> pred = read_png(p);
    const Tensor<float> gt = read_png(g);
    if (pred.shape() != gt.shape()) {
      throw DataError(p.filename().string() + ": prediction " + pred.shape().str() +
                      " vs ground truth " + gt.shape().str());
    }
    const double ps = psnr(pred, gt);
    const double ss = ssim_index(pred, gt);
    sum_psnr += ps;
    sum_ssim += ss;
    rec << "name=" << p.filename().string() << " psnr=" << fixed(ps, 6) << " ssim=" << fixed(ss, 8) << "\n";
  }
  const double n = static_cast<double>(preds.size());
  rec << "name=mean count=" << preds.size() << " psnr=" << fixed(sum_psnr / n, 6)
      << " ssim=" << fixed(sum_ssim / n, 8) << "\n";
  out << rec.str();
  if (!a.records.empty()) write_file(a.records, rec.str());
  return kOk;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::vector<int> sizes{256};
  std::vector<int> scales{1, 2, 3, 4};
  std::vector<std::string> strategies{"ws", "mh"};
  int runs = 20;
  int warmup = 5;
  std::string records;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  BenchConfig cfg;
  cfg.sizes = a.sizes;
  cfg.scales = a.scales;
  cfg.strategies.clear();
  for (const auto& s : a.strategies) cfg.strategies.push_back(strategy_from_string(s));
  for (int s : cfg.scales) {
    if (s < 1 || s > 4) throw ParameterError("scales must be in 1..4, got " + std::to_string(s));
  }
  cfg.runs = a.runs;
  cfg.warmup = a.warmup;
  const BenchReport report = run_bench(cfg);
  out << report.table() << report.records();
  if (!a.records.empty()) write_file(a.records, report.records());
  return report.all_macs_match() ? kOk : kNumeric;
}

// ---------------------------------------------------------------- augment-preview

struct PreviewArgs {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

Tensor<float> gray_to_rgb(const Tensor<float>& x) {
  if (x.shape().c == 3) return x;
  const Shape s = x.shape();
  Tensor<float> out(Shape{1, 3, s.h, s.w});
  for (int c = 0; c < 3; ++c) {
    std::copy(x.data().begin(), x.data().begin() + static_cast<std::ptrdiff_t>(s.plane()),
              out.mutable_data().begin() + static_cast<std::ptrdiff_t>(c * s.plane()));
  }
  return out;
}

/// Rows of equally sized RGB tiles on a mid-gray canvas, 2 px apart.
Tensor<float> contact_sheet(const std::vector<std::vector<Tensor<float>>>& rows) {
  const int gap = 2;
  const int th = rows.front().front().shape().h;
  const int tw = rows.front().front().shape().w;
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  const int h = static_cast<int>(rows.size()) * (th + gap) + gap;
  const int w = static_cast<int>(cols) * (tw + gap) + gap;
  Tensor<float> sheet(Shape{1, 3, h, w}, 0.5f);
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    for (std::size_t ci = 0; ci < rows[ri].size(); ++ci) {
      const Tensor<float> tile = gray_to_rgb(rows[ri][ci]);
      const int y0 = gap + static_cast<int>(ri) * (th + gap);
      const int x0 = gap + static_cast<int>(ci) * (tw + gap);
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < th; ++y) {
          for (int x = 0; x < tw; ++x) sheet.at(0, c, y0 + y, x0 + x) = tile.at(0, c, y, x);
        }
      }
    }
  }
  return sheet;
}

std::string describe(const RainMixDraw& d) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "weights =";
  for (double w : d.weights) os << " " << w;
  os << "\nblend = " << d.blend << "\n";
  for (std::size_t i = 0; i < d.paths.size(); ++i) {
    os << "path." << i << " = depth " << d.paths[i].depth << ":";
    for (const OpDraw& op : d.paths[i].ops) os << " " << to_string(op.op) << "(" << op.magnitude << ")";
    os << "\n";
  }
  return os.str();
}

/// Path outputs, their Dirichlet mixture and the final blend.
std::vector<Tensor<float>> preview_row(const Tensor<float>& x, const RainMixDraw& d) {
  std::vector<Tensor<float>> row{x};
  Tensor<float> mix(x.shape());
  for (std::size_t i = 0; i < d.paths.size(); ++i) {
    const Tensor<float> p = apply_path(x, d.paths[i]);
    row.push_back(p);
    auto m = mix.mutable_data();
    for (std::size_t k = 0; k < m.size(); ++k) m[k] += static_cast<float>(d.weights[i]) * p.data()[k];
  }
  for (float& v : mix.mutable_data()) v = std::clamp(v, 0.0f, 1.0f);
  row.push_back(mix);
  row.push_back(apply_rainmix(x, d));
  return row;
}

int cmd_augment_preview(const PreviewArgs& a, std::ostream& out) {
  const TrainConfig cfg = TrainConfig::load(a.config);
  PairedSample sample;
  if (!cfg.data_dir.empty()) {
    const PairedDataset data = prepare_dataset(cfg);
    sample = data.train[a.seed % data.train.size()];
  } else {
    ToyDatasetSpec spec = cfg.toy.value_or(ToyDatasetSpec{});
    sample = make_toy_sample(spec, static_cast<int>(a.seed % static_cast<std::uint64_t>(spec.count)));
  }
  const Tensor<float> rain = subtract_rain_layer(sample.rainy, sample.clean);

  CountingRng rng(a.seed);
  const RainMixDraw rain_draw = sample_rainmix_draw(cfg.augment, rng);
  const RainMixDraw bg_draw = sample_rainmix_draw(cfg.augment, rng);
  const auto rain_row = preview_row(rain, rain_draw);
  const auto bg_row = preview_row(sample.clean, bg_draw);
  const Tensor<float> composed = compose_rainy(bg_row.back(), rain_row.back());

  const fs::path dir = a.out;
  fs::create_directories(dir);
  auto save_row = [&](const std::string& tag, const std::vector<Tensor<float>>& row) {
    write_png(dir / (tag + "_original.png"), row.front());
    for (std::size_t i = 1; i + 2 < row.size(); ++i) {
      write_png(dir / (tag + "_path" + std::to_string(i - 1) + ".png"), row[i]);
    }
    write_png(dir / (tag + "_mix.png"), row[row.size() - 2]);
    write_png(dir / (tag + "_blend.png"), row.back());
  };
  save_row("rain", rain_row);
  save_row("background", bg_row);
  write_png(dir / "composed.png", composed);
  write_png(dir / "sheet.png", contact_sheet({bg_row, rain_row, {composed}}));

  std::ostringstream manifest;
  manifest << "# rows: background, rain layer, composed rainy image\n";
  manifest << "# columns: original, one per path, mixture, blend\n";
  manifest << "seed = " << a.seed << "\nsample = " << sample.name << "\n";
  manifest << "[rain]\n" << describe(rain_draw) << "[background]\n" << describe(bg_draw);
  write_file(dir / "manifest.txt", manifest.str());
  out << "wrote " << (dir / "sheet.png").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- models and data

struct IdentityArgs {
  std::string out;
  int phi1_layers = 17;
  int phi2_layers = 17;
  double width = 0.125;
  int scales = 4;
  std::string cascade = "uncertainty";
};

int cmd_make_identity_model(const IdentityArgs& a, std::ostream& out) {
  ModelConfig cfg;
  try {
    cfg.phi1 = NetConfig::with_layers(a.phi1_layers, a.width, 3);
    cfg.phi2 = NetConfig::with_layers(a.phi2_layers, a.width, 3);
    cfg.scales = a.scales;
    cfg.cascade = cascade_mode_from_string(a.cascade);
    cfg.normalize();
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ParameterError(e.what());
  }
  CascadeModel<float> model(cfg, 0);
  model.phi1().net().force_identity_kernels();
  if (model.cascaded()) model.phi2().net().force_identity_kernels();
  save_checkpoint(model, CheckpointMeta{cfg, 0, 0, 1}, a.out);
  out << "wrote identity-kernel model to " << a.out << "\n";
  return kOk;
}

struct ToyArgs {
  std::string out;
  ToyDatasetSpec spec;
};

int cmd_make_toy(const ToyArgs& a, std::ostream& out) {
  make_toy_dataset(a.spec, a.out);
  const PairedDataset data = load_dataset(a.out);
  double sum = 0;
  int n = 0;
  for (const auto* split : {&data.train, &data.val}) {
    for (const PairedSample& s : *split) {
      sum += psnr(s.rainy, s.clean);
      ++n;
    }
  }
  out << "wrote " << n << " pairs to " << a.out << " (mean rainy PSNR " << fixed(sum / n, 3) << " dB)\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Predictive-filtering rain removal: train, derain, evaluate, benchmark."};
  app.require_subcommand(1);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a model from a config file");
  c_train->add_option("--config", train.config, "Config file")->required();
  c_train->add_flag("--ablation", train.ablation, "Run all 8 component on/off variants");
  c_train->add_option("--print-every", train.print_every, "Echo every n-th loss record (0: none)");

  DerainArgs derain;
  auto* c_derain = app.add_subcommand("derain", "Derain a PNG file or a directory of PNGs");
  c_derain->add_option("--model", derain.model, "Checkpoint directory")->required();
  c_derain->add_option("--input", derain.input, "PNG file or directory")->required();
  c_derain->add_option("--output", derain.output, "Output directory")->required();
  c_derain->add_option("--gt", derain.gt, "Directory of clean images with matching names");
  c_derain->add_flag("--frames", derain.frames, "Treat the inputs as an ordered frame sequence");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "PSNR and SSIM of predictions against ground truth");
  c_eval->add_option("--pred", eval.pred, "Directory of predictions")->required();
  c_eval->add_option("--gt", eval.gt, "Directory of ground truth")->required();
  c_eval->add_option("--records", eval.records, "Also write the records to this file");

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "Time weight-sharing vs multi-head multi-scale filtering");
  c_bench->add_option("--sizes", bench.sizes, "Square image sides")->delimiter(',');
  c_bench->add_option("--scales", bench.scales, "Scale counts S")->delimiter(',');
  c_bench->add_option("--strategies", bench.strategies, "ws, mh")->delimiter(',');
  c_bench->add_option("--runs", bench.runs, "Timed runs per row")->check(CLI::PositiveNumber);
  c_bench->add_option("--warmup", bench.warmup, "Untimed runs per row")->check(CLI::NonNegativeNumber);
  c_bench->add_option("--records", bench.records, "Also write the records to this file");

  PreviewArgs preview;
  auto* c_preview = app.add_subcommand("augment-preview", "Write a RainMix contact sheet");
  c_preview->add_option("--config", preview.config, "Config file (rainmix.* keys)")->required();
  c_preview->add_option("--seed", preview.seed, "Sampling seed");
  c_preview->add_option("--out", preview.out, "Output directory")->required();

  IdentityArgs identity;
  auto* c_identity =
      app.add_subcommand("make-identity-model", "Write a checkpoint whose kernels are all center deltas");
  c_identity->add_option("--out", identity.out, "Checkpoint directory")->required();
  c_identity->add_option("--phi1-layers", identity.phi1_layers, "49, 33 or 17");
  c_identity->add_option("--phi2-layers", identity.phi2_layers, "49, 33 or 17");
  c_identity->add_option("--width", identity.width, "Width scale");
  c_identity->add_option("--scales", identity.scales, "Scale count S");
  c_identity->add_option("--cascade", identity.cascade, "none, naive or uncertainty");

  ToyArgs toy;
  auto* c_toy = app.add_subcommand("make-toy-dataset", "Generate the procedural paired dataset");
  c_toy->add_option("--out", toy.out, "Output directory")->required();
  c_toy->add_option("--count", toy.spec.count, "Number of pairs");
  c_toy->add_option("--size", toy.spec.size, "Image side");
  c_toy->add_option("--seed", toy.spec.seed, "Seed");
  c_toy->add_option("--val-fraction", toy.spec.val_fraction, "Held-out fraction");

  std::vector<std::string> rest(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_train->parsed()) return cmd_train(train, out);
    if (c_derain->parsed()) return cmd_derain(derain, out, err);
    if (c_eval->parsed()) return cmd_eval(eval, out);
    if (c_bench->parsed()) return cmd_bench(bench, out);
    if (c_preview->parsed()) return cmd_augment_preview(preview, out);
    if (c_identity->parsed()) return cmd_make_identity_model(identity, out);
    if (c_toy->parsed()) return cmd_make_toy(toy, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigParseError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    // ParameterError, ConfigError and ShapeError all derive from this.
    err << "invalid argument: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace derain::cli
