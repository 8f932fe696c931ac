#include "derain/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "derain/rng.hpp"

namespace derain {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

Tensor<float> bench_image(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> x(Shape{1, NetConfig::kImageChannels, size, size});
  for (float& v : x.mutable_data()) v = u(rng);
  return x;
}

}  // namespace

std::string to_string(MultiScaleStrategy s) {
  return s == MultiScaleStrategy::kWeightSharing ? "ws" : "mh";
}

MultiScaleStrategy strategy_from_string(const std::string& s) {
  if (s == "ws") return MultiScaleStrategy::kWeightSharing;
  if (s == "mh") return MultiScaleStrategy::kMultiHead;
  throw ParameterError("unknown strategy '" + s + "' (expected ws or mh)");
}

MultiHeadFilter::MultiHeadFilter(const NetConfig& cfg, int scales, std::uint64_t seed)
    : net_(cfg, seed), fusion_(scales, NetConfig::kImageChannels) {
  if (scales < 1) throw ParameterError("scales must be >= 1");
  const auto widths = cfg.block_widths();
  const int feat = widths[7] + widths[1];
  std::mt19937_64 rng(split_seed(seed, 7));
  const float bound = std::sqrt(6.0f / static_cast<float>(feat));
  std::uniform_real_distribution<float> u(-bound, bound);
  for (int s = 1; s <= scales; ++s) {
    const int k = 2 * s + 1;
    const int out = NetConfig::kImageChannels * k * k;
    Tensor<float> w(Shape{out, feat, 1, 1});
    for (float& v : w.mutable_data()) v = u(rng);
    head_weights_.push_back(w);
    head_biases_.emplace_back(Shape{1, out, 1, 1});
  }
}

Tensor<float> MultiHeadFilter::run(const Tensor<float>& image, MacCounter* counter,
                                   Timing* timing) {
  const Tensor<float> feats = net_.features(image);
  std::vector<KernelField<float>> fields;
  std::uint64_t bytes = 0;
  for (std::size_t i = 0; i < head_weights_.size(); ++i) {
    const int k = 2 * static_cast<int>(i) + 3;
    fields.emplace_back(conv2d(feats, head_weights_[i], head_biases_[i], 1, 0),
                        NetConfig::kImageChannels, k);
    bytes += fields.back().weights.numel() * sizeof(float);
  }
  const auto t0 = Clock::now();
  std::vector<Tensor<float>> per_scale;
  for (const auto& f : fields) per_scale.push_back(apply_spfilt(image, f, counter));
  if (timing != nullptr) {
    timing->filter_ms = ms_since(t0);
    timing->kernel_bytes = bytes;
  }
  return per_scale.size() == 1 ? per_scale.front() : fusion_(per_scale);
}

std::string BenchRow::record() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << "strategy=" << to_string(strategy) << " S=" << scales
     << " H=" << height << " W=" << width << " macs=" << analytic_macs
     << " counted=" << counted_macs << " total_ms=" << total_ms << " filter_ms=" << filter_ms
     << " kernel_bytes=" << kernel_bytes;
  return os.str();
}

const BenchRow* BenchReport::find(MultiScaleStrategy s, int scales, int size) const {
  for (const BenchRow& r : rows) {
    if (r.strategy == s && r.scales == scales && r.height == size && r.width == size) return &r;
  }
  return nullptr;
}

std::optional<double> BenchReport::ws_time_ratio(int size) const {
  const BenchRow* one = find(MultiScaleStrategy::kWeightSharing, 1, size);
  const BenchRow* top = nullptr;
  for (const BenchRow& r : rows) {
    if (r.strategy == MultiScaleStrategy::kWeightSharing && r.height == size &&
        (top == nullptr || r.scales > top->scales)) {
      top = &r;
    }
  }
  if (one == nullptr || top == nullptr || top->scales == 1) return std::nullopt;
  return top->total_ms / one->total_ms;
}

bool BenchReport::all_macs_match() const {
  return std::all_of(rows.begin(), rows.end(), [](const BenchRow& r) { return r.macs_match(); });
}

std::string BenchReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(9) << "strategy" << std::setw(3) << "S" << std::setw(11) << "size"
     << std::right << std::setw(12) << "MACs" << std::setw(12) << "counted" << std::setw(11)
     << "total ms" << std::setw(11) << "filter ms" << std::setw(14) << "kernel bytes"
     << "\n";
  os << std::fixed << std::setprecision(2);
  for (const BenchRow& r : rows) {
    os << std::left << std::setw(9) << to_string(r.strategy) << std::setw(3) << r.scales
       << std::setw(11) << (std::to_string(r.height) + "x" + std::to_string(r.width)) << std::right
       << std::setw(12) << r.analytic_macs << std::setw(12) << r.counted_macs << std::setw(11)
       << r.total_ms << std::setw(11) << r.filter_ms << std::setw(14) << r.kernel_bytes << "\n";
  }
  std::vector<int> sizes;
  for (const BenchRow& r : rows) {
    if (std::find(sizes.begin(), sizes.end(), r.height) == sizes.end()) sizes.push_back(r.height);
  }
  for (int size : sizes) {
    if (auto ratio = ws_time_ratio(size)) {
      os << "ws time ratio at " << size << ": " << std::setprecision(3) << *ratio
         << (*ratio <= 1.5 ? " (within 1.5x of S=1)" : " (exceeds 1.5x of S=1)") << "\n";
    }
  }
  os << "MAC counters " << (all_macs_match() ? "match" : "DO NOT match") << " the analytic counts\n";
  return os.str();
}

std::string BenchReport::records() const {
  std::string out;
  for (const BenchRow& r : rows) out += r.record() + "\n";
  return out;
}

BenchReport run_bench(const BenchConfig& cfg) {
  if (cfg.runs < 1 || cfg.warmup < 0) throw ParameterError("bench needs runs >= 1 and warmup >= 0");
  NoGradScope<float> no_grad;
  BenchReport report;
  for (int size : cfg.sizes) {
    if (size < NetConfig::kSpatialMultiple || size % NetConfig::kSpatialMultiple != 0) {
      throw ParameterError("bench size " + std::to_string(size) + " is not a positive multiple of " +
                           std::to_string(NetConfig::kSpatialMultiple));
    }
    const Tensor<float> image = bench_image(size, cfg.seed);
    for (MultiScaleStrategy strategy : cfg.strategies) {
      for (int scales : cfg.scales) {
        BenchRow row;
        row.strategy = strategy;
        row.scales = scales;
        row.height = row.width = size;
        row.analytic_macs = flop_count(size, size, NetConfig::kImageChannels,
                                       NetConfig::kKernelSize, scales, strategy);
        std::vector<double> totals, filters;
        if (strategy == MultiScaleStrategy::kWeightSharing) {
          FilterStage<float> stage(cfg.net, scales, cfg.seed);
          stage.net().set_training(false);
          for (int i = 0; i < cfg.warmup + cfg.runs; ++i) {
            MacCounter counter;
            const auto t0 = Clock::now();
            const auto out = stage.run(image, image, &counter);
            const double total = ms_since(t0);
            // Filtering alone, on the kernels this run predicted.
            const auto t1 = Clock::now();
            for (int s = 1; s <= scales; ++s) apply_dilated_filter(image, out.kernels, s);
            const double filter = ms_since(t1);
            if (i == 0) {
              row.counted_macs = counter.macs;
              row.kernel_bytes = out.kernels.weights.numel() * sizeof(float);
            }
            if (i >= cfg.warmup) {
              totals.push_back(total);
              filters.push_back(filter);
            }
          }
        } else {
          MultiHeadFilter mh(cfg.net, scales, cfg.seed);
          mh.net().set_training(false);
          for (int i = 0; i < cfg.warmup + cfg.runs; ++i) {
            MacCounter counter;
            MultiHeadFilter::Timing timing;
            const auto t0 = Clock::now();
            mh.run(image, &counter, &timing);
            const double total = ms_since(t0);
            if (i == 0) {
              row.counted_macs = counter.macs;
              row.kernel_bytes = timing.kernel_bytes;
            }
            if (i >= cfg.warmup) {
              totals.push_back(total);
              filters.push_back(timing.filter_ms);
            }
          }
        }
        row.total_ms = median(totals);
        row.filter_ms = median(filters);
        report.rows.push_back(row);
      }
    }
  }
  return report;
}

}  // namespace derain
