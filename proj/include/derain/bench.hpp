#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "derain/net.hpp"
#include "derain/pfilt.hpp"

namespace derain {

std::string to_string(MultiScaleStrategy s);
/// "ws" or "mh".
MultiScaleStrategy strategy_from_string(const std::string& s);

/// Multi-head multi-scale filtering: one predictor trunk, then a separate
/// 1x1 head per scale emitting a full (2s+1)x(2s+1) kernel per pixel and
/// channel, each applied undilated, outputs fused by a 3x3 conv.
class MultiHeadFilter {
 public:
  MultiHeadFilter(const NetConfig& cfg, int scales, std::uint64_t seed);

  struct Timing {
    double filter_ms = 0;
    std::uint64_t kernel_bytes = 0;
  };

  Tensor<float> run(const Tensor<float>& image, MacCounter* counter = nullptr,
                    Timing* timing = nullptr);
  PredictiveNet<float>& net() { return net_; }

 private:
  PredictiveNet<float> net_;
  std::vector<Tensor<float>> head_weights_;
  std::vector<Tensor<float>> head_biases_;
  Fusion<float> fusion_;
};

struct BenchConfig {
  std::vector<int> sizes{256};
  std::vector<int> scales{1, 2, 3, 4};
  std::vector<MultiScaleStrategy> strategies{MultiScaleStrategy::kWeightSharing,
                                             MultiScaleStrategy::kMultiHead};
  int warmup = 5;
  int runs = 20;
  NetConfig net = NetConfig::tiny();
  std::uint64_t seed = 0;
};

struct BenchRow {
  MultiScaleStrategy strategy = MultiScaleStrategy::kWeightSharing;
  int scales = 1;
  int height = 0;
  int width = 0;
  std::uint64_t analytic_macs = 0;
  std::uint64_t counted_macs = 0;
  /// Medians over the timed runs: whole forward pass, and the filtering
  /// part of it.
  double total_ms = 0;
  double filter_ms = 0;
  /// Bytes of predicted kernel weights alive at once.
  std::uint64_t kernel_bytes = 0;

  bool macs_match() const { return analytic_macs == counted_macs; }
  /// strategy= S= H= W= macs= counted= total_ms= filter_ms= kernel_bytes=
  std::string record() const;
};

struct BenchReport {
  std::vector<BenchRow> rows;

  const BenchRow* find(MultiScaleStrategy s, int scales, int size) const;
  /// Weight-sharing total time at the largest measured S over S = 1, at
  /// `size`; empty when either row is missing.
  std::optional<double> ws_time_ratio(int size) const;
  bool all_macs_match() const;
  std::string table() const;
  std::string records() const;
};

BenchReport run_bench(const BenchConfig& cfg);

}  // namespace derain
