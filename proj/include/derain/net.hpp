#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "derain/ops.hpp"
#include "derain/pfilt.hpp"
#include "derain/tensor.hpp"

namespace derain {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// UNet kernel predictor: 8 conv blocks plus a 1x1 head emitting 27
/// channels (3 color channels x 3x3 taps). Blocks hold 1, 2 or 3 conv+BN+ReLU
/// layers for the 17-, 33- and 49-layer variants.
struct NetConfig {
  int convs_per_block = 1;
  double width_scale = 1.0;
  int in_channels = 3;

  static constexpr int kImageChannels = 3;
  static constexpr int kKernelSize = 3;
  static constexpr int kOutChannels = kImageChannels * kKernelSize * kKernelSize;
  /// Input height and width must be multiples of this (four 2x poolings).
  static constexpr int kSpatialMultiple = 16;

  /// 49, 33 or 17 layers.
  static NetConfig with_layers(int layers, double width_scale = 1.0, int in_channels = 3);
  /// 17-layer structure at 1/8 width.
  static NetConfig tiny(int in_channels = 3);

  int layers() const { return 16 * convs_per_block + 1; }
  /// Output widths of blocks 1..8. Block 8 always emits 27 channels.
  std::array<int, 8> block_widths() const;
  void validate() const;
  std::string str() const;
  bool operator==(const NetConfig&) const = default;
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;
template <typename T>
using NamedBuffers = std::vector<std::pair<std::string, std::vector<T>*>>;

template <typename T>
class PredictiveNet {
 public:
  PredictiveNet() = default;
  PredictiveNet(const NetConfig& cfg, std::uint64_t seed);

  /// Raw head output of shape (N, 27, H, W).
  Tensor<T> forward(const Tensor<T>& input);
  KernelField<T> predict_kernels(const Tensor<T>& input);
  /// Upsampled [x8, x2] features that feed the head.
  Tensor<T> features(const Tensor<T>& input);

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  const NetConfig& config() const { return cfg_; }

  NamedTensors<T> parameters(const std::string& prefix = "") const;
  NamedBuffers<T> buffers(const std::string& prefix = "");
  std::size_t parameter_count() const;

  /// Zeroes the head weights and sets its bias to per-channel center
  /// deltas, so every pixel gets the identity kernel whatever the input.
  void force_identity_kernels();

 private:
  struct ConvBn {
    Tensor<T> weight;
    Tensor<T> gamma;
    Tensor<T> beta;
    BatchNormStats<T> stats;
  };
  using Block = std::vector<ConvBn>;

  Tensor<T> run_block(Block& block, Tensor<T> x);
  void check_input(const Tensor<T>& input) const;

  NetConfig cfg_;
  std::array<Block, 8> blocks_;
  Tensor<T> head_weight_;
  Tensor<T> head_bias_;
  bool training_ = true;
};

enum class CascadeMode { kNone, kNaive, kUncertainty };

std::string to_string(CascadeMode mode);
CascadeMode cascade_mode_from_string(const std::string& s);

/// One predictive filtering stage: a kernel predictor plus, for S > 1,
/// the weight-sharing dilated filters at s = 1..S and their 3x3 fusion.
template <typename T>
class FilterStage {
 public:
  FilterStage() = default;
  FilterStage(const NetConfig& cfg, int scales, std::uint64_t seed);

  struct Output {
    Tensor<T> image;
    KernelField<T> kernels;
  };

  /// Predicts kernels from `net_input` and filters `image` with them.
  Output run(const Tensor<T>& image, const Tensor<T>& net_input, MacCounter* counter = nullptr);

  PredictiveNet<T>& net() { return net_; }
  const PredictiveNet<T>& net() const { return net_; }
  int scales() const { return scales_; }

  NamedTensors<T> parameters(const std::string& prefix) const;
  NamedBuffers<T> buffers(const std::string& prefix) { return net_.buffers(prefix + "net."); }

 private:
  PredictiveNet<T> net_;
  int scales_ = 1;
  std::optional<Fusion<T>> fusion_;
};

struct ModelConfig {
  NetConfig phi1 = NetConfig::tiny();
  NetConfig phi2 = NetConfig::tiny(4);
  int scales = 4;
  CascadeMode cascade = CascadeMode::kUncertainty;

  /// 49-layer phi1, 17-layer phi2, S = 4, uncertainty cascade.
  static ModelConfig final_design(double width_scale);
  /// phi2's input channels follow from the cascade mode.
  void normalize();
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct CascadeOutput {
  Tensor<T> fused;
  Tensor<T> first;
  Tensor<T> second;
  Tensor<T> uncertainty;
};

/// phi1 -> filter -> (uncertainty map) -> phi2 -> filter -> fusion.
template <typename T>
class CascadeModel {
 public:
  CascadeModel() = default;
  CascadeModel(ModelConfig cfg, std::uint64_t seed);

  CascadeOutput<T> forward(const Tensor<T>& rainy, MacCounter* counter = nullptr);

  const ModelConfig& config() const { return cfg_; }
  FilterStage<T>& phi1() { return phi1_; }
  FilterStage<T>& phi2() { return *phi2_; }
  bool cascaded() const { return cfg_.cascade != CascadeMode::kNone; }
  void set_training(bool on);

  NamedTensors<T> parameters() const;
  NamedTensors<T> stage1_parameters() const { return phi1_.parameters("phi1."); }
  NamedBuffers<T> buffers();

 private:
  ModelConfig cfg_;
  FilterStage<T> phi1_;
  std::optional<FilterStage<T>> phi2_;
  std::optional<Fusion<T>> fusion_;
};

/// Single-stage predictive filtering: Î = filter(I, phi(I)).
template <typename T>
Tensor<T> spfilt_forward(FilterStage<T>& stage, const Tensor<T>& rainy);

/// Returns (Î, Î1, Î2, M) of the cascade.
template <typename T>
CascadeOutput<T> ucpfilt_forward(CascadeModel<T>& model, const Tensor<T>& rainy);

}  // namespace derain
