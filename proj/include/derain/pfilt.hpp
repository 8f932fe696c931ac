#pragma once

#include <cstdint>
#include <vector>

#include "derain/tensor.hpp"

namespace derain {

/// Per-pixel, per-channel filter bank of shape (batch, C*K*K, H, W).
///
/// Channel index c*K*K + t holds tap t = (dy + r) * K + (dx + r) of the
/// kernel applied to image channel c, with r = (K - 1) / 2. Weights are
/// unconstrained: no normalization, any sign.
template <typename T>
struct KernelField {
  Tensor<T> weights;
  int channels = 3;
  int kernel_size = 3;

  KernelField() = default;
  KernelField(Tensor<T> w, int channels, int kernel_size);

  int taps() const { return kernel_size * kernel_size; }
  int radius() const { return (kernel_size - 1) / 2; }
};

/// Counts multiply-accumulates actually executed by the filtering kernels.
struct MacCounter {
  std::uint64_t macs = 0;
};

/// Spatially-variant filtering: out[c,p] = sum_t K_p[c,t] * I[c, p + t],
/// each channel independently, replicate border.
template <typename T>
Tensor<T> apply_spfilt(const Tensor<T>& image, const KernelField<T>& kernels,
                       MacCounter* counter = nullptr);

/// Dilated variant: out[c,p] = sum_t K_p[c,t] * I[c, p + s*t]. Costs
/// K*K*H*W*C MACs per call for every s; s = 1 is apply_spfilt.
template <typename T>
Tensor<T> apply_dilated_filter(const Tensor<T>& image, const KernelField<T>& kernels,
                               int s, MacCounter* counter = nullptr);

/// Explicit dilated kernels of side s*(K-1)+1: original weights at offsets
/// s*t, zeros elsewhere. Reference path only.
template <typename T>
KernelField<T> materialize_dilated_kernels(const KernelField<T>& kernels, int s);

/// Per-pixel mean of all C*K*K weights, shape (batch, 1, H, W).
template <typename T>
Tensor<T> uncertainty_map(const KernelField<T>& kernels);

/// Learnable 3x3 convolution over the channel concatenation of `inputs`
/// images of `channels` channels each, producing `channels` channels.
/// Initialized to average its inputs.
template <typename T>
class Fusion {
 public:
  Fusion() = default;
  Fusion(int inputs, int channels);

  Tensor<T> operator()(const std::vector<Tensor<T>>& images) const;

  int inputs() const { return inputs_; }
  int channels() const { return channels_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  int inputs_ = 0;
  int channels_ = 0;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

enum class MultiScaleStrategy { kWeightSharing, kMultiHead };

/// Analytic multiply-accumulate count of S-scale filtering.
/// Weight sharing: S*K*K*H*W*C. Multi-head: C*H*W*sum_{s=1..S} (2s+1)^2.
std::uint64_t flop_count(std::uint64_t h, std::uint64_t w, std::uint64_t c,
                         std::uint64_t k, std::uint64_t scales,
                         MultiScaleStrategy strategy);

}  // namespace derain
