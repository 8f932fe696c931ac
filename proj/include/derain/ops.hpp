#pragma once

#include <vector>

#include "derain/tensor.hpp"

namespace derain {

/// Cross-correlation with zero padding. weight is (out, in, kh, kw); bias,
/// when defined, is (1, out, 1, 1).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride = 1, int padding = 0);

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Running statistics for batch_norm in inference mode.
template <typename T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;

  explicit BatchNormStats(int channels = 0)
      : mean(channels, T(0)), var(channels, T(1)) {}
};

/// Per-channel normalization. In training mode batch statistics are used
/// and `stats` is updated with momentum 0.1 (unbiased variance); otherwise
/// the running statistics are used unchanged.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormStats<T>& stats,
                     bool training);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// 2x2 mean pooling with stride 2. H and W must be even.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x);

/// Bilinear 2x upsampling, half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> bilinear_upsample2(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Sum of all elements as a 1x1x1x1 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// mean(|a - b|) as a 1x1x1x1 tensor. The subgradient at a == b is 0.
template <typename T>
Tensor<T> mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace derain
