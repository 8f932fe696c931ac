#pragma once

#include "derain/tensor.hpp"

namespace derain {

struct LossConfig {
  double lambda = 0.2;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

inline constexpr double kPsnrCapDb = 100.0;

/// Mean SSIM over all pixels and channels, differentiable in both inputs.
/// Local statistics use a normalized Gaussian window with zero padding, so
/// the map has the input's spatial size.
template <typename T>
Tensor<T> ssim_mean(const Tensor<T>& a, const Tensor<T>& b, const LossConfig& cfg = {});

/// mean|pred - target| - lambda * SSIM(pred, target), averaged over the batch.
template <typename T>
Tensor<T> l1_ssim_loss(const Tensor<T>& pred, const Tensor<T>& target,
                       const LossConfig& cfg = {});

/// Sum of l1_ssim_loss over the fused, first-stage and second-stage outputs.
template <typename T>
Tensor<T> uc_loss(const Tensor<T>& fused, const Tensor<T>& first, const Tensor<T>& second,
                  const Tensor<T>& target, const LossConfig& cfg = {});

/// PSNR in dB with peak 1 after clamping both inputs to [0, 1]. Capped at
/// 100 dB when MSE < 1e-10.
template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target);

/// Mean SSIM index of the clamped inputs, per channel then averaged.
template <typename T>
double ssim_index(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg = {});

}  // namespace derain
