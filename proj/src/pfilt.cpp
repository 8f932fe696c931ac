#include "derain/pfilt.hpp"

#include <algorithm>

#include "derain/ops.hpp"

namespace derain {

template <typename T>
KernelField<T>::KernelField(Tensor<T> w, int channels_, int kernel_size_)
    : weights(std::move(w)), channels(channels_), kernel_size(kernel_size_) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ParameterError("kernel size must be odd, got " + std::to_string(kernel_size));
  }
  if (channels < 1) throw ParameterError("kernel field needs >= 1 channel");
  if (weights.shape().c != channels * kernel_size * kernel_size) {
    throw ShapeError("kernel field " + weights.shape().str() + " does not hold " +
                     std::to_string(channels) + " channels of " + std::to_string(kernel_size) +
                     "x" + std::to_string(kernel_size) + " kernels");
  }
}

namespace {

template <typename T>
void check_filter_shapes(const Tensor<T>& image, const KernelField<T>& k, const char* op) {
  const Shape is = image.shape();
  const Shape ks = k.weights.shape();
  if (is.n != ks.n || is.h != ks.h || is.w != ks.w) {
    throw ShapeError(std::string(op) + ": image " + is.str() + " and kernels " + ks.str() +
                     " disagree on batch or spatial size");
  }
  if (is.c != k.channels) {
    throw ShapeError(std::string(op) + ": image has " + std::to_string(is.c) +
                     " channels, kernels were predicted for " + std::to_string(k.channels));
  }
}

inline int clamp_index(int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); }

}  // namespace

template <typename T>
Tensor<T> apply_dilated_filter(const Tensor<T>& image, const KernelField<T>& kernels, int s,
                               MacCounter* counter) {
  if (s < 1) throw ParameterError("dilation must be >= 1, got " + std::to_string(s));
  check_filter_shapes(image, kernels, "apply_dilated_filter");
  const Shape is = image.shape();
  const int kk = kernels.kernel_size;
  const int r = kernels.radius();
  const int taps = kernels.taps();

  // Column lookup per horizontal offset, shared by all rows.
  std::vector<std::vector<int>> col_of(kk, std::vector<int>(is.w));
  for (int dx = -r; dx <= r; ++dx) {
    for (int x = 0; x < is.w; ++x) col_of[dx + r][x] = clamp_index(x + s * dx, is.w - 1);
  }

  Tensor<T> out(is);
  std::uint64_t macs = 0;
  T* o = out.mutable_data().data();
  const T* img = image.ptr();
  const T* kw = kernels.weights.ptr();
  // Source row gathered at the tap's (clamped) columns.
  std::vector<T> shifted(is.w);
  for (int n = 0; n < is.n; ++n) {
    for (int c = 0; c < is.c; ++c) {
      const T* src = img + image.index(n, c, 0, 0);
      T* dst = o + out.index(n, c, 0, 0);
      for (int t = 0; t < taps; ++t) {
        const int dy = t / kk - r;
        const int* cols = col_of[t % kk].data();
        const T* kt = kw + kernels.weights.index(n, c * taps + t, 0, 0);
        for (int y = 0; y < is.h; ++y) {
          const T* srow = src + static_cast<std::size_t>(clamp_index(y + s * dy, is.h - 1)) * is.w;
          const T* krow = kt + static_cast<std::size_t>(y) * is.w;
          T* orow = dst + static_cast<std::size_t>(y) * is.w;
          for (int x = 0; x < is.w; ++x) shifted[x] = srow[cols[x]];
          for (int x = 0; x < is.w; ++x) orow[x] += krow[x] * shifted[x];
          macs += static_cast<std::uint64_t>(is.w);
        }
      }
    }
  }
  if (counter != nullptr) counter->macs += macs;

  if (detail::should_record<T>({&image, &kernels.weights})) {
    Tensor<T> kt = kernels.weights;
    detail::record(out, [image, kt, out, col_of, s, kk, r, taps]() mutable {
      const Shape is = image.shape();
      const T* g = out.grad().data();
      T* dimg = image.requires_grad() ? image.grad_buffer().data() : nullptr;
      T* dk = kt.requires_grad() ? kt.grad_buffer().data() : nullptr;
      std::vector<T> buf(is.w);
      for (int n = 0; n < is.n; ++n) {
        for (int c = 0; c < is.c; ++c) {
          const std::size_t ib = image.index(n, c, 0, 0);
          for (int t = 0; t < taps; ++t) {
            const int dy = t / kk - r;
            const int* cols = col_of[t % kk].data();
            const std::size_t kb = kt.index(n, c * taps + t, 0, 0);
            for (int y = 0; y < is.h; ++y) {
              const std::size_t sy =
                  static_cast<std::size_t>(clamp_index(y + s * dy, is.h - 1)) * is.w;
              const std::size_t row = static_cast<std::size_t>(y) * is.w;
              const T* grow = g + ib + row;
              if (dk != nullptr) {
                const T* srow = image.ptr() + ib + sy;
                for (int x = 0; x < is.w; ++x) buf[x] = srow[cols[x]];
                T* dkrow = dk + kb + row;
                for (int x = 0; x < is.w; ++x) dkrow[x] += grow[x] * buf[x];
              }
              if (dimg != nullptr) {
                const T* krow = kt.ptr() + kb + row;
                for (int x = 0; x < is.w; ++x) buf[x] = grow[x] * krow[x];
                T* drow = dimg + ib + sy;
                for (int x = 0; x < is.w; ++x) drow[cols[x]] += buf[x];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> apply_spfilt(const Tensor<T>& image, const KernelField<T>& kernels,
                       MacCounter* counter) {
  return apply_dilated_filter(image, kernels, 1, counter);
}

template <typename T>
KernelField<T> materialize_dilated_kernels(const KernelField<T>& kernels, int s) {
  if (s < 1) throw ParameterError("dilation must be >= 1, got " + std::to_string(s));
  const int kk = kernels.kernel_size;
  const int big = s * (kk - 1) + 1;
  const Shape ks = kernels.weights.shape();
  const int taps = kk * kk;
  const int big_taps = big * big;
  Tensor<T> w(Shape{ks.n, kernels.channels * big_taps, ks.h, ks.w});
  for (int n = 0; n < ks.n; ++n) {
    for (int c = 0; c < kernels.channels; ++c) {
      for (int t = 0; t < taps; ++t) {
        const int bt = (t / kk) * s * big + (t % kk) * s;
        const T* src = kernels.weights.ptr() + kernels.weights.index(n, c * taps + t, 0, 0);
        T* dst = w.mutable_data().data() + w.index(n, c * big_taps + bt, 0, 0);
        std::copy_n(src, ks.plane(), dst);
      }
    }
  }
  return KernelField<T>(std::move(w), kernels.channels, big);
}

template <typename T>
Tensor<T> uncertainty_map(const KernelField<T>& kernels) {
  const Shape ks = kernels.weights.shape();
  const int depth = ks.c;
  Tensor<T> out(Shape{ks.n, 1, ks.h, ks.w});
  const std::size_t plane = ks.plane();
  for (int n = 0; n < ks.n; ++n) {
    const T* base = kernels.weights.ptr() + kernels.weights.index(n, 0, 0, 0);
    T* dst = out.mutable_data().data() + out.index(n, 0, 0, 0);
    for (std::size_t p = 0; p < plane; ++p) {
      T acc = 0;
      for (int k = 0; k < depth; ++k) acc += base[k * plane + p];
      dst[p] = acc / T(depth);
    }
  }
  if (detail::should_record<T>({&kernels.weights})) {
    Tensor<T> kt = kernels.weights;
    detail::record(out, [kt, out, depth, plane]() mutable {
      const T* g = out.grad().data();
      auto& dk = kt.grad_buffer();
      const T inv = T(1) / T(depth);
      for (int n = 0; n < kt.shape().n; ++n) {
        for (int k = 0; k < depth; ++k) {
          T* d = dk.data() + kt.index(n, k, 0, 0);
          const T* gn = g + n * plane;
          for (std::size_t p = 0; p < plane; ++p) d[p] += gn[p] * inv;
        }
      }
    });
  }
  return out;
}

template <typename T>
Fusion<T>::Fusion(int inputs, int channels) : inputs_(inputs), channels_(channels) {
  if (inputs < 1) throw ParameterError("fusion needs at least one input");
  if (channels < 1) throw ParameterError("fusion needs at least one channel");
  weight_ = Tensor<T>(Shape{channels, inputs * channels, 3, 3}, T(0), true);
  bias_ = Tensor<T>(Shape{1, channels, 1, 1}, T(0), true);
  const T share = T(1) / T(inputs);
  for (int o = 0; o < channels; ++o) {
    for (int i = 0; i < inputs; ++i) weight_.at(o, i * channels + o, 1, 1) = share;
  }
}

template <typename T>
Tensor<T> Fusion<T>::operator()(const std::vector<Tensor<T>>& images) const {
  if (images.empty()) throw ParameterError("fusion: empty input list");
  if (static_cast<int>(images.size()) != inputs_) {
    throw ParameterError("fusion expects " + std::to_string(inputs_) + " inputs, got " +
                         std::to_string(images.size()));
  }
  for (const auto& im : images) {
    if (!(im.shape() == images.front().shape())) {
      throw ShapeError("fusion: inputs disagree in shape, " + im.shape().str() + " vs " +
                       images.front().shape().str());
    }
  }
  const Tensor<T> stacked = images.size() == 1 ? images.front() : concat_channels(images);
  return conv2d(stacked, weight_, bias_, 1, 1);
}

std::uint64_t flop_count(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t k,
                         std::uint64_t scales, MultiScaleStrategy strategy) {
  if (strategy == MultiScaleStrategy::kWeightSharing) return scales * k * k * h * w * c;
  std::uint64_t taps = 0;
  for (std::uint64_t s = 1; s <= scales; ++s) taps += (2 * s + 1) * (2 * s + 1);
  return c * h * w * taps;
}

#define DERAIN_INSTANTIATE_PFILT(T)                                                       \
  template struct KernelField<T>;                                                         \
  template class Fusion<T>;                                                               \
  template Tensor<T> apply_spfilt(const Tensor<T>&, const KernelField<T>&, MacCounter*);  \
  template Tensor<T> apply_dilated_filter(const Tensor<T>&, const KernelField<T>&, int,   \
                                          MacCounter*);                                   \
  template KernelField<T> materialize_dilated_kernels(const KernelField<T>&, int);        \
  template Tensor<T> uncertainty_map(const KernelField<T>&);

DERAIN_INSTANTIATE_PFILT(float)
DERAIN_INSTANTIATE_PFILT(double)

}  // namespace derain
