#include "derain/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "derain/ops.hpp"

namespace derain {
namespace {

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  const int r = size / 2;
  double total = 0;
  for (int i = 0; i < size; ++i) {
    g[i] = std::exp(-double((i - r) * (i - r)) / (2.0 * sigma * sigma));
    total += g[i];
  }
  for (double& v : g) v /= total;
  return g;
}

/// Separable zero-padded "same" Gaussian filter on one h x w plane. The
/// window is symmetric, so this operator is its own adjoint.
template <typename T>
class PlaneBlur {
 public:
  PlaneBlur(const std::vector<double>& g, int h, int w)
      : h_(h), w_(w), r_(static_cast<int>(g.size()) / 2), tmp_(static_cast<std::size_t>(h) * w) {
    for (double v : g) g_.push_back(T(v));
  }

  void operator()(const T* in, T* out) {
    const int k = static_cast<int>(g_.size());
    for (int y = 0; y < h_; ++y) {
      const T* row = in + static_cast<std::size_t>(y) * w_;
      T* trow = tmp_.data() + static_cast<std::size_t>(y) * w_;
      std::fill(trow, trow + w_, T(0));
      // Tap i reads row[x + i - r], valid for x in [r - i, w + r - i).
      for (int i = 0; i < k; ++i) {
        const T gi = g_[i];
        const int lo = std::max(0, r_ - i);
        const int hi = std::min(w_, w_ + r_ - i);
        const T* src = row + i - r_;
        for (int x = lo; x < hi; ++x) trow[x] += gi * src[x];
      }
    }
    for (int y = 0; y < h_; ++y) {
      const int lo = std::max(0, r_ - y);
      const int hi = std::min(k, h_ + r_ - y);
      T* orow = out + static_cast<std::size_t>(y) * w_;
      for (int x = 0; x < w_; ++x) orow[x] = 0;
      for (int i = lo; i < hi; ++i) {
        const T gi = g_[i];
        const T* trow = tmp_.data() + static_cast<std::size_t>(y + i - r_) * w_;
        for (int x = 0; x < w_; ++x) orow[x] += gi * trow[x];
      }
    }
  }

 private:
  int h_, w_, r_;
  std::vector<T> g_;
  std::vector<T> tmp_;
};

// Per-pixel SSIM terms kept for the backward pass.
template <typename T>
struct SsimTerms {
  std::vector<T> mu_a, mu_b, a1, a2, b1, b2, s;
};

template <typename T>
SsimTerms<T> ssim_terms(const T* a, const T* b, const Shape& shape, const LossConfig& cfg) {
  const std::size_t plane = shape.plane();
  const std::size_t total = shape.numel();
  SsimTerms<T> t;
  for (auto* v : {&t.mu_a, &t.mu_b, &t.a1, &t.a2, &t.b1, &t.b2, &t.s}) v->resize(total);
  PlaneBlur<T> blur(gaussian_window(cfg.ssim_window, cfg.ssim_sigma), shape.h, shape.w);
  std::vector<T> sq(plane), paa(plane), pbb(plane), pab(plane);
  const T c1 = T(cfg.c1), c2 = T(cfg.c2);
  for (int p = 0; p < shape.n * shape.c; ++p) {
    const std::size_t off = static_cast<std::size_t>(p) * plane;
    const T* pa = a + off;
    const T* pb = b + off;
    blur(pa, t.mu_a.data() + off);
    blur(pb, t.mu_b.data() + off);
    for (std::size_t i = 0; i < plane; ++i) sq[i] = pa[i] * pa[i];
    blur(sq.data(), paa.data());
    for (std::size_t i = 0; i < plane; ++i) sq[i] = pb[i] * pb[i];
    blur(sq.data(), pbb.data());
    for (std::size_t i = 0; i < plane; ++i) sq[i] = pa[i] * pb[i];
    blur(sq.data(), pab.data());
    for (std::size_t i = 0; i < plane; ++i) {
      const T ma = t.mu_a[off + i], mb = t.mu_b[off + i];
      const T var_a = paa[i] - ma * ma;
      const T var_b = pbb[i] - mb * mb;
      const T cov = pab[i] - ma * mb;
      const T A1 = T(2) * ma * mb + c1;
      const T A2 = T(2) * cov + c2;
      const T B1 = ma * ma + mb * mb + c1;
      const T B2 = var_a + var_b + c2;
      t.a1[off + i] = A1;
      t.a2[off + i] = A2;
      t.b1[off + i] = B1;
      t.b2[off + i] = B2;
      t.s[off + i] = (A1 * A2) / (B1 * B2);
    }
  }
  return t;
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

}  // namespace

template <typename T>
Tensor<T> ssim_mean(const Tensor<T>& a, const Tensor<T>& b, const LossConfig& cfg) {
  require_same(a.shape(), b.shape(), "ssim");
  if (cfg.ssim_window < 1 || cfg.ssim_window % 2 == 0) {
    throw ParameterError("ssim window must be odd");
  }
  const Shape shape = a.shape();
  auto terms = std::make_shared<SsimTerms<T>>(ssim_terms(a.ptr(), b.ptr(), shape, cfg));
  T acc = 0;
  for (T v : terms->s) acc += v;
  Tensor<T> out(Shape{}, acc / T(shape.numel()));

  if (detail::should_record<T>({&a, &b})) {
    detail::record(out, [a, b, out, terms, shape, cfg]() mutable {
      const std::size_t plane = shape.plane();
      const T g = out.grad()[0] / T(shape.numel());
      PlaneBlur<T> blur(gaussian_window(cfg.ssim_window, cfg.ssim_sigma), shape.h, shape.w);
      std::vector<T> d_mu_a(plane), d_mu_b(plane), d_paa(plane), d_pbb(plane), d_pab(plane);
      std::vector<T> f_mu_a(plane), f_mu_b(plane), f_paa(plane), f_pbb(plane), f_pab(plane);
      T* da = a.requires_grad() ? a.grad_buffer().data() : nullptr;
      T* db = b.requires_grad() ? b.grad_buffer().data() : nullptr;
      const SsimTerms<T>& t = *terms;
      for (int p = 0; p < shape.n * shape.c; ++p) {
        const std::size_t off = static_cast<std::size_t>(p) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t k = off + i;
          const T ma = t.mu_a[k], mb = t.mu_b[k];
          const T B12 = t.b1[k] * t.b2[k];
          const T S = t.s[k];
          const T inv_b1 = T(1) / t.b1[k], inv_b2 = T(1) / t.b2[k];
          const T diff = (t.a2[k] - t.a1[k]) / B12;
          d_mu_a[i] = g * (T(2) * mb * diff - T(2) * ma * S * (inv_b1 - inv_b2));
          d_mu_b[i] = g * (T(2) * ma * diff - T(2) * mb * S * (inv_b1 - inv_b2));
          d_paa[i] = g * (-S * inv_b2);
          d_pbb[i] = d_paa[i];
          d_pab[i] = g * (T(2) * t.a1[k] / B12);
        }
        blur(d_mu_a.data(), f_mu_a.data());
        blur(d_mu_b.data(), f_mu_b.data());
        blur(d_paa.data(), f_paa.data());
        blur(d_pbb.data(), f_pbb.data());
        blur(d_pab.data(), f_pab.data());
        const T* pa = a.ptr() + off;
        const T* pb = b.ptr() + off;
        for (std::size_t i = 0; i < plane; ++i) {
          if (da != nullptr) da[off + i] += f_mu_a[i] + T(2) * pa[i] * f_paa[i] + pb[i] * f_pab[i];
          if (db != nullptr) db[off + i] += f_mu_b[i] + T(2) * pb[i] * f_pbb[i] + pa[i] * f_pab[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> l1_ssim_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
  require_same(pred.shape(), target.shape(), "l1_ssim_loss");
  if (cfg.lambda < 0) throw ParameterError("loss lambda must be >= 0");
  Tensor<T> l1 = mean_abs_diff(pred, target);
  if (cfg.lambda == 0) return l1;
  return add(l1, scale(ssim_mean(pred, target, cfg), T(-cfg.lambda)));
}

template <typename T>
Tensor<T> uc_loss(const Tensor<T>& fused, const Tensor<T>& first, const Tensor<T>& second,
                  const Tensor<T>& target, const LossConfig& cfg) {
  return add(add(l1_ssim_loss(fused, target, cfg), l1_ssim_loss(first, target, cfg)),
             l1_ssim_loss(second, target, cfg));
}

namespace {

template <typename T>
std::vector<double> clamped(const Tensor<T>& t) {
  std::vector<double> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(static_cast<double>(t.data()[i]), 0.0, 1.0);
  }
  return out;
}

}  // namespace

template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same(pred.shape(), target.shape(), "psnr");
  const auto a = clamped(pred);
  const auto b = clamped(target);
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = acc / static_cast<double>(a.size());
  if (mse < 1e-10) return kPsnrCapDb;
  return std::min(kPsnrCapDb, -10.0 * std::log10(mse));
}

template <typename T>
double ssim_index(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
  require_same(pred.shape(), target.shape(), "ssim_index");
  const auto a = clamped(pred);
  const auto b = clamped(target);
  const auto terms = ssim_terms(a.data(), b.data(), pred.shape(), cfg);
  double acc = 0;
  for (double v : terms.s) acc += v;
  return acc / static_cast<double>(terms.s.size());
}

#define DERAIN_INSTANTIATE_LOSSES(T)                                                       \
  template Tensor<T> ssim_mean(const Tensor<T>&, const Tensor<T>&, const LossConfig&);     \
  template Tensor<T> l1_ssim_loss(const Tensor<T>&, const Tensor<T>&, const LossConfig&);  \
  template Tensor<T> uc_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                             const Tensor<T>&, const LossConfig&);                         \
  template double psnr(const Tensor<T>&, const Tensor<T>&);                                \
  template double ssim_index(const Tensor<T>&, const Tensor<T>&, const LossConfig&);

DERAIN_INSTANTIATE_LOSSES(float)
DERAIN_INSTANTIATE_LOSSES(double)

}  // namespace derain
