#include "derain/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <algorithm>
#include <cstring>
#include <memory>
#include <vector>

namespace derain {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int in_c, in_h, in_w;
  int kh, kw;
  int stride, pad;
  int out_h, out_w;

  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  int rows() const { return in_c * kh * kw; }
  int cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) read input column ox * stride - pad + kx inside
// the image; the rest see zero padding.
inline void valid_span(const ConvGeometry& g, int kx, int& lo, int& hi) {
  lo = 0;
  while (lo < g.out_w && lo * g.stride - g.pad + kx < 0) ++lo;
  hi = g.out_w;
  while (hi > lo && (hi - 1) * g.stride - g.pad + kx >= g.in_w) --hi;
}

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  for (int c = 0; c < g.in_c; ++c) {
    const T* plane = img + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * g.cols();
        int lo, hi;
        valid_span(g, kx, lo, hi);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.in_h || lo >= hi) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.in_w;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo - g.pad + kx, src + hi - g.pad + kx, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride - g.pad + kx];
          }
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  for (int c = 0; c < g.in_c; ++c) {
    T* plane = img + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * g.cols();
        int lo, hi;
        valid_span(g, kx, lo, hi);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
          if (g.stride == 1) {
            T* d = dst - g.pad + kx;
            for (int ox = lo; ox < hi; ++ox) d[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride - g.pad + kx] += src[ox];
          }
        }
      }
    }
  }
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

// Strided convolution: one im2col + GEMM per image.
template <typename T>
Tensor<T> conv_im2col(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                      const ConvGeometry& g) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int out_c = ws.n;
  Tensor<T> out(Shape{xs.n, out_c, g.out_h, g.out_w});
  std::vector<T> col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(g.rows()) * g.cols());

  ConstMapMat<T> wmat(weight.ptr(), out_c, g.rows());
  const std::size_t in_stride = static_cast<std::size_t>(xs.c) * xs.h * xs.w;
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * g.cols();
  for (int n = 0; n < xs.n; ++n) {
    const T* src = x.ptr() + n * in_stride;
    if (!g.pointwise()) {
      im2col(src, g, col.data());
      src = col.data();
    }
    ConstMapMat<T> cmat(src, g.rows(), g.cols());
    MapMat<T> omat(out.mutable_data().data() + n * out_stride, out_c, g.cols());
    omat.noalias() = wmat * cmat;
    if (bias.defined()) {
      for (int o = 0; o < out_c; ++o) omat.row(o).array() += bias.data()[o];
    }
  }

  if (detail::should_record<T>({&x, &weight, &bias})) {
    detail::record(out, [x, weight, bias, out, g, out_c, in_stride, out_stride]() mutable {
      const std::span<const T> gout = out.grad();
      ConstMapMat<T> wmat(weight.ptr(), out_c, g.rows());
      std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
      std::vector<T> dcol(static_cast<std::size_t>(g.rows()) * g.cols());
      for (int n = 0; n < x.shape().n; ++n) {
        ConstMapMat<T> gmat(gout.data() + n * out_stride, out_c, g.cols());
        if (weight.requires_grad()) {
          const T* src = x.ptr() + n * in_stride;
          if (!g.pointwise()) {
            im2col(src, g, col.data());
            src = col.data();
          }
          ConstMapMat<T> cmat(src, g.rows(), g.cols());
          MapMat<T> dw(weight.grad_buffer().data(), out_c, g.rows());
          dw.noalias() += gmat * cmat.transpose();
        }
        if (bias.defined() && bias.requires_grad()) {
          auto& db = bias.grad_buffer();
          for (int o = 0; o < out_c; ++o) db[o] += gmat.row(o).sum();
        }
        if (x.requires_grad()) {
          T* dx = x.grad_buffer().data() + n * in_stride;
          if (g.pointwise()) {
            MapMat<T> dxmat(dx, g.rows(), g.cols());
            dxmat.noalias() += wmat.transpose() * gmat;
          } else {
            MapMat<T> dcmat(dcol.data(), g.rows(), g.cols());
            dcmat.noalias() = wmat.transpose() * gmat;
            col2im(dcol.data(), g, dx);
          }
        }
      }
    });
  }
  return out;
}

// Stride-1 convolution without im2col. The batch is copied once into a
// zero-padded buffer laid out as (in_c, n, Hp, Wp). In that layout the input
// seen by tap (ky, kx) is the same flat buffer shifted by ky * Wp + kx, so
// each tap is one GEMM over the whole batch. Output positions are computed
// on the padded grid and the columns that fall in the padding are dropped.
struct ShiftedLayout {
  int n, in_c, out_c, pad, kh, kw;
  int hp, wp, out_h, out_w;
  std::size_t plane() const { return static_cast<std::size_t>(hp) * wp; }
  std::size_t total() const { return plane() * n; }
  std::size_t span() const {
    return (n - 1) * plane() + static_cast<std::size_t>(out_h - 1) * wp + out_w;
  }
  std::size_t tap_offset(int ky, int kx) const { return static_cast<std::size_t>(ky) * wp + kx; }
  std::size_t out_pos(int b, int y, int x) const { return b * plane() + static_cast<std::size_t>(y) * wp + x; }
};

// Direct 3x3 kernels for layers with few channels, where every per-tap GEMM
// is a thin product dominated by packing. They use GCC vector extensions
// and keep a tile of output channels in registers. Every output element is
// accumulated in the same (channel, tap) order whether it lands in a vector
// lane or in the scalar tail.
template <typename T>
struct Simd {
  typedef T V __attribute__((vector_size(64)));
  static constexpr int kLanes = 64 / sizeof(T);
  static V load(const T* p) {
    V v;
    std::memcpy(&v, p, sizeof(V));
    return v;
  }
  static void store(T* p, V v) { std::memcpy(p, &v, sizeof(V)); }
  static V splat(T x) { return V{} + x; }
};

constexpr int kDirectTaps = 9;
constexpr int kDirectTile = 8;

inline bool use_direct(int in_c, int out_c, int kh, int kw) {
  return kh * kw == kDirectTaps && in_c * out_c <= 64;
}

// dst[j][p] = sum_a sum_t w[(a * 9 + t) * R + j] * src[a][p + base + sign * off[t]]
// for j < R, p in [0, len). `w` is packed per tile as (a, t, j).
template <typename T, int R>
void direct_tile(const T* src, std::size_t sstride, int n_a, const T* w,
                 const std::size_t* off, std::ptrdiff_t base, int sign, std::size_t len, T* dst,
                 std::size_t dstride) {
  using S = Simd<T>;
  using V = typename S::V;
  constexpr int L = S::kLanes;
  std::ptrdiff_t d[kDirectTaps];
  for (int t = 0; t < kDirectTaps; ++t) d[t] = base + sign * static_cast<std::ptrdiff_t>(off[t]);
  std::size_t p = 0;
  for (; p + 2 * L <= len; p += 2 * L) {
    V acc[R][2];
    for (int j = 0; j < R; ++j) acc[j][0] = acc[j][1] = V{};
    for (int a = 0; a < n_a; ++a) {
      const T* row = src + a * sstride + p;
      const T* wa = w + static_cast<std::size_t>(a) * kDirectTaps * R;
      for (int t = 0; t < kDirectTaps; ++t) {
        const V s0 = S::load(row + d[t]);
        const V s1 = S::load(row + d[t] + L);
        for (int j = 0; j < R; ++j) {
          const V wv = S::splat(wa[t * R + j]);
          acc[j][0] += wv * s0;
          acc[j][1] += wv * s1;
        }
      }
    }
    for (int j = 0; j < R; ++j) {
      S::store(dst + j * dstride + p, acc[j][0]);
      S::store(dst + j * dstride + p + L, acc[j][1]);
    }
  }
  for (; p < len; ++p) {
    T acc[R] = {};
    for (int a = 0; a < n_a; ++a) {
      const T* row = src + a * sstride + p;
      const T* wa = w + static_cast<std::size_t>(a) * kDirectTaps * R;
      for (int t = 0; t < kDirectTaps; ++t) {
        const T v = row[d[t]];
        for (int j = 0; j < R; ++j) acc[j] += wa[t * R + j] * v;
      }
    }
    for (int j = 0; j < R; ++j) dst[j * dstride + p] = acc[j];
  }
}

// Tiles the R outputs of a direct pass into groups of up to kDirectTile.
// wfull(j, a, t) gives the weight linking output j to source a at tap t.
template <typename T, typename WeightAt>
void direct_pass(const T* src, std::size_t sstride, int n_a, int n_out, WeightAt wfull,
                 const std::size_t* off, std::ptrdiff_t base, int sign, std::size_t len, T* dst,
                 std::size_t dstride) {
  std::vector<T> packed;
  for (int j0 = 0; j0 < n_out; j0 += kDirectTile) {
    const int r = std::min(kDirectTile, n_out - j0);
    packed.assign(static_cast<std::size_t>(n_a) * kDirectTaps * r, T(0));
    for (int a = 0; a < n_a; ++a) {
      for (int t = 0; t < kDirectTaps; ++t) {
        for (int j = 0; j < r; ++j) packed[(a * kDirectTaps + t) * r + j] = wfull(j0 + j, a, t);
      }
    }
    T* out = dst + j0 * dstride;
    switch (r) {
#define DERAIN_TILE(R)                                                                   \
  case R:                                                                                \
    direct_tile<T, R>(src, sstride, n_a, packed.data(), off, base, sign, len, out, dstride); \
    break;
      DERAIN_TILE(1) DERAIN_TILE(2) DERAIN_TILE(3) DERAIN_TILE(4)
      DERAIN_TILE(5) DERAIN_TILE(6) DERAIN_TILE(7) DERAIN_TILE(8)
#undef DERAIN_TILE
    }
  }
}

// dw[(o * in_c + c) * 9 + t] += sum_p gp[o][p] * xp[c][p + off[t]].
template <typename T>
void direct_weight_grad(const T* gp, const T* xp, std::size_t xstride, int in_c, int out_c,
                        const std::size_t* off, std::size_t span, T* dw) {
  using S = Simd<T>;
  using V = typename S::V;
  constexpr int L = S::kLanes;
  const std::size_t full = span / L * L;
  for (int o = 0; o < out_c; ++o) {
    const T* g = gp + o * span;
    for (int c = 0; c < in_c; ++c) {
      const T* row = xp + c * xstride;
      V acc[kDirectTaps];
      for (V& a : acc) a = V{};
      for (std::size_t p = 0; p < full; p += L) {
        const V gv = S::load(g + p);
        for (int t = 0; t < kDirectTaps; ++t) acc[t] += gv * S::load(row + off[t] + p);
      }
      for (int t = 0; t < kDirectTaps; ++t) {
        T sum = 0;
        for (int l = 0; l < L; ++l) sum += acc[t][l];
        for (std::size_t p = full; p < span; ++p) sum += g[p] * row[off[t] + p];
        dw[(static_cast<std::size_t>(o) * in_c + c) * kDirectTaps + t] += sum;
      }
    }
  }
}

template <typename T>
Tensor<T> conv_shifted(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                       const ConvGeometry& g) {
  const Shape xs = x.shape();
  const int out_c = weight.shape().n;
  const ShiftedLayout lay{xs.n, xs.c, out_c, g.pad, g.kh, g.kw,
                             xs.h + 2 * g.pad, xs.w + 2 * g.pad, g.out_h, g.out_w};
  const int taps = g.kh * g.kw;

  auto padded = std::make_shared<std::vector<T>>(static_cast<std::size_t>(xs.c) * lay.total(), T(0));
  for (int b = 0; b < xs.n; ++b) {
    for (int c = 0; c < xs.c; ++c) {
      for (int y = 0; y < xs.h; ++y) {
        const T* src = x.ptr() + x.index(b, c, y, 0);
        T* dst = padded->data() + c * lay.total() + lay.out_pos(b, y + g.pad, g.pad);
        std::copy(src, src + xs.w, dst);
      }
    }
  }
  // Per-tap weight matrices, tap-major: (taps, out_c, in_c).
  auto tapw = std::make_shared<std::vector<T>>(static_cast<std::size_t>(taps) * out_c * xs.c);
  for (int o = 0; o < out_c; ++o) {
    for (int c = 0; c < xs.c; ++c) {
      for (int t = 0; t < taps; ++t) {
        (*tapw)[(static_cast<std::size_t>(t) * out_c + o) * xs.c + c] =
            weight.data()[(static_cast<std::size_t>(o) * xs.c + c) * taps + t];
      }
    }
  }

  const std::size_t span = lay.span();
  const bool direct = use_direct(xs.c, out_c, g.kh, g.kw);
  std::vector<std::size_t> offsets(taps);
  for (int t = 0; t < taps; ++t) offsets[t] = lay.tap_offset(t / g.kw, t % g.kw);
  RowMat<T> acc(out_c, span);
  if (direct) {
    const T* w = weight.ptr();
    const int in_c = xs.c;
    direct_pass(padded->data(), lay.total(), in_c, out_c,
                [&](int o, int c, int t) { return w[(static_cast<std::size_t>(o) * in_c + c) * taps + t]; },
                offsets.data(), 0, 1, span, acc.data(), span);
  } else {
    ConstMapMat<T> xp(padded->data(), xs.c, lay.total());
    for (int t = 0; t < taps; ++t) {
      ConstMapMat<T> wt(tapw->data() + static_cast<std::size_t>(t) * out_c * xs.c, out_c, xs.c);
      const auto src = xp.middleCols(offsets[t], span);
      if (t == 0) {
        acc.noalias() = wt * src;
      } else {
        acc.noalias() += wt * src;
      }
    }
  }

  Tensor<T> out(Shape{xs.n, out_c, g.out_h, g.out_w});
  T* o = out.mutable_data().data();
  for (int b = 0; b < xs.n; ++b) {
    for (int oc = 0; oc < out_c; ++oc) {
      const T bv = bias.defined() ? bias.data()[oc] : T(0);
      for (int y = 0; y < g.out_h; ++y) {
        const T* src = acc.data() + oc * span + lay.out_pos(b, y, 0);
        T* dst = o + out.index(b, oc, y, 0);
        for (int xx = 0; xx < g.out_w; ++xx) dst[xx] = src[xx] + bv;
      }
    }
  }

  if (detail::should_record<T>({&x, &weight, &bias})) {
    detail::record(out, [x, weight, bias, out, lay, padded, tapw, taps, direct, offsets]() mutable {
      const std::span<const T> gout = out.grad();
      const std::size_t span = lay.span();
      RowMat<T> gp = RowMat<T>::Zero(lay.out_c, span);
      for (int b = 0; b < lay.n; ++b) {
        for (int oc = 0; oc < lay.out_c; ++oc) {
          for (int y = 0; y < lay.out_h; ++y) {
            const T* src = gout.data() + out.index(b, oc, y, 0);
            T* dst = gp.data() + oc * span + lay.out_pos(b, y, 0);
            std::copy(src, src + lay.out_w, dst);
          }
        }
      }
      if (bias.defined() && bias.requires_grad()) {
        auto& db = bias.grad_buffer();
        for (int oc = 0; oc < lay.out_c; ++oc) db[oc] += gp.row(oc).sum();
      }
      ConstMapMat<T> xp(padded->data(), lay.in_c, lay.total());
      if (direct && weight.requires_grad()) {
        direct_weight_grad(gp.data(), padded->data(), lay.total(), lay.in_c, lay.out_c,
                           offsets.data(), span, weight.grad_buffer().data());
      } else if (weight.requires_grad()) {
        auto& dw = weight.grad_buffer();
        RowMat<T> dwt(lay.out_c, lay.in_c);
        for (int t = 0; t < taps; ++t) {
          const auto src = xp.middleCols(lay.tap_offset(t / lay.kw, t % lay.kw), span);
          if (lay.out_c * lay.in_c <= 64) {
            // GEMM packing dominates for tiny weight matrices.
            for (int oc = 0; oc < lay.out_c; ++oc) {
              for (int c = 0; c < lay.in_c; ++c) dwt(oc, c) = gp.row(oc).dot(src.row(c));
            }
          } else {
            dwt.noalias() = gp * src.transpose();
          }
          for (int oc = 0; oc < lay.out_c; ++oc) {
            for (int c = 0; c < lay.in_c; ++c) {
              dw[(static_cast<std::size_t>(oc) * lay.in_c + c) * taps + t] += dwt(oc, c);
            }
          }
        }
      }
      if (direct && x.requires_grad()) {
        // dxp[c][q] = sum_o sum_t w[o][c][t] * gp[o][q - off[t]], with gp
        // shifted right by the largest offset so the index never underflows.
        const std::size_t lead = offsets.back();
        const std::size_t gstride = lead + lay.total();
        std::vector<T> gpp(static_cast<std::size_t>(lay.out_c) * gstride + 2 * Simd<T>::kLanes, T(0));
        for (int oc = 0; oc < lay.out_c; ++oc) {
          std::copy(gp.data() + oc * span, gp.data() + (oc + 1) * span,
                    gpp.data() + oc * gstride + lead);
        }
        RowMat<T> dxp(lay.in_c, lay.total());
        const T* w = weight.ptr();
        const int in_c = lay.in_c;
        direct_pass(gpp.data(), gstride, lay.out_c, lay.in_c,
                    [&](int c, int o, int t) { return w[(static_cast<std::size_t>(o) * in_c + c) * taps + t]; },
                    offsets.data(), static_cast<std::ptrdiff_t>(lead), -1, lay.total(), dxp.data(),
                    lay.total());
        auto& dx = x.grad_buffer();
        const Shape xs = x.shape();
        for (int b = 0; b < xs.n; ++b) {
          for (int c = 0; c < xs.c; ++c) {
            for (int y = 0; y < xs.h; ++y) {
              const T* src = dxp.data() + c * lay.total() + lay.out_pos(b, y + lay.pad, lay.pad);
              T* dst = dx.data() + x.index(b, c, y, 0);
              for (int xx = 0; xx < xs.w; ++xx) dst[xx] += src[xx];
            }
          }
        }
      } else if (x.requires_grad()) {
        RowMat<T> dxp = RowMat<T>::Zero(lay.in_c, lay.total());
        for (int t = 0; t < taps; ++t) {
          ConstMapMat<T> wt(tapw->data() + static_cast<std::size_t>(t) * lay.out_c * lay.in_c,
                            lay.out_c, lay.in_c);
          dxp.middleCols(lay.tap_offset(t / lay.kw, t % lay.kw), span).noalias() +=
              wt.transpose() * gp;
        }
        auto& dx = x.grad_buffer();
        const Shape xs = x.shape();
        for (int b = 0; b < xs.n; ++b) {
          for (int c = 0; c < xs.c; ++c) {
            for (int y = 0; y < xs.h; ++y) {
              const T* src = dxp.data() + c * lay.total() + lay.out_pos(b, y + lay.pad, lay.pad);
              T* dst = dx.data() + x.index(b, c, y, 0);
              for (int xx = 0; xx < xs.w; ++xx) dst[xx] += src[xx];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  if (padding < 0) throw ParameterError("conv2d: padding must be >= 0");
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: weight expects " + std::to_string(ws.c) +
                     " input channels, input " + xs.str() + " has " +
                     std::to_string(xs.c));
  }
  if (bias.defined() && (bias.numel() != static_cast<std::size_t>(ws.n))) {
    throw ShapeError("conv2d: bias " + bias.shape().str() + " does not match " +
                     std::to_string(ws.n) + " output channels");
  }
  ConvGeometry g{xs.c, xs.h, xs.w, ws.h, ws.w, stride, padding, 0, 0};
  g.out_h = (xs.h + 2 * padding - ws.h) / stride + 1;
  g.out_w = (xs.w + 2 * padding - ws.w) / stride + 1;
  if (xs.h + 2 * padding < ws.h || xs.w + 2 * padding < ws.w) {
    throw ShapeError("conv2d: kernel " + ws.str() + " larger than padded input " + xs.str());
  }

  if (stride == 1) return conv_shifted(x, weight, bias, g);
  return conv_im2col(x, weight, bias, g);
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormStats<T>& stats,
                     bool training) {
  const Shape s = x.shape();
  if (gamma.numel() != static_cast<std::size_t>(s.c) ||
      beta.numel() != static_cast<std::size_t>(s.c)) {
    throw ShapeError("batch_norm: gamma/beta length must equal channel count " +
                     std::to_string(s.c));
  }
  if (stats.mean.size() != static_cast<std::size_t>(s.c)) {
    throw ShapeError("batch_norm: running statistics sized for " +
                     std::to_string(stats.mean.size()) + " channels, input has " +
                     std::to_string(s.c));
  }
  const std::size_t plane = s.plane();
  const std::size_t count = plane * s.n;
  const T eps = T(kBatchNormEps);
  const T momentum = T(kBatchNormMomentum);

  std::vector<T> mean(s.c), inv_std(s.c);
  for (int c = 0; c < s.c; ++c) {
    if (training) {
      T acc = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.ptr() + x.index(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const T mu = acc / T(count);
      T var = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.ptr() + x.index(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= T(count);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = count > 1 ? var * T(count) / T(count - 1) : var;
      stats.mean[c] = (T(1) - momentum) * stats.mean[c] + momentum * mu;
      stats.var[c] = (T(1) - momentum) * stats.var[c] + momentum * unbiased;
    } else {
      mean[c] = stats.mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.var[c] + eps);
    }
  }

  Tensor<T> out(s);
  Tensor<T> xhat(s);
  auto o = out.mutable_data();
  auto xh = xhat.mutable_data();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = x.index(n, c, 0, 0);
      const T gm = gamma.data()[c], bt = beta.data()[c];
      for (std::size_t i = 0; i < plane; ++i) {
        const T v = (x.data()[base + i] - mean[c]) * inv_std[c];
        xh[base + i] = v;
        o[base + i] = gm * v + bt;
      }
    }
  }

  if (detail::should_record<T>({&x, &gamma, &beta})) {
    detail::record(out, [x, gamma, beta, out, xhat, inv_std, training, s, plane, count]() mutable {
      const auto gout = out.grad();
      const auto xh = xhat.data();
      for (int c = 0; c < s.c; ++c) {
        T sum_g = 0, sum_gx = 0;
        for (int n = 0; n < s.n; ++n) {
          const std::size_t base = x.index(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g += gout[base + i];
            sum_gx += gout[base + i] * xh[base + i];
          }
        }
        if (gamma.requires_grad()) gamma.grad_buffer()[c] += sum_gx;
        if (beta.requires_grad()) beta.grad_buffer()[c] += sum_g;
        if (!x.requires_grad()) continue;
        auto& dx = x.grad_buffer();
        const T k = gamma.data()[c] * inv_std[c];
        const T mean_g = sum_g / T(count);
        const T mean_gx = sum_gx / T(count);
        for (int n = 0; n < s.n; ++n) {
          const std::size_t base = x.index(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) {
            if (training) {
              dx[base + i] += k * (gout[base + i] - mean_g - xh[base + i] * mean_gx);
            } else {
              dx[base + i] += k * gout[base + i];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  if (detail::should_record<T>({&x})) {
    detail::record(out, [x, out]() mutable {
      const auto g = out.grad();
      const auto in = x.data();
      auto& dx = x.grad_buffer();
      for (std::size_t i = 0; i < in.size(); ++i) dx[i] += in[i] > T(0) ? g[i] : T(0);
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("avg_pool2: spatial dims must be even, got " + s.str());
  }
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> out(os);
  auto o = out.mutable_data();
  const auto in = x.data();
  for (int p = 0; p < s.n * s.c; ++p) {
    const T* src = in.data() + static_cast<std::size_t>(p) * s.plane();
    T* dst = o.data() + static_cast<std::size_t>(p) * os.plane();
    for (int y = 0; y < os.h; ++y) {
      const T* r0 = src + static_cast<std::size_t>(2 * y) * s.w;
      const T* r1 = r0 + s.w;
      for (int xx = 0; xx < os.w; ++xx) {
        dst[y * os.w + xx] =
            T(0.25) * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
      }
    }
  }
  if (detail::should_record<T>({&x})) {
    detail::record(out, [x, out, s, os]() mutable {
      const auto g = out.grad();
      auto& dx = x.grad_buffer();
      for (int p = 0; p < s.n * s.c; ++p) {
        const T* gs = g.data() + static_cast<std::size_t>(p) * os.plane();
        T* d = dx.data() + static_cast<std::size_t>(p) * s.plane();
        for (int y = 0; y < os.h; ++y) {
          for (int xx = 0; xx < os.w; ++xx) {
            const T v = T(0.25) * gs[y * os.w + xx];
            d[(2 * y) * s.w + 2 * xx] += v;
            d[(2 * y) * s.w + 2 * xx + 1] += v;
            d[(2 * y + 1) * s.w + 2 * xx] += v;
            d[(2 * y + 1) * s.w + 2 * xx + 1] += v;
          }
        }
      }
    });
  }
  return out;
}

namespace {

// Source taps for one output coordinate of a 2x half-pixel upsample.
struct Tap {
  int i0, i1;
  double frac;
};

std::vector<Tap> upsample_taps(int in, int out) {
  std::vector<Tap> taps(out);
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * 0.5 - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[i] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample2(const Tensor<T>& x) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h * 2, s.w * 2};
  const auto ty = upsample_taps(s.h, os.h);
  const auto tx = upsample_taps(s.w, os.w);
  Tensor<T> out(os);
  auto o = out.mutable_data();
  const auto in = x.data();
  // Separable: widen every source row, then blend pairs of widened rows.
  std::vector<T> wide(static_cast<std::size_t>(s.h) * os.w);
  for (int p = 0; p < s.n * s.c; ++p) {
    const T* src = in.data() + static_cast<std::size_t>(p) * s.plane();
    T* dst = o.data() + static_cast<std::size_t>(p) * os.plane();
    for (int y = 0; y < s.h; ++y) {
      const T* r = src + static_cast<std::size_t>(y) * s.w;
      T* wr = wide.data() + static_cast<std::size_t>(y) * os.w;
      for (int xx = 0; xx < os.w; ++xx) {
        const T fx = T(tx[xx].frac);
        wr[xx] = r[tx[xx].i0] * (T(1) - fx) + r[tx[xx].i1] * fx;
      }
    }
    for (int y = 0; y < os.h; ++y) {
      const T fy = T(ty[y].frac);
      const T* r0 = wide.data() + static_cast<std::size_t>(ty[y].i0) * os.w;
      const T* r1 = wide.data() + static_cast<std::size_t>(ty[y].i1) * os.w;
      T* orow = dst + static_cast<std::size_t>(y) * os.w;
      for (int xx = 0; xx < os.w; ++xx) orow[xx] = r0[xx] * (T(1) - fy) + r1[xx] * fy;
    }
  }
  if (detail::should_record<T>({&x})) {
    detail::record(out, [x, out, s, os, ty, tx]() mutable {
      const auto g = out.grad();
      auto& dx = x.grad_buffer();
      std::vector<T> wide(static_cast<std::size_t>(s.h) * os.w);
      for (int p = 0; p < s.n * s.c; ++p) {
        const T* gs = g.data() + static_cast<std::size_t>(p) * os.plane();
        T* d = dx.data() + static_cast<std::size_t>(p) * s.plane();
        std::fill(wide.begin(), wide.end(), T(0));
        for (int y = 0; y < os.h; ++y) {
          const T fy = T(ty[y].frac);
          const T* grow = gs + static_cast<std::size_t>(y) * os.w;
          T* w0 = wide.data() + static_cast<std::size_t>(ty[y].i0) * os.w;
          T* w1 = wide.data() + static_cast<std::size_t>(ty[y].i1) * os.w;
          for (int xx = 0; xx < os.w; ++xx) w0[xx] += grow[xx] * (T(1) - fy);
          for (int xx = 0; xx < os.w; ++xx) w1[xx] += grow[xx] * fy;
        }
        for (int y = 0; y < s.h; ++y) {
          const T* wr = wide.data() + static_cast<std::size_t>(y) * os.w;
          T* r = d + static_cast<std::size_t>(y) * s.w;
          for (int xx = 0; xx < os.w; ++xx) {
            const T fx = T(tx[xx].frac);
            r[tx[xx].i0] += wr[xx] * (T(1) - fx);
            r[tx[xx].i1] += wr[xx] * fx;
          }
        }
      }
    });
  }
  return out;
}


template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ParameterError("concat_channels: empty input list");
  const Shape first = xs.front().shape();
  int channels = 0;
  for (const auto& t : xs) {
    const Shape s = t.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: " + s.str() + " does not match " + first.str() +
                       " outside the channel axis");
    }
    channels += s.c;
  }
  const Shape os{first.n, channels, first.h, first.w};
  Tensor<T> out(os);
  auto o = out.mutable_data();
  const std::size_t plane = first.plane();
  for (int n = 0; n < first.n; ++n) {
    int c0 = 0;
    for (const auto& t : xs) {
      const std::size_t len = t.shape().c * plane;
      std::copy_n(t.ptr() + n * len, len, o.data() + out.index(n, c0, 0, 0));
      c0 += t.shape().c;
    }
  }
  bool any = false;
  for (const auto& t : xs) any = any || detail::should_record<T>({&t});
  if (any) {
    detail::record(out, [xs, out, plane]() mutable {
      const auto g = out.grad();
      const int n_batch = out.shape().n;
      int c0 = 0;
      for (auto& t : xs) {
        const std::size_t len = t.shape().c * plane;
        if (t.requires_grad()) {
          auto& dx = t.grad_buffer();
          for (int n = 0; n < n_batch; ++n) {
            const T* src = g.data() + out.index(n, c0, 0, 0);
            T* dst = dx.data() + n * len;
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
        c0 += t.shape().c;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
  if (detail::should_record<T>({&a, &b})) {
    detail::record(out, [a, b, out]() mutable {
      detail::accumulate(a, out.grad());
      detail::accumulate(b, out.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
  if (detail::should_record<T>({&a, &b})) {
    detail::record(out, [a, b, out]() mutable {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto& da = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& db = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] * factor;
  if (detail::should_record<T>({&x})) {
    detail::record(out, [x, out, factor]() mutable {
      const auto g = out.grad();
      auto& dx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out(Shape{}, acc);
  if (detail::should_record<T>({&x})) {
    detail::record(out, [x, out]() mutable {
      const T g = out.grad()[0];
      auto& dx = x.grad_buffer();
      for (auto& v : dx) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
  T acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += std::abs(a.data()[i] - b.data()[i]);
  const T inv = T(1) / T(a.numel());
  Tensor<T> out(Shape{}, acc * inv);
  if (detail::should_record<T>({&a, &b})) {
    detail::record(out, [a, b, out, inv]() mutable {
      const T g = out.grad()[0] * inv;
      auto sign = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
      if (a.requires_grad()) {
        auto& da = a.grad_buffer();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g * sign(a.data()[i] - b.data()[i]);
      }
      if (b.requires_grad()) {
        auto& db = b.grad_buffer();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g * sign(a.data()[i] - b.data()[i]);
      }
    });
  }
  return out;
}

#define DERAIN_INSTANTIATE_OPS(T)                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                            int);                                                      \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                BatchNormStats<T>&, bool);                             \
  template Tensor<T> relu(const Tensor<T>&);                                           \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                      \
  template Tensor<T> bilinear_upsample2(const Tensor<T>&);                             \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                       \
  template Tensor<T> sum(const Tensor<T>&);                                            \
  template Tensor<T> mean_abs_diff(const Tensor<T>&, const Tensor<T>&);

DERAIN_INSTANTIATE_OPS(float)
DERAIN_INSTANTIATE_OPS(double)

}  // namespace derain
