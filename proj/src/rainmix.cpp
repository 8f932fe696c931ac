#include "derain/rainmix.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace derain {
namespace {

// sin/cos of an angle in degrees, exact at multiples of 90.
void sincos_deg(double deg, double& s, double& c) {
  const double quarter = deg / 90.0;
  if (quarter == std::floor(quarter)) {
    const long q = ((static_cast<long>(quarter) % 4) + 4) % 4;
    const double sv[] = {0.0, 1.0, 0.0, -1.0};
    const double cv[] = {1.0, 0.0, -1.0, 0.0};
    s = sv[q];
    c = cv[q];
    return;
  }
  const double rad = deg * std::numbers::pi / 180.0;
  s = std::sin(rad);
  c = std::cos(rad);
}

// Inverse map src = m * (p - center) + center + shift.
struct InverseAffine {
  double m00 = 1, m01 = 0, m10 = 0, m11 = 1;
  double shift_x = 0, shift_y = 0;
};

InverseAffine inverse_affine(GeoOp op, double mag, int h, int w) {
  InverseAffine a;
  switch (op) {
    case GeoOp::kRotate: {
      double s, c;
      sincos_deg(mag, s, c);
      a.m00 = c;
      a.m01 = -s;
      a.m10 = s;
      a.m11 = c;
      break;
    }
    case GeoOp::kShearX:
      a.m01 = -mag;
      break;
    case GeoOp::kShearY:
      a.m10 = -mag;
      break;
    case GeoOp::kTranslateX:
      a.shift_x = -mag * w;
      break;
    case GeoOp::kTranslateY:
      a.shift_y = -mag * h;
      break;
    case GeoOp::kZoomX:
    case GeoOp::kZoomY:
      if (!(mag > 0)) throw ParameterError("zoom factor must be > 0, got " + std::to_string(mag));
      if (op == GeoOp::kZoomX) {
        a.m00 = 1.0 / mag;
      } else {
        a.m11 = 1.0 / mag;
      }
      break;
  }
  return a;
}

struct Sample {
  std::size_t i00, i01, i10, i11;
  double w00, w01, w10, w11;
};

}  // namespace

std::string to_string(GeoOp op) {
  switch (op) {
    case GeoOp::kRotate: return "rot";
    case GeoOp::kShearX: return "shear_x";
    case GeoOp::kShearY: return "shear_y";
    case GeoOp::kTranslateX: return "trans_x";
    case GeoOp::kTranslateY: return "trans_y";
    case GeoOp::kZoomX: return "zoom_x";
    case GeoOp::kZoomY: return "zoom_y";
  }
  return "?";
}

GeoOp geo_op_from_string(const std::string& name) {
  for (GeoOp op : kAllGeoOps) {
    if (to_string(op) == name) return op;
  }
  throw ParameterError("unknown geometric op '" + name +
                       "' (expected rot, shear_x, shear_y, trans_x, trans_y, zoom_x, zoom_y)");
}

bool MagnitudeRanges::contains(GeoOp op, double m) const {
  switch (op) {
    case GeoOp::kRotate: return std::abs(m) <= rotate_deg;
    case GeoOp::kShearX:
    case GeoOp::kShearY: return std::abs(m) <= shear;
    case GeoOp::kTranslateX:
    case GeoOp::kTranslateY: return std::abs(m) <= translate;
    case GeoOp::kZoomX:
    case GeoOp::kZoomY: return m >= zoom_min && m <= zoom_max;
  }
  return false;
}

void MagnitudeRanges::validate() const {
  if (!(rotate_deg >= 0) || !(shear >= 0) || !(translate >= 0)) {
    throw ParameterError("magnitude ranges must be non-negative");
  }
  if (!(zoom_min > 0) || !(zoom_max >= zoom_min)) {
    throw ParameterError("zoom range must satisfy 0 < zoom_min <= zoom_max");
  }
}

template <typename T>
Tensor<T> geometric_apply(const Tensor<T>& x, GeoOp op, double magnitude,
                          const MagnitudeRanges* ranges) {
  if (ranges != nullptr && !ranges->contains(op, magnitude)) {
    throw ParameterError("magnitude " + std::to_string(magnitude) + " outside the range for " +
                         to_string(op));
  }
  const Shape s = x.shape();
  const InverseAffine a = inverse_affine(op, magnitude, s.h, s.w);
  const double cx = (s.w - 1) / 2.0;
  const double cy = (s.h - 1) / 2.0;

  std::vector<Sample> samples(s.plane());
  for (int y = 0; y < s.h; ++y) {
    for (int xx = 0; xx < s.w; ++xx) {
      const double u = xx - cx;
      const double v = y - cy;
      double sx = a.m00 * u + a.m01 * v + cx + a.shift_x;
      double sy = a.m10 * u + a.m11 * v + cy + a.shift_y;
      sx = std::clamp(sx, 0.0, static_cast<double>(s.w - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(s.h - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, s.w - 1);
      const int y1 = std::min(y0 + 1, s.h - 1);
      const double fx = sx - x0;
      const double fy = sy - y0;
      samples[static_cast<std::size_t>(y) * s.w + xx] = {
          static_cast<std::size_t>(y0) * s.w + x0, static_cast<std::size_t>(y0) * s.w + x1,
          static_cast<std::size_t>(y1) * s.w + x0, static_cast<std::size_t>(y1) * s.w + x1,
          (1 - fy) * (1 - fx),                     (1 - fy) * fx,
          fy * (1 - fx),                           fy * fx};
    }
  }

  Tensor<T> out(s);
  T* o = out.mutable_data().data();
  for (int p = 0; p < s.n * s.c; ++p) {
    const T* src = x.ptr() + static_cast<std::size_t>(p) * s.plane();
    T* dst = o + static_cast<std::size_t>(p) * s.plane();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Sample& q = samples[i];
      dst[i] = T(q.w00) * src[q.i00] + T(q.w01) * src[q.i01] + T(q.w10) * src[q.i10] +
               T(q.w11) * src[q.i11];
    }
  }
  return out;
}

void AugmentSpec::validate() const {
  if (n_paths < 1) throw ParameterError("rainmix needs n_paths >= 1");
  if (ops_per_path < 1) throw ParameterError("rainmix needs ops_per_path >= 1");
  if (!(dirichlet_alpha > 0)) throw ParameterError("dirichlet alpha must be > 0");
  if (!(beta_a > 0) || !(beta_b > 0)) throw ParameterError("beta parameters must be > 0");
  ranges.validate();
}

double sample_gamma(double shape, CountingRng& rng) {
  std::gamma_distribution<double> dist(shape, 1.0);
  return dist(rng);
}

std::vector<double> sample_dirichlet(int n, double alpha, CountingRng& rng) {
  std::vector<double> w(n);
  double total = 0;
  for (double& v : w) {
    v = sample_gamma(alpha, rng);
    total += v;
  }
  if (total <= 0) {
    // Every gamma draw underflowed; only reachable for tiny alpha.
    std::fill(w.begin(), w.end(), 1.0 / n);
    return w;
  }
  for (double& v : w) v /= total;
  return w;
}

double sample_beta(double a, double b, CountingRng& rng) {
  const double x = sample_gamma(a, rng);
  const double y = sample_gamma(b, rng);
  if (x + y <= 0) return 0.5;
  return x / (x + y);
}

double sample_magnitude(GeoOp op, const MagnitudeRanges& r, CountingRng& rng) {
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  switch (op) {
    case GeoOp::kRotate: return uniform(-r.rotate_deg, r.rotate_deg);
    case GeoOp::kShearX:
    case GeoOp::kShearY: return uniform(-r.shear, r.shear);
    case GeoOp::kTranslateX:
    case GeoOp::kTranslateY: return uniform(-r.translate, r.translate);
    case GeoOp::kZoomX:
    case GeoOp::kZoomY: return uniform(r.zoom_min, r.zoom_max);
  }
  return 0;
}

RainMixDraw sample_rainmix_draw(const AugmentSpec& spec, CountingRng& rng) {
  spec.validate();
  RainMixDraw d;
  d.weights = sample_dirichlet(spec.n_paths, spec.dirichlet_alpha, rng);
  constexpr int kOpCount = static_cast<int>(std::size(kAllGeoOps));
  for (int i = 0; i < spec.n_paths; ++i) {
    PathDraw path;
    for (int m = 0; m < spec.ops_per_path; ++m) {
      const GeoOp op = kAllGeoOps[std::uniform_int_distribution<int>(0, kOpCount - 1)(rng)];
      path.ops.push_back({op, sample_magnitude(op, spec.ranges, rng)});
    }
    path.depth = std::uniform_int_distribution<int>(1, spec.ops_per_path)(rng);
    d.paths.push_back(std::move(path));
  }
  d.blend = sample_beta(spec.beta_a, spec.beta_b, rng);
  return d;
}

template <typename T>
Tensor<T> apply_path(const Tensor<T>& x, const PathDraw& path) {
  if (path.depth < 1 || path.depth > static_cast<int>(path.ops.size())) {
    throw ParameterError("path depth " + std::to_string(path.depth) + " outside 1.." +
                         std::to_string(path.ops.size()));
  }
  Tensor<T> cur = x;
  for (int i = 0; i < path.depth; ++i) cur = geometric_apply(cur, path.ops[i].op, path.ops[i].magnitude);
  return cur;
}

template <typename T>
Tensor<T> apply_rainmix(const Tensor<T>& x, const RainMixDraw& draw) {
  if (draw.weights.size() != draw.paths.size()) {
    throw ParameterError("rainmix draw has " + std::to_string(draw.weights.size()) +
                         " weights for " + std::to_string(draw.paths.size()) + " paths");
  }
  std::vector<T> mix(x.numel(), T(0));
  for (std::size_t i = 0; i < draw.paths.size(); ++i) {
    const Tensor<T> aug = apply_path(x, draw.paths[i]);
    const T wi = T(draw.weights[i]);
    const auto a = aug.data();
    for (std::size_t k = 0; k < mix.size(); ++k) mix[k] += wi * a[k];
  }
  const T w = T(draw.blend);
  const T rest = T(1) - w;
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  const auto in = x.data();
  for (std::size_t k = 0; k < mix.size(); ++k) {
    o[k] = std::clamp(w * in[k] + rest * mix[k], T(0), T(1));
  }
  return out;
}

template <typename T>
Tensor<T> rainmix(const Tensor<T>& x, const AugmentSpec& spec, CountingRng& rng) {
  return apply_rainmix(x, sample_rainmix_draw(spec, rng));
}

StreakParams StreakRanges::sample(CountingRng& rng) const {
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  StreakParams p;
  p.density = uniform(density_min, density_max);
  p.length = uniform(length_min, length_max);
  p.angle = uniform(angle_min, angle_max);
  p.width = uniform(width_min, width_max);
  return p;
}

template <typename T>
Tensor<T> synth_rain_streaks(int height, int width, const StreakParams& p, CountingRng& rng) {
  if (height < 1 || width < 1) {
    throw ShapeError("rain layer dims must be >= 1, got " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  if (!(p.density > 0) || p.density > 1) {
    throw ParameterError("streak density must be in (0, 1], got " + std::to_string(p.density));
  }
  if (!(p.length > 0) || !(p.width > 0)) {
    throw ParameterError("streak length and width must be > 0");
  }
  if (!(p.intensity_min >= 0) || !(p.intensity_max >= p.intensity_min)) {
    throw ParameterError("streak intensity range must satisfy 0 <= min <= max");
  }
  const auto count =
      static_cast<long>(std::floor(p.density * height * width / p.length));
  double sn, cs;
  sincos_deg(p.angle, sn, cs);
  const double sigma = p.width / 2.0;
  const double half = p.length / 2.0;
  const double reach_x = half * std::abs(cs) + 3 * sigma;
  const double reach_y = half * std::abs(sn) + 3 * sigma;
  std::vector<double> acc(static_cast<std::size_t>(height) * width, 0.0);
  std::uniform_real_distribution<double> ux(0.0, width), uy(0.0, height);
  std::uniform_real_distribution<double> ui(p.intensity_min, p.intensity_max);
  for (long k = 0; k < count; ++k) {
    const double cx = ux(rng);
    const double cy = uy(rng);
    const double amp = ui(rng);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach_x)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + reach_x)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach_y)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + reach_y)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double rx = x + 0.5 - cx;
        const double ry = y + 0.5 - cy;
        const double along = rx * cs + ry * sn;
        const double across = -rx * sn + ry * cs;
        const double over = std::max(0.0, std::abs(along) - half);
        const double v = amp * std::exp(-(across * across + over * over) / (2 * sigma * sigma));
        acc[static_cast<std::size_t>(y) * width + x] += v;
      }
    }
  }
  Tensor<T> out(Shape{1, 1, height, width});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < acc.size(); ++i) o[i] = T(std::clamp(acc[i], 0.0, 1.0));
  return out;
}

template <typename T>
Tensor<T> subtract_rain_layer(const Tensor<T>& rainy, const Tensor<T>& clean) {
  if (!(rainy.shape() == clean.shape())) {
    throw ShapeError("rain layer subtraction: rainy " + rainy.shape().str() + " vs clean " +
                     clean.shape().str());
  }
  const Shape s = rainy.shape();
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        T m = 0;
        for (int c = 0; c < s.c; ++c) {
          m = std::max(m, std::clamp(rainy.at(n, c, y, x) - clean.at(n, c, y, x), T(0), T(1)));
        }
        out.at(n, 0, y, x) = m;
      }
    }
  }
  return out;
}

template <typename T>
RainLayerSet<T> build_rain_layer_set(const std::vector<std::pair<Tensor<T>, Tensor<T>>>& pairs,
                                     int synth_count, CountingRng& rng,
                                     const StreakRanges& ranges, int height, int width) {
  if (synth_count < 0) throw ParameterError("synth_count must be >= 0");
  RainLayerSet<T> set;
  for (const auto& [rainy, clean] : pairs) {
    set.push_back({subtract_rain_layer(rainy, clean), RainSource::kSubtracted});
  }
  if (synth_count > 0) {
    if (!pairs.empty()) {
      height = pairs.front().first.shape().h;
      width = pairs.front().first.shape().w;
    }
    if (height < 1 || width < 1) {
      throw ShapeError("synthetic rain layers need a size when no pairs are given");
    }
    for (int i = 0; i < synth_count; ++i) {
      const StreakParams p = ranges.sample(rng);
      set.push_back({synth_rain_streaks<T>(height, width, p, rng), RainSource::kSynthetic});
    }
  }
  return set;
}

template <typename T>
Tensor<T> compose_rainy(const Tensor<T>& background, const Tensor<T>& rain) {
  const Shape b = background.shape();
  const Shape r = rain.shape();
  if (r.c != 1 || r.h != b.h || r.w != b.w || (r.n != 1 && r.n != b.n)) {
    throw ShapeError("compose_rainy: rain " + r.str() + " does not fit background " + b.str());
  }
  Tensor<T> out(b);
  for (int n = 0; n < b.n; ++n) {
    const T* rp = rain.ptr() + rain.index(r.n == 1 ? 0 : n, 0, 0, 0);
    for (int c = 0; c < b.c; ++c) {
      const T* bp = background.ptr() + background.index(n, c, 0, 0);
      T* op = out.mutable_data().data() + out.index(n, c, 0, 0);
      for (std::size_t i = 0; i < b.plane(); ++i) op[i] = std::clamp(bp[i] + rp[i], T(0), T(1));
    }
  }
  return out;
}

#define DERAIN_INSTANTIATE_RAINMIX(T)                                                          \
  template Tensor<T> geometric_apply(const Tensor<T>&, GeoOp, double, const MagnitudeRanges*); \
  template Tensor<T> apply_path(const Tensor<T>&, const PathDraw&);                            \
  template Tensor<T> apply_rainmix(const Tensor<T>&, const RainMixDraw&);                      \
  template Tensor<T> rainmix(const Tensor<T>&, const AugmentSpec&, CountingRng&);              \
  template Tensor<T> synth_rain_streaks(int, int, const StreakParams&, CountingRng&);          \
  template Tensor<T> subtract_rain_layer(const Tensor<T>&, const Tensor<T>&);                  \
  template RainLayerSet<T> build_rain_layer_set(                                               \
      const std::vector<std::pair<Tensor<T>, Tensor<T>>>&, int, CountingRng&,                  \
      const StreakRanges&, int, int);                                                          \
  template Tensor<T> compose_rainy(const Tensor<T>&, const Tensor<T>&);

DERAIN_INSTANTIATE_RAINMIX(float)
DERAIN_INSTANTIATE_RAINMIX(double)

}  // namespace derain
