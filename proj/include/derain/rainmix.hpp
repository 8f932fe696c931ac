#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "derain/rng.hpp"
#include "derain/tensor.hpp"

namespace derain {

enum class GeoOp { kRotate, kShearX, kShearY, kTranslateX, kTranslateY, kZoomX, kZoomY };

inline constexpr GeoOp kAllGeoOps[] = {GeoOp::kRotate,     GeoOp::kShearX,     GeoOp::kShearY,
                                       GeoOp::kTranslateX, GeoOp::kTranslateY, GeoOp::kZoomX,
                                       GeoOp::kZoomY};

/// Names: rot, shear_x, shear_y, trans_x, trans_y, zoom_x, zoom_y.
std::string to_string(GeoOp op);
/// Throws ParameterError for unknown names.
GeoOp geo_op_from_string(const std::string& name);

/// Sampling ranges. Rotation in degrees, shear as a slope, translation as a
/// fraction of the image side, zoom as a scale factor per axis.
struct MagnitudeRanges {
  double rotate_deg = 30.0;
  double shear = 0.3;
  double translate = 0.25;
  double zoom_min = 0.7;
  double zoom_max = 1.4;

  /// Whether `magnitude` is inside the range configured for `op`.
  bool contains(GeoOp op, double magnitude) const;
  void validate() const;
  bool operator==(const MagnitudeRanges&) const = default;
};

/// Affine warp about the image center with bilinear sampling and replicate
/// border. Output pixel p samples the input at A^-1 (p - c) + c, so
/// rotation by +90 degrees maps out[y][x] = in[x][W-1-y] on square images.
/// When `ranges` is given, magnitudes outside it are rejected.
template <typename T>
Tensor<T> geometric_apply(const Tensor<T>& x, GeoOp op, double magnitude,
                          const MagnitudeRanges* ranges = nullptr);

struct AugmentSpec {
  int n_paths = 4;
  int ops_per_path = 3;
  double dirichlet_alpha = 1.0;
  double beta_a = 1.0;
  double beta_b = 1.0;
  MagnitudeRanges ranges;

  void validate() const;
  bool operator==(const AugmentSpec&) const = default;
};

struct OpDraw {
  GeoOp op;
  double magnitude;
};

/// One mixing path: M sampled ops, of which the first `depth` are composed.
struct PathDraw {
  std::vector<OpDraw> ops;
  int depth = 1;
};

struct RainMixDraw {
  std::vector<double> weights;
  std::vector<PathDraw> paths;
  double blend = 1.0;
};

double sample_gamma(double shape, CountingRng& rng);
std::vector<double> sample_dirichlet(int n, double alpha, CountingRng& rng);
double sample_beta(double a, double b, CountingRng& rng);
double sample_magnitude(GeoOp op, const MagnitudeRanges& ranges, CountingRng& rng);

/// Samples, in order: Dirichlet weights, then per path M ops and the prefix
/// depth, then the Beta blend weight.
RainMixDraw sample_rainmix_draw(const AugmentSpec& spec, CountingRng& rng);

/// Applies a path's composed prefix o_depth ... o_1 to x.
template <typename T>
Tensor<T> apply_path(const Tensor<T>& x, const PathDraw& path);

/// w * x + (1 - w) * sum_i w_i * path_i(x), clamped to [0, 1].
template <typename T>
Tensor<T> apply_rainmix(const Tensor<T>& x, const RainMixDraw& draw);

template <typename T>
Tensor<T> rainmix(const Tensor<T>& x, const AugmentSpec& spec, CountingRng& rng);

enum class RainSource { kSubtracted, kSynthetic };

template <typename T>
struct RainLayer {
  Tensor<T> layer;  // (1, 1, H, W), values in [0, 1]
  RainSource source;
};

template <typename T>
using RainLayerSet = std::vector<RainLayer<T>>;

/// Parameters of one procedural streak layer.
struct StreakParams {
  double density = 0.05;  // streak pixels per image pixel, in (0, 1]
  double length = 12.0;   // pixels
  double angle = 80.0;    // degrees; 0 is horizontal, 90 vertical
  double width = 1.2;     // pixels, full width of the Gaussian profile
  double intensity_min = 0.4;
  double intensity_max = 0.9;
};

/// Ranges the synthetic layers of a layer set are drawn from.
struct StreakRanges {
  double density_min = 0.02, density_max = 0.08;
  double length_min = 6.0, length_max = 20.0;
  double angle_min = 60.0, angle_max = 120.0;
  double width_min = 0.8, width_max = 1.8;

  StreakParams sample(CountingRng& rng) const;
};

/// Motion-blurred line segments with a Gaussian cross profile, summed and
/// clamped to [0, 1]. floor(density * H * W / length) streaks are drawn one
/// after another, so a denser layer from the same seed contains every
/// streak of a sparser one.
template <typename T>
Tensor<T> synth_rain_streaks(int height, int width, const StreakParams& params, CountingRng& rng);

/// Single-channel rain layer max_c clamp(rainy - clean, 0, 1).
template <typename T>
Tensor<T> subtract_rain_layer(const Tensor<T>& rainy, const Tensor<T>& clean);

/// One subtracted layer per pair plus `synth_count` procedural layers sized
/// like the first pair (or `height` x `width` when there are no pairs).
template <typename T>
RainLayerSet<T> build_rain_layer_set(const std::vector<std::pair<Tensor<T>, Tensor<T>>>& pairs,
                                     int synth_count, CountingRng& rng,
                                     const StreakRanges& ranges = {}, int height = 0,
                                     int width = 0);

/// clamp(background + rain, 0, 1) with the rain broadcast over channels.
/// rain is (1, 1, H, W) or (N, 1, H, W).
template <typename T>
Tensor<T> compose_rainy(const Tensor<T>& background, const Tensor<T>& rain);

}  // namespace derain
