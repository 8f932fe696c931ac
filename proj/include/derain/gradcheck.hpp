#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "derain/tensor.hpp"

namespace derain {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool finite = true;

  bool passed(double tolerance) const { return finite && max_rel_error < tolerance; }
};

/// Compares the tape gradient of a scalar function against central
/// differences at up to `max_samples` coordinates of `x`.
///
/// `f` must build its result from its argument (and anything else it closes
/// over) using recorded ops. The error at a coordinate is
/// |analytic - numeric| / max(1, |numeric|). Non-finite values anywhere are
/// reported through `finite`, never thrown.
inline GradCheckResult finite_difference_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x, double eps,
    std::size_t max_samples = 64, std::uint64_t seed = 0) {
  GradCheckResult result;
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> y = f(x);
    if (!std::isfinite(y.item())) {
      result.finite = false;
      return result;
    }
    tape.backward(y);
  }
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (coords.size() > max_samples) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_samples);
  }

  NoGradScope<double> no_grad;
  auto values = x.mutable_data();
  for (std::size_t i : coords) {
    const double orig = values[i];
    values[i] = orig + eps;
    const double up = f(x).item();
    values[i] = orig - eps;
    const double down = f(x).item();
    values[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[i])) {
      result.finite = false;
      continue;
    }
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    result.max_rel_error = std::max(result.max_rel_error, err);
    ++result.checked;
  }
  x.zero_grad();
  return result;
}

}  // namespace derain
