#pragma once

// Central finite-difference checks of tape gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "modrank/tensor.hpp"

namespace modrank::testing {

struct Coordinate {
  std::size_t leaf = 0;
  std::size_t index = 0;
};

struct GradMismatch {
  Coordinate at;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckResult {
  std::size_t checked = 0;
  double worst_rel_error = 0.0;
  std::vector<GradMismatch> failures;
};

/// |a − n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// `loss` must rebuild the scalar loss from the current leaf values. `floor`
/// bounds the denominator of the relative error from below.
inline GradCheckResult grad_check(std::vector<Tensor> leaves, const std::function<Tensor()>& loss,
                                  const std::vector<Coordinate>& coords, double step = 1e-5, double tol = 1e-4,
                                  double floor = 1e-6) {
  for (auto& t : leaves) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    tape.backward(loss());
  }
  for (auto& t : leaves) {
    const auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
  }
  GradCheckResult result;
  for (const auto& c : coords) {
    auto data = leaves[c.leaf].mutable_data();
    const double saved = data[c.index];
    data[c.index] = saved + step;
    const double up = loss().item();
    data[c.index] = saved - step;
    const double down = loss().item();
    data[c.index] = saved;
    const double numeric = (up - down) / (2 * step);
    const double a = analytic[c.leaf][c.index];
    const double rel = relative_error(a, numeric, floor);
    result.worst_rel_error = std::max(result.worst_rel_error, rel);
    ++result.checked;
    if (!(rel < tol)) result.failures.push_back({c, a, numeric, rel});
  }
  for (auto& t : leaves) {
    t.zero_grad();
    t.set_requires_grad(false);
  }
  return result;
}

/// `per_leaf` coordinates drawn uniformly from each leaf.
inline std::vector<Coordinate> sample_coordinates(const std::vector<Tensor>& leaves, std::size_t per_leaf,
                                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Coordinate> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    std::uniform_int_distribution<std::size_t> pick(0, leaves[l].numel() - 1);
    for (std::size_t i = 0; i < std::min(per_leaf, leaves[l].numel()); ++i) coords.push_back({l, pick(rng)});
  }
  return coords;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.mutable_data()) v = n(rng);
  return t;
}

}  // namespace modrank::testing
