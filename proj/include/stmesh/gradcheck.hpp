#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stmesh/ops.hpp"

namespace stmesh {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst;  // "<input>[<index>]" of the largest error
  bool passed = true;
};

using NamedTensor = std::pair<std::string, Tensor<double>>;

// Compares reverse-mode gradients of the scalar `f` against central
// differences. Relative error per coordinate: |a - n| / (|a| + 1e-8).
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::vector<NamedTensor> inputs,
                                  const GradCheckOptions& opt = {}) {
  for (auto& [name, t] : inputs) t.set_requires_grad(true);
  std::vector<std::vector<double>> analytic;
  {
    GradTape<double> tape;
    Tensor<double> loss = f();
    tape.backward(loss);
    for (auto& [name, t] : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  }
  std::mt19937_64 rng(opt.seed);
  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& [name, t] = inputs[k];
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_input > 0 && coords.size() > opt.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_input);
    }
    for (std::size_t i : coords) {
      const double orig = t[i];
      t[i] = orig + opt.step;
      const double fp = f().item();
      t[i] = orig - opt.step;
      const double fm = f().item();
      t[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / (std::abs(a) + 1e-8);
      ++res.coords_checked;
      if (!(rel <= res.max_rel_error)) {
        res.max_rel_error = std::isnan(rel) ? INFINITY : rel;
        res.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (auto& [name, t] : inputs) t.set_requires_grad(false);
  res.passed = res.max_rel_error < opt.tolerance;
  return res;
}

// Uniform(-1, 1) tensor from a seeded engine.
template <class T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

// Scalar projection sum(x * w) with fixed random weights; gives every output
// element an O(1) influence on the checked scalar.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& x, const Tensor<T>& w) {
  return sum(mul(x, w));
}

}  // namespace stmesh
