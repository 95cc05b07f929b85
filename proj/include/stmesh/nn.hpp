#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stmesh/ops.hpp"

namespace stmesh {

// Named trainable tensors in registration order. Holds handles, so modules
// and the set see the same storage.
template <class T>
class ParamSet {
 public:
  Tensor<T> add(std::string name, Tensor<T> t) {
    for (const auto& [n, _] : items_) {
      if (n == name) throw UsageError("duplicate parameter name " + name);
    }
    t.set_requires_grad(true);
    items_.emplace_back(std::move(name), t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.numel();
    return n;
  }

  Tensor<T> find(const std::string& name) const {
    for (const auto& [n, t] : items_) {
      if (n == name) return t;
    }
    throw UsageError("no parameter named " + name);
  }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
};

template <class T>
Tensor<T> uniform_init(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

// y = x W + b with W: [in, out].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(ParamSet<T>& params, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
         bool with_bias = true) {
    weight = params.add(name + ".weight", uniform_init<T>({in, out}, in, rng));
    if (with_bias) bias = params.add(name + ".bias", uniform_init<T>({out}, in, rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.size(0); }
  std::size_t out_features() const { return weight.size(1); }
};

template <class T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(ParamSet<T>& params, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         std::size_t stride_, std::size_t padding_, std::mt19937_64& rng)
      : stride(stride_), padding(padding_) {
    const std::size_t fan_in = in * kernel * kernel;
    weight = params.add(name + ".weight", uniform_init<T>({out, in, kernel, kernel}, fan_in, rng));
    bias = params.add(name + ".bias", uniform_init<T>({out}, fan_in, rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(ParamSet<T>& params, const std::string& name, std::size_t width) {
    gamma = params.add(name + ".gamma", Tensor<T>::ones({width}));
    beta = params.add(name + ".beta", Tensor<T>::zeros({width}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

// Heavy-ball gradient descent: v <- mu v + g; p <- p - lr v.
template <class T>
class MomentumSgd {
 public:
  MomentumSgd(T lr, T momentum) : lr_(lr), momentum_(momentum) {}

  void step(ParamSet<T>& params) {
    const auto& items = params.items();
    if (velocity_.empty()) {
      for (const auto& [_, t] : items) velocity_.emplace_back(t.numel(), T(0));
    }
    if (velocity_.size() != items.size()) throw UsageError("optimizer bound to a different parameter set");
    for (std::size_t k = 0; k < items.size(); ++k) {
      Tensor<T> p = items[k].second;
      auto& v = velocity_[k];
      auto g = p.grad();
      auto d = p.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        d[i] -= lr_ * v[i];
      }
    }
    ++steps_;
  }

  T lr() const { return lr_; }
  T momentum() const { return momentum_; }
  std::size_t steps() const { return steps_; }

 private:
  T lr_;
  T momentum_;
  std::size_t steps_ = 0;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace stmesh
