#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stmesh/errors.hpp"

namespace stmesh {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// 64-byte aligned storage. Vectorized reductions peel according to the
// buffer address, so fixed alignment keeps results bitwise reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

inline bool& finite_check_flag() {
  static bool enabled = false;
  return enabled;
}

}  // namespace detail

// Debug mode: every op scans its output and throws NumericError on NaN/Inf.
inline void set_check_finite(bool enabled) { detail::finite_check_flag() = enabled; }
inline bool check_finite_enabled() { return detail::finite_check_flag(); }

// Dense row-major array with optional gradient. Copies of a Tensor share the
// same storage (handle semantics); use clone()/detach() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, Buffer<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }
  Tensor(Shape shape, const std::vector<T>& values) : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end())) {}
  Tensor(Shape shape, std::initializer_list<T> values) : Tensor(std::move(shape), Buffer<T>(values)) {}

  static Tensor scalar(T value) { return Tensor(Shape{}, value); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  // Extent along `axis`; negative axes count from the back.
  std::size_t size(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  Buffer<T>& values() { return node_->data; }
  const Buffer<T>& values() const { return node_->data; }

  bool has_grad() const { return node_ && node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor(shape(), T(0));
    return Tensor(shape(), node_->grad);
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
    else node_->grad.clear();
    return *this;
  }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), T(0));
  }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank mismatch");
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : index) {
      if (i >= node_->shape[d]) throw DimensionError("index out of bounds");
      off = off * node_->shape[d] + i;
      ++d;
    }
    return off;
  }
  T& at(std::initializer_list<std::size_t> index) { return node_->data[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const { return node_->data[offset(index)]; }

  Tensor clone() const { return Tensor(shape(), node_->data); }
  Tensor detach() const { return clone(); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

// Record of executed differentiable ops for one thread. Constructing a tape
// makes it the active tape of the calling thread until it is destroyed;
// tapes nest. Ops record themselves only when a tape is active and at least
// one input requires a gradient.
template <class T>
class GradTape {
 public:
  using Backward = std::function<void()>;

  GradTape() : previous_(current_) { current_ = this; }
  ~GradTape() { current_ = previous_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return current_; }

  void record(std::string_view name, std::shared_ptr<detail::Node<T>> out, Backward backward) {
    entries_.push_back(Entry{std::string(name), std::move(out), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> op_names() const {
    std::vector<std::string> names;
    names.reserve(entries_.size());
    for (const auto& e : entries_) names.push_back(e.name);
    return names;
  }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse execution
  // order. Intermediate gradients are reset first; leaf gradients accumulate
  // across calls.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw UsageError("backward() needs a scalar loss, got shape " +
                       (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    std::size_t end = entries_.size();
    while (end > 0 && entries_[end - 1].out != loss.node()) --end;
    if (end == 0) throw UsageError("backward(): loss was not produced under this tape");
    for (std::size_t i = 0; i < end; ++i) {
      auto& n = *entries_[i].out;
      n.grad.assign(n.data.size(), T(0));
    }
    loss.node()->grad[0] += T(1);
    for (std::size_t i = end; i-- > 0;) entries_[i].backward();
  }

 private:
  struct Entry {
    std::string name;
    std::shared_ptr<detail::Node<T>> out;
    Backward backward;
  };

  std::vector<Entry> entries_;
  GradTape* previous_;
  static inline thread_local GradTape* current_ = nullptr;
};

template <class T>
void backward(const Tensor<T>& loss) {
  auto* tape = GradTape<T>::active();
  if (tape == nullptr) throw UsageError("backward() called without an active GradTape");
  tape->backward(loss);
}

namespace detail {

// Returns the tape an op should record on, or nullptr.
template <class T, class... Ts>
GradTape<T>* tape_for(const Tensor<T>& first, const Ts&... rest) {
  auto* tape = GradTape<T>::active();
  if (tape == nullptr) return nullptr;
  const bool any = first.requires_grad() || (rest.requires_grad() || ...);
  return any ? tape : nullptr;
}

template <class T>
GradTape<T>* tape_for_list(const std::vector<Tensor<T>>& inputs) {
  auto* tape = GradTape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return tape;
  }
  return nullptr;
}

template <class T>
void mark_output(Tensor<T>& out) {
  out.node()->requires_grad = true;
  out.node()->ensure_grad();
}

template <class T>
void check_finite(const Tensor<T>& out, std::string_view op) {
  if (!check_finite_enabled()) return;
  for (T v : out.data()) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + std::string(op));
  }
}

// Adds `values` into the gradient of `node` when it tracks one.
template <class T>
void accumulate(Node<T>& node, std::size_t i, T value) {
  if (node.requires_grad) node.grad[i] += value;
}

}  // namespace detail

}  // namespace stmesh
