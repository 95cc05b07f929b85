#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "stmesh/tensor.hpp"

namespace stmesh {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// (outer, extent, inner) split of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `in` laid against `out`, zero on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    const std::size_t o = k + (r - in.size());
    strides[o] = in[k] == 1 ? 0 : stride;
    stride *= in[k];
  }
  return strides;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  const std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

inline const char* binary_name(BinaryKind k) {
  switch (k) {
    case BinaryKind::kAdd: return "add";
    case BinaryKind::kSub: return "sub";
    case BinaryKind::kMul: return "mul";
    case BinaryKind::kDiv: return "div";
  }
  return "?";
}

template <BinaryKind K, class T>
inline T apply_binary(T a, T b) {
  if constexpr (K == BinaryKind::kAdd) return a + b;
  if constexpr (K == BinaryKind::kSub) return a - b;
  if constexpr (K == BinaryKind::kMul) return a * b;
  if constexpr (K == BinaryKind::kDiv) return a / b;
}

template <BinaryKind K, class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  Shape out_shape = same ? a.shape() : broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(out_shape);
  auto& o = out.node()->data;
  const auto& av = a.node()->data;
  const auto& bv = b.node()->data;
  std::vector<std::size_t> sa, sb;
  if (same) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = apply_binary<K>(av[i], bv[i]);
  } else {
    sa = broadcast_strides(a.shape(), out_shape);
    sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      o[i] = apply_binary<K>(av[ia], bv[ib]);
    });
  }
  check_finite(out, binary_name(K));
  if (auto* tape = tape_for(a, b)) {
    mark_output(out);
    tape->record(binary_name(K), out.node(), [an = a.node(), bn = b.node(), on = out.node(), same, sa, sb] {
      const auto& g = on->grad;
      const auto& av = an->data;
      const auto& bv = bn->data;
      auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
        const T gi = g[i];
        if constexpr (K == BinaryKind::kAdd) {
          accumulate(*an, ia, gi);
          accumulate(*bn, ib, gi);
        } else if constexpr (K == BinaryKind::kSub) {
          accumulate(*an, ia, gi);
          accumulate(*bn, ib, -gi);
        } else if constexpr (K == BinaryKind::kMul) {
          accumulate(*an, ia, gi * bv[ib]);
          accumulate(*bn, ib, gi * av[ia]);
        } else {
          accumulate(*an, ia, gi / bv[ib]);
          accumulate(*bn, ib, -gi * av[ia] / (bv[ib] * bv[ib]));
        }
      };
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) step(i, i, i);
      } else {
        for_each_broadcast(on->shape, sa, sb, step);
      }
    });
  }
  return out;
}

// Elementwise map with derivative expressed through input x and output y.
template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(xv[i]);
  check_finite(out, name);
  if (auto* tape = tape_for(x)) {
    mark_output(out);
    tape->record(name, out.node(), [xn = x.node(), on = out.node(), deriv] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        xn->grad[i] += on->grad[i] * deriv(xn->data[i], on->data[i]);
      }
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy broadcasting)

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary<detail::BinaryKind::kAdd>(a, b); }
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary<detail::BinaryKind::kSub>(a, b); }
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary<detail::BinaryKind::kMul>(a, b); }
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary<detail::BinaryKind::kDiv>(a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, T s) { return scale(a, s); }
template <class T> Tensor<T> operator*(T s, const Tensor<T>& a) { return scale(a, s); }
template <class T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }
template <class T> Tensor<T> operator-(const Tensor<T>& a) { return scale(a, T(-1)); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Subgradient 0 at the origin.
template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      x, "abs", [](T v) { return std::abs(v); }, [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, "relu", [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid",
      [](T v) { return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// tanh approximation of GELU. Evaluated with Eigen array kernels; tanh is
// written through exp so both precisions vectorize.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using ConstArrMap = Eigen::Map<const Arr>;
  using ArrMap = Eigen::Map<Arr>;
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T a = T(0.044715);
  const auto n = static_cast<Eigen::Index>(x.numel());
  auto tanh_of = [](const ConstArrMap& v) -> Arr {
    const Arr u = c * (v + a * v.cube());
    return T(1) - T(2) / ((T(2) * u).exp() + T(1));
  };
  Tensor<T> out(x.shape());
  const ConstArrMap xv(x.node()->data.data(), n);
  ArrMap(out.node()->data.data(), n) = T(0.5) * xv * (T(1) + tanh_of(xv));
  detail::check_finite(out, "gelu");
  if (auto* tape = detail::tape_for(x)) {
    detail::mark_output(out);
    tape->record("gelu", out.node(), [xn = x.node(), on = out.node(), n, tanh_of] {
      const ConstArrMap v(xn->data.data(), n);
      const Arr t = tanh_of(v);
      ArrMap(xn->grad.data(), n) +=
          ConstArrMap(on->grad.data(), n) *
          (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) * c * (T(1) + T(3) * a * v.square()));
    });
  }
  return out;
}

// Gradient is zero where the value is clamped.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, "clamp", [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// acos(c)^2, the squared rotation angle as a function of (trace(R) - 1) / 2.
// Input is clamped to [-1, 1]; the derivative uses its limit -2 at c = 1 and
// is held finite near c = -1 (angle pi).
template <class T>
Tensor<T> acos_squared(const Tensor<T>& x) {
  return detail::unary(
      x, "acos_squared",
      [](T v) {
        const T c = std::clamp(v, T(-1), T(1));
        const T a = std::acos(c);
        return a * a;
      },
      [](T v, T) {
        const T c = std::clamp(v, T(-1) + T(1e-6), T(1));
        const T s2 = T(1) - c * c;
        if (s2 < T(1e-10)) {
          // acos(c) ~ sqrt(2(1-c)); acos(c)/sqrt(1-c^2) -> 1 + (1-c)/3
          return T(-2) * (T(1) + (T(1) - c) / T(3));
        }
        return T(-2) * std::acos(c) / std::sqrt(s2);
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::check_finite(out, "sum");
  if (auto* tape = detail::tape_for(x)) {
    detail::mark_output(out);
    tape->record("sum", out.node(), [xn = x.node(), on = out.node()] {
      const T g = on->grad[0];
      for (auto& gi : xn->grad) gi += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Tensor<T> out(out_shape);
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t a = 0; a < sp.outer; ++a) {
    for (std::size_t k = 0; k < sp.extent; ++k) {
      const T* src = xv.data() + (a * sp.extent + k) * sp.inner;
      T* dst = o.data() + a * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  detail::check_finite(out, "sum_axis");
  if (auto* tape = detail::tape_for(x)) {
    detail::mark_output(out);
    tape->record("sum_axis", out.node(), [xn = x.node(), on = out.node(), sp] {
      for (std::size_t a = 0; a < sp.outer; ++a) {
        for (std::size_t k = 0; k < sp.extent; ++k) {
          T* dst = xn->grad.data() + (a * sp.extent + k) * sp.inner;
          const T* g = on->grad.data() + a * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t n = x.size(axis);
  if (n == 0) throw DimensionError("mean over empty axis");
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(n));
}

// Euclidean norm along `axis`; subgradient 0 where the norm is 0.
template <class T>
Tensor<T> norm(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Tensor<T> out(out_shape);
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t a = 0; a < sp.outer; ++a) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      T acc = 0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const T v = xv[(a * sp.extent + k) * sp.inner + i];
        acc += v * v;
      }
      o[a * sp.inner + i] = std::sqrt(acc);
    }
  }
  detail::check_finite(out, "norm");
  if (auto* tape = detail::tape_for(x)) {
    detail::mark_output(out);
    tape->record("norm", out.node(), [xn = x.node(), on = out.node(), sp] {
      for (std::size_t a = 0; a < sp.outer; ++a) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const T n = on->data[a * sp.inner + i];
          if (n == T(0)) continue;
          const T g = on->grad[a * sp.inner + i] / n;
          for (std::size_t k = 0; k < sp.extent; ++k) {
            const std::size_t idx = (a * sp.extent + k) * sp.inner + i;
            xn->grad[idx] += g * xn->data[idx];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), x.node()->data);
  if (auto* tape = detail::tape_for(x)) {
    detail::mark_output(out);
    tape->record("reshape", out.node(), [xn = x.node(), on = out.node()] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r), src_strides(r);
  std::size_t stride = 1;
  for (std::size_t d = r; d-- > 0;) {
    in_strides[d] = stride;
    stride *= x.shape()[d];
  }
  for (std::size_t d = 0; d < r; ++d) {
    out_shape[d] = x.shape()[perm[d]];
    src_strides[d] = in_strides[perm[d]];
  }
  Tensor<T> out(out_shape);
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  const std::vector<std::size_t> zero(r, 0);
  detail::for_each_broadcast(out_shape, src_strides, zero,
                             [&](std::size_t i, std::size_t is, std::size_t) { o[i] = xv[is]; });
  if (auto* tape = detail::tape_for(x)) {
    detail::mark_output(out);
    tape->record("permute", out.node(), [xn = x.node(), on = out.node(), src_strides, zero] {
      detail::for_each_broadcast(on->shape, src_strides, zero,
                                 [&](std::size_t i, std::size_t is, std::size_t) { xn->grad[is] += on->grad[i]; });
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, int axis0 = -2, int axis1 = -1) {
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[detail::norm_axis(axis0, x.rank())], perm[detail::norm_axis(axis1, x.rank())]);
  return permute(x, perm);
}

// Half-open range [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  if (begin > end || end > sp.extent) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of extent " +
                         std::to_string(sp.extent));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t len = (end - begin) * sp.inner;
  for (std::size_t a = 0; a < sp.outer; ++a) {
    const T* src = x.node()->data.data() + (a * sp.extent + begin) * sp.inner;
    std::copy(src, src + len, out.node()->data.data() + a * len);
  }
  if (auto* tape = detail::tape_for(x)) {
    detail::mark_output(out);
    tape->record("slice", out.node(), [xn = x.node(), on = out.node(), sp, begin, len] {
      for (std::size_t a = 0; a < sp.outer; ++a) {
        T* dst = xn->grad.data() + (a * sp.extent + begin) * sp.inner;
        const T* g = on->grad.data() + a * len;
        for (std::size_t i = 0; i < len; ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t ax = detail::norm_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      if (d != ax && p.shape()[d] != parts[0].shape()[d]) {
        throw DimensionError("concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
      }
    }
    out_shape[ax] += p.shape()[ax];
  }
  Tensor<T> out(out_shape);
  const auto osp = detail::split_at(out_shape, ax);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.shape()[ax] * osp.inner;
    for (std::size_t a = 0; a < osp.outer; ++a) {
      const T* src = p.node()->data.data() + a * len;
      std::copy(src, src + len, out.node()->data.data() + (a * osp.extent + off) * osp.inner);
    }
    off += p.shape()[ax];
  }
  if (auto* tape = detail::tape_for_list(parts)) {
    detail::mark_output(out);
    std::vector<std::shared_ptr<detail::Node<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape->record("concat", out.node(), [nodes, on = out.node(), offsets, osp, ax] {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        auto& n = *nodes[k];
        if (!n.requires_grad) continue;
        const std::size_t len = n.shape[ax] * osp.inner;
        for (std::size_t a = 0; a < osp.outer; ++a) {
          const T* g = on->grad.data() + (a * osp.extent + offsets[k]) * osp.inner;
          T* dst = n.grad.data() + a * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> unsqueeze(const Tensor<T>& x, int axis) {
  Shape s = x.shape();
  const int r = static_cast<int>(s.size()) + 1;
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("unsqueeze axis out of range");
  s.insert(s.begin() + a, 1);
  return reshape(x, s);
}

template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts, int axis) {
  std::vector<Tensor<T>> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) expanded.push_back(unsqueeze(p, axis));
  return concat(expanded, axis);
}

// Gathers entries along `axis`; indices may repeat (gradients add up).
template <class T>
Tensor<T> index_select(const Tensor<T>& x, int axis, const std::vector<std::size_t>& indices) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  for (std::size_t i : indices) {
    if (i >= sp.extent) throw DomainError("index_select: index " + std::to_string(i) + " out of extent " + std::to_string(sp.extent));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = indices.size();
  Tensor<T> out(out_shape);
  const std::size_t n = indices.size();
  for (std::size_t a = 0; a < sp.outer; ++a) {
    for (std::size_t k = 0; k < n; ++k) {
      const T* src = x.node()->data.data() + (a * sp.extent + indices[k]) * sp.inner;
      std::copy(src, src + sp.inner, out.node()->data.data() + (a * n + k) * sp.inner);
    }
  }
  if (auto* tape = detail::tape_for(x)) {
    detail::mark_output(out);
    tape->record("index_select", out.node(), [xn = x.node(), on = out.node(), sp, indices] {
      const std::size_t n = indices.size();
      for (std::size_t a = 0; a < sp.outer; ++a) {
        for (std::size_t k = 0; k < n; ++k) {
          T* dst = xn->grad.data() + (a * sp.extent + indices[k]) * sp.inner;
          const T* g = on->grad.data() + (a * n + k) * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

// a: [..., M, K], b: [..., K, N]. Batch extents must match, or one operand
// must be a plain matrix that is broadcast over the other's batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul needs rank >= 2 operands");
  const std::size_t M = a.size(-2), K = a.size(-1), Kb = b.size(-2), N = b.size(-1);
  if (K != Kb) {
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  enum class Mode { kFlatA, kBroadcastA, kPaired } mode;
  Shape out_shape;
  std::size_t batch = 1;
  if (b_batch.empty()) {
    mode = Mode::kFlatA;
    out_shape = a_batch;
    batch = shape_numel(a_batch);
  } else if (a_batch.empty()) {
    mode = Mode::kBroadcastA;
    out_shape = b_batch;
    batch = shape_numel(b_batch);
  } else if (a_batch == b_batch) {
    mode = Mode::kPaired;
    out_shape = a_batch;
    batch = shape_numel(a_batch);
  } else {
    throw DimensionError("matmul batch extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<T> out(out_shape);
  const auto Mi = static_cast<Eigen::Index>(M), Ki = static_cast<Eigen::Index>(K), Ni = static_cast<Eigen::Index>(N);
  const T* ap = a.node()->data.data();
  const T* bp = b.node()->data.data();
  T* op = out.node()->data.data();
  if (mode == Mode::kFlatA) {
    const auto rows = static_cast<Eigen::Index>(batch * M);
    MatMap<T>(op, rows, Ni).noalias() = ConstMatMap<T>(ap, rows, Ki) * ConstMatMap<T>(bp, Ki, Ni);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      const T* ai = mode == Mode::kBroadcastA ? ap : ap + i * M * K;
      MatMap<T>(op + i * M * N, Mi, Ni).noalias() = ConstMatMap<T>(ai, Mi, Ki) * ConstMatMap<T>(bp + i * K * N, Ki, Ni);
    }
  }
  detail::check_finite(out, "matmul");
  if (auto* tape = detail::tape_for(a, b)) {
    detail::mark_output(out);
    tape->record("matmul", out.node(), [an = a.node(), bn = b.node(), on = out.node(), mode, batch, Mi, Ki, Ni] {
      const T* g = on->grad.data();
      if (mode == Mode::kFlatA) {
        const auto rows = static_cast<Eigen::Index>(batch) * Mi;
        if (an->requires_grad) {
          MatMap<T>(an->grad.data(), rows, Ki).noalias() +=
              ConstMatMap<T>(g, rows, Ni) * ConstMatMap<T>(bn->data.data(), Ki, Ni).transpose();
        }
        if (bn->requires_grad) {
          MatMap<T>(bn->grad.data(), Ki, Ni).noalias() +=
              ConstMatMap<T>(an->data.data(), rows, Ki).transpose() * ConstMatMap<T>(g, rows, Ni);
        }
        return;
      }
      const std::size_t msz = static_cast<std::size_t>(Mi * Ki), ksz = static_cast<std::size_t>(Ki * Ni),
                        osz = static_cast<std::size_t>(Mi * Ni);
      for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t aoff = mode == Mode::kBroadcastA ? 0 : i * msz;
        const ConstMatMap<T> gi(g + i * osz, Mi, Ni);
        if (an->requires_grad) {
          MatMap<T>(an->grad.data() + aoff, Mi, Ki).noalias() +=
              gi * ConstMatMap<T>(bn->data.data() + i * ksz, Ki, Ni).transpose();
        }
        if (bn->requires_grad) {
          MatMap<T>(bn->grad.data() + i * ksz, Ki, Ni).noalias() +=
              ConstMatMap<T>(an->data.data() + aoff, Mi, Ki).transpose() * gi;
        }
      }
    });
  }
  return out;
}

// Cross product along a trailing axis of extent 3.
template <class T>
Tensor<T> cross(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() || a.rank() == 0 || a.size(-1) != 3) {
    throw DimensionError("cross needs equal shapes ending in 3, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel() / 3;
  const T* x = a.node()->data.data();
  const T* y = b.node()->data.data();
  T* o = out.node()->data.data();
  auto cross3 = [](const T* u, const T* v, T* w) {
    w[0] = u[1] * v[2] - u[2] * v[1];
    w[1] = u[2] * v[0] - u[0] * v[2];
    w[2] = u[0] * v[1] - u[1] * v[0];
  };
  for (std::size_t i = 0; i < n; ++i) cross3(x + 3 * i, y + 3 * i, o + 3 * i);
  if (auto* tape = detail::tape_for(a, b)) {
    detail::mark_output(out);
    tape->record("cross", out.node(), [an = a.node(), bn = b.node(), on = out.node(), n, cross3] {
      T tmp[3];
      for (std::size_t i = 0; i < n; ++i) {
        const T* g = on->grad.data() + 3 * i;
        // d/da (a x b).g = b x g ; d/db = g x a
        if (an->requires_grad) {
          cross3(bn->data.data() + 3 * i, g, tmp);
          for (int k = 0; k < 3; ++k) an->grad[3 * i + k] += tmp[k];
        }
        if (bn->requires_grad) {
          cross3(g, an->data.data() + 3 * i, tmp);
          for (int k = 0; k < 3; ++k) bn->grad[3 * i + k] += tmp[k];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neural-network primitives

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  Tensor<T> out(x.shape());
  const T* xv = x.node()->data.data();
  T* o = out.node()->data.data();
  for (std::size_t a = 0; a < sp.outer; ++a) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = a * sp.extent * sp.inner + i;
      T m = xv[base];
      for (std::size_t k = 1; k < sp.extent; ++k) m = std::max(m, xv[base + k * sp.inner]);
      T s = 0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const T e = std::exp(xv[base + k * sp.inner] - m);
        o[base + k * sp.inner] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (std::size_t k = 0; k < sp.extent; ++k) o[base + k * sp.inner] *= inv;
    }
  }
  detail::check_finite(out, "softmax");
  if (auto* tape = detail::tape_for(x)) {
    detail::mark_output(out);
    tape->record("softmax", out.node(), [xn = x.node(), on = out.node(), sp] {
      const T* y = on->data.data();
      const T* g = on->grad.data();
      T* dx = xn->grad.data();
      for (std::size_t a = 0; a < sp.outer; ++a) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = a * sp.extent * sp.inner + i;
          T dot = 0;
          for (std::size_t k = 0; k < sp.extent; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
          for (std::size_t k = 0; k < sp.extent; ++k) {
            const std::size_t idx = base + k * sp.inner;
            dx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Scaled dot-product attention, softmax(s * q k^T) v, over shared leading
// axes. q, k: [..., N, d], v: [..., N, dv]. Only the weights are kept for the
// backward pass; they are copied to *weights when requested.
template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T s, Tensor<T>* weights = nullptr) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (q.rank() < 2 || q.shape() != k.shape() || v.rank() != q.rank() ||
      !std::equal(q.shape().begin(), q.shape().end() - 1, v.shape().begin())) {
    throw DimensionError("attend: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
  }
  const std::size_t N = q.size(-2), d = q.size(-1), dv = v.size(-1);
  const std::size_t batch = q.numel() / std::max<std::size_t>(N * d, 1);
  Shape out_shape = v.shape();
  Shape w_shape(q.shape().begin(), q.shape().end() - 1);
  w_shape.push_back(N);
  Tensor<T> out(out_shape);
  auto w = std::make_shared<Buffer<T>>(batch * N * N);
  const auto Ni = static_cast<Eigen::Index>(N), di = static_cast<Eigen::Index>(d), dvi = static_cast<Eigen::Index>(dv);
  detail::RowMat<T> qs(Ni, di);
  for (std::size_t b = 0; b < batch; ++b) {
    MatMap<T> W(w->data() + b * N * N, Ni, Ni);
    qs = ConstMatMap<T>(q.node()->data.data() + b * N * d, Ni, di) * s;
    W.noalias() = qs * ConstMatMap<T>(k.node()->data.data() + b * N * d, Ni, di).transpose();
    for (Eigen::Index r = 0; r < Ni; ++r) {
      auto row = W.row(r).array();
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
    }
    MatMap<T>(out.node()->data.data() + b * N * dv, Ni, dvi).noalias() =
        W * ConstMatMap<T>(v.node()->data.data() + b * N * dv, Ni, dvi);
  }
  detail::check_finite(out, "attend");
  if (weights != nullptr) {
    *weights = Tensor<T>(w_shape);
    std::copy(w->begin(), w->end(), weights->node()->data.begin());
  }
  if (auto* tape = detail::tape_for(q, k, v)) {
    detail::mark_output(out);
    tape->record("attend", out.node(),
                 [qn = q.node(), kn = k.node(), vn = v.node(), on = out.node(), w, batch, Ni, di, dvi, s] {
                   detail::RowMat<T> dw(Ni, Ni);
                   const std::size_t nn = static_cast<std::size_t>(Ni * Ni), nd = static_cast<std::size_t>(Ni * di),
                                     ndv = static_cast<std::size_t>(Ni * dvi);
                   for (std::size_t b = 0; b < batch; ++b) {
                     const ConstMatMap<T> W(w->data() + b * nn, Ni, Ni);
                     const ConstMatMap<T> g(on->grad.data() + b * ndv, Ni, dvi);
                     if (vn->requires_grad) MatMap<T>(vn->grad.data() + b * ndv, Ni, dvi).noalias() += W.transpose() * g;
                     if (!qn->requires_grad && !kn->requires_grad) continue;
                     dw.noalias() = g * ConstMatMap<T>(vn->data.data() + b * ndv, Ni, dvi).transpose();
                     for (Eigen::Index r = 0; r < Ni; ++r) {
                       const T dot = dw.row(r).dot(W.row(r));
                       dw.row(r).array() = W.row(r).array() * (dw.row(r).array() - dot) * s;
                     }
                     if (qn->requires_grad) {
                       MatMap<T>(qn->grad.data() + b * nd, Ni, di).noalias() +=
                           dw * ConstMatMap<T>(kn->data.data() + b * nd, Ni, di);
                     }
                     if (kn->requires_grad) {
                       MatMap<T>(kn->grad.data() + b * nd, Ni, di).noalias() +=
                           dw.transpose() * ConstMatMap<T>(qn->data.data() + b * nd, Ni, di);
                     }
                   }
                 });
  }
  return out;
}

// Normalizes over the last axis with population variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() == 0) throw DimensionError("layer_norm on scalar");
  const std::size_t E = x.size(-1);
  if (gamma.numel() != E || beta.numel() != E) {
    throw DimensionError("layer_norm: last extent " + std::to_string(E) + " vs gamma/beta " +
                         std::to_string(gamma.numel()) + "/" + std::to_string(beta.numel()));
  }
  const std::size_t rows = x.numel() / E;
  Tensor<T> out(x.shape());
  Buffer<T> xhat(x.numel()), rstd(rows);
  const T* xv = x.node()->data.data();
  const T* gv = gamma.node()->data.data();
  const T* bv = beta.node()->data.data();
  T* o = out.node()->data.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * E;
    T mu = 0;
    for (std::size_t e = 0; e < E; ++e) mu += row[e];
    mu /= static_cast<T>(E);
    T var = 0;
    for (std::size_t e = 0; e < E; ++e) var += (row[e] - mu) * (row[e] - mu);
    var /= static_cast<T>(E);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t e = 0; e < E; ++e) {
      const T h = (row[e] - mu) * rs;
      xhat[r * E + e] = h;
      o[r * E + e] = h * gv[e] + bv[e];
    }
  }
  detail::check_finite(out, "layer_norm");
  if (auto* tape = detail::tape_for(x, gamma, beta)) {
    detail::mark_output(out);
    tape->record("layer_norm", out.node(),
                 [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(), xhat = std::move(xhat),
                  rstd = std::move(rstd), E, rows] {
                   const T* g = on->grad.data();
                   Buffer<T> dxhat(E);
                   for (std::size_t r = 0; r < rows; ++r) {
                     T m1 = 0, m2 = 0;
                     for (std::size_t e = 0; e < E; ++e) {
                       const T gi = g[r * E + e];
                       const T h = xhat[r * E + e];
                       if (gn->requires_grad) gn->grad[e] += gi * h;
                       if (bn->requires_grad) bn->grad[e] += gi;
                       dxhat[e] = gi * gn->data[e];
                       m1 += dxhat[e];
                       m2 += dxhat[e] * h;
                     }
                     if (!xn->requires_grad) continue;
                     m1 /= static_cast<T>(E);
                     m2 /= static_cast<T>(E);
                     for (std::size_t e = 0; e < E; ++e) {
                       xn->grad[r * E + e] += rstd[r] * (dxhat[e] - m1 - xhat[r * E + e] * m2);
                     }
                   }
                 });
  }
  return out;
}

struct Conv2dGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, padding, hout, wout;
};

// Cross-correlation; x: [B, Cin, H, W], weight: [Cout, Cin, kh, kw],
// bias: [Cout] or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (x.rank() != 4 || weight.rank() != 4) throw DimensionError("conv2d expects rank-4 input and weight");
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  Conv2dGeometry g{x.size(0), x.size(1), x.size(2), x.size(3), weight.size(0), weight.size(2), weight.size(3),
                   stride, padding, 0, 0};
  if (weight.size(1) != g.cin) {
    throw DimensionError("conv2d: input has " + std::to_string(g.cin) + " channels, weight expects " +
                         std::to_string(weight.size(1)));
  }
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                         " larger than padded input " + std::to_string(g.h + 2 * padding) + "x" +
                         std::to_string(g.w + 2 * padding));
  }
  if (bias.defined() && bias.numel() != g.cout) throw DimensionError("conv2d: bias extent mismatch");
  g.hout = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wout = (g.w + 2 * padding - g.kw) / stride + 1;
  const std::size_t patch = g.cin * g.kh * g.kw;
  const std::size_t npix = g.hout * g.wout;
  Tensor<T> out(Shape{g.batch, g.cout, g.hout, g.wout});

  // cols[b]: [patch, npix]
  auto im2col = [g, patch, npix](const T* img, T* cols) {
    for (std::size_t c = 0; c < g.cin; ++c) {
      for (std::size_t ki = 0; ki < g.kh; ++ki) {
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          T* row = cols + ((c * g.kh + ki) * g.kw + kj) * npix;
          for (std::size_t oy = 0; oy < g.hout; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
            for (std::size_t ox = 0; ox < g.wout; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.padding);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
              row[oy * g.wout + ox] = inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : T(0);
            }
          }
        }
      }
    }
    (void)patch;
  };

  Buffer<T> cols(g.batch * patch * npix);
  const auto P = static_cast<Eigen::Index>(patch), NP = static_cast<Eigen::Index>(npix),
             CO = static_cast<Eigen::Index>(g.cout);
  for (std::size_t b = 0; b < g.batch; ++b) {
    T* cb = cols.data() + b * patch * npix;
    im2col(x.node()->data.data() + b * g.cin * g.h * g.w, cb);
    MatMap<T> ob(out.node()->data.data() + b * g.cout * npix, CO, NP);
    ob.noalias() = ConstMatMap<T>(weight.node()->data.data(), CO, P) * ConstMatMap<T>(cb, P, NP);
    if (bias.defined()) {
      for (std::size_t co = 0; co < g.cout; ++co) ob.row(static_cast<Eigen::Index>(co)).array() += bias[co];
    }
  }
  detail::check_finite(out, "conv2d");
  const bool has_bias = bias.defined();
  const bool track = has_bias ? detail::tape_for(x, weight, bias) != nullptr : detail::tape_for(x, weight) != nullptr;
  if (track) {
    auto* tape = GradTape<T>::active();
    detail::mark_output(out);
    auto bn = has_bias ? bias.node() : nullptr;
    tape->record("conv2d", out.node(),
                 [xn = x.node(), wn = weight.node(), bn, on = out.node(), cols = std::move(cols), g, patch, npix, P, NP, CO] {
                   Buffer<T> dcols(patch * npix);
                   for (std::size_t b = 0; b < g.batch; ++b) {
                     const ConstMatMap<T> gb(on->grad.data() + b * g.cout * npix, CO, NP);
                     const ConstMatMap<T> cb(cols.data() + b * patch * npix, P, NP);
                     if (wn->requires_grad) MatMap<T>(wn->grad.data(), CO, P).noalias() += gb * cb.transpose();
                     if (bn && bn->requires_grad) {
                       for (std::size_t co = 0; co < g.cout; ++co) bn->grad[co] += gb.row(static_cast<Eigen::Index>(co)).sum();
                     }
                     if (!xn->requires_grad) continue;
                     MatMap<T>(dcols.data(), P, NP).noalias() = ConstMatMap<T>(wn->data.data(), CO, P).transpose() * gb;
                     T* dimg = xn->grad.data() + b * g.cin * g.h * g.w;
                     for (std::size_t c = 0; c < g.cin; ++c) {
                       for (std::size_t ki = 0; ki < g.kh; ++ki) {
                         for (std::size_t kj = 0; kj < g.kw; ++kj) {
                           const T* row = dcols.data() + ((c * g.kh + ki) * g.kw + kj) * npix;
                           for (std::size_t oy = 0; oy < g.hout; ++oy) {
                             const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
                             if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                             for (std::size_t ox = 0; ox < g.wout; ++ox) {
                               const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.padding);
                               if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                               dimg[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                                   row[oy * g.wout + ox];
                             }
                           }
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride = 1, std::size_t padding = 0) {
  return conv2d(x, weight, Tensor<T>(), stride, padding);
}

// x: [..., in] times weight [in, out] plus bias [out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  Tensor<T> y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

}  // namespace stmesh
