#pragma once

#include <array>
#include <cmath>
#include <span>

#include "stmesh/ops.hpp"

namespace stmesh {

// Row-major 3x3.
using Mat3 = std::array<double, 9>;
using Vec3 = std::array<double, 3>;

inline Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return c;
}

inline Mat3 mat3_transpose(const Mat3& a) {
  return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

inline Vec3 mat3_apply(const Mat3& a, const Vec3& v) {
  return {a[0] * v[0] + a[1] * v[1] + a[2] * v[2], a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
          a[6] * v[0] + a[7] * v[1] + a[8] * v[2]};
}

inline double mat3_det(const Mat3& a) {
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) + a[2] * (a[3] * a[7] - a[4] * a[6]);
}

// Rodrigues: rotation by |w| radians about w/|w|.
inline Mat3 axis_angle_to_matrix(const Vec3& w) {
  const double angle = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
  if (angle < 1e-15) return mat3_identity();
  const double x = w[0] / angle, y = w[1] / angle, z = w[2] / angle;
  const double c = std::cos(angle), s = std::sin(angle), C = 1 - c;
  return {c + x * x * C,     x * y * C - z * s, x * z * C + y * s,  //
          y * x * C + z * s, c + y * y * C,     y * z * C - x * s,  //
          z * x * C - y * s, z * y * C + x * s, c + z * z * C};
}

// Rotation angle in [0, pi].
inline double rotation_angle(const Mat3& r) {
  const double c = std::clamp((r[0] + r[4] + r[8] - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

// Gram-Schmidt on the two 3-vectors r[0:3], r[3:6]; columns (c1, c2, c1 x c2).
inline Mat3 rot6d_to_matrix(std::span<const double> r) {
  if (r.size() != 6) throw DimensionError("rot6d_to_matrix needs 6 values");
  const Vec3 a{r[0], r[1], r[2]};
  const Vec3 b{r[3], r[4], r[5]};
  const double na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
  if (!(na > 1e-12)) throw DegeneracyError("rot6d: first column is zero");
  const Vec3 c1{a[0] / na, a[1] / na, a[2] / na};
  const double d = c1[0] * b[0] + c1[1] * b[1] + c1[2] * b[2];
  const Vec3 p{b[0] - d * c1[0], b[1] - d * c1[1], b[2] - d * c1[2]};
  const double np = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  const double nb = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
  if (!(np > 1e-12 * std::max(1.0, nb))) throw DegeneracyError("rot6d: columns are parallel or second is zero");
  const Vec3 c2{p[0] / np, p[1] / np, p[2] / np};
  const Vec3 c3{c1[1] * c2[2] - c1[2] * c2[1], c1[2] * c2[0] - c1[0] * c2[2], c1[0] * c2[1] - c1[1] * c2[0]};
  return {c1[0], c2[0], c3[0], c1[1], c2[1], c3[1], c1[2], c2[2], c3[2]};
}

// First two columns, stacked.
inline std::array<double, 6> matrix_to_rot6d(const Mat3& m) { return {m[0], m[3], m[6], m[1], m[4], m[7]}; }

// Batched, differentiable Gram-Schmidt: [..., 6] -> [..., 3, 3].
template <class T>
Tensor<T> rot6d_to_matrix(const Tensor<T>& r6) {
  if (r6.rank() == 0 || r6.size(-1) != 6) throw DimensionError("rot6d expects trailing extent 6, got " + shape_str(r6.shape()));
  for (std::size_t i = 0; i < r6.numel(); i += 6) {
    const T* v = r6.data().data() + i;
    if (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] < T(1e-20)) throw DegeneracyError("rot6d: first column is zero");
  }
  const Tensor<T> a = slice(r6, -1, 0, 3);
  const Tensor<T> b = slice(r6, -1, 3, 6);
  const Tensor<T> c1 = div(a, norm(a, -1, true));
  const Tensor<T> proj = sub(b, mul(sum(mul(c1, b), -1, true), c1));
  const Tensor<T> pn = norm(proj, -1, true);
  for (T v : pn.data()) {
    if (!(v > T(1e-12))) throw DegeneracyError("rot6d: columns are parallel or second is zero");
  }
  const Tensor<T> c2 = div(proj, pn);
  const Tensor<T> c3 = cross(c1, c2);
  return stack(std::vector<Tensor<T>>{c1, c2, c3}, -1);
}

}  // namespace stmesh
