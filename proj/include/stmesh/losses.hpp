#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "stmesh/heatmap.hpp"
#include "stmesh/metrics.hpp"
#include "stmesh/rotation.hpp"

namespace stmesh {

struct LossWeights {
  double w_cm = 1.0;
  double w_pose = 1.0;
  double w_shape = 0.1;
  double w_prior = 0.01;
  double w_j3d = 1.0;
  double w_pj2d = 1.0;
  double w_accel = 0.1;
  double w_aj3d = 0.5;
  double w_sm = 0.01;
  KernelParams kernel;  // target centermap rendering

  void validate() const {
    for (double w : {w_cm, w_pose, w_shape, w_prior, w_j3d, w_pj2d, w_accel, w_aj3d, w_sm}) {
      if (!(w >= 0) || !std::isfinite(w)) throw DomainError("loss weights must be finite and nonnegative");
    }
  }
};

// ---------------------------------------------------------------------------
// Ground-truth assignment

struct GtCenter {
  std::size_t t = 0;
  double x = 0;
  double y = 0;
};

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (detection, ground truth)
  std::vector<std::size_t> unmatched_gt;
  std::vector<std::size_t> unmatched_pred;
};

// Greedy per-frame nearest neighbour on squared pixel distance. Candidate
// pairs are taken in (distance, gt index, detection index) order.
inline MatchResult match_gt(const std::vector<Detection>& dets, const std::vector<GtCenter>& gts, double max_dist) {
  std::vector<std::tuple<double, std::size_t, std::size_t>> cand;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    for (std::size_t d = 0; d < dets.size(); ++d) {
      if (dets[d].t != gts[g].t) continue;
      const double dx = double(dets[d].x) - gts[g].x, dy = double(dets[d].y) - gts[g].y;
      const double d2 = dx * dx + dy * dy;
      if (d2 <= max_dist * max_dist) cand.emplace_back(d2, g, d);
    }
  }
  std::sort(cand.begin(), cand.end());
  std::vector<bool> used_g(gts.size()), used_d(dets.size());
  MatchResult r;
  for (const auto& [d2, g, d] : cand) {
    if (used_g[g] || used_d[d]) continue;
    used_g[g] = used_d[d] = true;
    r.pairs.emplace_back(d, g);
  }
  std::sort(r.pairs.begin(), r.pairs.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
  for (std::size_t g = 0; g < gts.size(); ++g)
    if (!used_g[g]) r.unmatched_gt.push_back(g);
  for (std::size_t d = 0; d < dets.size(); ++d)
    if (!used_d[d]) r.unmatched_pred.push_back(d);
  return r;
}

// ---------------------------------------------------------------------------
// Prior

// 0.5 * sum_j angle_j^2 / sigma^2 over non-root joints, averaged over the
// batch. theta: [N, J, 6]. The squared angle comes from acos((tr R - 1) / 2),
// clamped at pi.
template <class T>
Tensor<T> prior_loss(const Tensor<T>& theta, double sigma = 0.5) {
  if (theta.rank() != 3 || theta.size(2) != 6) throw DimensionError("prior_loss expects [N, J, 6], got " + shape_str(theta.shape()));
  const std::size_t n = theta.size(0), J = theta.size(1);
  if (n == 0) return Tensor<T>::scalar(T(0));
  const Tensor<T> R = rot6d_to_matrix(slice(theta, 1, 1, J));  // [N, J-1, 3, 3]
  const Tensor<T> diag = add(add(slice(slice(R, -2, 0, 1), -1, 0, 1), slice(slice(R, -2, 1, 2), -1, 1, 2)),
                             slice(slice(R, -2, 2, 3), -1, 2, 3));
  const Tensor<T> cosine = scale(add_scalar(diag, T(-1)), T(0.5));
  return scale(sum(acos_squared(cosine)), static_cast<T>(0.5 / (sigma * sigma) / double(n)));
}

// Single-pose convenience at double precision.
inline double prior_loss(const PoseVector& pose, double sigma = 0.5) {
  return prior_loss(Tensor<double>({1, pose.theta.size() / 6, 6}, pose.theta), sigma).item();
}

// ---------------------------------------------------------------------------
// Temporal loss

template <class T>
struct TemporalTerms {
  Tensor<T> accel, aj3d, sm, total;
};

namespace detail {

// x: [..., T, ...] along `axis`: x[t + 1] - x[t].
template <class T>
Tensor<T> first_difference(const Tensor<T>& x, int axis) {
  const std::size_t n = x.size(axis);
  return sub(slice(x, axis, 1, n), slice(x, axis, 0, n - 1));
}

}  // namespace detail

// pred_j3d, gt_j3d: [P, T, J, 3]; centermap: [T, 1, H, W]; features: [T, C, H, W].
template <class T>
TemporalTerms<T> temporal_loss(const Tensor<T>& pred_j3d, const Tensor<T>& gt_j3d, const Tensor<T>& centermap,
                               const Tensor<T>& features, const LossWeights& w) {
  if (pred_j3d.shape() != gt_j3d.shape() || pred_j3d.rank() != 4 || pred_j3d.size(3) != 3) {
    throw DimensionError("temporal_loss: joints " + shape_str(pred_j3d.shape()) + " vs " + shape_str(gt_j3d.shape()));
  }
  if (centermap.rank() != 4 || features.rank() != 4 || centermap.size(0) != features.size(0)) {
    throw DimensionError("temporal_loss: centermap " + shape_str(centermap.shape()) + " vs features " + shape_str(features.shape()));
  }
  const std::size_t P = pred_j3d.size(0), frames = pred_j3d.size(1);
  TemporalTerms<T> out;
  out.accel = Tensor<T>::scalar(T(0));
  out.aj3d = Tensor<T>::scalar(T(0));
  if (P > 0 && frames >= 2) {
    const Tensor<T> diff = sub(pred_j3d, gt_j3d);
    const Tensor<T> vel = detail::first_difference(diff, 1);
    out.aj3d = mean(sum(square(vel), -1));
    if (frames >= 3) out.accel = mean(norm(detail::first_difference(vel, 1), -1));
  }
  out.sm = Tensor<T>::scalar(T(0));
  if (centermap.size(0) >= 2) {
    out.sm = add(mean(abs(detail::first_difference(centermap, 0))), mean(abs(detail::first_difference(features, 0))));
  }
  out.total = add(add(scale(out.accel, T(w.w_accel)), scale(out.aj3d, T(w.w_aj3d))), scale(out.sm, T(w.w_sm)));
  return out;
}

// ---------------------------------------------------------------------------
// Spatial loss

// Matched predictions and their ground truth, N persons stacked.
template <class T>
struct SpatialBatch {
  Tensor<T> pred_cm, gt_cm;        // [T, 1, H, W]
  Tensor<T> pred_theta, gt_theta;  // [N, J, 6]
  Tensor<T> pred_beta, gt_beta;    // [N, 10]
  Tensor<T> pred_j3d, gt_j3d;      // [N, J, 3]
  Tensor<T> pred_j2d, gt_j2d;      // [N, J, 2]
};

template <class T>
struct SpatialTerms {
  Tensor<T> cm, pose, shape, prior, mpj, pmpj, pj2d, total;
};

// Applies fixed similarity transforms: x [N, J, 3] -> s R x + t per person.
template <class T>
Tensor<T> apply_similarities(const Tensor<T>& x, const std::vector<Similarity>& sims) {
  const std::size_t n = x.size(0);
  Tensor<T> srt({n, 3, 3}), tr({n, 1, 3});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < 3; ++r) {
      tr[i * 3 + r] = static_cast<T>(sims[i].t[r]);
      for (std::size_t c = 0; c < 3; ++c) srt[(i * 3 + c) * 3 + r] = static_cast<T>(sims[i].s * sims[i].R[r * 3 + c]);
    }
  }
  return add(matmul(x, srt), tr);
}

template <class T>
Points to_points(const Tensor<T>& x, std::size_t person) {
  const std::size_t J = x.size(1);
  Points p(J);
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t k = 0; k < 3; ++k) p[j][k] = static_cast<double>(x[(person * J + j) * 3 + k]);
  return p;
}

// Mean over persons and joints of the squared Euclidean error.
template <class T>
Tensor<T> mean_squared_distance(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(sum(square(sub(a, b)), -1));
}

template <class T>
SpatialTerms<T> spatial_loss(const SpatialBatch<T>& b, const LossWeights& w) {
  SpatialTerms<T> out;
  out.cm = focal_loss(b.pred_cm, b.gt_cm);
  const std::size_t n = b.pred_theta.defined() ? b.pred_theta.size(0) : 0;
  const Tensor<T> zero = Tensor<T>::scalar(T(0));
  out.pose = out.shape = out.prior = out.mpj = out.pmpj = out.pj2d = zero;
  if (n > 0) {
    // squared Frobenius distance between rotation matrices, per joint
    const Tensor<T> dr = sub(rot6d_to_matrix(b.pred_theta), rot6d_to_matrix(b.gt_theta));
    out.pose = mean(sum(sum(square(dr), -1), -1));
    out.shape = mean(square(sub(b.pred_beta, b.gt_beta)));
    out.prior = prior_loss(b.pred_theta);
    out.mpj = mean_squared_distance(b.pred_j3d, b.gt_j3d);
    // Alignment is solved on detached values; for a least-squares objective
    // the optimal transform's own sensitivity does not change the gradient.
    std::vector<Similarity> sims;
    for (std::size_t i = 0; i < n; ++i) sims.push_back(procrustes_align(to_points(b.pred_j3d, i), to_points(b.gt_j3d, i)));
    out.pmpj = mean_squared_distance(apply_similarities(b.pred_j3d, sims), b.gt_j3d);
    out.pj2d = mean_squared_distance(b.pred_j2d, b.gt_j2d);
  }
  const auto W = [](double v) { return static_cast<T>(v); };
  out.total = add(scale(out.cm, W(w.w_cm)), scale(out.pose, W(w.w_pose)));
  out.total = add(out.total, scale(out.shape, W(w.w_shape)));
  out.total = add(out.total, scale(out.prior, W(w.w_prior)));
  out.total = add(out.total, scale(add(out.mpj, out.pmpj), W(w.w_j3d)));
  out.total = add(out.total, scale(out.pj2d, W(w.w_pj2d)));
  return out;
}

}  // namespace stmesh
