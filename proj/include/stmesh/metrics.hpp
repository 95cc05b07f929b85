#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stmesh/body_model.hpp"
#include "stmesh/tensor_io.hpp"

namespace stmesh {

using Points = std::vector<Vec3>;

struct Similarity {
  double s = 1.0;
  Mat3 R = mat3_identity();
  Vec3 t{0, 0, 0};

  Vec3 apply(const Vec3& p) const {
    const Vec3 r = mat3_apply(R, p);
    return {s * r[0] + t[0], s * r[1] + t[1], s * r[2] + t[2]};
  }
  Points apply(const Points& ps) const {
    Points out(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) out[i] = apply(ps[i]);
    return out;
  }
};

inline double sum_squared_residual(const Points& a, const Points& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int k = 0; k < 3; ++k) s += (a[i][k] - b[i][k]) * (a[i][k] - b[i][k]);
  return s;
}

// Least-squares similarity (s, R, t) taking P onto Q (Umeyama).
inline Similarity procrustes_align(const Points& P, const Points& Q) {
  if (P.size() != Q.size()) throw DimensionError("procrustes_align: point counts differ");
  if (P.size() < 3) throw DegeneracyError("procrustes_align needs at least 3 points");
  const std::size_t n = P.size();
  Eigen::Matrix<double, Eigen::Dynamic, 3> p(n, 3), q(n, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      p(i, k) = P[i][k];
      q(i, k) = Q[i][k];
    }
  const Eigen::RowVector3d mp = p.colwise().mean(), mq = q.colwise().mean();
  p.rowwise() -= mp;
  q.rowwise() -= mq;
  const double var_p = p.squaredNorm() / double(n);
  const Eigen::Matrix3d cov = q.transpose() * p / double(n);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d spread = Eigen::JacobiSVD<Eigen::MatrixXd>(p).singularValues();
  if (!(var_p > 1e-20) || spread(1) <= 1e-9 * spread(0)) {
    throw DegeneracyError("procrustes_align: source points are coincident or collinear");
  }
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) S(2, 2) = -1;
  const Eigen::Matrix3d R = svd.matrixU() * S * svd.matrixV().transpose();
  const double s = (svd.singularValues().asDiagonal() * S).trace() / var_p;
  const Eigen::Vector3d t = mq.transpose() - s * R * mp.transpose();
  Similarity out;
  out.s = s;
  for (int i = 0; i < 3; ++i) {
    out.t[i] = t(i);
    for (int j = 0; j < 3; ++j) out.R[i * 3 + j] = R(i, j);
  }
  return out;
}

namespace detail {

inline void require_same_size(const Points& a, const Points& b, const char* what) {
  if (a.size() != b.size() || a.empty()) {
    throw DimensionError(std::string(what) + ": point counts " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
}

inline double mean_distance(const Points& a, const Points& b, const Vec3& shift_a, const Vec3& shift_b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d2 = 0;
    for (int k = 0; k < 3; ++k) {
      const double d = (a[i][k] - shift_a[k]) - (b[i][k] - shift_b[k]);
      d2 += d * d;
    }
    s += std::sqrt(d2);
  }
  return s / double(a.size());
}

}  // namespace detail

// Mean joint distance after moving both root joints to the origin.
inline double mpjpe(const Points& pred, const Points& gt, std::size_t root = kRootJoint) {
  detail::require_same_size(pred, gt, "mpjpe");
  if (root >= pred.size()) throw DimensionError("mpjpe: root index out of range");
  return detail::mean_distance(pred, gt, pred[root], gt[root]);
}

inline double pampjpe(const Points& pred, const Points& gt) {
  detail::require_same_size(pred, gt, "pampjpe");
  return detail::mean_distance(procrustes_align(pred, gt).apply(pred), gt, {0, 0, 0}, {0, 0, 0});
}

// Mean vertex distance with the same root-joint alignment as mpjpe.
inline double pve(const Points& pred, const Points& gt, const Vec3& pred_root = {0, 0, 0}, const Vec3& gt_root = {0, 0, 0}) {
  detail::require_same_size(pred, gt, "pve");
  return detail::mean_distance(pred, gt, pred_root, gt_root);
}

// Mean norm of the second-difference mismatch over interior frames and joints.
inline double accel_error(const std::vector<Points>& pred, const std::vector<Points>& gt) {
  if (pred.size() != gt.size()) throw DimensionError("accel_error: sequence lengths differ");
  if (pred.size() < 3) throw DomainError("accel_error needs at least 3 frames, got " + std::to_string(pred.size()));
  double s = 0;
  std::size_t n = 0;
  for (std::size_t t = 1; t + 1 < pred.size(); ++t) {
    detail::require_same_size(pred[t], gt[t], "accel_error");
    for (std::size_t j = 0; j < pred[t].size(); ++j) {
      double d2 = 0;
      for (int k = 0; k < 3; ++k) {
        const double a = pred[t + 1][j][k] - 2 * pred[t][j][k] + pred[t - 1][j][k];
        const double b = gt[t + 1][j][k] - 2 * gt[t][j][k] + gt[t - 1][j][k];
        d2 += (a - b) * (a - b);
      }
      s += std::sqrt(d2);
      ++n;
    }
  }
  return s / double(n);
}

// Errors are in model units times 1000 ("mm"). Error fields are NaN when
// nothing was matched.
struct EvalReport {
  double mpjpe = std::numeric_limits<double>::quiet_NaN();
  double pampjpe = std::numeric_limits<double>::quiet_NaN();
  double pve = std::numeric_limits<double>::quiet_NaN();
  double accel = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_frames = 0;
  std::size_t n_persons = 0;  // ground-truth person-frames
  std::size_t n_missed = 0;
  std::size_t n_false = 0;

  KeyValues to_key_values() const {
    auto num = [](double v) {
      std::ostringstream os;
      os << std::setprecision(10) << v;
      return os.str();
    };
    return {{"mpjpe_mm", num(mpjpe)},       {"pampjpe_mm", num(pampjpe)},
            {"pve_mm", num(pve)},           {"accel_mm", num(accel)},
            {"n_frames", std::to_string(n_frames)}, {"n_persons", std::to_string(n_persons)},
            {"n_missed", std::to_string(n_missed)}, {"n_false", std::to_string(n_false)}};
  }

  std::string to_table() const {
    std::ostringstream os;
    auto row = [&](const char* name, const std::string& v) { os << std::left << std::setw(12) << name << std::right << std::setw(14) << v << '\n'; };
    auto mm = [](double v) {
      if (std::isnan(v)) return std::string("n/a");
      std::ostringstream s;
      s << std::fixed << std::setprecision(2) << v;
      return s.str();
    };
    row("metric", "value");
    row("MPJPE", mm(mpjpe));
    row("PAMPJPE", mm(pampjpe));
    row("PVE", mm(pve));
    row("Accel", mm(accel));
    row("frames", std::to_string(n_frames));
    row("persons", std::to_string(n_persons));
    row("missed", std::to_string(n_missed));
    row("false", std::to_string(n_false));
    return os.str();
  }
};

struct PersonFrame {
  Points joints;
  Points vertices;
};

struct ClipEvalInput {
  std::size_t frames = 0;
  // gt[p][t]: ground truth of person p at frame t.
  std::vector<std::vector<PersonFrame>> gt;
  // pred[p][t]: prediction matched to ground-truth person p at frame t.
  std::vector<std::vector<std::optional<PersonFrame>>> pred;
  std::size_t n_false = 0;
};

inline EvalReport evaluate_clip(const ClipEvalInput& in, std::size_t root = kRootJoint) {
  constexpr double kMm = 1000.0;
  EvalReport r;
  r.n_frames = in.frames;
  r.n_false = in.n_false;
  double s_mpjpe = 0, s_pa = 0, s_pve = 0, s_acc = 0;
  std::size_t n_pairs = 0, n_acc = 0;
  for (std::size_t p = 0; p < in.gt.size(); ++p) {
    const auto& g = in.gt[p];
    const auto& q = in.pred[p];
    for (std::size_t t = 0; t < g.size(); ++t) {
      ++r.n_persons;
      if (!q[t]) {
        ++r.n_missed;
        continue;
      }
      ++n_pairs;
      s_mpjpe += mpjpe(q[t]->joints, g[t].joints, root);
      s_pa += pampjpe(q[t]->joints, g[t].joints);
      s_pve += pve(q[t]->vertices, g[t].vertices, q[t]->joints[root], g[t].joints[root]);
    }
    // Accel over every window of three consecutive matched frames.
    for (std::size_t t = 1; t + 1 < g.size(); ++t) {
      if (!q[t - 1] || !q[t] || !q[t + 1]) continue;
      const std::vector<Points> ps = {q[t - 1]->joints, q[t]->joints, q[t + 1]->joints};
      const std::vector<Points> gs = {g[t - 1].joints, g[t].joints, g[t + 1].joints};
      s_acc += accel_error(ps, gs);
      ++n_acc;
    }
  }
  if (n_pairs > 0) {
    r.mpjpe = kMm * s_mpjpe / double(n_pairs);
    r.pampjpe = kMm * s_pa / double(n_pairs);
    r.pve = kMm * s_pve / double(n_pairs);
  }
  if (n_acc > 0) r.accel = kMm * s_acc / double(n_acc);
  return r;
}

// Mean of per-clip error fields (skipping clips where a field is NaN);
// counts are summed.
inline EvalReport aggregate_reports(const std::vector<EvalReport>& reports) {
  EvalReport out;
  auto mean_of = [&](double EvalReport::*field) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : reports) {
      if (!std::isnan(r.*field)) {
        s += r.*field;
        ++n;
      }
    }
    return n > 0 ? s / double(n) : std::numeric_limits<double>::quiet_NaN();
  };
  out.mpjpe = mean_of(&EvalReport::mpjpe);
  out.pampjpe = mean_of(&EvalReport::pampjpe);
  out.pve = mean_of(&EvalReport::pve);
  out.accel = mean_of(&EvalReport::accel);
  for (const auto& r : reports) {
    out.n_frames += r.n_frames;
    out.n_persons += r.n_persons;
    out.n_missed += r.n_missed;
    out.n_false += r.n_false;
  }
  return out;
}

inline void write_report(const EvalReport& r, const std::filesystem::path& path) { write_key_values(path, r.to_key_values()); }

}  // namespace stmesh
