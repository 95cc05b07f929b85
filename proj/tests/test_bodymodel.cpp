#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "stmesh/body_model.hpp"
#include "stmesh/gradcheck.hpp"

using namespace stmesh;
using Td = Tensor<double>;

namespace {

const BodyTemplate& toy() {
  static const BodyTemplate tpl = make_toy_template(7);
  return tpl;
}

// Quaternion construction of the same frame: q1 takes e_x onto c1 along the
// shortest arc, q2 spins about e_x until e_y lines up with the in-plane part
// of the second vector.
struct Quat {
  double w, x, y, z;
};

Quat qmul(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z, a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x, a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Vec3 qrotate(const Quat& q, const Vec3& v) {
  const Quat p = qmul(qmul(q, {0, v[0], v[1], v[2]}), {q.w, -q.x, -q.y, -q.z});
  return {p.x, p.y, p.z};
}

Mat3 quat_matrix(const Quat& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

Mat3 oracle_frame(const std::array<double, 6>& r) {
  const double na = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
  const Vec3 c1{r[0] / na, r[1] / na, r[2] / na};
  // half-angle quaternion between e_x and c1
  Quat q1{1 + c1[0], 0, -c1[2], c1[1]};
  const double n1 = std::sqrt(q1.w * q1.w + q1.y * q1.y + q1.z * q1.z);
  q1 = {q1.w / n1, 0, q1.y / n1, q1.z / n1};
  const Vec3 b = qrotate({q1.w, -q1.x, -q1.y, -q1.z}, {r[3], r[4], r[5]});
  const double phi = std::atan2(b[2], b[1]);
  const Quat q2{std::cos(phi / 2), std::sin(phi / 2), 0, 0};
  return quat_matrix(qmul(q1, q2));
}

std::array<double, 6> random_6d(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  return {n(rng), n(rng), n(rng), n(rng), n(rng), n(rng)};
}

Mat3 random_rotation(std::mt19937_64& rng) { return rot6d_to_matrix(random_6d(rng)); }

PoseVector pose_with_root(const Mat3& r) {
  PoseVector p;
  const auto six = matrix_to_rot6d(r);
  std::copy(six.begin(), six.end(), p.theta.begin());
  return p;
}

Td small_theta(std::size_t B, std::mt19937_64& rng, double spread) {
  std::normal_distribution<double> n(0, spread);
  Td theta({B, kNumJoints, 6});
  for (std::size_t i = 0; i < theta.numel(); ++i) theta[i] = (i % 6 == 0 || i % 6 == 4 ? 1.0 : 0.0) + n(rng);
  return theta;
}

// Point-in-hull by Caratheodory: p is in conv(S) iff it lies in some
// simplex spanned by at most 4 points of S.
bool in_tetrahedron(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d, double tol) {
  const Mat3 m{b[0] - a[0], c[0] - a[0], d[0] - a[0], b[1] - a[1], c[1] - a[1],
               d[1] - a[1], b[2] - a[2], c[2] - a[2], d[2] - a[2]};
  const double det = mat3_det(m);
  if (std::abs(det) < 1e-15) return false;
  // Cramer's rule for barycentric coordinates.
  const Vec3 r{p[0] - a[0], p[1] - a[1], p[2] - a[2]};
  std::array<double, 3> l{};
  for (int col = 0; col < 3; ++col) {
    Mat3 mc = m;
    for (int row = 0; row < 3; ++row) mc[row * 3 + col] = r[row];
    l[col] = mat3_det(mc) / det;
  }
  const double l0 = 1 - l[0] - l[1] - l[2];
  return l0 >= -tol && l[0] >= -tol && l[1] >= -tol && l[2] >= -tol;
}

bool in_hull(const Vec3& p, const std::vector<Vec3>& pts) {
  const std::size_t n = pts.size();
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      for (std::size_t c = b + 1; c < n; ++c)
        for (std::size_t d = c + 1; d < n; ++d)
          if (in_tetrahedron(p, pts[a], pts[b], pts[c], pts[d], 1e-9)) return true;
  return false;
}

}  // namespace

TEST(Rot6d, IdentityInput) {
  const std::array<double, 6> r{1, 0, 0, 0, 1, 0};
  const Mat3 m = rot6d_to_matrix(r);
  for (int i = 0; i < 9; ++i) EXPECT_EQ(m[i], mat3_identity()[i]);
}

TEST(Rot6d, OrthonormalWithUnitDeterminant) {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 200; ++k) {
    const Mat3 m = rot6d_to_matrix(random_6d(rng));
    const Mat3 mtm = mat3_mul(mat3_transpose(m), m);
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(mtm[i], mat3_identity()[i], 1e-6);
    EXPECT_NEAR(mat3_det(m), 1.0, 1e-6);
  }
}

TEST(Rot6d, MatchesQuaternionOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const auto r = random_6d(rng);
    const Mat3 got = rot6d_to_matrix(r);
    const Mat3 want = oracle_frame(r);
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(got[i], want[i], 1e-6) << "seed " << seed;
  }
}

TEST(Rot6d, DegenerateInputsThrow) {
  EXPECT_THROW(rot6d_to_matrix(std::array<double, 6>{0, 0, 0, 0, 1, 0}), DegeneracyError);
  EXPECT_THROW(rot6d_to_matrix(std::array<double, 6>{1, 2, 3, 2, 4, 6}), DegeneracyError);
  EXPECT_THROW(rot6d_to_matrix(std::array<double, 6>{1, 0, 0, 0, 0, 0}), DegeneracyError);
  EXPECT_THROW(rot6d_to_matrix(Td({1, 6}, {1, 2, 3, -2, -4, -6})), DegeneracyError);
  EXPECT_THROW(rot6d_to_matrix(Td({2, 6}, {1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0})), DegeneracyError);
}

TEST(Rot6d, RoundTripThroughFirstTwoColumns) {
  std::mt19937_64 rng(2);
  for (int k = 0; k < 100; ++k) {
    const Mat3 m = random_rotation(rng);
    const Mat3 back = rot6d_to_matrix(matrix_to_rot6d(m));
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(back[i], m[i], 1e-6);
  }
}

TEST(Rot6d, BatchedAgreesWithScalar) {
  std::mt19937_64 rng(3);
  const Td r = random_tensor<double>({4, 5, 6}, rng);
  const Td m = rot6d_to_matrix(r);
  ASSERT_EQ(m.shape(), (Shape{4, 5, 3, 3}));
  for (std::size_t i = 0; i < 20; ++i) {
    const Mat3 s = rot6d_to_matrix(std::span<const double>(r.data().data() + i * 6, 6));
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(m[i * 9 + k], s[k], 1e-12);
  }
}

TEST(Rot6d, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Td r = random_tensor<double>({3, 6}, rng);
    const Td w = random_tensor<double>({3, 3, 3}, rng);
    const auto res = grad_check([&] { return weighted_sum(rot6d_to_matrix(r), w); }, {{"r", r}});
    EXPECT_TRUE(res.passed) << "seed " << seed << " " << res.worst << " " << res.max_rel_error;
  }
}

TEST(Template, TypeInvariants) {
  const BodyTemplate& t = toy();
  const std::size_t V = t.num_vertices(), J = t.num_joints();
  EXPECT_EQ(V, 402u);
  EXPECT_EQ(J, 22u);
  EXPECT_GE(V, 3 * J);
  EXPECT_EQ(t.shape_basis.shape(), (Shape{V, 3, 10}));
  for (std::size_t j = 0; j < J; ++j) {
    double row = 0;
    for (std::size_t v = 0; v < V; ++v) {
      EXPECT_GE(t.joint_regressor[j * V + v], 0.0);
      row += t.joint_regressor[j * V + v];
    }
    EXPECT_NEAR(row, 1.0, 1e-6);
  }
  for (std::size_t v = 0; v < V; ++v) {
    double row = 0;
    for (std::size_t j = 0; j < J; ++j) {
      EXPECT_GE(t.skin_weights[v * J + j], 0.0);
      row += t.skin_weights[v * J + j];
    }
    EXPECT_NEAR(row, 1.0, 1e-6);
  }
  ASSERT_EQ(t.parents[0], -1);
  for (std::size_t j = 1; j < J; ++j) {
    int cur = static_cast<int>(j), hops = 0;
    while (cur != 0 && hops <= static_cast<int>(J)) {
      cur = t.parents[static_cast<std::size_t>(cur)];
      ASSERT_GE(cur, 0);
      ++hops;
    }
    EXPECT_EQ(cur, 0) << "joint " << j << " does not reach the root";
  }
}

TEST(Template, BodyHeightAndShapeBasisScale) {
  const BodyTemplate& t = toy();
  double lo = 1e9, hi = -1e9;
  for (std::size_t v = 0; v < t.num_vertices(); ++v) {
    lo = std::min(lo, t.template_vertices[v * 3 + 1]);
    hi = std::max(hi, t.template_vertices[v * 3 + 1]);
  }
  EXPECT_NEAR(hi - lo, 1.7, 1e-9);
  for (std::size_t k = 0; k < kNumBetas; ++k) {
    double peak = 0;
    for (std::size_t v = 0; v < t.num_vertices(); ++v) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += std::pow(t.shape_basis[(v * 3 + c) * kNumBetas + k], 2);
      peak = std::max(peak, std::sqrt(s));
    }
    EXPECT_LE(peak, 0.05 * 1.7 + 1e-12);
    EXPECT_GT(peak, 0.0);
  }
}

TEST(Template, SameSeedIsBitIdentical) {
  const BodyTemplate a = make_toy_template(11), b = make_toy_template(11), c = make_toy_template(12);
  auto same = [](const Td& x, const Td& y) {
    return x.shape() == y.shape() && std::equal(x.data().begin(), x.data().end(), y.data().begin());
  };
  EXPECT_TRUE(same(a.template_vertices, b.template_vertices));
  EXPECT_TRUE(same(a.shape_basis, b.shape_basis));
  EXPECT_TRUE(same(a.joint_regressor, b.joint_regressor));
  EXPECT_TRUE(same(a.skin_weights, b.skin_weights));
  EXPECT_EQ(a.parents, b.parents);
  EXPECT_FALSE(same(a.template_vertices, c.template_vertices));
}

TEST(Template, RestJointsInsideHullOfIncidentBoneVertices) {
  const BodyTemplate& t = toy();
  const auto joints = rest_joints(t);
  for (std::size_t j = 0; j < t.num_joints(); ++j) {
    std::vector<Vec3> pts;
    for (std::size_t v = 0; v < t.num_vertices(); ++v) {
      const auto& bone = t.bones[static_cast<std::size_t>(t.vertex_bone[v])];
      if (bone[0] == static_cast<int>(j) || bone[1] == static_cast<int>(j)) {
        pts.push_back({t.template_vertices[v * 3], t.template_vertices[v * 3 + 1], t.template_vertices[v * 3 + 2]});
      }
    }
    ASSERT_GE(pts.size(), 4u);
    EXPECT_TRUE(in_hull(joints[j], pts)) << kJointNames[j];
  }
}

TEST(Template, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "stmesh_template_rt";
  std::filesystem::remove_all(dir);
  save_template(toy(), dir);
  const BodyTemplate back = load_template(dir);
  EXPECT_EQ(back.seed, toy().seed);
  EXPECT_EQ(back.parents, toy().parents);
  for (std::size_t i = 0; i < back.skin_weights.numel(); ++i) ASSERT_EQ(back.skin_weights[i], toy().skin_weights[i]);
  for (std::size_t i = 0; i < back.shape_basis.numel(); ++i) ASSERT_EQ(back.shape_basis[i], toy().shape_basis[i]);

  write_key_values(dir / "manifest.txt", {{"version", "9"}, {"V", "402"}, {"J", "22"}, {"seed", "7"}});
  EXPECT_THROW(load_template(dir), VersionError);
  write_key_values(dir / "manifest.txt", {{"version", "1"}, {"V", "400"}, {"J", "22"}, {"seed", "7"}});
  EXPECT_THROW(load_template(dir), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Forward, IdentityPoseReproducesTemplate) {
  const BodyTemplate& t = toy();
  const Mesh m = body_forward(t, PoseVector{}, ShapeVector{});
  const auto rest = rest_joints(t);
  for (std::size_t v = 0; v < t.num_vertices(); ++v)
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(m.vertices[v][k], t.template_vertices[v * 3 + k], 1e-12);
  for (std::size_t j = 0; j < t.num_joints(); ++j)
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(m.joints[j][k], rest[j][k], 1e-12);
}

TEST(Forward, GlobalRotationRotatesEveryVertex) {
  const BodyTemplate& t = toy();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const Mat3 r = random_rotation(rng);
    const Mesh m = body_forward(t, pose_with_root(r), ShapeVector{});
    for (std::size_t v = 0; v < t.num_vertices(); ++v) {
      const Vec3 want = mat3_apply(r, {t.template_vertices[v * 3], t.template_vertices[v * 3 + 1], t.template_vertices[v * 3 + 2]});
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(m.vertices[v][k], want[k], 1e-6);
    }
  }
}

TEST(Forward, RigidInvarianceWithArticulatedPose) {
  const BodyTemplate& t = toy();
  const BodyTensors<double> body(t);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    Td theta = small_theta(1, rng, 0.3);
    Td beta = random_tensor<double>({1, 10}, rng);
    const BodyOutput<double> base = body_forward(body, theta, beta);
    const Mat3 r = random_rotation(rng);
    const Mat3 root = mat3_mul(r, rot6d_to_matrix(std::span<const double>(theta.data().data(), 6)));
    const auto six = matrix_to_rot6d(root);
    Td theta_r = theta.clone();
    for (int i = 0; i < 6; ++i) theta_r[i] = six[i];
    const BodyOutput<double> moved = body_forward(body, theta_r, beta);
    const Vec3 j0{base.rest_joints[0], base.rest_joints[1], base.rest_joints[2]};
    for (std::size_t v = 0; v < t.num_vertices(); ++v) {
      const Vec3 rel{base.vertices[v * 3] - j0[0], base.vertices[v * 3 + 1] - j0[1], base.vertices[v * 3 + 2] - j0[2]};
      const Vec3 want = mat3_apply(r, rel);
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(moved.vertices[v * 3 + k] - j0[k], want[k], 1e-5);
    }
  }
}

TEST(Forward, SkinningTranslatesWithJointTransforms) {
  const BodyTemplate& t = toy();
  std::mt19937_64 rng(8);
  const Td verts = reshape(t.template_vertices, {1, t.num_vertices(), 3});
  const Td rots = rot6d_to_matrix(small_theta(1, rng, 0.5));
  const Td offs = random_tensor<double>({1, kNumJoints, 3}, rng);
  const Td shift({1, 1, 3}, {0.3, -1.2, 2.5});
  const Td a = blend_skin(t.skin_weights, verts, rots, offs);
  const Td b = blend_skin(t.skin_weights, verts, rots, add(offs, shift));
  for (std::size_t v = 0; v < t.num_vertices(); ++v)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(b[v * 3 + k] - a[v * 3 + k], shift[k], 1e-12);
}

TEST(Forward, BatchedMatchesSinglePerson) {
  const BodyTemplate& t = toy();
  const BodyTensors<double> body(t);
  std::mt19937_64 rng(9);
  const Td theta = small_theta(3, rng, 0.4);
  const Td beta = random_tensor<double>({3, 10}, rng);
  const BodyOutput<double> out = body_forward(body, theta, beta);
  const std::size_t V = t.num_vertices();
  for (std::size_t b = 0; b < 3; ++b) {
    PoseVector p;
    ShapeVector s;
    std::copy_n(theta.data().data() + b * kNumJoints * 6, kNumJoints * 6, p.theta.begin());
    std::copy_n(beta.data().data() + b * 10, 10, s.beta.begin());
    const Mesh m = body_forward(t, p, s);
    for (std::size_t v = 0; v < V; ++v)
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(out.vertices[(b * V + v) * 3 + k], m.vertices[v][k], 1e-12);
  }
}

TEST(Forward, ShapeDisplacementIsBounded) {
  const BodyTemplate& t = toy();
  ShapeVector s;
  s.beta[0] = 1.0;
  const Mesh m = body_forward(t, PoseVector{}, s);
  double moved = 0;
  for (std::size_t v = 0; v < t.num_vertices(); ++v)
    for (int k = 0; k < 3; ++k) moved = std::max(moved, std::abs(m.vertices[v][k] - t.template_vertices[v * 3 + k]));
  EXPECT_GT(moved, 1e-3);
  EXPECT_LE(moved, 0.05 * 1.7 + 1e-9);
}

TEST(Forward, RejectsBadShapes) {
  const BodyTensors<double> body(toy());
  EXPECT_THROW(body_forward(body, Td({1, 21, 6}), Td({1, 10})), DimensionError);
  EXPECT_THROW(body_forward(body, Td({1, 22, 6}), Td({2, 10})), DimensionError);
  PoseVector bad;
  bad.theta.assign(6, 0.0);
  EXPECT_THROW(body_forward(toy(), PoseVector{std::vector<double>(kNumJoints * 6, 0.0)}, ShapeVector{}), DegeneracyError);
  EXPECT_THROW(body_forward(toy(), bad, ShapeVector{}), DimensionError);
}

TEST(Forward, GradientMatchesFiniteDifferences) {
  const BodyTensors<double> body(toy());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Td theta = small_theta(1, rng, 0.2);
    Td beta = random_tensor<double>({1, 10}, rng, -0.5, 0.5);
    const Td target = add(reshape(toy().template_vertices, {1, toy().num_vertices(), 3}),
                          random_tensor<double>({1, toy().num_vertices(), 3}, rng, -0.05, 0.05));
    auto loss = [&] { return mean(norm(sub(body_forward(body, theta, beta).vertices, target), -1)); };
    const auto res = grad_check(loss, {{"theta", theta}, {"beta", beta}});
    EXPECT_TRUE(res.passed) << "seed " << seed << " " << res.worst << " " << res.max_rel_error;
  }
}

TEST(Project, Arithmetic) {
  const auto p = project({Vec3{2, -1, 7}}, CameraParams{0.5, 0.1, 0.2});
  EXPECT_NEAR(p[0][0], 1.1, 1e-15);
  EXPECT_NEAR(p[0][1], -0.3, 1e-15);
  const auto id = project({Vec3{0.3, -0.4, 9}}, CameraParams{1, 0, 0});
  EXPECT_EQ(id[0][0], 0.3);
  EXPECT_EQ(id[0][1], -0.4);
}

TEST(Project, LinearWithoutTranslation) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Vec3> j(kNumJoints), scaled(kNumJoints);
  for (std::size_t i = 0; i < kNumJoints; ++i) {
    j[i] = {u(rng), u(rng), u(rng)};
    scaled[i] = {2.5 * j[i][0], 2.5 * j[i][1], 2.5 * j[i][2]};
  }
  const CameraParams cam{0.7, 0, 0};
  const auto a = project(scaled, cam), b = project(j, cam);
  for (std::size_t i = 0; i < kNumJoints; ++i)
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(a[i][k], 2.5 * b[i][k], 1e-12);
}

TEST(Project, TensorFormAgrees) {
  std::mt19937_64 rng(10);
  const Td joints = random_tensor<double>({2, kNumJoints, 3}, rng);
  const Td xi({2, 1, 1}, {0.5, 1.3});
  const Td tr({2, 1, 2}, {0.1, -0.2, 0.3, 0.4});
  const Td p = project(joints, xi, tr);
  ASSERT_EQ(p.shape(), (Shape{2, kNumJoints, 2}));
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<Vec3> j(kNumJoints);
    for (std::size_t i = 0; i < kNumJoints; ++i)
      for (int k = 0; k < 3; ++k) j[i][k] = joints[(b * kNumJoints + i) * 3 + k];
    const auto s = project(j, CameraParams{xi[b], tr[b * 2], tr[b * 2 + 1]});
    for (std::size_t i = 0; i < kNumJoints; ++i)
      for (int k = 0; k < 2; ++k) EXPECT_NEAR(p[(b * kNumJoints + i) * 2 + k], s[i][k], 1e-15);
  }
}
