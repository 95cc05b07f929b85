#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "stmesh/metrics.hpp"

using namespace stmesh;

namespace {

Points random_points(std::size_t n, std::mt19937_64& rng, double spread = 1.0) {
  std::normal_distribution<double> d(0, spread);
  Points p(n);
  for (auto& v : p) v = {d(rng), d(rng), d(rng)};
  return p;
}

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> d(0, 1);
  return axis_angle_to_matrix({d(rng), d(rng), d(rng)});
}

Points transform(const Points& p, double s, const Mat3& R, const Vec3& t) { return Similarity{s, R, t}.apply(p); }

double ssr(const Points& a, const Points& b) { return sum_squared_residual(a, b); }

}  // namespace

TEST(Procrustes, RecoversExactSimilarity) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Points P = random_points(22, rng);
    const Mat3 R0 = random_rotation(rng);
    const Vec3 t0{0.3, -1.2, 2.0};
    const Points Q = transform(P, 2.0, R0, t0);
    const Similarity sim = procrustes_align(P, Q);
    EXPECT_NEAR(sim.s, 2.0, 1e-10);
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(sim.R[i], R0[i], 1e-10);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(sim.t[i], t0[i], 1e-10);
    EXPECT_LT(ssr(sim.apply(P), Q), 1e-8);
  }
}

TEST(Procrustes, IdentityOnEqualSets) {
  std::mt19937_64 rng(1);
  const Points P = random_points(10, rng);
  const Similarity sim = procrustes_align(P, P);
  EXPECT_NEAR(sim.s, 1.0, 1e-12);
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(sim.R[i], mat3_identity()[i], 1e-12);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(sim.t[i], 0.0, 1e-12);
}

TEST(Procrustes, ProperRotation) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    // reflected targets force the determinant correction
    Points Q = random_points(8, rng);
    const Points P = random_points(8, rng);
    if (seed % 2) for (auto& q : Q) q[0] = -q[0];
    const Similarity sim = procrustes_align(P, Q);
    const Mat3 rtr = mat3_mul(mat3_transpose(sim.R), sim.R);
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(rtr[i], mat3_identity()[i], 1e-8);
    EXPECT_NEAR(mat3_det(sim.R), 1.0, 1e-8);
  }
}

TEST(Procrustes, BeatsDenseRandomSearch) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const Points P = random_points(12, rng);
    Points Q = transform(P, 1.3, random_rotation(rng), {0.5, 0.1, -0.4});
    std::normal_distribution<double> noise(0, 0.1);
    for (auto& q : Q)
      for (auto& v : q) v += noise(rng);
    const double best = ssr(procrustes_align(P, Q).apply(P), Q);
    std::uniform_real_distribution<double> us(0.2, 3.0), ut(-2, 2);
    for (int k = 0; k < 10000; ++k) {
      const double cand = ssr(transform(P, us(rng), random_rotation(rng), {ut(rng), ut(rng), ut(rng)}), Q);
      ASSERT_LE(best, cand + 1e-12);
    }
  }
}

TEST(Procrustes, DegenerateSourceThrows) {
  const Points line = {{0, 0, 0}, {1, 1, 1}, {2, 2, 2}, {3, 3, 3}};
  EXPECT_THROW(procrustes_align(line, line), DegeneracyError);
  const Points same(5, Vec3{1, 2, 3});
  EXPECT_THROW(procrustes_align(same, same), DegeneracyError);
  EXPECT_THROW(procrustes_align(Points{{0, 0, 0}, {1, 0, 0}}, Points{{0, 0, 0}, {1, 0, 0}}), DegeneracyError);
  // planar sets are fine
  const Points plane = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  EXPECT_NO_THROW(procrustes_align(plane, plane));
}

TEST(Mpjpe, ZeroTranslationAndAnalyticCase) {
  std::mt19937_64 rng(2);
  const Points g = random_points(22, rng);
  EXPECT_EQ(mpjpe(g, g), 0.0);
  Points moved = g;
  for (auto& p : moved) p = {p[0] + 1.5, p[1] - 2, p[2] + 7};
  EXPECT_NEAR(mpjpe(moved, g), 0.0, 1e-12);
  Points bumped = g;
  bumped[5][0] += 3;
  bumped[5][1] += 4;
  EXPECT_NEAR(mpjpe(bumped, g), 5.0 / 22.0, 1e-12);
  EXPECT_THROW(mpjpe(Points(3), Points(4)), DimensionError);
}

TEST(Pampjpe, SimilarityGivesZeroAndAlignmentHelps) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Points g = random_points(22, rng);
    EXPECT_NEAR(pampjpe(transform(g, 0.7, random_rotation(rng), {1, 2, 3}), g), 0.0, 1e-8);
    const Points p = random_points(22, rng);
    const Similarity sim = procrustes_align(p, g);
    EXPECT_LE(ssr(sim.apply(p), g), ssr(p, g));
    double direct = 0;
    const Points a = sim.apply(p);
    for (std::size_t j = 0; j < 22; ++j) direct += std::hypot(a[j][0] - g[j][0], a[j][1] - g[j][1], a[j][2] - g[j][2]) / 22.0;
    EXPECT_NEAR(pampjpe(p, g), direct, 1e-12);
  }
}

TEST(Pve, ZeroSingleVertexAndScalarLoop) {
  std::mt19937_64 rng(3);
  const Points g = random_points(402, rng);
  EXPECT_EQ(pve(g, g), 0.0);
  Points d = g;
  d[17][2] += 0.25;
  EXPECT_NEAR(pve(d, g), 0.25 / 402.0, 1e-15);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 r(seed);
    const Points a = random_points(50, r), b = random_points(50, r);
    const Vec3 ra{0.1, 0.2, 0.3}, rb{-0.5, 0, 0.2};
    double s = 0;
    for (std::size_t i = 0; i < 50; ++i) {
      double q = 0;
      for (int k = 0; k < 3; ++k) q += std::pow((a[i][k] - ra[k]) - (b[i][k] - rb[k]), 2);
      s += std::sqrt(q);
    }
    EXPECT_NEAR(pve(a, b, ra, rb), s / 50, 1e-6);
  }
  EXPECT_THROW(pve(Points(3), Points(2)), DimensionError);
}

TEST(AccelError, ZeroDriftAndScalarLoop) {
  std::mt19937_64 rng(4);
  std::vector<Points> g(6);
  for (auto& f : g) f = random_points(22, rng);
  EXPECT_EQ(accel_error(g, g), 0.0);
  std::vector<Points> drift = g;
  const Points v = random_points(22, rng);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < 22; ++j)
      for (int k = 0; k < 3; ++k) drift[t][j][k] += double(t) * v[j][k];
  EXPECT_NEAR(accel_error(drift, g), 0.0, 1e-12);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 r(seed);
    std::vector<Points> p(5), q(5);
    for (std::size_t t = 0; t < 5; ++t) {
      p[t] = random_points(4, r);
      q[t] = random_points(4, r);
    }
    double s = 0;
    for (std::size_t t = 1; t < 4; ++t)
      for (std::size_t j = 0; j < 4; ++j) {
        Vec3 ap{}, aq{};
        for (int k = 0; k < 3; ++k) {
          ap[k] = p[t - 1][j][k] - 2 * p[t][j][k] + p[t + 1][j][k];
          aq[k] = q[t - 1][j][k] - 2 * q[t][j][k] + q[t + 1][j][k];
        }
        s += std::hypot(ap[0] - aq[0], ap[1] - aq[1], ap[2] - aq[2]);
      }
    EXPECT_NEAR(accel_error(p, q), s / 12.0, 1e-6);
  }
  EXPECT_THROW(accel_error(std::vector<Points>(2, Points(3)), std::vector<Points>(2, Points(3))), DomainError);
}

TEST(Metrics, InvariantUnderCommonRigidMotion) {
  std::mt19937_64 rng(5);
  const Points p = random_points(22, rng), g = random_points(22, rng);
  const Mat3 R = random_rotation(rng);
  const Vec3 t{3, -1, 2};
  const Points p2 = transform(p, 1.0, R, t), g2 = transform(g, 1.0, R, t);
  EXPECT_NEAR(mpjpe(p2, g2), mpjpe(p, g), 1e-12);
  EXPECT_NEAR(pampjpe(p2, g2), pampjpe(p, g), 1e-10);
  const Points p3 = transform(p, 2.5, R, t), g3 = transform(g, 2.5, R, t);
  EXPECT_NEAR(pampjpe(p3, g3), 2.5 * pampjpe(p, g), 1e-10);
}

namespace {

PersonFrame frame_of(const Points& joints, const Points& verts) { return {joints, verts}; }

ClipEvalInput perfect_clip(std::size_t persons, std::size_t frames, std::mt19937_64& rng) {
  ClipEvalInput in;
  in.frames = frames;
  in.gt.resize(persons);
  in.pred.resize(persons);
  for (std::size_t p = 0; p < persons; ++p)
    for (std::size_t t = 0; t < frames; ++t) {
      in.gt[p].push_back(frame_of(random_points(22, rng), random_points(40, rng)));
      in.pred[p].push_back(in.gt[p].back());
    }
  return in;
}

}  // namespace

TEST(EvaluateClip, PerfectPredictions) {
  std::mt19937_64 rng(6);
  const EvalReport r = evaluate_clip(perfect_clip(2, 5, rng));
  EXPECT_EQ(r.mpjpe, 0.0);
  EXPECT_NEAR(r.pampjpe, 0.0, 1e-9);
  EXPECT_EQ(r.pve, 0.0);
  EXPECT_EQ(r.accel, 0.0);
  EXPECT_EQ(r.n_frames, 5u);
  EXPECT_EQ(r.n_persons, 10u);
  EXPECT_EQ(r.n_missed, 0u);
  EXPECT_EQ(r.n_false, 0u);
}

TEST(EvaluateClip, NoPredictionsIsFlaggedNotZero) {
  std::mt19937_64 rng(7);
  ClipEvalInput in = perfect_clip(3, 4, rng);
  for (auto& seq : in.pred)
    for (auto& f : seq) f.reset();
  in.n_false = 2;
  const EvalReport r = evaluate_clip(in);
  EXPECT_TRUE(std::isnan(r.mpjpe));
  EXPECT_TRUE(std::isnan(r.pampjpe));
  EXPECT_TRUE(std::isnan(r.pve));
  EXPECT_TRUE(std::isnan(r.accel));
  EXPECT_EQ(r.n_missed, 12u);
  EXPECT_EQ(r.n_false, 2u);
  EXPECT_EQ(r.to_key_values().at("mpjpe_mm"), "nan");
  EXPECT_NE(r.to_table().find("n/a"), std::string::npos);
}

TEST(EvaluateClip, PerfectPlusSimilarityTransformedPerson) {
  std::mt19937_64 rng(8);
  ClipEvalInput in = perfect_clip(2, 3, rng);
  const Similarity sim{1.4, random_rotation(rng), {0.2, 0.1, 0}};
  for (auto& f : in.pred[1]) {
    f->joints = sim.apply(f->joints);
    f->vertices = sim.apply(f->vertices);
  }
  const EvalReport r = evaluate_clip(in);
  EXPECT_NEAR(r.pampjpe, 0.0, 1e-6);
  EXPECT_GT(r.mpjpe, 0.0);
  EXPECT_GT(r.pve, 0.0);
  // mean over the 6 person-frames of which 3 are perfect
  double want = 0;
  for (std::size_t t = 0; t < 3; ++t) want += mpjpe(in.pred[1][t]->joints, in.gt[1][t].joints);
  EXPECT_NEAR(r.mpjpe, 1000.0 * want / 6.0, 1e-9);
}

TEST(EvaluateClip, AggregateSumsCountsAndAveragesErrors) {
  EvalReport a, b, c;
  a.mpjpe = 10;
  a.n_persons = 4;
  b.mpjpe = 20;
  b.n_persons = 6;
  b.n_missed = 1;
  c.n_persons = 3;
  c.n_missed = 3;
  const EvalReport r = aggregate_reports({a, b, c});
  EXPECT_EQ(r.mpjpe, 15.0);
  EXPECT_TRUE(std::isnan(r.pve));
  EXPECT_EQ(r.n_persons, 13u);
  EXPECT_EQ(r.n_missed, 4u);
}
