#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "stmesh/attention.hpp"
#include "stmesh/gradcheck.hpp"

using namespace stmesh;
using Td = Tensor<double>;

namespace {

std::vector<NamedTensor> as_inputs(const ParamSet<double>& ps) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : ps.items()) {
    out.emplace_back(name, t);
  }
  return out;
}

Td layer_norm_ref(const Td& x, const LayerNorm<double>& ln) {
  return layer_norm(x, ln.gamma, ln.beta, ln.eps);
}

}  // namespace

TEST(AddCoordChannels, CopiesFeaturesAndAppendsPlanes) {
  std::mt19937_64 rng(1);
  const Td f = random_tensor<double>({2, 5, 3, 3}, rng);
  const Td out = add_coord_channels(f);
  ASSERT_EQ(out.shape(), (Shape{2, 7, 3, 3}));
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t i = 0; i < 5 * 9; ++i) EXPECT_EQ(out[t * 63 + i], f[t * 45 + i]);
    const double want[3] = {-1, 0, 1};
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) {
        EXPECT_EQ(out[t * 63 + 5 * 9 + y * 3 + x], want[x]);
        EXPECT_EQ(out[t * 63 + 6 * 9 + y * 3 + x], want[y]);
      }
  }
  const Td other = add_coord_channels(random_tensor<double>({2, 5, 3, 3}, rng));
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 45; i < 63; ++i) EXPECT_EQ(out[t * 63 + i], other[t * 63 + i]);
}

TEST(BcaFocus, IdentityAnnihilationSelector) {
  std::mt19937_64 rng(2);
  const Td f = random_tensor<double>({3, 4, 5, 6}, rng);
  const Td ones = bca_focus(Td({3, 1, 5, 6}, 1.0), f);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_EQ(ones[i], f[i]);
  const Td zeros = bca_focus(Td({3, 1, 5, 6}), f);
  for (double v : zeros.data()) EXPECT_EQ(v, 0.0);
  Td hot({3, 1, 5, 6});
  hot[(1 * 5 + 2) * 6 + 4] = 1.0;
  const Td sel = bca_focus(hot, f);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 6; ++x) {
          const std::size_t i = ((t * 4 + c) * 5 + y) * 6 + x;
          EXPECT_EQ(sel[i], (t == 1 && y == 2 && x == 4) ? f[i] : 0.0);
        }
  EXPECT_THROW(bca_focus(Td({3, 1, 5, 5}), f), DimensionError);
  EXPECT_THROW(bca_focus(Td({2, 1, 5, 6}), f), DimensionError);
}

TEST(BcaFocus, BilinearInEachArgument) {
  std::mt19937_64 rng(3);
  const Td c1 = random_tensor<double>({2, 1, 4, 4}, rng), c2 = random_tensor<double>({2, 1, 4, 4}, rng);
  const Td f1 = random_tensor<double>({2, 3, 4, 4}, rng), f2 = random_tensor<double>({2, 3, 4, 4}, rng);
  const Td lhs_c = bca_focus(add(scale(c1, 2.0), c2), f1);
  const Td rhs_c = add(scale(bca_focus(c1, f1), 2.0), bca_focus(c2, f1));
  const Td lhs_f = bca_focus(c1, add(f1, scale(f2, -3.0)));
  const Td rhs_f = add(bca_focus(c1, f1), scale(bca_focus(c1, f2), -3.0));
  for (std::size_t i = 0; i < lhs_c.numel(); ++i) {
    EXPECT_NEAR(lhs_c[i], rhs_c[i], 1e-14);
    EXPECT_NEAR(lhs_f[i], rhs_f[i], 1e-14);
  }
}

TEST(CoordEncode, CountsRangesAndCorners) {
  std::mt19937_64 rng(4);
  const Td cm = random_tensor<double>({4, 1, 5, 7}, rng, 0.0, 1.0);
  const Td k = coord_encode_centermap(cm);
  ASSERT_EQ(k.shape(), (Shape{4, 35, 4}));
  EXPECT_EQ(k.numel() / 4, 4u * 5 * 7);
  for (std::size_t i = 0; i < 4 * 35; ++i) {
    EXPECT_EQ(k[i * 4], cm[i]);
    for (int c = 1; c < 4; ++c) {
      EXPECT_GE(k[i * 4 + c], -1.0);
      EXPECT_LE(k[i * 4 + c], 1.0);
    }
  }
  // first pixel of frame 0 and last pixel of frame 3
  EXPECT_EQ(k[1], -1.0);
  EXPECT_EQ(k[2], -1.0);
  EXPECT_EQ(k[3], -1.0);
  const std::size_t last = (4 * 35 - 1) * 4;
  EXPECT_EQ(k[last + 1], 1.0);
  EXPECT_EQ(k[last + 2], 1.0);
  EXPECT_EQ(k[last + 3], 1.0);
}

TEST(CoordEncode, FramePermutationOnlyMovesTimeComponent) {
  std::mt19937_64 rng(5);
  const Td cm = random_tensor<double>({3, 1, 4, 4}, rng, 0.0, 1.0);
  const std::vector<std::size_t> perm = {2, 0, 1};
  const Td permuted = index_select(cm, 0, perm);
  const Td a = coord_encode_centermap(cm), b = coord_encode_centermap(permuted);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t p = 0; p < 16; ++p) {
      const std::size_t ib = (t * 16 + p) * 4, ia = (perm[t] * 16 + p) * 4;
      EXPECT_EQ(b[ib], a[ia]);
      EXPECT_EQ(b[ib + 1], a[ia + 1]);
      EXPECT_EQ(b[ib + 2], a[ia + 2]);
      EXPECT_EQ(b[ib + 3], linspace_at(t, 3));
    }
}

TEST(CoordEncode, TransposedSwapsSpatialComponents) {
  std::mt19937_64 rng(6);
  const Td cm = random_tensor<double>({2, 1, 3, 5}, rng, 0.0, 1.0);
  const Td a = coord_encode_centermap(cm), b = coord_encode_centermap(cm, true);
  for (std::size_t i = 0; i < 30; ++i) {
    EXPECT_EQ(b[i * 4], a[i * 4]);
    EXPECT_EQ(b[i * 4 + 1], a[i * 4 + 2]);
    EXPECT_EQ(b[i * 4 + 2], a[i * 4 + 1]);
    EXPECT_EQ(b[i * 4 + 3], a[i * 4 + 3]);
  }
  const Td z = coord_encode_centermap(cm, false, true);
  for (std::size_t i = 0; i < 30; ++i)
    for (int c = 1; c < 4; ++c) EXPECT_EQ(z[i * 4 + c], 0.0);
}

TEST(Caa, ConstantKeysGiveUniformAttention) {
  for (std::size_t heads : {1u, 2u, 4u}) {
    std::mt19937_64 rng(7);
    ParamSet<double> ps;
    CaaParams<double> p(ps, "caa", 8, kKeyWidth, rng);
    for (auto& v : p.f_k.weight.values()) v = 0.0;
    const Td x = random_tensor<double>({2, 6, 8}, rng);
    const Td k = random_tensor<double>({2, 6, 4}, rng);
    Td attn;
    const Td out = caa(k, x, p, heads, &attn);
    const Td v = p.f_v(x);
    for (std::size_t g = 0; g < 2; ++g)
      for (std::size_t c = 0; c < 8; ++c) {
        double m = 0;
        for (std::size_t n = 0; n < 6; ++n) m += v[(g * 6 + n) * 8 + c] / 6.0;
        for (std::size_t n = 0; n < 6; ++n) EXPECT_NEAR(out[(g * 6 + n) * 8 + c], m, 1e-6) << "heads " << heads;
      }
    for (double a : attn.data()) EXPECT_NEAR(a, 1.0 / 6.0, 1e-12);
  }
}

TEST(Caa, SingletonReturnsValueProjection) {
  std::mt19937_64 rng(8);
  ParamSet<double> ps;
  CaaParams<double> p(ps, "caa", 8, kKeyWidth, rng);
  const Td x = random_tensor<double>({3, 1, 8}, rng);
  const Td out = caa(random_tensor<double>({3, 1, 4}, rng), x, p, 4);
  const Td v = p.f_v(x);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], v[i], 1e-12);
}

TEST(Caa, AttentionRowsSumToOne) {
  std::mt19937_64 rng(9);
  ParamSet<double> ps;
  CaaParams<double> p(ps, "caa", 8, kKeyWidth, rng);
  Td attn;
  caa(random_tensor<double>({2, 10, 4}, rng, -3, 3), random_tensor<double>({2, 10, 8}, rng, -3, 3), p, 2, &attn);
  ASSERT_EQ(attn.shape(), (Shape{2, 2, 10, 10}));
  for (std::size_t r = 0; r < 40; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 10; ++c) s += attn[r * 10 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Caa, TokenPermutationEquivariance) {
  std::mt19937_64 rng(10);
  ParamSet<double> ps;
  CaaParams<double> p(ps, "caa", 8, kKeyWidth, rng);
  const Td x = random_tensor<double>({1, 7, 8}, rng), k = random_tensor<double>({1, 7, 4}, rng);
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const Td a = caa(k, x, p, 2);
  const Td b = caa(index_select(k, 1, perm), index_select(x, 1, perm), p, 2);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(b[i * 8 + c], a[perm[i] * 8 + c], 1e-12);
}

TEST(Caa, RejectsMisalignedTokens) {
  std::mt19937_64 rng(11);
  ParamSet<double> ps;
  CaaParams<double> p(ps, "caa", 8, kKeyWidth, rng);
  EXPECT_THROW(caa(Td({2, 5, 4}), Td({2, 6, 8}), p, 2), DimensionError);
  EXPECT_THROW(caa(Td({1, 6, 4}), Td({2, 6, 8}), p, 2), DimensionError);
  EXPECT_THROW(caa(Td({2, 6, 4}), Td({2, 6, 8}), p, 3), DimensionError);
}

TEST(Caa, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> ps;
    CaaParams<double> p(ps, "caa", 8, kKeyWidth, rng);
    const Td x = random_tensor<double>({2, 5, 8}, rng), k = random_tensor<double>({2, 5, 4}, rng);
    const auto res = grad_check([&] { return sum(caa(k, x, p, 2)); },
                                {{"f_q", p.f_q.weight}, {"f_k", p.f_k.weight}, {"f_v", p.f_v.weight}});
    EXPECT_TRUE(res.passed) << "seed " << seed << " " << res.worst << " " << res.max_rel_error;
  }
}

TEST(Cel, PreservesShape) {
  std::mt19937_64 rng(12);
  ParamSet<double> ps;
  CelParams<double> p(ps, "cel", 8, 2, rng);
  for (std::size_t n : {1u, 4u, 9u}) {
    const Td x = random_tensor<double>({3, n, 8}, rng);
    EXPECT_EQ(cel(random_tensor<double>({3, n, 4}, rng), x, p).shape(), x.shape());
  }
}

TEST(Cel, ZeroFeedForwardLeavesNormalizedResidual) {
  std::mt19937_64 rng(13);
  ParamSet<double> ps;
  CelParams<double> p(ps, "cel", 8, 4, rng);
  for (auto& v : p.ff2.weight.values()) v = 0.0;
  for (auto& v : p.ff2.bias.values()) v = 0.0;
  for (auto& v : p.ln2.gamma.values()) v = 1.5;
  const Td x = random_tensor<double>({2, 6, 8}, rng), k = random_tensor<double>({2, 6, 4}, rng);
  const Td f1 = layer_norm_ref(add(x, caa(k, x, p.attn, 4)), p.ln1);
  const Td want = layer_norm_ref(f1, p.ln2);
  const Td got = cel(k, x, p);
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Cel, TwoLayerGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> ps;
    CelParams<double> a(ps, "a", 8, 2, rng), b(ps, "b", 8, 2, rng);
    Td x = random_tensor<double>({2, 4, 8}, rng);
    const Td k = random_tensor<double>({2, 4, 4}, rng);
    const Td w = random_tensor<double>({2, 4, 8}, rng);
    auto inputs = as_inputs(ps);
    inputs.emplace_back("x", x);
    GradCheckOptions opt;
    opt.max_coords_per_input = 24;
    opt.seed = seed;
    const auto res = grad_check([&] { return weighted_sum(cel(k, cel(k, x, a), b), w); }, inputs, opt);
    EXPECT_TRUE(res.passed) << "seed " << seed << " " << res.worst << " " << res.max_rel_error;
  }
}

TEST(StDecoder, OutputShapeAndResidualProjection) {
  std::mt19937_64 rng(14);
  for (std::size_t C : {6u, 8u}) {
    ParamSet<double> ps;
    DecoderConfig cfg{C, 8, 2, 1, false};
    StDecoder<double> dec(ps, "dec", cfg, rng);
    EXPECT_EQ(dec.residual.weight.defined(), C != 8);
    const Td out = st_decoder(random_tensor<double>({3, 1, 4, 5}, rng, 0, 1), random_tensor<double>({3, C, 4, 5}, rng), dec);
    EXPECT_EQ(out.shape(), (Shape{3, 8, 4, 5}));
  }
}

TEST(StDecoder, TranspositionScheduleAndTokenAccounting) {
  for (std::size_t L : {1u, 2u, 3u}) {
    std::mt19937_64 rng(15);
    ParamSet<double> ps;
    StDecoder<double> dec(ps, "dec", DecoderConfig{4, 8, 2, L, false}, rng);
    DecoderTrace<double> trace;
    const std::size_t T = 2, H = 3, W = 5;
    st_decoder(random_tensor<double>({T, 1, H, W}, rng, 0, 1), random_tensor<double>({T, 4, H, W}, rng), dec, &trace);
    ASSERT_EQ(trace.layers.size(), 4 * L);
    for (const std::string stage : {"spatial", "temporal"}) {
      std::size_t swapped = 0;
      for (const auto& layer : trace.layers) {
        if (layer.stage != stage) continue;
        EXPECT_EQ(layer.transposed, layer.index % 2 == 0);
        swapped += layer.transposed;
        // pixel (y=0, x=4) of frame 0 is token 4; its K coordinates reveal the schedule
        const double kx = layer.key_tokens[4 * 4 + 1], ky = layer.key_tokens[4 * 4 + 2];
        EXPECT_EQ(kx, layer.transposed ? -1.0 : 1.0);
        EXPECT_EQ(ky, layer.transposed ? 1.0 : -1.0);
      }
      EXPECT_EQ(swapped, L);
    }
    EXPECT_EQ(trace.attention_entries("spatial"), 2 * L * T * (H * W) * (H * W));
    EXPECT_EQ(trace.attention_entries("temporal"), 2 * L * (T * H * W) * (T * H * W));
    EXPECT_EQ(trace.layers.front().groups, T);
    EXPECT_EQ(trace.layers.back().groups, 1u);
  }
}

TEST(StDecoder, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> ps;
    StDecoder<double> dec(ps, "dec", DecoderConfig{3, 4, 2, 1, false}, rng);
    Td cm = random_tensor<double>({2, 1, 3, 3}, rng, 0.05, 0.95);
    Td focus = random_tensor<double>({2, 3, 3, 3}, rng);
    // Centermap gradients are tiny; a small objective keeps rounding noise under the error floor.
    const Td w = random_tensor<double>({2, 4, 3, 3}, rng, -1e-4, 1e-4);
    GradCheckOptions opt;
    opt.seed = seed;
    const auto res = grad_check([&] { return weighted_sum(st_decoder(cm, focus, dec), w); }, {{"centermap", cm}, {"focus", focus}}, opt);
    EXPECT_TRUE(res.passed) << "seed " << seed << " " << res.worst << " " << res.max_rel_error;
  }
}

TEST(MeshHead, ChannelCountAndZeroMap) {
  for (std::size_t E : {4u, 8u, 32u}) {
    std::mt19937_64 rng(16);
    ParamSet<double> ps;
    MeshHead<double> head(ps, "head", E, rng);
    const Td out = head(random_tensor<double>({2, E, 3, 3}, rng));
    EXPECT_EQ(out.shape(), (Shape{2, 145, 3, 3}));
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      EXPECT_EQ(head.conv.bias[kThetaOffset + j * 6], 1.0);
      EXPECT_EQ(head.conv.bias[kThetaOffset + j * 6 + 4], 1.0);
    }
  }
  std::mt19937_64 rng(17);
  ParamSet<double> ps;
  MeshHead<double> head(ps, "head", 8, rng);
  for (auto& v : head.conv.weight.values()) v = 0.0;
  for (auto& v : head.conv.bias.values()) v = 0.0;
  const Td out = head(random_tensor<double>({1, 8, 2, 2}, rng));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
  // theta is all zero and hence degenerate; only the camera is meaningful here
  const Td cols = gather_columns(out, {{0, 1, 1}});
  EXPECT_EQ(split_params(cols).xi.item(), 1.0);
}

TEST(MeshHead, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> ps;
    MeshHead<double> head(ps, "head", 4, rng);
    Td x = random_tensor<double>({1, 4, 2, 2}, rng);
    const Td w = random_tensor<double>({1, 145, 2, 2}, rng);
    GradCheckOptions opt;
    opt.tolerance = 1e-5;
    opt.max_coords_per_input = 64;
    opt.seed = seed;
    const auto res = grad_check([&] { return weighted_sum(head(x), w); },
                                {{"x", x}, {"weight", head.conv.weight}, {"bias", head.conv.bias}}, opt);
    EXPECT_TRUE(res.passed) << "seed " << seed << " " << res.worst << " " << res.max_rel_error;
  }
}

TEST(SampleParams, ConstantMapAndLayoutProbe) {
  Td constant({2, 145, 4, 4}, 0.5);
  const auto a = sample_params(constant, {{0, 1, 2, 1.0}, {1, 3, 0, 0.5}});
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].pose.theta, a[1].pose.theta);
  EXPECT_EQ(a[0].shape.beta, a[1].shape.beta);
  EXPECT_EQ(a[0].camera.xi, a[1].camera.xi);
  EXPECT_DOUBLE_EQ(a[0].camera.xi, std::exp(0.5));

  Td probe({1, 145, 3, 3});
  for (std::size_t c = 0; c < 145; ++c) probe[(c * 3 + 2) * 3 + 1] = double(c);
  const auto b = sample_params(probe, {{0, 1, 2, 1.0}});
  for (int i = 0; i < 6; ++i) EXPECT_EQ(b[0].pose.theta[i], 3.0 + i);
  EXPECT_EQ(b[0].shape.beta[0], 135.0);
  EXPECT_EQ(b[0].shape.beta[9], 144.0);
  EXPECT_EQ(b[0].camera.tx, 1.0);
  EXPECT_EQ(b[0].camera.ty, 2.0);
  EXPECT_THROW(sample_params(probe, {{0, 3, 0, 1.0}}), DomainError);
  EXPECT_THROW(sample_params(probe, {{1, 0, 0, 1.0}}), DomainError);
}

TEST(SampleParams, PlantAndRecover) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    const std::vector<CenterSpec> centers = {{0, 3, 3, 20}, {0, 11, 12, 20}, {1, 8, 2, 20}};
    const Td cm = render_centers(centers, 2, 16, 16);
    Td map = random_tensor<double>({2, 145, 16, 16}, rng, -0.1, 0.1);
    std::vector<PersonParams> planted(3);
    for (std::size_t i = 0; i < 3; ++i) {
      auto& p = planted[i];
      for (auto& v : p.pose.theta) v = u(rng);
      for (auto& v : p.shape.beta) v = u(rng);
      p.camera = {0.3 + 0.5 * (u(rng) + 1), u(rng), u(rng)};
      std::vector<double> col(145);
      col[0] = std::log(p.camera.xi);
      col[1] = p.camera.tx;
      col[2] = p.camera.ty;
      std::copy(p.pose.theta.begin(), p.pose.theta.end(), col.begin() + 3);
      std::copy(p.shape.beta.begin(), p.shape.beta.end(), col.begin() + 135);
      const auto& c = centers[i];
      for (std::size_t ch = 0; ch < 145; ++ch) map[((c.t * 145 + ch) * 16 + std::size_t(c.y)) * 16 + std::size_t(c.x)] = col[ch];
    }
    const auto dets = parse_centers(cm);
    ASSERT_EQ(dets.size(), 3u);
    const auto got = sample_params(map, dets);
    for (std::size_t d = 0; d < 3; ++d) {
      std::size_t i = 0;
      while (!(double(dets[d].x) == centers[i].x && double(dets[d].y) == centers[i].y && dets[d].t == centers[i].t)) ++i;
      EXPECT_EQ(got[d].pose.theta, planted[i].pose.theta);
      EXPECT_EQ(got[d].shape.beta, planted[i].shape.beta);
      EXPECT_NEAR(got[d].camera.xi, planted[i].camera.xi, 1e-14);
      EXPECT_EQ(got[d].camera.tx, planted[i].camera.tx);
    }
  }
}
