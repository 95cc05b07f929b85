#pragma once

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "stmesh/attention.hpp"
#include "stmesh/body_model.hpp"
#include "stmesh/gradcheck.hpp"
#include "stmesh/heatmap.hpp"
#include "stmesh/losses.hpp"

// Finite-difference suites over every differentiable building block, shared
// by the gradcheck command and the acceptance runner. All checks run in
// 64-bit with the default step and tolerance of grad_check.
namespace stmesh {

struct GradCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

struct GradCaseReport {
  std::string name;
  std::size_t seeds = 0;
  std::size_t failures = 0;
  std::size_t coords = 0;
  double worst_error = 0;
  std::uint64_t worst_seed = 0;
  std::string worst_where;
  double seconds = 0;

  bool passed() const { return failures == 0; }
};

namespace gradsuite {

using Td = Tensor<double>;

inline Td near_identity_theta(std::size_t n, std::mt19937_64& rng, double spread) {
  std::normal_distribution<double> d(0, spread);
  Td t({n, kNumJoints, 6});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = (i % 6 == 0 || i % 6 == 4 ? 1.0 : 0.0) + d(rng);
  return t;
}

// Moderate rotations with scaled and sheared 6D columns, so the directions
// the rotation ignores are not aligned with coordinate axes.
inline Td generic_theta(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0, 0.4);
  std::uniform_real_distribution<double> scale_d(0.6, 1.8), shear(-0.8, 0.8);
  Td t({n, kNumJoints, 6});
  for (std::size_t i = 0; i < n * kNumJoints; ++i) {
    const auto six = matrix_to_rot6d(axis_angle_to_matrix({d(rng), d(rng), d(rng)}));
    const double s1 = scale_d(rng), s2 = scale_d(rng), c = shear(rng);
    for (int k = 0; k < 3; ++k) {
      t[i * 6 + k] = s1 * six[k];
      t[i * 6 + 3 + k] = s2 * six[3 + k] + c * six[k];
    }
  }
  return t;
}

// Some objectives have coordinates whose gradient is zero or nearly so (a key
// coordinate constant within an attention group, opposite L1 signs on both
// sides of a frame). Central differences there return rounding noise of order
// 1e-11 |f|, so those objectives are scaled down to keep the noise under the
// 1e-8 floor of the relative error.
inline constexpr double kSmallObjective = 1e-4;

inline std::vector<NamedTensor> param_inputs(const ParamSet<double>& ps) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : ps.items()) out.emplace_back(name, t);
  return out;
}

// x^2 whose recorded derivative is 3x: the negative control.
inline Td faulty_square(const Td& x) {
  return detail::unary(x, "faulty_square", [](double v) { return v * v; }, [](double v, double) { return 3.0 * v; });
}

inline SpatialBatch<double> spatial_batch(std::mt19937_64& rng) {
  SpatialBatch<double> b;
  b.gt_cm = render_centers<double>({{0, 2, 3, 12}}, 1, 6, 6);
  b.pred_cm = random_tensor<double>({1, 1, 6, 6}, rng, 0.2, 0.8);
  b.pred_theta = generic_theta(2, rng);
  b.gt_theta = near_identity_theta(2, rng, 0.4);
  b.pred_beta = random_tensor<double>({2, 10}, rng);
  b.gt_beta = random_tensor<double>({2, 10}, rng);
  b.pred_j3d = random_tensor<double>({2, kNumJoints, 3}, rng);
  b.gt_j3d = random_tensor<double>({2, kNumJoints, 3}, rng);
  b.pred_j2d = random_tensor<double>({2, kNumJoints, 2}, rng);
  b.gt_j2d = random_tensor<double>({2, kNumJoints, 2}, rng);
  return b;
}

inline const BodyTensors<double>& toy_body() {
  static const BodyTensors<double> body(make_toy_template(0));
  return body;
}

}  // namespace gradsuite

inline std::vector<GradCase> gradient_cases(bool include_fault = false) {
  using namespace gradsuite;
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::function<GradCheckResult(std::uint64_t)> f) {
    cases.push_back({std::move(name), std::move(f)});
  };

  add_case("elementwise", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td a = random_tensor({2, 3, 4}, rng), b = random_tensor({3, 1}, rng), p = random_tensor({2, 3, 4}, rng, 0.5, 2.0);
    Td c = random_tensor({2, 3, 4}, rng, -0.9, 0.9);
    const Td w = random_tensor({2, 3, 4}, rng);
    return grad_check(
        [&] {
          Td y = add(mul(a, b), div(a, p));
          y = sub(y, sqrt(p)) + exp(scale(a, 0.5)) + log(p) + gelu(a) + sigmoid(b) * a + tanh(a) + abs(a);
          y = add(add(y, relu(a)), add_scalar(square(b), 0.3));
          y = add(y, add(clamp(c, -0.7, 0.7), acos_squared(c)));
          return weighted_sum(y, w);
        },
        {{"a", a}, {"b", b}, {"p", p}, {"c", c}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("shape_and_reduction", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 3, 4}, rng);
    const Td w = random_tensor({2, 3, 4}, rng), w2 = random_tensor({2, 2, 3, 4}, rng);
    return grad_check(
        [&] {
          Td z = permute(a, {2, 0, 1});
          Td c = concat(std::vector<Td>{slice(z, 0, 0, 2), slice(z, 0, 2, 4)}, 0);
          Td back = reshape(permute(c, {1, 2, 0}), {2, 3, 4});
          Td pooled = sum(back, 1, true) + mean(back, 2, true) + norm(back, -1, true);
          Td st = stack(std::vector<Td>{back, transpose(transpose(b))}, 1);
          return weighted_sum(back, w) + sum(pooled) + sum(index_select(back, 2, {3, 0, 3})) +
                 weighted_sum(st, w2) + mean(unsqueeze(b, 0));
        },
        {{"a", a}, {"b", b}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("matmul", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng), m = random_tensor({3, 4}, rng);
    Td r = random_tensor({4, 5}, rng);
    const Td w = random_tensor({2, 3, 5}, rng);
    return grad_check([&] { return weighted_sum(add(add(matmul(a, b), matmul(m, b)), matmul(a, r)), w); },
                      {{"a", a}, {"b", b}, {"m", m}, {"r", r}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("linear", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td x = random_tensor({2, 3, 4}, rng), wt = random_tensor({4, 5}, rng), b = random_tensor({5}, rng);
    const Td w = random_tensor({2, 3, 5}, rng);
    return grad_check([&] { return weighted_sum(linear(x, wt, b), w); }, {{"x", x}, {"weight", wt}, {"bias", b}},
                      {1e-5, 1e-4, 0, seed});
  });
  add_case("softmax", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td x = random_tensor({3, 5, 4}, rng, -2.0, 2.0);
    const Td w = random_tensor({3, 5, 4}, rng);
    return grad_check([&] { return weighted_sum(softmax(x, 1), w) + weighted_sum(softmax(x, -1), w); }, {{"x", x}},
                      {1e-5, 1e-4, 0, seed});
  });
  add_case("layer_norm", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td x = random_tensor({4, 6}, rng, -2.0, 2.0), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
    const Td w = random_tensor({4, 6}, rng);
    return grad_check([&] { return weighted_sum(layer_norm(x, g, b), w); }, {{"x", x}, {"gamma", g}, {"beta", b}},
                      {1e-5, 1e-4, 0, seed});
  });
  add_case("conv2d", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td x = random_tensor({2, 3, 5, 6}, rng), k = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    const Td w = random_tensor({2, 4, 3, 3}, rng), w1 = random_tensor({2, 4, 5, 6}, rng);
    return grad_check([&] { return weighted_sum(conv2d(x, k, b, 2, 1), w) + weighted_sum(conv2d(x, k, b, 1, 1), w1); },
                      {{"x", x}, {"weight", k}, {"bias", b}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("attend", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td q = random_tensor({2, 5, 3}, rng), k = random_tensor({2, 5, 3}, rng), v = random_tensor({2, 5, 4}, rng);
    const Td w = random_tensor({2, 5, 4}, rng);
    return grad_check([&] { return weighted_sum(attend(q, k, v, 0.7), w); }, {{"q", q}, {"k", k}, {"v", v}},
                      {1e-5, 1e-4, 0, seed});
  });
  add_case("cross", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td a = random_tensor({4, 3}, rng), b = random_tensor({4, 3}, rng);
    const Td w = random_tensor({4, 3}, rng);
    return grad_check([&] { return weighted_sum(cross(a, b), w); }, {{"a", a}, {"b", b}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("rot6d", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td r = random_tensor({3, 6}, rng);
    const Td w = random_tensor({3, 3, 3}, rng);
    return grad_check([&] { return weighted_sum(rot6d_to_matrix(r), w); }, {{"r", r}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("body_forward", [](std::uint64_t seed) {
    std::mt19937_64 rng(100 + seed);
    const auto& body = toy_body();
    Td theta = near_identity_theta(1, rng, 0.2);
    Td beta = random_tensor<double>({1, 10}, rng, -0.5, 0.5);
    const std::size_t V = body.V;
    const Td target = add(reshape(body.template_flat, {1, V, 3}), random_tensor<double>({1, V, 3}, rng, -0.05, 0.05));
    return grad_check([&] { return mean(norm(sub(body_forward(body, theta, beta).vertices, target), -1)); },
                      {{"theta", theta}, {"beta", beta}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("project", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td j = random_tensor({2, 5, 3}, rng), xi = random_tensor({2, 1, 1}, rng, 0.5, 1.5), t = random_tensor({2, 1, 2}, rng);
    const Td w = random_tensor({2, 5, 2}, rng);
    return grad_check([&] { return weighted_sum(project(j, xi, t), w); }, {{"joints", j}, {"xi", xi}, {"translation", t}},
                      {1e-5, 1e-4, 0, seed});
  });
  add_case("bca_focus", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td cm = random_tensor({2, 1, 3, 4}, rng, 0.05, 0.95), f = random_tensor({2, 3, 3, 4}, rng);
    const Td w = random_tensor({2, 3, 3, 4}, rng);
    return grad_check([&] { return weighted_sum(bca_focus(cm, f), w); }, {{"centermap", cm}, {"features", f}},
                      {1e-5, 1e-4, 0, seed});
  });
  add_case("tokens", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td cm = random_tensor({2, 1, 3, 4}, rng, 0.05, 0.95), f = random_tensor({2, 3, 3, 4}, rng);
    const Td w1 = random_tensor({2, 12, 4}, rng), w2 = random_tensor({2, 12, 5}, rng), w3 = random_tensor({2, 5, 3, 4}, rng);
    return grad_check(
        [&] {
          return weighted_sum(coord_encode_centermap(cm, true), w1) + weighted_sum(pixel_tokens(f), w2) +
                 weighted_sum(add_coord_channels(f), w3) + weighted_sum(tokens_to_map(pixel_tokens(f), 3, 4), w3);
        },
        {{"centermap", cm}, {"features", f}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("caa", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> ps;
    CaaParams<double> p(ps, "caa", 8, kKeyWidth, rng);
    Td x = random_tensor<double>({2, 5, 8}, rng), k = random_tensor<double>({2, 5, 4}, rng);
    const Td w = random_tensor<double>({2, 5, 8}, rng);
    auto inputs = param_inputs(ps);
    inputs.emplace_back("x", x);
    inputs.emplace_back("keys", k);
    return grad_check([&] { return weighted_sum(caa(k, x, p, 2), w); }, inputs, {1e-5, 1e-4, 0, seed});
  });
  add_case("cel", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> ps;
    CelParams<double> a(ps, "a", 8, 2, rng), b(ps, "b", 8, 2, rng);
    Td x = random_tensor<double>({2, 4, 8}, rng);
    const Td k = random_tensor<double>({2, 4, 4}, rng), w = random_tensor<double>({2, 4, 8}, rng);
    auto inputs = param_inputs(ps);
    inputs.emplace_back("x", x);
    return grad_check([&] { return weighted_sum(cel(k, cel(k, x, a), b), w); }, inputs, {1e-5, 1e-4, 24, seed});
  });
  add_case("st_decoder", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> ps;
    StDecoder<double> dec(ps, "dec", DecoderConfig{3, 4, 2, 1, false}, rng);
    Td cm = random_tensor<double>({2, 1, 3, 3}, rng, 0.05, 0.95), focus = random_tensor<double>({2, 3, 3, 3}, rng);
    const Td w = random_tensor<double>({2, 4, 3, 3}, rng, -kSmallObjective, kSmallObjective);
    auto inputs = param_inputs(ps);
    inputs.emplace_back("centermap", cm);
    inputs.emplace_back("focus", focus);
    return grad_check([&] { return weighted_sum(st_decoder(cm, focus, dec), w); }, inputs, {1e-5, 1e-4, 8, seed});
  });
  add_case("mesh_head", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> ps;
    MeshHead<double> head(ps, "head", 4, rng);
    Td x = random_tensor<double>({1, 4, 2, 2}, rng);
    const Td w = random_tensor<double>({1, 145, 2, 2}, rng);
    return grad_check([&] { return weighted_sum(head(x), w); }, {{"x", x}, {"weight", head.conv.weight}, {"bias", head.conv.bias}},
                      {1e-5, 1e-4, 64, seed});
  });
  add_case("sample_columns", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td pm = random_tensor<double>({2, 145, 2, 3}, rng);
    const Td w1 = random_tensor<double>({2, 1, 1}, rng), w2 = random_tensor<double>({2, 1, 2}, rng);
    const Td w3 = random_tensor<double>({2, kNumJoints, 6}, rng), w4 = random_tensor<double>({2, 10}, rng);
    return grad_check(
        [&] {
          const auto p = split_params(gather_columns(pm, {{0, 1, 2}, {1, 0, 1}}));
          return weighted_sum(p.xi, w1) + weighted_sum(p.translation, w2) + weighted_sum(p.theta, w3) + weighted_sum(p.beta, w4);
        },
        {{"param_map", pm}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("loss.focal", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td p = random_tensor<double>({1, 1, 4, 5}, rng, 0.05, 0.95);
    Td g = random_tensor<double>({1, 1, 4, 5}, rng, 0.0, 0.9);
    g[7] = 1.0;
    return grad_check([&] { return focal_loss(p, g); }, {{"pred", p}}, {1e-5, 1e-4, 0, seed});
  });
  add_case("loss.prior", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Td theta = generic_theta(2, rng);
    return grad_check([&] { return prior_loss(theta); }, {{"theta", theta}}, {1e-5, 1e-4, 0, seed});
  });
  using TTerm = Td TemporalTerms<double>::*;
  for (const auto& [label, term] : std::vector<std::pair<std::string, TTerm>>{
           {"accel", &TemporalTerms<double>::accel}, {"aj3d", &TemporalTerms<double>::aj3d}, {"sm", &TemporalTerms<double>::sm}}) {
    add_case("loss.temporal." + label, [term = term](std::uint64_t seed) {
      std::mt19937_64 rng(seed);
      Td p = random_tensor<double>({2, 4, 3, 3}, rng);
      const Td g = random_tensor<double>({2, 4, 3, 3}, rng);
      Td cm = random_tensor<double>({4, 1, 2, 2}, rng), fm = random_tensor<double>({4, 2, 2, 2}, rng);
      return grad_check([&] { return scale(temporal_loss(p, g, cm, fm, LossWeights{}).*term, kSmallObjective); },
                        {{"pred", p}, {"centermap", cm}, {"features", fm}}, {1e-5, 1e-4, 0, seed});
    });
  }
  using STerm = Td SpatialTerms<double>::*;
  for (const auto& [label, term] : std::vector<std::pair<std::string, STerm>>{{"cm", &SpatialTerms<double>::cm},
                                                                              {"pose", &SpatialTerms<double>::pose},
                                                                              {"shape", &SpatialTerms<double>::shape},
                                                                              {"prior", &SpatialTerms<double>::prior},
                                                                              {"mpj", &SpatialTerms<double>::mpj},
                                                                              {"pmpj", &SpatialTerms<double>::pmpj},
                                                                              {"pj2d", &SpatialTerms<double>::pj2d}}) {
    add_case("loss.spatial." + label, [term = term](std::uint64_t seed) {
      std::mt19937_64 rng(seed);
      SpatialBatch<double> b = spatial_batch(rng);
      return grad_check([&] { return spatial_loss(b, LossWeights{}).*term; },
                        {{"cm", b.pred_cm}, {"theta", b.pred_theta}, {"beta", b.pred_beta}, {"j3d", b.pred_j3d}, {"j2d", b.pred_j2d}},
                        {1e-5, 1e-4, 0, seed});
    });
  }
  if (include_fault) {
    add_case("faulty_square", [](std::uint64_t seed) {
      std::mt19937_64 rng(seed);
      Td x = random_tensor({5}, rng);
      return grad_check([&] { return sum(faulty_square(x)); }, {{"x", x}}, {1e-5, 1e-4, 0, seed});
    });
  }
  return cases;
}

inline GradCaseReport run_grad_case(const GradCase& c, std::size_t seeds) {
  GradCaseReport r;
  r.name = c.name;
  r.seeds = seeds;
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t s = 0; s < seeds; ++s) {
    const GradCheckResult res = c.run(s);
    r.coords += res.coords_checked;
    if (!res.passed) ++r.failures;
    if (res.max_rel_error > r.worst_error || s == 0) {
      r.worst_error = res.max_rel_error;
      r.worst_seed = s;
      r.worst_where = res.worst;
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace stmesh
