#include <CLI11.hpp>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stmesh/cli.hpp"

namespace {

using namespace stmesh;
namespace fs = std::filesystem;
using Td = Tensor<double>;
using detail::vdot;
using detail::vsub;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

std::string fix(double v, int p = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(p) << v;
  return os.str();
}

std::ostringstream sink;

// ---------------------------------------------------------------------------

Outcome gradient_suite(const fs::path&) {
  RunConfig c;
  c.gradcheck.seeds = 20;
  const GradcheckResult r = cmd_gradcheck(c, sink);
  std::size_t failed = 0;
  std::string worst;
  double worst_err = 0;
  for (const auto& g : r.reports) {
    failed += g.passed() ? 0 : 1;
    if (g.worst_error >= worst_err) {
      worst_err = g.worst_error;
      worst = g.name;
    }
  }
  RunConfig neg;
  neg.gradcheck.seeds = 3;
  neg.gradcheck.only = "faulty_square";
  neg.gradcheck.inject_fault = true;
  const bool control_caught = !cmd_gradcheck(neg, sink).passed();
  const bool pass = r.passed() && r.seconds < 300 && control_caught;
  return {pass, std::to_string(r.reports.size()) + " cases x 20 seeds, " + std::to_string(failed) + " failed, worst " +
                    sci(worst_err) + " (" + worst + "), " + fix(r.seconds, 1) + " s, wrong-gradient control " +
                    (control_caught ? "caught" : "MISSED")};
}

Outcome heatmap_round_trip(const fs::path&) {
  constexpr std::size_t H = 24, W = 24, T = 2;
  std::size_t configs = 0, centers = 0, bad = 0;
  double min_score = 1;
  for (std::uint64_t seed = 0; configs < 200; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pix(2, int(W) - 3), count(1, 4);
    std::uniform_real_distribution<double> dbb(std::sqrt(2.0) * W, 3.0 * W);
    std::vector<CenterSpec> cs;
    for (std::size_t t = 0; t < T; ++t) {
      const int want = count(rng);
      std::vector<CenterSpec> frame;
      for (int attempt = 0; attempt < 500 && int(frame.size()) < want; ++attempt) {
        const CenterSpec c{t, double(pix(rng)), double(pix(rng)), dbb(rng)};
        const double sc = kernel_size(c.d_bb, W) / 3.0;
        bool far = true;
        for (const auto& o : frame) far = far && std::hypot(o.x - c.x, o.y - c.y) >= 4 * std::max(sc, kernel_size(o.d_bb, W) / 3.0);
        if (far) frame.push_back(c);
      }
      cs.insert(cs.end(), frame.begin(), frame.end());
    }
    ++configs;
    centers += cs.size();
    const auto dets = parse_centers(render_centers(cs, T, H, W), 0.25, 8);
    if (dets.size() != cs.size()) ++bad;
    for (const auto& c : cs) {
      auto it = std::find_if(dets.begin(), dets.end(), [&](const Detection& d) {
        return d.t == c.t && double(d.x) == c.x && double(d.y) == c.y;
      });
      if (it == dets.end()) {
        ++bad;
        continue;
      }
      min_score = std::min(min_score, it->score);
      if (it->score < 0.99) ++bad;
    }
  }
  double kernel_err = 0;
  std::mt19937_64 rng(99);
  for (int i = 0; i < 1000; ++i) {
    const double w = std::uniform_real_distribution<double>(4, 128)(rng);
    const double full = std::sqrt(2.0) * w;
    const double d_printed = std::uniform_real_distribution<double>(full, 10 * full)(rng);
    const double d_inverse = std::uniform_real_distribution<double>(1e-3 * full, full)(rng);
    const double kl = std::uniform_real_distribution<double>(0.5, 4)(rng), kr = std::uniform_real_distribution<double>(0, 10)(rng);
    const double p = kl + (full / d_printed) * (full / d_printed) * kr;
    const double q = kl + (d_inverse / full) * (d_inverse / full) * kr;
    kernel_err = std::max(kernel_err, std::abs(kernel_size(d_printed, w, {kl, kr, KernelReading::Printed}) - p));
    kernel_err = std::max(kernel_err, std::abs(kernel_size(d_inverse, w, {kl, kr, KernelReading::Inverse}) - q));
  }
  return {bad == 0 && min_score >= 0.99 && kernel_err <= 1e-9,
          std::to_string(configs) + " configurations, " + std::to_string(centers) + " centers, " + std::to_string(bad) +
              " misses, min score " + fix(min_score, 6) + "; kernel size max deviation " + sci(kernel_err)};
}

Outcome attention_identities(const fs::path&) {
  double uniform_err = 0, row_err = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> ps;
    CaaParams<double> p(ps, "caa", 8, kKeyWidth, rng);
    const std::size_t G = 2, N = 7;
    const Td x = random_tensor<double>({G, N, 8}, rng, -2, 2);
    const Td one_key = random_tensor<double>({1, 1, kKeyWidth}, rng, -1, 1);
    Td keys({G, N, kKeyWidth});
    for (std::size_t i = 0; i < keys.numel(); ++i) keys[i] = one_key[i % kKeyWidth];
    const Td out = caa(keys, x, p, seed % 2 ? 4 : 2);
    const Td v = p.f_v(x);
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t c = 0; c < 8; ++c) {
        double m = 0;
        for (std::size_t n = 0; n < N; ++n) m += v[(g * N + n) * 8 + c];
        m /= double(N);
        for (std::size_t n = 0; n < N; ++n) uniform_err = std::max(uniform_err, std::abs(out[(g * N + n) * 8 + c] - m));
      }
    Td attn;
    caa(random_tensor<double>({G, N, kKeyWidth}, rng, -3, 3), x, p, 2, &attn);
    for (std::size_t r = 0; r < attn.numel() / N; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < N; ++c) s += attn[r * N + c];
      row_err = std::max(row_err, std::abs(s - 1));
    }
  }
  // Schedule: K coordinates of each layer against the pixel grid.
  bool schedule_ok = true;
  std::string schedule;
  {
    std::mt19937_64 rng(3);
    ParamSet<double> ps;
    StDecoder<double> dec(ps, "dec", DecoderConfig{4, 8, 2, 2, false}, rng);
    DecoderTrace<double> trace;
    const std::size_t T = 2, S = 5;
    st_decoder(random_tensor<double>({T, 1, S, S}, rng, 0, 1), random_tensor<double>({T, 4, S, S}, rng), dec, &trace);
    for (const auto& l : trace.layers) {
      const bool expect_tr = l.index % 2 == 0;
      schedule += l.transposed ? 'T' : 'U';
      schedule_ok = schedule_ok && l.transposed == expect_tr;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t y = 0; y < S; ++y)
          for (std::size_t x = 0; x < S; ++x) {
            const std::size_t n = (t * S + y) * S + x;
            const double k1 = l.key_tokens[n * kKeyWidth + 1], k2 = l.key_tokens[n * kKeyWidth + 2];
            const double gx = -1 + 2.0 * double(x) / double(S - 1), gy = -1 + 2.0 * double(y) / double(S - 1);
            const double w1 = l.transposed ? gy : gx, w2 = l.transposed ? gx : gy;
            schedule_ok = schedule_ok && std::abs(k1 - w1) < 1e-12 && std::abs(k2 - w2) < 1e-12;
          }
    }
  }
  return {uniform_err < 1e-6 && row_err <= 1e-6 && schedule_ok,
          "uniform-attention error " + sci(uniform_err) + ", row-sum error " + sci(row_err) + ", K schedule " + schedule +
              (schedule_ok ? " (matches)" : " (WRONG)")};
}

Outcome bca_algebra(const fs::path&) {
  bool exact = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t T = 3, C = 4, H = 5, W = 6;
    const Td f = random_tensor<double>({T, C, H, W}, rng, -3, 3);
    const Td ones = bca_focus(Td({T, 1, H, W}, 1.0), f);
    const Td zeros = bca_focus(Td({T, 1, H, W}), f);
    Td hot({T, 1, H, W});
    const std::size_t ht = seed % T, hy = seed % H, hx = (seed * 7) % W;
    hot[(ht * H + hy) * W + hx] = 1.0;
    const Td sel = bca_focus(hot, f);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const std::size_t i = ((t * C + c) * H + y) * W + x;
            exact = exact && ones[i] == f[i] && zeros[i] == 0.0 && sel[i] == ((t == ht && y == hy && x == hx) ? f[i] : 0.0);
          }
  }
  ModelConfig mc;
  mc.channels = 8;
  mc.width = 8;
  mc.heads = 2;
  mc.frames = 2;
  mc.image_size = 32;
  mc.double_precision = true;
  mc.apply(Ablation::NoBca);
  const Model<double> m = build_model<double>(mc, 4);
  std::mt19937_64 rng(5);
  const Td frames = random_tensor<double>({2, 3, 32, 32}, rng, 0, 1);
  const ForwardOutput<double> base = forward(m, frames);
  double diff = 0;
  for (int k = 0; k < 5; ++k) {
    const Td other = random_tensor<double>({2, 1, 8, 8}, rng, 0, 1);
    ForwardHooks<double> hooks;
    hooks.focus_centermap = &other;
    const ForwardOutput<double> alt = forward(m, frames, hooks);
    for (std::size_t i = 0; i < base.param_map.numel(); ++i) diff = std::max(diff, std::abs(alt.param_map[i] - base.param_map[i]));
    for (std::size_t i = 0; i < base.centermap.numel(); ++i) diff = std::max(diff, std::abs(alt.centermap[i] - base.centermap[i]));
  }
  return {exact && diff == 0.0, std::string("identity/annihilation/selector ") + (exact ? "exact" : "NOT exact") +
                                    "; disable_bca output change under substituted centermaps " + sci(diff)};
}

Outcome body_model(const fs::path&) {
  const BodyTemplate tpl = make_toy_template(3);
  const Mesh rest = body_forward(tpl, PoseVector{}, ShapeVector{});
  double rest_err = 0;
  for (std::size_t v = 0; v < tpl.num_vertices(); ++v)
    for (int k = 0; k < 3; ++k) rest_err = std::max(rest_err, std::abs(rest.vertices[v][k] - tpl.template_vertices[v * 3 + k]));

  const BodyTensors<double> body(tpl);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  auto random_rot = [&] { return rot6d_to_matrix(std::array<double, 6>{n(rng), n(rng), n(rng), n(rng), n(rng), n(rng)}); };
  double rigid_err = 0, round_err = 0, skin_err = 0;
  for (int trial = 0; trial < 20; ++trial) {
    PoseVector pose;
    ShapeVector shape;
    std::normal_distribution<double> small(0, 0.2);
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      const auto six = matrix_to_rot6d(axis_angle_to_matrix({small(rng), small(rng), small(rng)}));
      std::copy(six.begin(), six.end(), pose.theta.begin() + j * 6);
    }
    for (auto& b : shape.beta) b = n(rng) * 0.5;
    const Mesh a = body_forward(tpl, pose, shape);
    const Mat3 R = random_rot();
    PoseVector turned = pose;
    const auto root = matrix_to_rot6d(mat3_mul(R, rot6d_to_matrix(std::span<const double>(pose.theta.data(), 6))));
    std::copy(root.begin(), root.end(), turned.theta.begin());
    const Mesh b = body_forward(tpl, turned, shape);
    Td th({1, kNumJoints, 6}), be({1, kNumBetas});
    std::copy(pose.theta.begin(), pose.theta.end(), th.values().begin());
    std::copy(shape.beta.begin(), shape.beta.end(), be.values().begin());
    const BodyOutput<double> shaped = body_forward(body, th, be);
    const Vec3 j0{shaped.rest_joints[0], shaped.rest_joints[1], shaped.rest_joints[2]};
    for (std::size_t v = 0; v < a.vertices.size(); ++v) {
      const Vec3 want = mat3_apply(R, vsub(a.vertices[v], j0));
      for (int k = 0; k < 3; ++k) rigid_err = std::max(rigid_err, std::abs(b.vertices[v][k] - j0[k] - want[k]));
    }
    const Mat3 M = random_rot();
    const Mat3 back = rot6d_to_matrix(matrix_to_rot6d(M));
    for (int i = 0; i < 9; ++i) round_err = std::max(round_err, std::abs(back[i] - M[i]));

    const Td verts = reshape(tpl.template_vertices, {1, tpl.num_vertices(), 3});
    Td six({1, kNumJoints, 6});
    for (std::size_t i = 0; i < six.numel(); ++i) six[i] = pose.theta[i];
    const Td rots = rot6d_to_matrix(six);
    const Td offs = random_tensor<double>({1, kNumJoints, 3}, rng);
    const Td shift({1, 1, 3}, {n(rng), n(rng), n(rng)});
    const Td s0 = blend_skin(tpl.skin_weights, verts, rots, offs);
    const Td s1 = blend_skin(tpl.skin_weights, verts, rots, add(offs, shift));
    for (std::size_t v = 0; v < tpl.num_vertices(); ++v)
      for (std::size_t k = 0; k < 3; ++k) skin_err = std::max(skin_err, std::abs(s1[v * 3 + k] - s0[v * 3 + k] - shift[k]));
  }
  return {rest_err <= 1e-12 && rigid_err < 1e-6 && round_err < 1e-6 && skin_err < 1e-6,
          "rest pose deviation " + sci(rest_err) + ", rigidity " + sci(rigid_err) + ", 6D round trip " + sci(round_err) +
              ", skinning translation " + sci(skin_err)};
}

// Horn's closed-form absolute orientation: the optimal rotation is the top
// eigenvector of a 4x4 symmetric matrix built from the cross-covariance.
Similarity horn_align(const Points& P, const Points& Q) {
  const std::size_t n = P.size();
  Vec3 mp{}, mq{};
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      mp[k] += P[i][k] / double(n);
      mq[k] += Q[i][k] / double(n);
    }
  double S[3][3] = {};
  double pp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 a = vsub(P[i], mp), b = vsub(Q[i], mq);
    pp += vdot(a, a);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) S[r][c] += a[r] * b[c];
  }
  Eigen::Matrix4d N;
  N << S[0][0] + S[1][1] + S[2][2], S[1][2] - S[2][1], S[2][0] - S[0][2], S[0][1] - S[1][0],
      S[1][2] - S[2][1], S[0][0] - S[1][1] - S[2][2], S[0][1] + S[1][0], S[2][0] + S[0][2],
      S[2][0] - S[0][2], S[0][1] + S[1][0], -S[0][0] + S[1][1] - S[2][2], S[1][2] + S[2][1],
      S[0][1] - S[1][0], S[2][0] + S[0][2], S[1][2] + S[2][1], -S[0][0] - S[1][1] + S[2][2];
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(N);
  const Eigen::Vector4d q = eig.eigenvectors().col(3);
  const double w = q(0), x = q(1), y = q(2), z = q(3);
  Similarity out;
  out.R = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
           2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
           2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
  double num = 0;
  for (std::size_t i = 0; i < n; ++i) num += vdot(vsub(Q[i], mq), mat3_apply(out.R, vsub(P[i], mp)));
  out.s = num / pp;
  const Vec3 rm = mat3_apply(out.R, mp);
  for (int k = 0; k < 3; ++k) out.t[k] = mq[k] - out.s * rm[k];
  return out;
}

Points random_points(std::size_t n, std::mt19937_64& rng, double spread = 1.0) {
  std::normal_distribution<double> d(0, spread);
  Points p(n);
  for (auto& v : p) v = {d(rng), d(rng), d(rng)};
  return p;
}

double mean_dist_loop(const Points& a, const Points& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::sqrt(std::pow(a[i][0] - b[i][0], 2) + std::pow(a[i][1] - b[i][1], 2) + std::pow(a[i][2] - b[i][2], 2));
  return s / double(a.size());
}

Outcome metrics(const fs::path&) {
  std::normal_distribution<double> n(0, 1);
  double planted_res = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Points P = random_points(22, rng);
    const Similarity truth{std::exp(0.5 * n(rng)), axis_angle_to_matrix({n(rng), n(rng), n(rng)}), {n(rng), n(rng), n(rng)}};
    const Points Q = truth.apply(P);
    planted_res = std::max(planted_res, sum_squared_residual(procrustes_align(P, Q).apply(P), Q));
  }
  std::size_t increases = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const std::size_t count = 3 + seed % 40;
    const Points P = random_points(count, rng, 0.1 + double(seed % 7)), Q = random_points(count, rng, 0.1 + double(seed % 5));
    const double before = sum_squared_residual(P, Q);
    const double after = sum_squared_residual(procrustes_align(P, Q).apply(P), Q);
    if (after > before * (1 + 1e-12)) ++increases;
  }
  std::mt19937_64 rng(7);
  std::vector<Points> g(8), drift(8);
  for (auto& f : g) f = random_points(22, rng);
  const Points v = random_points(22, rng), o = random_points(22, rng);
  for (std::size_t t = 0; t < 8; ++t) {
    drift[t] = g[t];
    for (std::size_t j = 0; j < 22; ++j)
      for (int k = 0; k < 3; ++k) drift[t][j][k] += o[j][k] + double(t) * v[j][k];
  }
  const double drift_err = accel_error(drift, g);

  double oracle_err = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 r(5000 + seed);
    const Points a = random_points(22, r), b = random_points(22, r);
    Points ar(22), br(22);
    for (std::size_t i = 0; i < 22; ++i) {
      ar[i] = vsub(a[i], a[kRootJoint]);
      br[i] = vsub(b[i], b[kRootJoint]);
    }
    oracle_err = std::max(oracle_err, std::abs(mpjpe(a, b) - mean_dist_loop(ar, br)));
    oracle_err = std::max(oracle_err, std::abs(pampjpe(a, b) - mean_dist_loop(horn_align(a, b).apply(a), b)));
    oracle_err = std::max(oracle_err, std::abs(pve(a, b, a[kRootJoint], b[kRootJoint]) - mean_dist_loop(ar, br)));
    std::vector<Points> p(5), q(5);
    for (std::size_t t = 0; t < 5; ++t) {
      p[t] = random_points(6, r);
      q[t] = random_points(6, r);
    }
    double s = 0;
    for (std::size_t t = 1; t < 4; ++t)
      for (std::size_t j = 0; j < 6; ++j) {
        double d2 = 0;
        for (int k = 0; k < 3; ++k) {
          const double ap = p[t - 1][j][k] - 2 * p[t][j][k] + p[t + 1][j][k];
          const double aq = q[t - 1][j][k] - 2 * q[t][j][k] + q[t + 1][j][k];
          d2 += (ap - aq) * (ap - aq);
        }
        s += std::sqrt(d2);
      }
    oracle_err = std::max(oracle_err, std::abs(accel_error(p, q) - s / 18.0));
  }
  return {planted_res < 1e-8 && increases == 0 && drift_err < 1e-12 && oracle_err < 1e-6,
          "planted similarity residual " + sci(planted_res) + ", SSR increases " + std::to_string(increases) +
              "/1000, linear-drift accel " + sci(drift_err) + ", oracle deviation " + sci(oracle_err)};
}

Outcome plant_and_recover(const fs::path& work) {
  RunConfig c;
  c.seed = 2024;
  c.gen_count = 20;
  c.paths.out = (work / "planted_data").string();
  cmd_gen(c, sink);
  c.paths.data = c.paths.out;
  c.paths.out = (work / "planted_eval").string();
  c.eval_mode = EvalMode::Planted;
  const EvalResult r = cmd_eval(c, sink);
  double worst = 0;
  std::size_t missed = 0, false_pos = 0, persons = 0;
  for (const auto& rep : r.clips) {
    for (double v : {rep.mpjpe, rep.pampjpe, rep.pve}) worst = std::isnan(v) ? INFINITY : std::max(worst, std::abs(v));
    missed += rep.n_missed;
    false_pos += rep.n_false;
    persons += rep.n_persons;
  }
  const bool pass = r.clips.size() == 20 && worst < 1e-6 && missed == 0 && false_pos == 0 && persons > 0;
  return {pass, std::to_string(r.clips.size()) + " clips, " + std::to_string(persons) + " person-frames, worst MPJPE/PAMPJPE/PVE " +
                    sci(worst) + " mm, missed " + std::to_string(missed) + ", false " + std::to_string(false_pos)};
}

RunConfig smoke_config(const fs::path& out, Ablation a) {
  RunConfig c;
  c.seed = 1;
  c.ablation = a;
  c.train.log_every = 0;
  c.train.checkpoint_every = 0;
  c.paths.out = out.string();
  return c;
}

Outcome overfit_smoke(const fs::path& work) {
  const auto start = std::chrono::steady_clock::now();
  const TrainResult r = cmd_train(smoke_config(work / "smoke_none", Ablation::None), sink);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double drop = 1 - r.loss_ratio();
  return {drop >= 0.8 && r.mpjpe_ratio() < 0.3 && secs < 600,
          "loss " + fix(r.first_total, 3) + " -> " + fix(r.final_total, 3) + " (" + fix(100 * drop, 1) + "% drop), MPJPE " +
              fix(r.before.mpjpe, 1) + " -> " + fix(r.after.mpjpe, 1) + " mm (" + fix(100 * r.mpjpe_ratio(), 1) + "%), " +
              fix(secs, 0) + " s"};
}

Outcome ablation_harness(const fs::path& work) {
  std::string detail;
  bool pass = true;
  std::set<std::string> keys_none;
  for (const auto& [a, dir] : {std::pair{Ablation::None, "smoke_none"}, {Ablation::NoCaa, "smoke_no-caa"}, {Ablation::NoBca, "smoke_no-bca"}}) {
    const fs::path out = work / dir;
    TrainResult r;
    if (a != Ablation::None || !fs::exists(out / "summary.txt")) r = cmd_train(smoke_config(out, a), sink);
    const KeyValues kv = read_key_values(out / "summary.txt");
    std::set<std::string> keys;
    for (const auto& [k, _] : kv) keys.insert(k);
    if (a == Ablation::None) keys_none = keys;
    const bool finite = std::isfinite(std::stod(kv.at("final_total"))) && std::isfinite(std::stod(kv.at("after.mpjpe_mm")));
    const bool same_shape = keys == keys_none && kv.at("ablation") == ablation_name(a) && kv.at("steps") == "500";
    pass = pass && finite && same_shape;
    detail += (detail.empty() ? "" : "; ") + ablation_name(a) + " loss " + fix(std::stod(kv.at("final_total")), 3) + ", MPJPE " +
              fix(std::stod(kv.at("after.mpjpe_mm")), 1) + " mm" + (same_shape ? "" : " (report keys differ)");
  }
  return {pass, detail};
}

Outcome bench_consistency(const fs::path& work) {
  RunConfig c;
  c.paths.out = (work / "bench").string();
  const BenchResult r = cmd_bench(c, sink);
  return {r.tokens_match() && r.temporal_ratio() > 2.0,
          std::to_string(r.tokens.size()) + " layers, token counts " + (r.tokens_match() ? "match" : "DIFFER") +
              " the formulas; temporal time " + fix(r.temporal_ms, 2) + " -> " + fix(r.temporal_ms_doubled, 2) +
              " ms at doubled T (x" + fix(r.temporal_ratio(), 2) + "); " + fix(r.fps_mean, 1) + " frames/s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks, one line per criterion"};
  std::string work = (fs::temp_directory_path() / "stmesh_acceptance").string();
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory");
  app.add_option("--only", only, "criterion numbers to run");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome(const fs::path&)>>> criteria = {
      {"gradient suite", gradient_suite},
      {"heatmap round trip", heatmap_round_trip},
      {"attention identities", attention_identities},
      {"BCA algebra", bca_algebra},
      {"body model", body_model},
      {"metrics", metrics},
      {"plant and recover", plant_and_recover},
      {"overfit smoke", overfit_smoke},
      {"ablation harness", ablation_harness},
      {"benchmark self-consistency", bench_consistency},
  };
  fs::remove_all(work);
  fs::create_directories(work);
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && std::find(only.begin(), only.end(), int(i + 1)) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second(work);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << i + 1 << "  " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return all ? 0 : 1;
}
