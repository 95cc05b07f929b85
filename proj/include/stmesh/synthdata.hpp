#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "stmesh/body_model.hpp"
#include "stmesh/heatmap.hpp"
#include "stmesh/tensor_io.hpp"

namespace stmesh {

struct GenConfig {
  std::size_t frames = 4;
  std::size_t n_persons = 2;
  std::size_t max_people = 8;
  double smoothness = 0.8;       // momentum of the per-frame rotation and camera steps, in [0, 1)
  double max_angle_step = 0.1;   // radians per frame per joint
  double occlusion_prob = 0.0;   // per person per frame
  std::size_t image_size = 64;
  std::size_t heatmap_size = 16;
  double min_separation = 3.0;   // heatmap pixels between centers
  double splat_sigma = 1.0;      // image pixels
  double noise = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("gen: " + m); };
    if (frames == 0) fail("frames must be positive");
    if (max_people == 0 || n_persons > max_people) fail("n_persons must lie in 0.." + std::to_string(max_people));
    if (!(smoothness >= 0 && smoothness < 1)) fail("smoothness must lie in [0, 1)");
    if (!(max_angle_step > 0 && max_angle_step <= 0.5)) fail("max_angle_step must lie in (0, 0.5]");
    if (!(occlusion_prob >= 0 && occlusion_prob <= 1)) fail("occlusion_prob must lie in [0, 1]");
    if (image_size == 0 || image_size % 4 != 0) fail("image_size must be a positive multiple of 4");
    if (heatmap_size == 0 || heatmap_size % 4 != 0) fail("heatmap_size must be a positive multiple of 4");
    if (!(min_separation >= 0) || !(splat_sigma > 0) || !(noise >= 0)) fail("separation, splat sigma and noise must be nonnegative");
  }
};

// Normalized image coordinates [-1, 1] (y up) to pixel column / row.
inline double to_pixel_x(double x, std::size_t size) { return (x + 1.0) * 0.5 * double(size - 1); }
inline double to_pixel_y(double y, std::size_t size) { return (1.0 - y) * 0.5 * double(size - 1); }

struct ClipSample {
  std::uint64_t seed = 0;
  std::size_t heatmap_size = 16;
  Tensor<double> frames;      // [T, 3, S, S]
  Tensor<double> centers;     // [P, T, 3]: heatmap column, row (rounded), d_bb in heatmap pixels
  Tensor<double> theta;       // [P, T, J, 6]
  Tensor<double> beta;        // [P, T, 10], constant over T
  Tensor<double> camera;      // [P, T, 3]: xi, tx, ty
  Tensor<double> joints3d;    // [P, T, J, 3]
  Tensor<double> joints2d;    // [P, T, J, 2]
  Tensor<double> vertices;    // [P, T, V, 3]
  Tensor<double> visibility;  // [P, T], 1 or 0

  std::size_t num_frames() const { return frames.size(0); }
  std::size_t num_persons() const { return centers.size(0); }
  std::size_t image_size() const { return frames.size(3); }

  bool visible(std::size_t p, std::size_t t) const { return visibility[p * num_frames() + t] != 0.0; }

  CenterSpec center(std::size_t p, std::size_t t) const {
    const double* c = centers.data().data() + (p * num_frames() + t) * 3;
    return {t, c[0], c[1], c[2]};
  }

  std::vector<CenterSpec> visible_centers() const {
    std::vector<CenterSpec> out;
    for (std::size_t t = 0; t < num_frames(); ++t)
      for (std::size_t p = 0; p < num_persons(); ++p)
        if (visible(p, t)) out.push_back(center(p, t));
    return out;
  }

  template <class T = double>
  Tensor<T> center_heatmap(const KernelParams& kp = {}) const {
    return render_centers<T>(visible_centers(), num_frames(), heatmap_size, heatmap_size, kp);
  }

  // Joints or vertices of one person-frame as points.
  std::vector<Vec3> points(const Tensor<double>& field, std::size_t p, std::size_t t) const {
    const std::size_t n = field.size(2);
    const double* base = field.data().data() + (p * num_frames() + t) * n * 3;
    std::vector<Vec3> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = {base[3 * i], base[3 * i + 1], base[3 * i + 2]};
    return out;
  }
};

namespace detail {

inline Vec3 capped(Vec3 w, double cap) {
  const double n = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
  if (n > cap) w = {w[0] * cap / n, w[1] * cap / n, w[2] * cap / n};
  return w;
}

// Channel weight of joint j in colour channel c: gives every joint a
// distinct signature inside a person's colour.
inline double joint_code(std::size_t j, std::size_t c) {
  return 0.4 + 0.6 * double((j * 5 + c * 7) % kNumJoints) / double(kNumJoints - 1);
}

inline bool separated(double x, double y, const std::vector<std::array<double, 2>>& others, double min_sep) {
  for (const auto& o : others)
    if (std::hypot(x - o[0], y - o[1]) < min_sep) return false;
  return true;
}

}  // namespace detail

inline ClipSample gen_clip(const GenConfig& cfg, const BodyTemplate& tpl) {
  cfg.validate();
  const std::size_t P = cfg.n_persons, T = cfg.frames, J = tpl.num_joints(), V = tpl.num_vertices();
  const std::size_t S = cfg.image_size, Hm = cfg.heatmap_size;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto U = [&](double lo, double hi) { return lo + (hi - lo) * unif(rng); };

  ClipSample s;
  s.seed = cfg.seed;
  s.heatmap_size = Hm;
  s.theta = Tensor<double>({P, T, J, 6});
  s.beta = Tensor<double>({P, T, kNumBetas});
  s.camera = Tensor<double>({P, T, 3});
  s.visibility = Tensor<double>({P, T}, 1.0);

  // Separation is measured in normalized units; 2 / (Hm - 1) per heatmap pixel.
  const double min_sep = cfg.min_separation * 2.0 / double(Hm - 1);
  std::vector<std::array<double, 2>> pos(P);
  {
    std::vector<std::array<double, 2>> placed;
    for (std::size_t p = 0; p < P; ++p) {
      bool ok = false;
      for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
        const double x = U(-0.6, 0.6), y = U(-0.6, 0.6);
        if (detail::separated(x, y, placed, min_sep)) {
          pos[p] = {x, y};
          ok = true;
        }
      }
      if (!ok) throw ConfigError("gen: cannot place " + std::to_string(P) + " people with the requested separation");
      placed.push_back(pos[p]);
    }
  }

  struct Track {
    std::array<double, 3> colour{};
    std::vector<Mat3> R;
    std::vector<Vec3> omega;
    double xi = 0, vx = 0, vy = 0, vs = 0;
  };
  std::vector<Track> tracks(P);
  for (std::size_t p = 0; p < P; ++p) {
    Track& k = tracks[p];
    for (auto& c : k.colour) c = U(0.3, 1.0);
    std::array<double, kNumBetas> beta{};
    for (auto& b : beta) b = 0.5 * gauss(rng);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < kNumBetas; ++i) s.beta[(p * T + t) * kNumBetas + i] = beta[i];
    k.R.resize(J);
    k.omega.assign(J, Vec3{0, 0, 0});
    k.R[kRootJoint] = axis_angle_to_matrix({0.0, U(-0.8, 0.8), 0.0});
    for (std::size_t j = 0; j < J; ++j) {
      if (j != kRootJoint) k.R[j] = axis_angle_to_matrix(detail::capped({0.15 * gauss(rng), 0.15 * gauss(rng), 0.15 * gauss(rng)}, 0.3));
    }
    k.xi = U(0.3, 0.5);
  }

  // Pose: capped momentum steps per joint. Position: momentum walk that stays
  // put whenever a step would break the separation from anyone's current spot.
  const double m = cfg.smoothness;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t p = 0; p < P; ++p) {
      Track& k = tracks[p];
      if (t > 0) {
        for (std::size_t j = 0; j < J; ++j) {
          for (int i = 0; i < 3; ++i) k.omega[j][i] = m * k.omega[j][i] + (1 - m) * 0.5 * cfg.max_angle_step * gauss(rng);
          k.omega[j] = detail::capped(k.omega[j], cfg.max_angle_step);
          k.R[j] = mat3_mul(k.R[j], axis_angle_to_matrix(k.omega[j]));
        }
        k.vs = m * k.vs + (1 - m) * 0.03 * gauss(rng);
        k.xi = std::clamp(k.xi + k.vs, 0.3, 1.2);
        k.vx = m * k.vx + (1 - m) * 0.05 * gauss(rng);
        k.vy = m * k.vy + (1 - m) * 0.05 * gauss(rng);
        const double nx = std::clamp(pos[p][0] + k.vx, -0.7, 0.7), ny = std::clamp(pos[p][1] + k.vy, -0.7, 0.7);
        std::vector<std::array<double, 2>> others;
        for (std::size_t q = 0; q < P; ++q)
          if (q != p) others.push_back(pos[q]);
        if (detail::separated(nx, ny, others, min_sep)) {
          pos[p] = {nx, ny};
        } else {
          k.vx = k.vy = 0;
        }
      }
      for (std::size_t j = 0; j < J; ++j) {
        const auto six = matrix_to_rot6d(k.R[j]);
        std::copy(six.begin(), six.end(), s.theta.data().begin() + static_cast<std::ptrdiff_t>(((p * T + t) * J + j) * 6));
      }
      double* cam = s.camera.data().data() + (p * T + t) * 3;
      cam[0] = k.xi;
      cam[1] = pos[p][0];
      cam[2] = pos[p][1];
      if (cfg.occlusion_prob > 0 && unif(rng) < cfg.occlusion_prob) s.visibility[p * T + t] = 0.0;
    }
  }

  const BodyTensors<double> body(tpl);
  const BodyOutput<double> out =
      body_forward(body, reshape(s.theta, {P * T, J, 6}), reshape(s.beta, {P * T, kNumBetas}));
  const Tensor<double> xi = reshape(slice(s.camera, 2, 0, 1), {P * T, 1, 1});
  const Tensor<double> tr = reshape(slice(s.camera, 2, 1, 3), {P * T, 1, 2});
  s.joints3d = reshape(out.joints, {P, T, J, 3});
  s.vertices = reshape(out.vertices, {P, T, V, 3});
  s.joints2d = reshape(project(out.joints, xi, tr), {P, T, J, 2});

  s.centers = Tensor<double>({P, T, 3});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t t = 0; t < T; ++t) {
      const double* j2 = s.joints2d.data().data() + (p * T + t) * J * 2;
      double lo_x = INFINITY, hi_x = -INFINITY, lo_y = INFINITY, hi_y = -INFINITY;
      for (std::size_t j = 0; j < J; ++j) {
        lo_x = std::min(lo_x, j2[2 * j]);
        hi_x = std::max(hi_x, j2[2 * j]);
        lo_y = std::min(lo_y, j2[2 * j + 1]);
        hi_y = std::max(hi_y, j2[2 * j + 1]);
      }
      const double px = 0.5 * double(Hm - 1);
      double* c = s.centers.data().data() + (p * T + t) * 3;
      c[0] = std::round(to_pixel_x(j2[2 * kRootJoint], Hm));
      c[1] = std::round(to_pixel_y(j2[2 * kRootJoint + 1], Hm));
      c[2] = std::hypot(hi_x - lo_x, hi_y - lo_y) * px;
    }

  // Joint splats, max-combined, then additive noise.
  s.frames = Tensor<double>({T, 3, S, S});
  const double sig = cfg.splat_sigma, inv = 1.0 / (2 * sig * sig);
  const int reach = static_cast<int>(std::ceil(3 * sig));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t p = 0; p < P; ++p) {
      if (!s.visible(p, t)) continue;
      const double* j2 = s.joints2d.data().data() + (p * T + t) * J * 2;
      for (std::size_t j = 0; j < J; ++j) {
        const double u = to_pixel_x(j2[2 * j], S), v = to_pixel_y(j2[2 * j + 1], S);
        const int u0 = static_cast<int>(std::round(u)), v0 = static_cast<int>(std::round(v));
        for (int yy = std::max(0, v0 - reach); yy <= std::min(int(S) - 1, v0 + reach); ++yy)
          for (int xx = std::max(0, u0 - reach); xx <= std::min(int(S) - 1, u0 + reach); ++xx) {
            const double g = std::exp(-((xx - u) * (xx - u) + (yy - v) * (yy - v)) * inv);
            for (std::size_t c = 0; c < 3; ++c) {
              double& px = s.frames[((t * 3 + c) * S + std::size_t(yy)) * S + std::size_t(xx)];
              px = std::max(px, g * tracks[p].colour[c] * detail::joint_code(j, c));
            }
          }
      }
    }
  for (double& v : s.frames.values()) v += cfg.noise * gauss(rng);
  return s;
}

// ---------------------------------------------------------------------------
// Clip directories

inline constexpr int kClipFormatVersion = 1;

namespace detail {

struct ClipField {
  const char* name;
  Tensor<double> ClipSample::*member;
};

inline const std::vector<ClipField>& clip_fields() {
  static const std::vector<ClipField> fields = {
      {"frames", &ClipSample::frames},     {"centers", &ClipSample::centers},       {"theta", &ClipSample::theta},
      {"beta", &ClipSample::beta},         {"camera", &ClipSample::camera},         {"joints3d", &ClipSample::joints3d},
      {"joints2d", &ClipSample::joints2d}, {"vertices", &ClipSample::vertices},     {"visibility", &ClipSample::visibility}};
  return fields;
}

}  // namespace detail

inline void write_clip(const ClipSample& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  KeyValues kv;
  kv["version"] = std::to_string(kClipFormatVersion);
  kv["frames"] = std::to_string(s.num_frames());
  kv["n_persons"] = std::to_string(s.num_persons());
  kv["seed"] = std::to_string(s.seed);
  kv["heatmap_size"] = std::to_string(s.heatmap_size);
  for (const auto& f : detail::clip_fields()) {
    kv[std::string(f.name) + ".shape"] = shape_to_text((s.*f.member).shape());
    write_raw_tensor(dir / (std::string(f.name) + ".bin"), s.*f.member);
  }
  write_key_values(dir / "manifest.txt", kv);
}

inline ClipSample read_clip(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.txt";
  if (!std::filesystem::exists(manifest)) throw FormatError("missing clip manifest " + manifest.string());
  const KeyValues kv = read_key_values(manifest);
  const std::string file = "manifest.txt";
  const std::string version = require_key(kv, "version", file);
  if (version != std::to_string(kClipFormatVersion)) {
    throw VersionError(manifest.string() + ": clip format version " + version + ", expected " + std::to_string(kClipFormatVersion));
  }
  ClipSample s;
  try {
    s.seed = std::stoull(require_key(kv, "seed", file));
    s.heatmap_size = std::stoull(require_key(kv, "heatmap_size", file));
  } catch (const std::logic_error&) {
    throw FormatError(manifest.string() + ": malformed seed or heatmap_size");
  }
  for (const auto& f : detail::clip_fields()) {
    const Shape shape = shape_from_text(require_key(kv, std::string(f.name) + ".shape", file), file);
    s.*f.member = read_raw_tensor_checked<double>(dir / (std::string(f.name) + ".bin"), shape);
  }
  if (require_key(kv, "frames", file) != std::to_string(s.num_frames()) ||
      require_key(kv, "n_persons", file) != std::to_string(s.num_persons())) {
    throw FormatError(manifest.string() + ": frame or person count disagrees with the tensor extents");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Datasets: clip directories plus index.txt with "name seed" lines.

struct DatasetEntry {
  std::string name;
  std::uint64_t seed = 0;
};

inline std::vector<DatasetEntry> read_dataset_index(const std::filesystem::path& dir) {
  const auto path = dir / "index.txt";
  std::ifstream is(path);
  if (!is) throw FormatError("missing dataset index " + path.string());
  std::vector<DatasetEntry> out;
  std::string name;
  std::uint64_t seed = 0;
  while (is >> name >> seed) out.push_back({name, seed});
  if (!is.eof()) throw FormatError(path.string() + ": malformed line after entry " + std::to_string(out.size()));
  return out;
}

inline std::uint64_t clip_seed(std::uint64_t dataset_seed, std::size_t index) {
  std::seed_seq seq{std::uint32_t(dataset_seed), std::uint32_t(dataset_seed >> 32), std::uint32_t(index)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (std::uint64_t(out[0]) << 32) | out[1];
}

inline std::string clip_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%04zu", index);
  return buf;
}

// Generates `count` clips with seeds derived from cfg.seed.
inline std::vector<DatasetEntry> gen_dataset(const GenConfig& cfg, const BodyTemplate& tpl, std::size_t count,
                                             const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<DatasetEntry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    GenConfig c = cfg;
    c.seed = clip_seed(cfg.seed, i);
    entries.push_back({clip_name(i), c.seed});
    write_clip(gen_clip(c, tpl), dir / entries.back().name);
  }
  std::ofstream os(dir / "index.txt", std::ios::trunc);
  if (!os) throw FormatError("cannot write " + (dir / "index.txt").string());
  for (const auto& e : entries) os << e.name << ' ' << e.seed << '\n';
  return entries;
}

}  // namespace stmesh
