#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "stmesh/rotation.hpp"
#include "stmesh/tensor_io.hpp"

namespace stmesh {

inline constexpr std::size_t kNumJoints = 22;
inline constexpr std::size_t kNumBetas = 10;
inline constexpr std::size_t kDefaultVertices = 402;
inline constexpr double kBodyHeight = 1.7;

// SMPL kinematic tree without the two hand joints. Parents precede children.
inline const std::array<const char*, kNumJoints> kJointNames = {
    "pelvis",      "left_hip",       "right_hip",      "spine1",     "left_knee",   "right_knee",
    "spine2",      "left_ankle",     "right_ankle",    "spine3",     "left_foot",   "right_foot",
    "neck",        "left_collar",    "right_collar",   "head",       "left_shoulder", "right_shoulder",
    "left_elbow",  "right_elbow",    "left_wrist",     "right_wrist"};
inline constexpr std::array<int, kNumJoints> kJointParents = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7,
                                                              8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19};
inline constexpr std::size_t kRootJoint = 0;

// Procedural SMPL-lite body. Immutable after construction.
struct BodyTemplate {
  Tensor<double> template_vertices;  // [V, 3]
  Tensor<double> shape_basis;        // [V, 3, 10]
  Tensor<double> joint_regressor;    // [J, V], rows sum to 1
  Tensor<double> skin_weights;       // [V, J], rows sum to 1
  std::vector<int> parents;          // parents[0] == -1
  // Generation metadata: bone endpoints (joint index, or -1 for a leaf end
  // point stored in bone_ends) and the bone each vertex was sampled on.
  std::vector<std::array<int, 2>> bones;
  Tensor<double> bone_ends;  // [n_bones, 2, 3] endpoint positions
  std::vector<int> vertex_bone;
  std::uint64_t seed = 0;

  std::size_t num_vertices() const { return template_vertices.size(0); }
  std::size_t num_joints() const { return parents.size(); }
};

struct PoseVector {
  std::vector<double> theta = identity_theta();  // J * 6

  static std::vector<double> identity_theta() {
    std::vector<double> t(kNumJoints * 6);
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      t[j * 6 + 0] = 1.0;
      t[j * 6 + 4] = 1.0;
    }
    return t;
  }
};

struct ShapeVector {
  std::array<double, kNumBetas> beta{};
};

struct CameraParams {
  double xi = 1.0;
  double tx = 0.0;
  double ty = 0.0;
};

// Template tensors converted to the working precision.
template <class T>
struct BodyTensors {
  Tensor<T> template_flat;  // [1, V*3]
  Tensor<T> basis_t;        // [10, V*3]
  Tensor<T> regressor;      // [J, V]
  Tensor<T> skin;           // [V, J]
  std::vector<int> parents;
  std::size_t V = 0;
  std::size_t J = 0;

  explicit BodyTensors(const BodyTemplate& tpl) : parents(tpl.parents), V(tpl.num_vertices()), J(tpl.num_joints()) {
    template_flat = reshape(tpl.template_vertices, {1, V * 3}).template cast<T>();
    basis_t = transpose(reshape(tpl.shape_basis, {V * 3, kNumBetas}), 0, 1).template cast<T>();
    regressor = tpl.joint_regressor.cast<T>();
    skin = tpl.skin_weights.cast<T>();
  }
};

template <class T>
struct BodyOutput {
  Tensor<T> vertices;     // [B, V, 3]
  Tensor<T> joints;       // [B, J, 3]
  Tensor<T> rotations;    // [B, J, 3, 3] local joint rotations
  Tensor<T> rest_joints;  // [B, J, 3]
};

// Linear blend skinning. skin: [V, J]; vertices: [B, V, 3];
// rotations: [B, J, 3, 3]; offsets: [B, J, 3]. Vertex v maps to
// sum_j w_vj (R_j v + o_j).
template <class T>
Tensor<T> blend_skin(const Tensor<T>& skin, const Tensor<T>& vertices, const Tensor<T>& rotations,
                     const Tensor<T>& offsets) {
  const std::size_t B = vertices.size(0), V = vertices.size(1), J = skin.size(1);
  const Tensor<T> blended_rot = reshape(matmul(skin, reshape(rotations, {B, J, 9})), {B, V, 3, 3});
  const Tensor<T> blended_off = matmul(skin, offsets);
  return add(reshape(matmul(blended_rot, reshape(vertices, {B, V, 3, 1})), {B, V, 3}), blended_off);
}

// Shape blend, joint regression, forward kinematics along `parents`, linear
// blend skinning, then joint regression on the posed mesh.
// theta: [B, J, 6], beta: [B, 10].
template <class T>
BodyOutput<T> body_forward(const BodyTensors<T>& body, const Tensor<T>& theta, const Tensor<T>& beta) {
  const std::size_t B = theta.size(0);
  if (theta.rank() != 3 || theta.size(1) != body.J || theta.size(2) != 6) {
    throw DimensionError("body_forward: theta must be [B, " + std::to_string(body.J) + ", 6], got " + shape_str(theta.shape()));
  }
  if (beta.rank() != 2 || beta.size(0) != B || beta.size(1) != kNumBetas) {
    throw DimensionError("body_forward: beta must be [B, 10], got " + shape_str(beta.shape()));
  }
  const std::size_t V = body.V, J = body.J;
  const Tensor<T> shaped = reshape(add(matmul(beta, body.basis_t), body.template_flat), {B, V, 3});
  const Tensor<T> rest_joints = matmul(body.regressor, shaped);  // [B, J, 3]
  const Tensor<T> local = rot6d_to_matrix(theta);                // [B, J, 3, 3]

  auto joint_rot = [&](std::size_t j) { return reshape(slice(local, 1, j, j + 1), {B, 3, 3}); };
  auto joint_pos = [&](std::size_t j) { return reshape(slice(rest_joints, 1, j, j + 1), {B, 3, 1}); };

  std::vector<Tensor<T>> global_rot(J), global_pos(J), offsets(J);
  for (std::size_t j = 0; j < J; ++j) {
    const int p = body.parents[j];
    const Tensor<T> pos = joint_pos(j);
    if (p < 0) {
      global_rot[j] = joint_rot(j);
      global_pos[j] = pos;
    } else {
      const auto pj = static_cast<std::size_t>(p);
      global_rot[j] = matmul(global_rot[pj], joint_rot(j));
      global_pos[j] = add(matmul(global_rot[pj], sub(pos, joint_pos(pj))), global_pos[pj]);
    }
    // x -> G_j (x - rest_j) + pos_j
    offsets[j] = reshape(sub(global_pos[j], matmul(global_rot[j], pos)), {B, 1, 3});
  }
  const Tensor<T> posed = blend_skin(body.skin, shaped, stack(global_rot, 1), concat(offsets, 1));
  return BodyOutput<T>{posed, matmul(body.regressor, posed), local, rest_joints};
}

// Weak-perspective projection x' = xi x + tx, y' = xi y + ty.
// joints: [B, J, 3]; xi: [B, 1, 1]; translation: [B, 1, 2].
template <class T>
Tensor<T> project(const Tensor<T>& joints, const Tensor<T>& xi, const Tensor<T>& translation) {
  return add(mul(slice(joints, -1, 0, 2), xi), translation);
}

// Single-person conveniences at double precision.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Vec3> joints;
};

inline Mesh body_forward(const BodyTemplate& tpl, const PoseVector& pose, const ShapeVector& shape) {
  if (pose.theta.size() != tpl.num_joints() * 6) throw DimensionError("pose vector has wrong length");
  const BodyTensors<double> body(tpl);
  const Tensor<double> theta({1, tpl.num_joints(), 6}, pose.theta);
  const Tensor<double> beta({1, kNumBetas}, std::vector<double>(shape.beta.begin(), shape.beta.end()));
  const BodyOutput<double> out = body_forward(body, theta, beta);
  Mesh m;
  m.vertices.resize(tpl.num_vertices());
  m.joints.resize(tpl.num_joints());
  for (std::size_t v = 0; v < m.vertices.size(); ++v)
    for (int k = 0; k < 3; ++k) m.vertices[v][k] = out.vertices[v * 3 + k];
  for (std::size_t j = 0; j < m.joints.size(); ++j)
    for (int k = 0; k < 3; ++k) m.joints[j][k] = out.joints[j * 3 + k];
  return m;
}

inline std::vector<std::array<double, 2>> project(const std::vector<Vec3>& joints, const CameraParams& cam) {
  std::vector<std::array<double, 2>> out(joints.size());
  for (std::size_t j = 0; j < joints.size(); ++j) {
    out[j] = {cam.xi * joints[j][0] + cam.tx, cam.xi * joints[j][1] + cam.ty};
  }
  return out;
}

namespace detail {

struct BoneSpec {
  int from;        // joint index
  int to;          // joint index, or -1 for a leaf end point
  Vec3 end_point;  // used when to == -1
  double radius;
};

inline Vec3 vsub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline double vdot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 vcross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 vscale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline Vec3 vadd(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 vnormalize(const Vec3& a) { return vscale(a, 1.0 / std::sqrt(vdot(a, a))); }

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = vsub(b, a);
  const double t = std::clamp(vdot(vsub(p, a), ab) / vdot(ab, ab), 0.0, 1.0);
  const Vec3 d = vsub(p, vadd(a, vscale(ab, t)));
  return std::sqrt(vdot(d, d));
}

// Rest joint positions (x: body left, y: up, z: forward), pelvis at origin.
inline std::array<Vec3, kNumJoints> rest_joint_layout() {
  return {{{0, 0, 0},          {0.09, -0.06, 0},    {-0.09, -0.06, 0},   {0, 0.10, 0},
           {0.10, -0.46, 0.01}, {-0.10, -0.46, 0.01}, {0, 0.23, 0},        {0.10, -0.86, -0.02},
           {-0.10, -0.86, -0.02}, {0, 0.35, 0},      {0.10, -0.91, 0.10}, {-0.10, -0.91, 0.10},
           {0, 0.52, 0},        {0.05, 0.45, 0},     {-0.05, 0.45, 0},    {0, 0.62, 0},
           {0.17, 0.46, 0},     {-0.17, 0.46, 0},    {0.42, 0.46, 0},     {-0.42, 0.46, 0},
           {0.65, 0.46, 0},     {-0.65, 0.46, 0}}};
}

inline std::vector<BoneSpec> bone_layout() {
  // Limb radius by child joint.
  const std::array<double, kNumJoints> radius = {0.10,  0.07,  0.07,  0.10,  0.065, 0.065, 0.10, 0.05,
                                                 0.05,  0.10,  0.035, 0.035, 0.05,  0.05,  0.05, 0.06,
                                                 0.05,  0.05,  0.045, 0.045, 0.04,  0.04};
  std::vector<BoneSpec> bones;
  for (std::size_t j = 1; j < kNumJoints; ++j) {
    bones.push_back({kJointParents[j], static_cast<int>(j), {}, radius[j]});
  }
  bones.push_back({15, -1, {0, 0.80, 0.0}, 0.09});      // head top
  bones.push_back({10, -1, {0.10, -0.92, 0.17}, 0.03});  // left toes
  bones.push_back({11, -1, {-0.10, -0.92, 0.17}, 0.03});
  bones.push_back({20, -1, {0.80, 0.46, 0}, 0.035});     // left hand
  bones.push_back({21, -1, {-0.80, 0.46, 0}, 0.035});
  return bones;
}

// Orthonormal (u, v) perpendicular to unit axis a.
inline std::pair<Vec3, Vec3> perpendicular_frame(const Vec3& a) {
  Vec3 helper{1, 0, 0};
  if (std::abs(a[0]) > std::abs(a[1]) && std::abs(a[0]) > std::abs(a[2])) helper = {0, 1, 0};
  const Vec3 u = vnormalize(vcross(a, helper));
  return {u, vcross(a, u)};
}

}  // namespace detail

// Deterministic procedural humanoid. Each bone is a capsule; six anchor
// vertices surround each bone end point (so every joint is the centroid of
// its anchors and lies inside their hull), and the remaining vertices are
// random capsule-surface samples.
inline BodyTemplate make_toy_template(std::uint64_t seed, std::size_t num_vertices = kDefaultVertices) {
  using namespace detail;
  const auto joints_rest = rest_joint_layout();
  const auto specs = bone_layout();
  const std::size_t nb = specs.size();
  const std::size_t anchors = nb * 12;
  if (num_vertices < anchors) throw DomainError("make_toy_template: need at least " + std::to_string(anchors) + " vertices");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto endpoint = [&](const BoneSpec& b, int which) -> Vec3 {
    if (which == 0) return joints_rest[static_cast<std::size_t>(b.from)];
    return b.to >= 0 ? joints_rest[static_cast<std::size_t>(b.to)] : b.end_point;
  };

  std::vector<Vec3> verts;
  std::vector<int> vbone;
  // regressor membership: anchors of each joint
  std::vector<std::vector<std::size_t>> joint_anchors(kNumJoints);
  for (std::size_t b = 0; b < nb; ++b) {
    const Vec3 A = endpoint(specs[b], 0), Bp = endpoint(specs[b], 1);
    const Vec3 axis = vnormalize(vsub(Bp, A));
    const auto [u, v] = perpendicular_frame(axis);
    const double r = specs[b].radius;
    for (int which = 0; which < 2; ++which) {
      const Vec3 P = which == 0 ? A : Bp;
      const int joint = which == 0 ? specs[b].from : specs[b].to;
      for (const Vec3& d : {u, vscale(u, -1), v, vscale(v, -1), axis, vscale(axis, -1)}) {
        if (joint >= 0) joint_anchors[static_cast<std::size_t>(joint)].push_back(verts.size());
        verts.push_back(vadd(P, vscale(d, r)));
        vbone.push_back(static_cast<int>(b));
      }
    }
  }
  // Surface samples split across bones in proportion to length.
  const std::size_t extra = num_vertices - anchors;
  std::vector<double> lengths(nb);
  double total_len = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    const Vec3 d = vsub(endpoint(specs[b], 1), endpoint(specs[b], 0));
    lengths[b] = std::sqrt(vdot(d, d));
    total_len += lengths[b];
  }
  std::vector<std::size_t> counts(nb);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    const double exact = extra * lengths[b] / total_len;
    counts[b] = static_cast<std::size_t>(exact);
    assigned += counts[b];
    remainders.emplace_back(-(exact - counts[b]), b);
  }
  std::sort(remainders.begin(), remainders.end());
  for (std::size_t k = 0; assigned < extra; ++k, ++assigned) ++counts[remainders[k].second];
  for (std::size_t b = 0; b < nb; ++b) {
    const Vec3 A = endpoint(specs[b], 0), Bp = endpoint(specs[b], 1);
    const Vec3 axis = vnormalize(vsub(Bp, A));
    const auto [u, v] = perpendicular_frame(axis);
    for (std::size_t k = 0; k < counts[b]; ++k) {
      const double t = unit(rng);
      const double phi = 2.0 * std::numbers::pi * unit(rng);
      const Vec3 c = vadd(A, vscale(vsub(Bp, A), t));
      verts.push_back(vadd(c, vscale(vadd(vscale(u, std::cos(phi)), vscale(v, std::sin(phi))), specs[b].radius)));
      vbone.push_back(static_cast<int>(b));
    }
  }
  const std::size_t V = verts.size();

  // Scale so that the vertical extent equals the nominal body height.
  double ymin = 1e9, ymax = -1e9;
  for (const auto& p : verts) {
    ymin = std::min(ymin, p[1]);
    ymax = std::max(ymax, p[1]);
  }
  const double s = kBodyHeight / (ymax - ymin);

  BodyTemplate tpl;
  tpl.seed = seed;
  tpl.parents.assign(kJointParents.begin(), kJointParents.end());
  tpl.vertex_bone = vbone;
  tpl.template_vertices = Tensor<double>({V, 3});
  for (std::size_t i = 0; i < V; ++i)
    for (int k = 0; k < 3; ++k) tpl.template_vertices[i * 3 + k] = verts[i][k] * s;
  tpl.bone_ends = Tensor<double>({nb, 2, 3});
  for (std::size_t b = 0; b < nb; ++b) {
    tpl.bones.push_back({specs[b].from, specs[b].to});
    for (int which = 0; which < 2; ++which)
      for (int k = 0; k < 3; ++k) tpl.bone_ends[(b * 2 + which) * 3 + k] = endpoint(specs[b], which)[k] * s;
  }

  tpl.joint_regressor = Tensor<double>({kNumJoints, V});
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    const double w = 1.0 / static_cast<double>(joint_anchors[j].size());
    for (std::size_t idx : joint_anchors[j]) tpl.joint_regressor[j * V + idx] = w;
  }

  // Inverse distance to the two nearest bones, credited to each bone's
  // driving joint (its start point).
  tpl.skin_weights = Tensor<double>({V, kNumJoints});
  for (std::size_t i = 0; i < V; ++i) {
    Vec3 p{};
    for (int k = 0; k < 3; ++k) p[k] = tpl.template_vertices[i * 3 + k];
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t b = 0; b < nb; ++b) {
      Vec3 a{}, e{};
      for (int k = 0; k < 3; ++k) {
        a[k] = tpl.bone_ends[(b * 2) * 3 + k];
        e[k] = tpl.bone_ends[(b * 2 + 1) * 3 + k];
      }
      dist.emplace_back(point_segment_distance(p, a, e), b);
    }
    std::partial_sort(dist.begin(), dist.begin() + 2, dist.end());
    double row = 0;
    for (int k = 0; k < 2; ++k) {
      const double w = 1.0 / (dist[k].first + 1e-3);
      tpl.skin_weights[i * kNumJoints + static_cast<std::size_t>(specs[dist[k].second].from)] += w;
      row += w;
    }
    for (std::size_t j = 0; j < kNumJoints; ++j) tpl.skin_weights[i * kNumJoints + j] /= row;
  }

  // Shape basis: smooth sinusoidal displacement fields, each scaled to a
  // peak displacement of at most 5% of body height.
  tpl.shape_basis = Tensor<double>({V, 3, kNumBetas});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < kNumBetas; ++k) {
    struct Wave {
      Vec3 freq, amp;
      double phase;
    };
    std::vector<Wave> waves(3);
    for (auto& w : waves) {
      w.freq = {normal(rng) * 2.5, normal(rng) * 2.5, normal(rng) * 2.5};
      w.amp = {normal(rng), normal(rng), normal(rng)};
      w.phase = 2.0 * std::numbers::pi * unit(rng);
    }
    std::vector<Vec3> field(V);
    double peak = 0;
    for (std::size_t i = 0; i < V; ++i) {
      Vec3 p{};
      for (int c = 0; c < 3; ++c) p[c] = tpl.template_vertices[i * 3 + c];
      Vec3 d{0, 0, 0};
      for (const auto& w : waves) d = vadd(d, vscale(w.amp, std::sin(vdot(w.freq, p) + w.phase)));
      field[i] = d;
      peak = std::max(peak, std::sqrt(vdot(d, d)));
    }
    const double target = 0.05 * kBodyHeight * (0.5 + 0.5 * unit(rng));
    for (std::size_t i = 0; i < V; ++i)
      for (int c = 0; c < 3; ++c) tpl.shape_basis[(i * 3 + static_cast<std::size_t>(c)) * kNumBetas + k] = field[i][c] * target / peak;
  }
  return tpl;
}

// Rest joints of the unshaped template (regressor applied to the template).
inline std::vector<Vec3> rest_joints(const BodyTemplate& tpl) {
  const Tensor<double> j = matmul(tpl.joint_regressor, tpl.template_vertices);
  std::vector<Vec3> out(tpl.num_joints());
  for (std::size_t i = 0; i < out.size(); ++i)
    for (int k = 0; k < 3; ++k) out[i][k] = j[i * 3 + k];
  return out;
}

inline constexpr int kTemplateFormatVersion = 1;

inline void save_template(const BodyTemplate& tpl, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_raw_tensor(dir / "template_vertices.bin", tpl.template_vertices);
  write_raw_tensor(dir / "shape_basis.bin", tpl.shape_basis);
  write_raw_tensor(dir / "joint_regressor.bin", tpl.joint_regressor);
  write_raw_tensor(dir / "skin_weights.bin", tpl.skin_weights);
  Tensor<double> parents({tpl.parents.size()});
  for (std::size_t j = 0; j < tpl.parents.size(); ++j) parents[j] = tpl.parents[j];
  write_raw_tensor(dir / "parents.bin", parents);
  write_key_values(dir / "manifest.txt", {{"version", std::to_string(kTemplateFormatVersion)},
                                          {"V", std::to_string(tpl.num_vertices())},
                                          {"J", std::to_string(tpl.num_joints())},
                                          {"seed", std::to_string(tpl.seed)}});
}

// Loads the fields needed by body_forward; generation metadata is rebuilt
// only when the template is regenerated from its seed.
inline BodyTemplate load_template(const std::filesystem::path& dir) {
  const KeyValues kv = read_key_values(dir / "manifest.txt");
  const std::string file = (dir / "manifest.txt").string();
  if (std::stoi(require_key(kv, "version", file)) != kTemplateFormatVersion) {
    throw VersionError(file + ": unsupported template version " + kv.at("version"));
  }
  const std::size_t V = std::stoul(require_key(kv, "V", file));
  const std::size_t J = std::stoul(require_key(kv, "J", file));
  BodyTemplate tpl;
  tpl.seed = std::stoull(require_key(kv, "seed", file));
  tpl.template_vertices = read_raw_tensor_checked<double>(dir / "template_vertices.bin", {V, 3});
  tpl.shape_basis = read_raw_tensor_checked<double>(dir / "shape_basis.bin", {V, 3, kNumBetas});
  tpl.joint_regressor = read_raw_tensor_checked<double>(dir / "joint_regressor.bin", {J, V});
  tpl.skin_weights = read_raw_tensor_checked<double>(dir / "skin_weights.bin", {V, J});
  const Tensor<double> parents = read_raw_tensor_checked<double>(dir / "parents.bin", {J});
  for (double p : parents.data()) tpl.parents.push_back(static_cast<int>(p));
  return tpl;
}

}  // namespace stmesh
