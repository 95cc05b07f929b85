#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "stmesh/attention.hpp"
#include "stmesh/body_model.hpp"
#include "stmesh/heatmap.hpp"
#include "stmesh/losses.hpp"
#include "stmesh/metrics.hpp"
#include "stmesh/nn.hpp"
#include "stmesh/synthdata.hpp"
#include "stmesh/tensor_io.hpp"

namespace stmesh {

enum class Ablation { None, NoCaa, NoBca };

inline Ablation parse_ablation(const std::string& s) {
  if (s == "none") return Ablation::None;
  if (s == "no-caa") return Ablation::NoCaa;
  if (s == "no-bca") return Ablation::NoBca;
  throw ConfigError("unknown ablation '" + s + "' (expected none, no-caa or no-bca)");
}

inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::NoCaa: return "no-caa";
    case Ablation::NoBca: return "no-bca";
    default: return "none";
  }
}

inline constexpr std::size_t kBackboneStride = 4;

struct ModelConfig {
  std::size_t channels = 32;  // C
  std::size_t width = 32;     // E
  std::size_t heads = 4;
  std::size_t half_depth = 1;  // L
  std::size_t frames = 4;      // T
  std::size_t image_size = 64;
  bool disable_caa_coords = false;
  bool disable_bca = false;
  bool double_precision = false;

  std::size_t heatmap_size() const { return image_size / kBackboneStride; }

  void apply(Ablation a) {
    disable_caa_coords = a == Ablation::NoCaa;
    disable_bca = a == Ablation::NoBca;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
    if (channels < 2 || channels % 2 != 0) fail("channels must be an even number >= 2");
    if (heads == 0 || width == 0 || width % heads != 0) fail("width must be a positive multiple of heads");
    if (half_depth == 0) fail("half_depth must be positive");
    if (frames == 0) fail("frames must be positive");
    if (image_size == 0 || image_size % kBackboneStride != 0) fail("image_size must be a positive multiple of 4");
  }

  KeyValues to_key_values() const {
    return {{"model.channels", std::to_string(channels)},
            {"model.width", std::to_string(width)},
            {"model.heads", std::to_string(heads)},
            {"model.half_depth", std::to_string(half_depth)},
            {"model.frames", std::to_string(frames)},
            {"model.image_size", std::to_string(image_size)},
            {"model.disable_caa_coords", disable_caa_coords ? "true" : "false"},
            {"model.disable_bca", disable_bca ? "true" : "false"},
            {"model.double_precision", double_precision ? "true" : "false"}};
  }

  static ModelConfig from_key_values(const KeyValues& kv, const std::string& file) {
    auto num = [&](const std::string& k) {
      const std::string& v = require_key(kv, k, file);
      try {
        std::size_t used = 0;
        const auto n = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::size_t>(n);
      } catch (const std::logic_error&) {
        throw FormatError(file + ": '" + k + "' is not an unsigned integer: " + v);
      }
    };
    auto flag = [&](const std::string& k) {
      const std::string& v = require_key(kv, k, file);
      if (v != "true" && v != "false") throw FormatError(file + ": '" + k + "' must be true or false");
      return v == "true";
    };
    ModelConfig c;
    c.channels = num("model.channels");
    c.width = num("model.width");
    c.heads = num("model.heads");
    c.half_depth = num("model.half_depth");
    c.frames = num("model.frames");
    c.image_size = num("model.image_size");
    c.disable_caa_coords = flag("model.disable_caa_coords");
    c.disable_bca = flag("model.disable_bca");
    c.double_precision = flag("model.double_precision");
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Copies share parameter storage.
template <class T>
struct Model {
  ModelConfig cfg;
  std::uint64_t seed = 0;
  ParamSet<T> params;
  std::array<Conv2d<T>, 3> backbone;
  Conv2d<T> cm_hidden, cm_out;
  StDecoder<T> decoder;
  MeshHead<T> head;
};

template <class T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.double_precision != (sizeof(T) == sizeof(double))) {
    throw ConfigError("model: double_precision=" + std::string(cfg.double_precision ? "true" : "false") +
                      " does not match the requested element type");
  }
  Model<T> m;
  m.cfg = cfg;
  m.seed = seed;
  std::mt19937_64 rng(seed);
  const std::size_t C = cfg.channels;
  m.backbone[0] = Conv2d<T>(m.params, "backbone.conv1", 3, C / 2, 3, 2, 1, rng);
  m.backbone[1] = Conv2d<T>(m.params, "backbone.conv2", C / 2, C, 3, 2, 1, rng);
  m.backbone[2] = Conv2d<T>(m.params, "backbone.conv3", C, C, 3, 1, 1, rng);
  m.cm_hidden = Conv2d<T>(m.params, "centermap.conv1", C + 2, C, 3, 1, 1, rng);
  m.cm_out = Conv2d<T>(m.params, "centermap.conv2", C, 1, 1, 1, 0, rng);
  DecoderConfig dc;
  dc.channels = C;
  dc.width = cfg.width;
  dc.heads = cfg.heads;
  dc.half_depth = cfg.half_depth;
  dc.zero_coords = cfg.disable_caa_coords;
  m.decoder = StDecoder<T>(m.params, "decoder", dc, rng);
  m.head = MeshHead<T>(m.params, "mesh_head", cfg.width, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
struct ForwardHooks {
  // Replaces the centermap used for focusing only; keys still use the head's map.
  const Tensor<T>* focus_centermap = nullptr;
  DecoderTrace<T>* trace = nullptr;
};

template <class T>
struct ForwardOutput {
  Tensor<T> features;   // F_m [T, C, H, W]
  Tensor<T> centermap;  // C_m [T, 1, H, W]
  Tensor<T> focus;      // [T, C, H, W]
  Tensor<T> decoded;    // [T, E, H, W]
  Tensor<T> param_map;  // P_m [T, 145, H, W]
};

inline constexpr double kCentermapFloor = 1e-4;

// frames: [T, 3, S, S].
template <class T>
ForwardOutput<T> forward(const Model<T>& m, const Tensor<T>& frames, const ForwardHooks<T>& hooks = {}) {
  const auto& c = m.cfg;
  if (frames.shape() != Shape{c.frames, 3, c.image_size, c.image_size}) {
    throw DimensionError("forward: expected frames [" + std::to_string(c.frames) + ", 3, " + std::to_string(c.image_size) +
                         ", " + std::to_string(c.image_size) + "], got " + shape_str(frames.shape()));
  }
  ForwardOutput<T> out;
  Tensor<T> x = frames;
  for (const auto& conv : m.backbone) x = relu(conv(x));
  out.features = x;
  const Tensor<T> hidden = relu(m.cm_hidden(add_coord_channels(x)));
  out.centermap = clamp(sigmoid(m.cm_out(hidden)), static_cast<T>(kCentermapFloor), static_cast<T>(1 - kCentermapFloor));
  if (c.disable_bca) {
    out.focus = out.features;
  } else {
    out.focus = bca_focus(hooks.focus_centermap ? *hooks.focus_centermap : out.centermap, out.features);
  }
  out.decoded = st_decoder(out.centermap, out.focus, m.decoder, hooks.trace);
  out.param_map = m.head(out.decoded);
  return out;
}

template <class T>
Tensor<T> frames_tensor(const ClipSample& clip) {
  return clip.frames.cast<T>();
}

// ---------------------------------------------------------------------------
// Losses on one clip (teacher forced: parameters are read at GT centers)

template <class T>
struct ClipLoss {
  SpatialTerms<T> spatial;
  TemporalTerms<T> temporal;
  Tensor<T> total;
};

inline const std::vector<std::string>& loss_term_names() {
  static const std::vector<std::string> names = {"cm", "pose", "shape", "prior", "mpj", "pmpj", "pj2d", "accel", "aj3d", "sm"};
  return names;
}

template <class T>
std::vector<Tensor<T>> loss_terms(const ClipLoss<T>& l) {
  const auto& s = l.spatial;
  return {s.cm, s.pose, s.shape, s.prior, s.mpj, s.pmpj, s.pj2d, l.temporal.accel, l.temporal.aj3d, l.temporal.sm};
}

template <class T>
struct TeacherForced {
  ParamBatch<T> params;  // [P * T] person-frames, person-major
  Tensor<T> joints3d;    // [P * T, J, 3]
  Tensor<T> joints2d;    // [P * T, J, 2]
  Tensor<T> vertices;    // [P * T, V, 3]
};

template <class T>
TeacherForced<T> teacher_forced(const Tensor<T>& param_map, const ClipSample& clip, const BodyTensors<T>& body) {
  TeacherForced<T> tf;
  std::vector<PixelIndex> at;
  for (std::size_t p = 0; p < clip.num_persons(); ++p)
    for (std::size_t t = 0; t < clip.num_frames(); ++t) {
      const CenterSpec c = clip.center(p, t);
      at.push_back({t, static_cast<std::size_t>(c.y), static_cast<std::size_t>(c.x)});
    }
  tf.params = split_params(gather_columns(param_map, at));
  const BodyOutput<T> bo = body_forward(body, tf.params.theta, tf.params.beta);
  tf.joints3d = bo.joints;
  tf.vertices = bo.vertices;
  tf.joints2d = project(bo.joints, tf.params.xi, tf.params.translation);
  return tf;
}

template <class T>
ClipLoss<T> clip_loss(const ForwardOutput<T>& out, const ClipSample& clip, const BodyTensors<T>& body, const LossWeights& w) {
  const std::size_t P = clip.num_persons(), frames = clip.num_frames(), J = kNumJoints;
  SpatialBatch<T> sb;
  sb.pred_cm = out.centermap;
  sb.gt_cm = clip.center_heatmap<T>(w.kernel);
  Tensor<T> pred_seq({0, frames, J, 3}), gt_seq({0, frames, J, 3});
  if (P > 0) {
    const TeacherForced<T> tf = teacher_forced(out.param_map, clip, body);
    std::vector<std::size_t> vis;
    std::vector<std::size_t> whole;  // persons visible in every frame
    for (std::size_t p = 0; p < P; ++p) {
      bool all = true;
      for (std::size_t t = 0; t < frames; ++t) {
        if (clip.visible(p, t)) {
          vis.push_back(p * frames + t);
        } else {
          all = false;
        }
      }
      if (all) whole.push_back(p);
    }
    if (!vis.empty()) {
      auto gt = [&](const Tensor<double>& field, Shape flat) { return index_select(reshape(field, flat), 0, vis).template cast<T>(); };
      sb.pred_theta = index_select(tf.params.theta, 0, vis);
      sb.gt_theta = gt(clip.theta, {P * frames, J, 6});
      sb.pred_beta = index_select(tf.params.beta, 0, vis);
      sb.gt_beta = gt(clip.beta, {P * frames, kNumBetas});
      sb.pred_j3d = index_select(tf.joints3d, 0, vis);
      sb.gt_j3d = gt(clip.joints3d, {P * frames, J, 3});
      sb.pred_j2d = index_select(tf.joints2d, 0, vis);
      sb.gt_j2d = gt(clip.joints2d, {P * frames, J, 2});
    }
    if (!whole.empty()) {
      pred_seq = index_select(reshape(tf.joints3d, {P, frames, J, 3}), 0, whole);
      gt_seq = index_select(clip.joints3d, 0, whole).template cast<T>();
    }
  }
  ClipLoss<T> l;
  l.spatial = spatial_loss(sb, w);
  l.temporal = temporal_loss(pred_seq, gt_seq, out.centermap, out.features, w);
  l.total = add(l.spatial.total, l.temporal.total);
  return l;
}

// ---------------------------------------------------------------------------
// Training

struct StepReport {
  std::size_t step = 0;
  double total = 0;
  std::vector<double> terms;  // loss_term_names() order, averaged over the batch
};

// One optimizer step over `batch`; the loss is the batch mean of clip totals.
// Returns the pre-update loss.
template <class T>
StepReport train_step(Model<T>& m, const std::vector<ClipSample>& batch, const LossWeights& w, MomentumSgd<T>& opt,
                      const BodyTensors<T>& body) {
  if (batch.empty()) throw UsageError("train_step: empty batch");
  m.params.zero_grad();
  StepReport r;
  r.terms.assign(loss_term_names().size(), 0.0);
  const double inv = 1.0 / double(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    GradTape<T> tape;
    const ForwardOutput<T> out = forward(m, frames_tensor<T>(batch[b]));
    const ClipLoss<T> l = clip_loss(out, batch[b], body, w);
    const auto terms = loss_terms(l);
    for (std::size_t k = 0; k < terms.size(); ++k) {
      const double v = static_cast<double>(terms[k].item());
      if (!std::isfinite(v)) {
        throw NumericError("non-finite loss term '" + loss_term_names()[k] + "' (" + std::to_string(v) + ") in clip " +
                           std::to_string(b) + " at step " + std::to_string(opt.steps() + 1));
      }
      r.terms[k] += inv * v;
    }
    r.total += inv * static_cast<double>(l.total.item());
    tape.backward(scale(l.total, static_cast<T>(inv)));
  }
  for (const auto& [name, p] : m.params.items()) {
    for (T g : p.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter " + name);
    }
  }
  opt.step(m.params);
  r.step = opt.steps();
  return r;
}

// ---------------------------------------------------------------------------
// Inference

struct InferConfig {
  double threshold = 0.25;
  std::size_t max_people = 8;
  double link_distance = 3.0;   // heatmap pixels per frame
  double match_distance = 2.0;  // detection to GT center, for evaluation

  void validate() const {
    if (!(threshold > 0 && threshold < 1)) throw ConfigError("infer: threshold must lie in (0, 1)");
    if (max_people == 0) throw ConfigError("infer: max_people must be positive");
    if (!(link_distance >= 0) || !(match_distance >= 0)) throw ConfigError("infer: distances must be nonnegative");
  }
};

struct PersonFrameResult {
  Detection detection;
  std::size_t track = 0;
  PersonParams params;
  Mesh mesh;
};

struct InferResult {
  std::size_t frames = 0;
  std::size_t num_tracks = 0;
  std::vector<PersonFrameResult> persons;  // ordered by frame, then descending score
};

// Nearest-center chaining: detections in frame t continue the track of the
// closest detection in frame t - 1 within max_step; candidates are taken in
// (distance, previous index, current index) order. Returns a track id per
// detection; ids are assigned in order of first appearance.
inline std::vector<std::size_t> link_identities(const std::vector<Detection>& dets, std::size_t frames, double max_step,
                                                std::size_t* num_tracks = nullptr) {
  std::vector<std::vector<std::size_t>> by_frame(frames);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].t >= frames) throw DomainError("link_identities: detection frame out of range");
    by_frame[dets[i].t].push_back(i);
  }
  std::vector<std::size_t> track(dets.size());
  std::size_t next = 0;
  for (std::size_t t = 0; t < frames; ++t) {
    std::vector<bool> taken_prev(t > 0 ? by_frame[t - 1].size() : 0), taken_cur(by_frame[t].size());
    if (t > 0) {
      std::vector<std::tuple<double, std::size_t, std::size_t>> cand;
      for (std::size_t a = 0; a < by_frame[t - 1].size(); ++a)
        for (std::size_t b = 0; b < by_frame[t].size(); ++b) {
          const Detection& p = dets[by_frame[t - 1][a]];
          const Detection& q = dets[by_frame[t][b]];
          const double d = std::hypot(double(p.x) - double(q.x), double(p.y) - double(q.y));
          if (d <= max_step) cand.emplace_back(d, a, b);
        }
      std::sort(cand.begin(), cand.end());
      for (const auto& [d, a, b] : cand) {
        if (taken_prev[a] || taken_cur[b]) continue;
        taken_prev[a] = taken_cur[b] = true;
        track[by_frame[t][b]] = track[by_frame[t - 1][a]];
      }
    }
    for (std::size_t b = 0; b < by_frame[t].size(); ++b)
      if (!taken_cur[b]) track[by_frame[t][b]] = next++;
  }
  if (num_tracks) *num_tracks = next;
  return track;
}

// Parse, link, sample and run the body model on given maps.
template <class T>
InferResult infer_from_maps(const Tensor<T>& centermap, const Tensor<T>& param_map, const InferConfig& ic,
                            const BodyTemplate& tpl) {
  ic.validate();
  InferResult r;
  r.frames = centermap.size(0);
  std::vector<Detection> dets = parse_centers(centermap, ic.threshold, ic.max_people);
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.t < b.t; });
  const auto tracks = link_identities(dets, r.frames, ic.link_distance, &r.num_tracks);
  const auto params = sample_params(param_map, dets);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    r.persons.push_back({dets[i], tracks[i], params[i], body_forward(tpl, params[i].pose, params[i].shape)});
  }
  return r;
}

template <class T>
InferResult infer(const Model<T>& m, const Tensor<T>& frames, const InferConfig& ic, const BodyTemplate& tpl) {
  const ForwardOutput<T> out = forward(m, frames);
  return infer_from_maps(out.centermap, out.param_map, ic, tpl);
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::vector<PersonFrame> gt_person_frames(const ClipSample& clip, std::size_t p) {
  std::vector<PersonFrame> out;
  for (std::size_t t = 0; t < clip.num_frames(); ++t) out.push_back({clip.points(clip.joints3d, p, t), clip.points(clip.vertices, p, t)});
  return out;
}

// Matches detections to GT centers frame by frame and scores the matches.
inline EvalReport evaluate_inference(const InferResult& r, const ClipSample& clip, const InferConfig& ic) {
  ClipEvalInput in;
  in.frames = clip.num_frames();
  const std::size_t P = clip.num_persons();
  for (std::size_t p = 0; p < P; ++p) in.gt.push_back(gt_person_frames(clip, p));
  in.pred.assign(P, std::vector<std::optional<PersonFrame>>(clip.num_frames()));
  std::vector<Detection> dets;
  for (const auto& pf : r.persons) dets.push_back(pf.detection);
  std::vector<GtCenter> gts;
  std::vector<std::size_t> gt_person;
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t t = 0; t < clip.num_frames(); ++t) {
      const CenterSpec c = clip.center(p, t);
      gts.push_back({t, c.x, c.y});
      gt_person.push_back(p);
    }
  const MatchResult mr = match_gt(dets, gts, ic.match_distance);
  for (const auto& [d, g] : mr.pairs) {
    const auto& pf = r.persons[d];
    in.pred[gt_person[g]][gts[g].t] = PersonFrame{pf.mesh.joints, pf.mesh.vertices};
  }
  in.n_false = mr.unmatched_pred.size();
  return evaluate_clip(in);
}

// Parameters read at GT centers instead of parsed peaks.
template <class T>
EvalReport evaluate_teacher_forced(const Model<T>& m, const ClipSample& clip, const BodyTensors<T>& body) {
  ClipEvalInput in;
  in.frames = clip.num_frames();
  const std::size_t P = clip.num_persons(), frames = clip.num_frames();
  if (P == 0) return evaluate_clip(in);
  const ForwardOutput<T> out = forward(m, frames_tensor<T>(clip));
  const TeacherForced<T> tf = teacher_forced(out.param_map, clip, body);
  const Tensor<double> j3 = tf.joints3d.template cast<double>(), vs = tf.vertices.template cast<double>();
  const std::size_t J = j3.size(1), V = vs.size(1);
  auto pts = [](const Tensor<double>& x, std::size_t row, std::size_t n) {
    Points out(n);
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) out[i][k] = x[(row * n + i) * 3 + k];
    return out;
  };
  for (std::size_t p = 0; p < P; ++p) {
    in.gt.push_back(gt_person_frames(clip, p));
    in.pred.emplace_back();
    for (std::size_t t = 0; t < frames; ++t) in.pred.back().push_back(PersonFrame{pts(j3, p * frames + t, J), pts(vs, p * frames + t, V)});
  }
  return evaluate_clip(in);
}

// Maps that decode exactly to the clip's ground truth: the GT centermap and
// a parameter map holding each visible person's parameters at its center.
inline std::pair<Tensor<double>, Tensor<double>> planted_maps(const ClipSample& clip, const KernelParams& kp = {}) {
  const std::size_t frames = clip.num_frames(), H = clip.heatmap_size, W = clip.heatmap_size;
  Tensor<double> pm({frames, kParamChannels, H, W});
  for (std::size_t p = 0; p < clip.num_persons(); ++p)
    for (std::size_t t = 0; t < frames; ++t) {
      if (!clip.visible(p, t)) continue;
      const CenterSpec c = clip.center(p, t);
      const auto x = static_cast<std::size_t>(c.x), y = static_cast<std::size_t>(c.y);
      auto put = [&](std::size_t ch, double v) { pm[((t * kParamChannels + ch) * H + y) * W + x] = v; };
      const double* cam = clip.camera.data().data() + (p * frames + t) * 3;
      put(kCameraOffset, std::log(cam[0]));
      put(kCameraOffset + 1, cam[1]);
      put(kCameraOffset + 2, cam[2]);
      const double* th = clip.theta.data().data() + (p * frames + t) * kNumJoints * 6;
      for (std::size_t k = 0; k < kNumJoints * 6; ++k) put(kThetaOffset + k, th[k]);
      const double* be = clip.beta.data().data() + (p * frames + t) * kNumBetas;
      for (std::size_t k = 0; k < kNumBetas; ++k) put(kBetaOffset + k, be[k]);
    }
  return {clip.center_heatmap(kp), pm};
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.txt plus one raw tensor per parameter.

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointInfo {
  ModelConfig cfg;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::string optimizer;
  std::vector<std::string> params;
};

template <class T>
void save_checkpoint(const Model<T>& m, const std::filesystem::path& dir, std::size_t step = 0,
                     const MomentumSgd<T>* opt = nullptr) {
  std::filesystem::create_directories(dir / "params");
  KeyValues kv = m.cfg.to_key_values();
  kv["version"] = std::to_string(kCheckpointFormatVersion);
  kv["seed"] = std::to_string(m.seed);
  kv["step"] = std::to_string(step);
  std::ostringstream os;
  if (opt) {
    os << "momentum_sgd lr=" << opt->lr() << " momentum=" << opt->momentum() << " steps=" << opt->steps();
  } else {
    os << "none";
  }
  kv["optimizer"] = os.str();
  std::string names;
  for (const auto& [name, t] : m.params.items()) {
    names += (names.empty() ? "" : ",") + name;
    kv["param." + name + ".shape"] = shape_to_text(t.shape());
    write_raw_tensor(dir / "params" / (name + ".bin"), t);
  }
  kv["params"] = names;
  write_key_values(dir / "manifest.txt", kv);
}

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.txt";
  if (!std::filesystem::exists(path)) throw FormatError("missing checkpoint manifest " + path.string());
  const KeyValues kv = read_key_values(path);
  const std::string file = path.string();
  const std::string version = require_key(kv, "version", file);
  if (version != std::to_string(kCheckpointFormatVersion)) {
    throw VersionError(file + ": checkpoint format version " + version + ", expected " + std::to_string(kCheckpointFormatVersion));
  }
  CheckpointInfo info;
  info.cfg = ModelConfig::from_key_values(kv, file);
  try {
    info.seed = std::stoull(require_key(kv, "seed", file));
    info.step = std::stoull(require_key(kv, "step", file));
  } catch (const std::logic_error&) {
    throw FormatError(file + ": malformed seed or step");
  }
  info.optimizer = require_key(kv, "optimizer", file);
  std::stringstream ss(require_key(kv, "params", file));
  for (std::string n; std::getline(ss, n, ',');) info.params.push_back(n);
  return info;
}

// Loads parameters into an existing model. Everything is read and checked
// before any parameter is overwritten.
template <class T>
void load_checkpoint_into(Model<T>& m, const std::filesystem::path& dir) {
  const CheckpointInfo info = read_checkpoint_info(dir);
  if (!(info.cfg == m.cfg)) throw ConfigError("checkpoint " + dir.string() + " was written for a different model config");
  const KeyValues kv = read_key_values(dir / "manifest.txt");
  const auto& items = m.params.items();
  if (info.params.size() != items.size()) {
    throw FormatError(dir.string() + ": checkpoint lists " + std::to_string(info.params.size()) + " parameters, model has " +
                      std::to_string(items.size()));
  }
  std::vector<Tensor<T>> loaded;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& [name, t] = items[i];
    if (info.params[i] != name) throw FormatError(dir.string() + ": parameter " + std::to_string(i) + " is '" + info.params[i] + "', expected '" + name + "'");
    const Shape shape = shape_from_text(require_key(kv, "param." + name + ".shape", "manifest.txt"), "manifest.txt");
    if (shape != t.shape()) throw FormatError("parameter " + name + ": manifest shape " + shape_str(shape) + " vs model " + shape_str(t.shape()));
    const auto file = dir / "params" / (name + ".bin");
    Tensor<T> v;
    try {
      v = read_raw_tensor_checked<T>(file, shape);
    } catch (const FormatError& e) {
      throw FormatError("parameter " + name + ": " + e.what());
    }
    const std::size_t width = read_raw_header(file).element_width;
    if (width != 0 && width != sizeof(T)) {
      throw FormatError("parameter " + name + ": stored with " + std::to_string(8 * width) + "-bit elements, model uses " +
                        std::to_string(8 * sizeof(T)));
    }
    for (T x : v.values()) {
      if (!std::isfinite(static_cast<double>(x))) throw FormatError("parameter " + name + ": non-finite value");
    }
    loaded.push_back(v);
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor<T> dst = items[i].second;
    std::copy(loaded[i].values().begin(), loaded[i].values().end(), dst.values().begin());
  }
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& dir) {
  const CheckpointInfo info = read_checkpoint_info(dir);
  Model<T> m = build_model<T>(info.cfg, info.seed);
  load_checkpoint_into(m, dir);
  return m;
}

}  // namespace stmesh
