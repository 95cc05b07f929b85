#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stmesh/errors.hpp"
#include "stmesh/heatmap.hpp"
#include "stmesh/losses.hpp"
#include "stmesh/pipeline.hpp"
#include "stmesh/synthdata.hpp"

namespace stmesh {

struct TrainConfig {
  std::size_t clips = 4;
  std::size_t steps = 500;
  double lr = 1e-2;
  double momentum = 0.9;
  std::size_t checkpoint_every = 100;  // 0 keeps only the final checkpoint
  std::size_t log_every = 50;          // progress lines on stdout; 0 silences them
  bool evaluate = true;                // teacher-forced MPJPE before and after training

  void validate() const {
    if (clips == 0) throw ConfigError("train: clips must be positive");
    if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and nonnegative");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must lie in [0, 1)");
  }
};

enum class EvalMode { Infer, TeacherForced, Planted };

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "infer") return EvalMode::Infer;
  if (s == "teacher-forced") return EvalMode::TeacherForced;
  if (s == "planted") return EvalMode::Planted;
  throw ConfigError("unknown eval mode '" + s + "' (expected infer, teacher-forced or planted)");
}

inline std::string eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::TeacherForced: return "teacher-forced";
    case EvalMode::Planted: return "planted";
    default: return "infer";
  }
}

struct BenchConfig {
  std::size_t runs = 10;
  std::size_t warmup = 3;
  bool scaling = true;  // also time the temporal stage at twice the frame count

  void validate() const {
    if (runs < 2) throw ConfigError("bench: runs must be at least 2");
  }
};

struct GradcheckConfig {
  std::size_t seeds = 20;
  std::string only;  // comma-separated case names; empty runs every case
  bool inject_fault = false;

  void validate() const {
    if (seeds == 0) throw ConfigError("gradcheck: seeds must be positive");
  }
};

struct PathConfig {
  std::string data;
  std::string checkpoint;
  std::string out;
};

// Everything a command needs. Generator frame count and image sizes follow
// the model section; the ablation sets the model's disable flags.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  Ablation ablation = Ablation::None;
  ModelConfig model;
  LossWeights loss;
  GenConfig gen;
  std::size_t gen_count = 8;
  TrainConfig train;
  InferConfig infer;
  EvalMode eval_mode = EvalMode::Infer;
  BenchConfig bench;
  GradcheckConfig gradcheck;
  PathConfig paths;

  ModelConfig model_config() const {
    ModelConfig m = model;
    m.apply(ablation);
    return m;
  }

  GenConfig gen_config() const {
    GenConfig g = gen;
    g.frames = model.frames;
    g.image_size = model.image_size;
    g.heatmap_size = model.heatmap_size();
    g.seed = seed;
    return g;
  }

  void validate() const {
    if (jobs == 0) throw ConfigError("run: jobs must be positive");
    model_config().validate();
    try {
      loss.validate();
    } catch (const DomainError& e) {
      throw ConfigError(std::string("loss: ") + e.what());
    }
    if (!(loss.kernel.k_l > 0) || !(loss.kernel.k_r >= 0)) throw ConfigError("loss: kernel_kl must be positive and kernel_kr nonnegative");
    gen_config().validate();
    train.validate();
    infer.validate();
    bench.validate();
    gradcheck.validate();
  }
};

// ---------------------------------------------------------------------------
// Value codecs

namespace config_detail {

inline std::string format(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string format(bool v) { return v ? "true" : "false"; }
template <class V>
  requires(std::is_unsigned_v<V> && !std::is_same_v<V, bool>)
std::string format(V v) {
  return std::to_string(v);
}
inline std::string format(const std::string& v) { return v; }
inline std::string format(Ablation a) { return ablation_name(a); }
inline std::string format(EvalMode m) { return eval_mode_name(m); }
inline std::string format(KernelReading r) { return r == KernelReading::Printed ? "printed" : "inverse"; }

template <class V>
void parse(const std::string& s, V& out) {
  if constexpr (std::is_same_v<V, bool>) {
    if (s != "true" && s != "false") throw ConfigError("expected true or false, got '" + s + "'");
    out = s == "true";
  } else if constexpr (std::is_unsigned_v<V>) {
    V v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("expected an unsigned integer, got '" + s + "'");
    out = v;
  } else if constexpr (std::is_same_v<V, double>) {
    double v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
      throw ConfigError("expected a finite number, got '" + s + "'");
    }
    out = v;
  } else if constexpr (std::is_same_v<V, std::string>) {
    out = s;
  } else if constexpr (std::is_same_v<V, Ablation>) {
    out = parse_ablation(s);
  } else if constexpr (std::is_same_v<V, EvalMode>) {
    out = parse_eval_mode(s);
  } else if constexpr (std::is_same_v<V, KernelReading>) {
    if (s == "printed") out = KernelReading::Printed;
    else if (s == "inverse") out = KernelReading::Inverse;
    else throw ConfigError("expected printed or inverse, got '" + s + "'");
  }
}

}  // namespace config_detail

struct ConfigField {
  std::string section;
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;

  std::string name() const { return section + "." + key; }
};

namespace config_detail {

template <class Access>
ConfigField field(std::string section, std::string key, std::string help, Access access) {
  ConfigField f;
  f.section = std::move(section);
  f.key = std::move(key);
  f.help = std::move(help);
  f.set = [access](RunConfig& c, const std::string& v) { parse(v, access(c)); };
  f.get = [access](const RunConfig& c) { return format(access(c)); };
  return f;
}

}  // namespace config_detail

#define STMESH_FIELD(sec, key, help, expr) config_detail::field(sec, key, help, [](auto& c) -> auto& { return expr; })

inline const std::vector<ConfigField>& config_schema() {
  static const std::vector<ConfigField> schema = [] {
    std::vector<ConfigField> s;
    s.push_back(STMESH_FIELD("run", "seed", "dataset and initialization seed", c.seed));
    s.push_back(STMESH_FIELD("run", "jobs", "worker threads for clip-parallel evaluation", c.jobs));
    s.push_back(STMESH_FIELD("run", "ablation", "none, no-caa or no-bca", c.ablation));

    s.push_back(STMESH_FIELD("model", "channels", "backbone channels C", c.model.channels));
    s.push_back(STMESH_FIELD("model", "width", "transformer width E", c.model.width));
    s.push_back(STMESH_FIELD("model", "heads", "attention heads", c.model.heads));
    s.push_back(STMESH_FIELD("model", "half_depth", "spatial layers (same count of temporal layers)", c.model.half_depth));
    s.push_back(STMESH_FIELD("model", "frames", "clip length T", c.model.frames));
    s.push_back(STMESH_FIELD("model", "image_size", "input frame side in pixels", c.model.image_size));
    s.push_back(STMESH_FIELD("model", "double_precision", "64-bit parameters and activations", c.model.double_precision));

    s.push_back(STMESH_FIELD("loss", "w_cm", "centermap focal loss", c.loss.w_cm));
    s.push_back(STMESH_FIELD("loss", "w_pose", "pose parameters", c.loss.w_pose));
    s.push_back(STMESH_FIELD("loss", "w_shape", "shape parameters", c.loss.w_shape));
    s.push_back(STMESH_FIELD("loss", "w_prior", "pose and shape prior", c.loss.w_prior));
    s.push_back(STMESH_FIELD("loss", "w_j3d", "3D joints (MPJ and PMPJ)", c.loss.w_j3d));
    s.push_back(STMESH_FIELD("loss", "w_pj2d", "projected 2D joints", c.loss.w_pj2d));
    s.push_back(STMESH_FIELD("loss", "w_accel", "joint acceleration", c.loss.w_accel));
    s.push_back(STMESH_FIELD("loss", "w_aj3d", "temporal 3D joints", c.loss.w_aj3d));
    s.push_back(STMESH_FIELD("loss", "w_sm", "centermap smoothness", c.loss.w_sm));
    s.push_back(STMESH_FIELD("loss", "kernel_kl", "smallest target kernel size", c.loss.kernel.k_l));
    s.push_back(STMESH_FIELD("loss", "kernel_kr", "target kernel size range", c.loss.kernel.k_r));
    s.push_back(STMESH_FIELD("loss", "kernel_reading", "printed or inverse kernel-size ratio", c.loss.kernel.reading));

    s.push_back(STMESH_FIELD("gen", "count", "clips written by gen", c.gen_count));
    s.push_back(STMESH_FIELD("gen", "persons", "people per clip", c.gen.n_persons));
    s.push_back(STMESH_FIELD("gen", "max_people", "upper bound on persons", c.gen.max_people));
    s.push_back(STMESH_FIELD("gen", "smoothness", "momentum of per-frame motion", c.gen.smoothness));
    s.push_back(STMESH_FIELD("gen", "max_angle_step", "radians per frame per joint", c.gen.max_angle_step));
    s.push_back(STMESH_FIELD("gen", "occlusion_prob", "per person per frame", c.gen.occlusion_prob));
    s.push_back(STMESH_FIELD("gen", "min_separation", "heatmap pixels between centers", c.gen.min_separation));
    s.push_back(STMESH_FIELD("gen", "splat_sigma", "joint blob radius in image pixels", c.gen.splat_sigma));
    s.push_back(STMESH_FIELD("gen", "noise", "pixel noise amplitude", c.gen.noise));

    s.push_back(STMESH_FIELD("train", "clips", "training clips", c.train.clips));
    s.push_back(STMESH_FIELD("train", "steps", "optimizer steps", c.train.steps));
    s.push_back(STMESH_FIELD("train", "lr", "learning rate", c.train.lr));
    s.push_back(STMESH_FIELD("train", "momentum", "SGD momentum", c.train.momentum));
    s.push_back(STMESH_FIELD("train", "checkpoint_every", "steps between checkpoints, 0 for final only", c.train.checkpoint_every));
    s.push_back(STMESH_FIELD("train", "log_every", "steps between progress lines, 0 for none", c.train.log_every));
    s.push_back(STMESH_FIELD("train", "evaluate", "teacher-forced MPJPE before and after", c.train.evaluate));

    s.push_back(STMESH_FIELD("infer", "threshold", "centermap peak threshold", c.infer.threshold));
    s.push_back(STMESH_FIELD("infer", "max_people", "detections kept per frame", c.infer.max_people));
    s.push_back(STMESH_FIELD("infer", "link_distance", "largest per-frame center step within a track", c.infer.link_distance));
    s.push_back(STMESH_FIELD("infer", "match_distance", "detection to ground-truth center radius", c.infer.match_distance));

    s.push_back(STMESH_FIELD("eval", "mode", "infer, teacher-forced or planted", c.eval_mode));

    s.push_back(STMESH_FIELD("bench", "runs", "timed runs", c.bench.runs));
    s.push_back(STMESH_FIELD("bench", "warmup", "untimed runs first", c.bench.warmup));
    s.push_back(STMESH_FIELD("bench", "scaling", "time the temporal stage at doubled T", c.bench.scaling));

    s.push_back(STMESH_FIELD("gradcheck", "seeds", "seeds per case", c.gradcheck.seeds));
    s.push_back(STMESH_FIELD("gradcheck", "only", "comma-separated case names", c.gradcheck.only));
    s.push_back(STMESH_FIELD("gradcheck", "inject_fault", "add a case with a wrong gradient", c.gradcheck.inject_fault));

    s.push_back(STMESH_FIELD("paths", "data", "dataset (or clip) directory", c.paths.data));
    s.push_back(STMESH_FIELD("paths", "checkpoint", "checkpoint directory", c.paths.checkpoint));
    s.push_back(STMESH_FIELD("paths", "out", "output directory", c.paths.out));
    return s;
  }();
  return schema;
}

#undef STMESH_FIELD

inline const ConfigField& config_field(const std::string& section, const std::string& key) {
  bool known_section = false;
  for (const auto& f : config_schema()) {
    if (f.section != section) continue;
    known_section = true;
    if (f.key == key) return f;
  }
  if (!known_section) throw ConfigError("unknown section [" + section + "]");
  throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
}

// Applies "section.key=value".
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const std::string name = trim(assignment.substr(0, eq));
  const auto dot = name.find('.');
  if (eq == std::string::npos || dot == std::string::npos) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  const ConfigField& f = config_field(name.substr(0, dot), name.substr(dot + 1));
  try {
    f.set(c, trim(assignment.substr(eq + 1)));
  } catch (const ConfigError& e) {
    throw ConfigError(name + ": " + e.what());
  }
}

// Sectioned key = value text; '#' starts a comment line. A key may appear
// once per file.
inline void parse_config(RunConfig& c, std::istream& is, const std::string& origin) {
  std::string line, section;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : config_schema()) known = known || f.section == section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = trim(line.substr(0, eq));
    try {
      const ConfigField& f = config_field(section, key);
      if (!seen.insert(f.name()).second) throw ConfigError("duplicate key '" + key + "'");
      f.set(c, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  parse_config(base, is, path.string());
  return base;
}

inline std::string config_to_text(const RunConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : config_schema()) {
    if (f.section != section) {
      os << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
  return os.str();
}

}  // namespace stmesh
