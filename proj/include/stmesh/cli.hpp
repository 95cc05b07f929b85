#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stmesh/config.hpp"
#include "stmesh/gradsuite.hpp"
#include "stmesh/pipeline.hpp"

namespace stmesh {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitData = 4,
  kExitNumeric = 5,
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kExitData;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DegeneracyError*>(&e)) return kExitNumeric;
  return kExitFailure;
}

inline const BodyTemplate& default_template() {
  static const BodyTemplate t = make_toy_template(0);
  return t;
}

inline constexpr int kLossLogVersion = 1;

namespace cli_detail {

namespace fs = std::filesystem;

inline fs::path require_path(const std::string& p, const std::string& flag) {
  if (p.empty()) throw UsageError("missing " + flag);
  return p;
}

inline std::string num(double v, int precision = 4) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

inline std::string full(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// First column left aligned, the rest right aligned.
inline void print_table(std::ostream& os, const std::vector<std::string>& header,
                        const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) w[i] = header[i].size();
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size() && i < w.size(); ++i) w[i] = std::max(w[i], r[i].size());
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::string& cell = i < r.size() ? r[i] : std::string();
      if (i == 0) os << std::left << std::setw(int(w[i])) << cell;
      else os << "  " << std::right << std::setw(int(w[i])) << cell;
    }
    os << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (std::size_t x : w) total += x + 2;
  os << std::string(total - 2, '-') << '\n';
  for (const auto& r : rows) line(r);
  os << std::flush;
}

inline std::vector<std::string> report_row(const std::string& name, const EvalReport& r) {
  return {name,
          num(r.mpjpe, 3),
          num(r.pampjpe, 3),
          num(r.pve, 3),
          num(r.accel, 3),
          std::to_string(r.n_persons),
          std::to_string(r.n_missed),
          std::to_string(r.n_false)};
}

inline const std::vector<std::string>& report_header() {
  static const std::vector<std::string> h = {"clip", "MPJPE", "PAMPJPE", "PVE", "Accel", "persons", "missed", "false"};
  return h;
}

inline void check_clip_fits(const ClipSample& clip, const ModelConfig& m, const std::string& name) {
  if (clip.num_frames() != m.frames || clip.image_size() != m.image_size || clip.heatmap_size != m.heatmap_size()) {
    throw ConfigError("clip " + name + " has " + std::to_string(clip.num_frames()) + " frames of " +
                      std::to_string(clip.image_size()) + " px; the model expects " + std::to_string(m.frames) +
                      " frames of " + std::to_string(m.image_size) + " px");
  }
}

struct NamedClip {
  std::string name;
  ClipSample clip;
};

inline std::vector<NamedClip> load_dataset(const fs::path& dir, std::size_t limit = std::numeric_limits<std::size_t>::max()) {
  if (!fs::is_directory(dir)) throw FormatError("dataset directory " + dir.string() + " does not exist");
  const auto index = read_dataset_index(dir);
  if (index.empty()) throw FormatError("dataset " + dir.string() + " contains no clips");
  std::vector<NamedClip> out;
  for (std::size_t i = 0; i < index.size() && i < limit; ++i) out.push_back({index[i].name, read_clip(dir / index[i].name)});
  return out;
}

// Runs f(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double m = 0;
  for (double x : xs) m += x;
  m /= double(xs.size());
  double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, xs.size() > 1 ? std::sqrt(v / double(xs.size() - 1)) : 0.0};
}

template <class F>
decltype(auto) with_precision(bool dbl, F&& f) {
  if (dbl) return f(double{});
  return f(float{});
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// gen

struct GenResult {
  std::filesystem::path dir;
  std::vector<DatasetEntry> entries;
};

inline GenResult cmd_gen(const RunConfig& c, std::ostream& os) {
  using namespace cli_detail;
  c.validate();
  GenResult r;
  r.dir = require_path(c.paths.out, "--out");
  const GenConfig g = c.gen_config();
  r.entries = gen_dataset(g, default_template(), c.gen_count, r.dir);
  os << "dataset " << r.dir.string() << ": " << r.entries.size() << " clips, " << g.frames << " frames, " << g.n_persons
     << " persons, " << g.image_size << " px images, " << g.heatmap_size << " px heatmaps, seed " << c.seed << "\n";
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : r.entries) rows.push_back({e.name, std::to_string(e.seed)});
  print_table(os, {"clip", "seed"}, rows);
  return r;
}

// ---------------------------------------------------------------------------
// train

struct TrainResult {
  std::vector<StepReport> log;
  double first_total = std::numeric_limits<double>::quiet_NaN();
  double final_total = std::numeric_limits<double>::quiet_NaN();
  EvalReport before, after;  // teacher forced, over the training clips
  std::filesystem::path checkpoint;
  double seconds = 0;

  double loss_ratio() const { return final_total / first_total; }
  double mpjpe_ratio() const { return after.mpjpe / before.mpjpe; }
};

// Clips named by paths.data, or generated from the run seed.
inline std::vector<ClipSample> training_clips(const RunConfig& c) {
  std::vector<ClipSample> clips;
  if (!c.paths.data.empty()) {
    for (auto& nc : cli_detail::load_dataset(c.paths.data, c.train.clips)) {
      cli_detail::check_clip_fits(nc.clip, c.model_config(), nc.name);
      clips.push_back(std::move(nc.clip));
    }
    if (clips.size() < c.train.clips) {
      throw FormatError("dataset " + c.paths.data + " holds " + std::to_string(clips.size()) + " clips, train.clips is " +
                        std::to_string(c.train.clips));
    }
    return clips;
  }
  for (std::size_t i = 0; i < c.train.clips; ++i) {
    GenConfig g = c.gen_config();
    g.seed = clip_seed(c.seed, i);
    clips.push_back(gen_clip(g, default_template()));
  }
  return clips;
}

namespace cli_detail {

template <class T>
EvalReport teacher_forced_report(const Model<T>& m, const std::vector<ClipSample>& clips, const BodyTensors<T>& body,
                                 std::size_t jobs) {
  std::vector<EvalReport> reps(clips.size());
  parallel_for(clips.size(), jobs, [&](std::size_t i) { reps[i] = evaluate_teacher_forced(m, clips[i], body); });
  return aggregate_reports(reps);
}

template <class T>
TrainResult train_impl(const RunConfig& c, const std::vector<ClipSample>& clips, std::ostream& os) {
  namespace fs = std::filesystem;
  const fs::path out = require_path(c.paths.out, "--out");
  fs::create_directories(out);
  {
    std::ofstream cfg(out / "config.txt", std::ios::trunc);
    cfg << config_to_text(c);
    if (!cfg) throw FormatError("cannot write " + (out / "config.txt").string());
  }
  TrainResult r;
  Model<T> m = build_model<T>(c.model_config(), c.seed);
  const BodyTensors<T> body(default_template());
  if (c.train.evaluate) r.before = teacher_forced_report(m, clips, body, c.jobs);

  const fs::path csv_path = out / "loss.csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw FormatError("cannot write " + csv_path.string());
  csv << "step";
  for (const auto& n : loss_term_names()) csv << ',' << n;
  csv << ",total\n";
  csv << std::setprecision(9);

  MomentumSgd<T> opt(static_cast<T>(c.train.lr), static_cast<T>(c.train.momentum));
  os << "training " << clips.size() << " clips for " << c.train.steps << " steps (ablation " << ablation_name(c.ablation)
     << ", " << m.params.scalar_count() << " parameters)\n";
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  for (std::size_t s = 0; s < c.train.steps; ++s) {
    StepReport rep;
    try {
      rep = train_step(m, clips, c.loss, opt, body);
    } catch (const NumericError& e) {
      csv.flush();
      KeyValues diag = {{"step", std::to_string(s + 1)}, {"error", e.what()}};
      if (!r.log.empty()) diag["last_finite_total"] = full(r.log.back().total);
      write_key_values(out / "abort.txt", diag);
      throw NumericError(std::string(e.what()) + "; loss log up to step " + std::to_string(s) + " is in " + csv_path.string());
    }
    csv << rep.step;
    for (double v : rep.terms) csv << ',' << v;
    csv << ',' << rep.total << '\n';
    r.log.push_back(rep);
    if (c.train.log_every && (rep.step % c.train.log_every == 0 || rep.step == 1 || s + 1 == c.train.steps)) {
      os << "step " << rep.step << '/' << c.train.steps << "  total " << num(rep.total, 6) << "  (" << num(elapsed(), 1)
         << " s)\n"
         << std::flush;
    }
    if (c.train.checkpoint_every && rep.step % c.train.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06zu", rep.step);
      save_checkpoint(m, out / "checkpoints" / name, rep.step, &opt);
    }
  }
  csv.close();
  if (!csv) throw FormatError("write failed for " + csv_path.string());
  r.seconds = elapsed();
  r.checkpoint = out / "checkpoint";
  save_checkpoint(m, r.checkpoint, opt.steps(), &opt);
  if (!r.log.empty()) {
    r.first_total = r.log.front().total;
    r.final_total = r.log.back().total;
  }
  if (c.train.evaluate) r.after = teacher_forced_report(m, clips, body, c.jobs);

  KeyValues kv = {{"ablation", ablation_name(c.ablation)},
                  {"steps", std::to_string(c.train.steps)},
                  {"clips", std::to_string(clips.size())},
                  {"seed", std::to_string(c.seed)},
                  {"lr", full(c.train.lr)},
                  {"first_total", full(r.first_total)},
                  {"final_total", full(r.final_total)},
                  {"loss_ratio", full(r.loss_ratio())},
                  {"seconds", full(r.seconds)},
                  {"loss_log_version", std::to_string(kLossLogVersion)}};
  if (c.train.evaluate) {
    for (const auto& [k, v] : r.before.to_key_values()) kv["before." + k] = v;
    for (const auto& [k, v] : r.after.to_key_values()) kv["after." + k] = v;
    kv["mpjpe_ratio"] = full(r.mpjpe_ratio());
  }
  write_key_values(out / "summary.txt", kv);

  std::vector<std::vector<std::string>> rows = {{"total loss", num(r.first_total, 6), num(r.final_total, 6)}};
  if (c.train.evaluate) {
    rows.push_back({"MPJPE (teacher forced)", num(r.before.mpjpe, 3), num(r.after.mpjpe, 3)});
    rows.push_back({"PAMPJPE (teacher forced)", num(r.before.pampjpe, 3), num(r.after.pampjpe, 3)});
    rows.push_back({"PVE (teacher forced)", num(r.before.pve, 3), num(r.after.pve, 3)});
  }
  print_table(os, {"ablation " + ablation_name(c.ablation), "first", "final"}, rows);
  os << "checkpoint " << r.checkpoint.string() << ", " << num(r.seconds, 1) << " s\n";
  return r;
}

}  // namespace cli_detail

inline TrainResult cmd_train(const RunConfig& c, std::ostream& os) {
  c.validate();
  const auto clips = training_clips(c);
  return cli_detail::with_precision(c.model.double_precision, [&](auto tag) {
    return cli_detail::train_impl<decltype(tag)>(c, clips, os);
  });
}

// ---------------------------------------------------------------------------
// eval

struct EvalResult {
  std::vector<std::string> names;
  std::vector<EvalReport> clips;
  EvalReport aggregate;
};

namespace cli_detail {

inline EvalResult finish_eval(const RunConfig& c, std::vector<NamedClip>& data, std::vector<EvalReport>& reps,
                              std::ostream& os) {
  EvalResult r;
  for (auto& d : data) r.names.push_back(d.name);
  r.clips = std::move(reps);
  r.aggregate = aggregate_reports(r.clips);
  if (!c.paths.out.empty()) {
    const std::filesystem::path out = c.paths.out;
    std::filesystem::create_directories(out);
    for (std::size_t i = 0; i < r.clips.size(); ++i) write_report(r.clips[i], out / (r.names[i] + ".txt"));
    KeyValues kv = r.aggregate.to_key_values();
    kv["mode"] = eval_mode_name(c.eval_mode);
    kv["clips"] = std::to_string(r.clips.size());
    write_key_values(out / "aggregate.txt", kv);
  }
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < r.clips.size(); ++i) rows.push_back(report_row(r.names[i], r.clips[i]));
  rows.push_back(report_row("mean", r.aggregate));
  os << "eval (" << eval_mode_name(c.eval_mode) << ") over " << r.clips.size() << " clips; errors in mm\n";
  print_table(os, report_header(), rows);
  return r;
}

template <class T>
std::vector<EvalReport> eval_model(const RunConfig& c, const Model<T>& m, const std::vector<NamedClip>& data) {
  for (const auto& d : data) check_clip_fits(d.clip, m.cfg, d.name);
  std::vector<EvalReport> reps(data.size());
  if (c.eval_mode == EvalMode::TeacherForced) {
    const BodyTensors<T> body(default_template());
    parallel_for(data.size(), c.jobs, [&](std::size_t i) { reps[i] = evaluate_teacher_forced(m, data[i].clip, body); });
  } else {
    parallel_for(data.size(), c.jobs, [&](std::size_t i) {
      const InferResult ir = infer(m, frames_tensor<T>(data[i].clip), c.infer, default_template());
      reps[i] = evaluate_inference(ir, data[i].clip, c.infer);
    });
  }
  return reps;
}

}  // namespace cli_detail

// Planted mode bypasses the network: ground-truth centermaps and parameter
// maps go straight into parsing, linking and the body model.
inline EvalResult cmd_eval(const RunConfig& c, std::ostream& os) {
  using namespace cli_detail;
  c.validate();
  auto data = load_dataset(require_path(c.paths.data, "--data"));
  std::vector<EvalReport> reps(data.size());
  if (c.eval_mode == EvalMode::Planted) {
    parallel_for(data.size(), c.jobs, [&](std::size_t i) {
      const auto [cm, pm] = planted_maps(data[i].clip, c.loss.kernel);
      reps[i] = evaluate_inference(infer_from_maps(cm, pm, c.infer, default_template()), data[i].clip, c.infer);
    });
  } else {
    const std::filesystem::path ckpt = require_path(c.paths.checkpoint, "--checkpoint");
    const CheckpointInfo info = read_checkpoint_info(ckpt);
    reps = with_precision(info.cfg.double_precision, [&](auto tag) {
      using T = decltype(tag);
      return eval_model(c, load_checkpoint<T>(ckpt), data);
    });
  }
  return finish_eval(c, data, reps, os);
}

// ---------------------------------------------------------------------------
// infer

inline InferResult cmd_infer(const RunConfig& c, std::ostream& os) {
  using namespace cli_detail;
  namespace fs = std::filesystem;
  c.validate();
  const fs::path clip_dir = require_path(c.paths.data, "--data");
  if (fs::exists(clip_dir / "index.txt")) throw UsageError("infer takes one clip directory; " + clip_dir.string() + " is a dataset");
  const ClipSample clip = read_clip(clip_dir);
  const fs::path ckpt = require_path(c.paths.checkpoint, "--checkpoint");
  const CheckpointInfo info = read_checkpoint_info(ckpt);
  check_clip_fits(clip, info.cfg, clip_dir.filename().string());
  const InferResult r = with_precision(info.cfg.double_precision, [&](auto tag) {
    using T = decltype(tag);
    return infer(load_checkpoint<T>(ckpt), frames_tensor<T>(clip), c.infer, default_template());
  });

  if (!c.paths.out.empty()) {
    const fs::path out = c.paths.out;
    fs::create_directories(out);
    std::ofstream tracks(out / "tracks.csv", std::ios::trunc), joints(out / "joints.csv", std::ios::trunc);
    if (!tracks || !joints) throw FormatError("cannot write into " + out.string());
    tracks << std::setprecision(9) << "frame,track,x,y,score,xi,tx,ty\n";
    joints << std::setprecision(9) << "frame,track,joint,x,y,z\n";
    const std::size_t V = r.persons.empty() ? 0 : r.persons.front().mesh.vertices.size();
    Tensor<double> verts({r.persons.size(), V, 3});
    for (std::size_t i = 0; i < r.persons.size(); ++i) {
      const auto& p = r.persons[i];
      const auto& d = p.detection;
      tracks << d.t << ',' << p.track << ',' << d.x << ',' << d.y << ',' << d.score << ',' << p.params.camera.xi << ','
             << p.params.camera.tx << ',' << p.params.camera.ty << '\n';
      for (std::size_t j = 0; j < p.mesh.joints.size(); ++j) {
        const auto& q = p.mesh.joints[j];
        joints << d.t << ',' << p.track << ',' << j << ',' << q[0] << ',' << q[1] << ',' << q[2] << '\n';
      }
      for (std::size_t v = 0; v < V; ++v)
        for (int k = 0; k < 3; ++k) verts[(i * V + v) * 3 + k] = p.mesh.vertices[v][k];
    }
    write_raw_tensor(out / "vertices.bin", verts);
  }
  std::vector<std::vector<std::string>> rows;
  for (std::size_t t = 0; t < r.frames; ++t) {
    std::size_t n = 0;
    std::string ids;
    for (const auto& p : r.persons) {
      if (p.detection.t != t) continue;
      ++n;
      ids += (ids.empty() ? "" : " ") + std::to_string(p.track);
    }
    rows.push_back({std::to_string(t), std::to_string(n), ids.empty() ? "-" : ids});
  }
  os << "infer " << clip_dir.string() << ": " << r.persons.size() << " detections in " << r.num_tracks << " tracks\n";
  print_table(os, {"frame", "people", "tracks"}, rows);
  return r;
}

// ---------------------------------------------------------------------------
// bench

struct BenchLayerTokens {
  std::string stage;
  std::size_t index = 0;
  std::size_t measured = 0;
  std::size_t formula = 0;
};

struct BenchResult {
  std::size_t frames = 0;
  std::size_t runs = 0;
  double ms_per_frame_mean = 0, ms_per_frame_std = 0;
  double fps_mean = 0, fps_std = 0;
  std::vector<BenchLayerTokens> tokens;
  double temporal_ms = std::numeric_limits<double>::quiet_NaN();
  double temporal_ms_doubled = std::numeric_limits<double>::quiet_NaN();

  bool tokens_match() const {
    if (tokens.empty()) return false;
    for (const auto& t : tokens)
      if (t.measured != t.formula) return false;
    return true;
  }
  double temporal_ratio() const { return temporal_ms_doubled / temporal_ms; }
};

namespace cli_detail {

struct TimedRuns {
  std::vector<double> seconds, temporal_seconds;
  std::vector<BenchLayerTokens> tokens;
};

template <class T>
TimedRuns time_model(const Model<T>& m, const RunConfig& c, bool full_inference) {
  GenConfig g = c.gen_config();
  g.frames = m.cfg.frames;
  g.image_size = m.cfg.image_size;
  g.heatmap_size = m.cfg.heatmap_size();
  const ClipSample clip = gen_clip(g, default_template());
  const Tensor<T> frames = frames_tensor<T>(clip);
  TimedRuns out;
  for (std::size_t i = 0; i < c.bench.warmup + c.bench.runs; ++i) {
    DecoderTrace<T> trace;
    ForwardHooks<T> hooks;
    hooks.trace = &trace;
    const auto start = std::chrono::steady_clock::now();
    const ForwardOutput<T> fo = forward(m, frames, hooks);
    if (full_inference) infer_from_maps(fo.centermap, fo.param_map, c.infer, default_template());
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (i < c.bench.warmup) continue;
    double temporal = 0;
    for (const auto& l : trace.layers)
      if (l.stage == "temporal") temporal += l.seconds;
    out.seconds.push_back(sec);
    out.temporal_seconds.push_back(temporal);
    if (out.tokens.empty()) {
      const std::size_t pixels = m.cfg.heatmap_size() * m.cfg.heatmap_size();
      for (const auto& l : trace.layers) {
        const std::size_t formula = l.stage == "spatial" ? spatial_attention_cost(m.cfg.frames, pixels)
                                                          : temporal_attention_cost(m.cfg.frames, pixels);
        out.tokens.push_back({l.stage, l.index, l.groups * l.tokens_per_group * l.tokens_per_group, formula});
      }
    }
  }
  return out;
}

}  // namespace cli_detail

// Forward-only inference timing on a synthetic clip. Attention sizes are
// read from the decoder trace; temporal time is the wall time of the
// temporal layers.
inline BenchResult cmd_bench(const RunConfig& c, std::ostream& os) {
  using namespace cli_detail;
  c.validate();
  const bool dbl = c.paths.checkpoint.empty() ? c.model.double_precision
                                              : read_checkpoint_info(c.paths.checkpoint).cfg.double_precision;
  BenchResult r = with_precision(dbl, [&](auto tag) {
    using T = decltype(tag);
    const Model<T> m = c.paths.checkpoint.empty() ? build_model<T>(c.model_config(), c.seed) : load_checkpoint<T>(c.paths.checkpoint);
    BenchResult b;
    b.frames = m.cfg.frames;
    b.runs = c.bench.runs;
    const TimedRuns base = time_model(m, c, true);
    std::vector<double> ms, fps;
    for (double s : base.seconds) {
      ms.push_back(1000.0 * s / double(b.frames));
      fps.push_back(double(b.frames) / s);
    }
    std::tie(b.ms_per_frame_mean, b.ms_per_frame_std) = mean_std(ms);
    std::tie(b.fps_mean, b.fps_std) = mean_std(fps);
    b.tokens = base.tokens;
    b.temporal_ms = 1000.0 * mean_std(base.temporal_seconds).first;
    if (c.bench.scaling) {
      ModelConfig twice = m.cfg;
      twice.frames *= 2;
      const Model<T> m2 = build_model<T>(twice, c.seed);
      b.temporal_ms_doubled = 1000.0 * mean_std(time_model(m2, c, false).temporal_seconds).first;
    }
    return b;
  });

  std::vector<std::vector<std::string>> rows;
  for (const auto& t : r.tokens) {
    rows.push_back({t.stage + " " + std::to_string(t.index), std::to_string(t.measured), std::to_string(t.formula),
                    t.measured == t.formula ? "yes" : "NO"});
  }
  os << "bench: " << r.frames << " frames, " << r.runs << " runs after " << c.bench.warmup << " warmups\n";
  print_table(os, {"layer", "attention entries", "formula", "match"}, rows);
  std::vector<std::vector<std::string>> timing = {
      {"ms/frame", num(r.ms_per_frame_mean, 3), num(r.ms_per_frame_std, 3)},
      {"frames/s", num(r.fps_mean, 2), num(r.fps_std, 2)},
      {"temporal ms, T=" + std::to_string(r.frames), num(r.temporal_ms, 3), ""}};
  if (c.bench.scaling) {
    timing.push_back({"temporal ms, T=" + std::to_string(2 * r.frames), num(r.temporal_ms_doubled, 3), ""});
    timing.push_back({"temporal time ratio", num(r.temporal_ratio(), 3), ""});
  }
  print_table(os, {"timing", "mean", "std"}, timing);

  if (!c.paths.out.empty()) {
    std::filesystem::create_directories(c.paths.out);
    KeyValues kv = {{"frames", std::to_string(r.frames)},
                    {"runs", std::to_string(r.runs)},
                    {"warmup", std::to_string(c.bench.warmup)},
                    {"ms_per_frame_mean", full(r.ms_per_frame_mean)},
                    {"ms_per_frame_std", full(r.ms_per_frame_std)},
                    {"fps_mean", full(r.fps_mean)},
                    {"fps_std", full(r.fps_std)},
                    {"temporal_ms", full(r.temporal_ms)},
                    {"tokens_match", r.tokens_match() ? "true" : "false"}};
    if (c.bench.scaling) {
      kv["temporal_ms_doubled"] = full(r.temporal_ms_doubled);
      kv["temporal_ratio"] = full(r.temporal_ratio());
    }
    for (const auto& t : r.tokens) {
      const std::string p = "tokens." + t.stage + "." + std::to_string(t.index);
      kv[p + ".measured"] = std::to_string(t.measured);
      kv[p + ".formula"] = std::to_string(t.formula);
    }
    write_key_values(std::filesystem::path(c.paths.out) / "bench.txt", kv);
  }
  return r;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckResult {
  std::vector<GradCaseReport> reports;
  double seconds = 0;

  bool passed() const {
    for (const auto& r : reports)
      if (!r.passed()) return false;
    return !reports.empty();
  }
};

inline GradcheckResult cmd_gradcheck(const RunConfig& c, std::ostream& os) {
  using namespace cli_detail;
  c.validate();
  std::vector<GradCase> cases = gradient_cases(c.gradcheck.inject_fault);
  if (!c.gradcheck.only.empty()) {
    std::vector<GradCase> picked;
    std::stringstream ss(c.gradcheck.only);
    for (std::string name; std::getline(ss, name, ',');) {
      name = trim(name);
      auto it = std::find_if(cases.begin(), cases.end(), [&](const GradCase& g) { return g.name == name; });
      if (it == cases.end()) throw ConfigError("gradcheck.only: unknown case '" + name + "'");
      picked.push_back(*it);
    }
    cases = picked;
  }
  GradcheckResult r;
  std::vector<std::vector<std::string>> rows;
  for (const auto& gc : cases) {
    r.reports.push_back(run_grad_case(gc, c.gradcheck.seeds));
    const auto& g = r.reports.back();
    r.seconds += g.seconds;
    std::ostringstream err;
    err << std::scientific << std::setprecision(2) << g.worst_error;
    rows.push_back({g.name, std::to_string(g.seeds), std::to_string(g.coords), err.str(), std::to_string(g.failures),
                    g.passed() ? "pass" : "FAIL"});
  }
  os << "gradcheck: central differences at 64-bit, " << c.gradcheck.seeds << " seeds per case\n";
  print_table(os, {"case", "seeds", "coords", "worst rel err", "failed seeds", "status"}, rows);
  std::size_t failed = 0;
  for (const auto& g : r.reports) failed += g.passed() ? 0 : 1;
  os << r.reports.size() << " cases, " << failed << " failed, " << num(r.seconds, 2) << " s\n";
  if (!c.paths.out.empty()) {
    std::filesystem::create_directories(c.paths.out);
    KeyValues kv = {{"cases", std::to_string(r.reports.size())}, {"failed", std::to_string(failed)}, {"seconds", full(r.seconds)}};
    for (const auto& g : r.reports) {
      kv[g.name + ".worst_rel_error"] = full(g.worst_error);
      kv[g.name + ".failed_seeds"] = std::to_string(g.failures);
      kv[g.name + ".worst_where"] = g.worst_where;
    }
    write_key_values(std::filesystem::path(c.paths.out) / "gradcheck.txt", kv);
  }
  return r;
}

}  // namespace stmesh
