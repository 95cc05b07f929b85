#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "stmesh/cli.hpp"

using namespace stmesh;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "stmesh_test_cli" / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

RunConfig small(const fs::path& out = {}) {
  RunConfig c;
  c.model.channels = 8;
  c.model.width = 8;
  c.model.heads = 2;
  c.model.frames = 2;
  c.model.image_size = 32;
  c.gen_count = 3;
  c.train.clips = 2;
  c.train.steps = 3;
  c.train.log_every = 0;
  c.train.checkpoint_every = 0;
  c.train.evaluate = false;
  c.bench.runs = 2;
  c.bench.warmup = 1;
  c.paths.out = out.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Relative path -> contents of every file under `dir`.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

fs::path make_dataset(const std::string& name, std::size_t count = 3, std::uint64_t seed = 0) {
  RunConfig c = small(scratch(name));
  c.gen_count = count;
  c.seed = seed;
  std::ostringstream os;
  cmd_gen(c, os);
  return c.paths.out;
}

int code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return exit_code_for(e);
  }
  return kExitOk;
}

}  // namespace

TEST(Gen, DeterministicPerSeedWithRequestedCount) {
  const fs::path a = make_dataset("gen_a", 3, 5), b = make_dataset("gen_b", 3, 5), c = make_dataset("gen_c", 3, 6);
  EXPECT_EQ(read_dataset_index(a).size(), 3u);
  const auto ta = tree(a);
  EXPECT_EQ(ta, tree(b));
  EXPECT_NE(ta, tree(c));
  EXPECT_EQ(ta.size(), 1 + 3 * (1 + 9));
}

TEST(Gen, UnwritablePathIsDataError) {
  const fs::path dir = scratch("gen_blocked");
  fs::create_directories(dir);
  std::ofstream(dir / "file") << "x";
  RunConfig c = small(dir / "file" / "sub");
  std::ostringstream os;
  EXPECT_EQ(code_of([&] { cmd_gen(c, os); }), kExitData);
}

TEST(Train, LossCsvHasHeaderAndOneRowPerStep) {
  RunConfig c = small(scratch("train_csv"));
  std::ostringstream os;
  const TrainResult r = cmd_train(c, os);
  const auto rows = lines(fs::path(c.paths.out) / "loss.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "step,cm,pose,shape,prior,mpj,pmpj,pj2d,accel,aj3d,sm,total");
  for (std::size_t s = 1; s < rows.size(); ++s) {
    EXPECT_EQ(rows[s].substr(0, rows[s].find(',')), std::to_string(s));
    EXPECT_EQ(std::count(rows[s].begin(), rows[s].end(), ','), 11);
  }
  EXPECT_EQ(r.log.size(), 3u);
  const KeyValues summary = read_key_values(fs::path(c.paths.out) / "summary.txt");
  EXPECT_EQ(summary.at("loss_log_version"), "1");
  EXPECT_TRUE(fs::exists(fs::path(c.paths.out) / "config.txt"));
}

TEST(Train, ZeroLearningRateKeepsInitialization) {
  RunConfig c = small(scratch("train_lr0"));
  c.train.lr = 0;
  c.seed = 17;
  std::ostringstream os;
  const TrainResult r = cmd_train(c, os);
  const Model<float> loaded = load_checkpoint<float>(r.checkpoint);
  const Model<float> init = build_model<float>(c.model_config(), 17);
  const auto& a = loaded.params.items();
  const auto& b = init.params.items();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.values(), b[i].second.values()) << a[i].first;
}

TEST(Train, CheckpointsEveryKStepsAndRunsAreReproducible) {
  RunConfig c = small(scratch("train_ck"));
  c.train.steps = 4;
  c.train.checkpoint_every = 2;
  std::ostringstream os;
  cmd_train(c, os);
  const fs::path out = c.paths.out;
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "step_000002" / "manifest.txt"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "step_000004" / "manifest.txt"));
  EXPECT_EQ(read_checkpoint_info(out / "checkpoints" / "step_000002").step, 2u);
  RunConfig again = c;
  again.paths.out = scratch("train_ck2").string();
  cmd_train(again, os);
  EXPECT_EQ(slurp(out / "loss.csv"), slurp(fs::path(again.paths.out) / "loss.csv"));
}

TEST(Train, NonFiniteLossAbortsWithDiagnostics) {
  const fs::path data = make_dataset("train_nan_data", 2);
  ClipSample clip = read_clip(data / "clip_0000");
  clip.beta.values()[0] = std::numeric_limits<double>::quiet_NaN();
  write_clip(clip, data / "clip_0000");
  RunConfig c = small(scratch("train_nan"));
  c.paths.data = data.string();
  std::ostringstream os;
  std::string msg;
  try {
    cmd_train(c, os);
  } catch (const NumericError& e) {
    msg = e.what();
  }
  EXPECT_NE(msg.find("'shape'"), std::string::npos) << msg;
  EXPECT_EQ(read_key_values(fs::path(c.paths.out) / "abort.txt").at("step"), "1");
  EXPECT_EQ(code_of([&] { cmd_train(c, os); }), kExitNumeric);
}

TEST(Eval, PlantedMapsGiveZeroErrors) {
  RunConfig c = small(scratch("eval_planted"));
  c.paths.data = make_dataset("eval_planted_data", 4).string();
  c.eval_mode = EvalMode::Planted;
  std::ostringstream os;
  const EvalResult r = cmd_eval(c, os);
  ASSERT_EQ(r.clips.size(), 4u);
  EXPECT_LT(r.aggregate.mpjpe, 1e-6);
  EXPECT_LT(r.aggregate.pampjpe, 1e-6);
  EXPECT_LT(r.aggregate.pve, 1e-6);
  EXPECT_EQ(r.aggregate.n_missed, 0u);
  EXPECT_EQ(r.aggregate.n_false, 0u);
  EXPECT_GT(r.aggregate.n_persons, 0u);
  EXPECT_TRUE(fs::exists(fs::path(c.paths.out) / "clip_0003.txt"));
  EXPECT_EQ(read_key_values(fs::path(c.paths.out) / "aggregate.txt").at("mode"), "planted");
  EXPECT_NE(os.str().find("mean"), std::string::npos);
}

TEST(Eval, AggregateIsMeanOfClipsAndJobsDoNotMatter) {
  const fs::path ckpt = scratch("eval_ckpt");
  RunConfig c = small();
  save_checkpoint(build_model<float>(c.model_config(), 3), ckpt);
  c.paths.data = make_dataset("eval_mean_data", 4).string();
  c.paths.checkpoint = ckpt.string();
  c.eval_mode = EvalMode::TeacherForced;
  std::ostringstream os;
  const EvalResult one = cmd_eval(c, os);
  double sum = 0;
  std::size_t persons = 0;
  for (const auto& r : one.clips) {
    sum += r.mpjpe;
    persons += r.n_persons;
  }
  EXPECT_NEAR(one.aggregate.mpjpe, sum / 4.0, 1e-9);
  EXPECT_EQ(one.aggregate.n_persons, persons);
  c.jobs = 3;
  const EvalResult three = cmd_eval(c, os);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(one.clips[i].to_key_values(), three.clips[i].to_key_values());
  c.eval_mode = EvalMode::Infer;
  const EvalResult inferred = cmd_eval(c, os);
  EXPECT_EQ(inferred.clips.size(), 4u);
}

TEST(Eval, MissingInputsAreExplicitErrors) {
  const fs::path empty = scratch("eval_empty");
  fs::create_directories(empty);
  std::ofstream(empty / "index.txt").flush();
  RunConfig c = small();
  c.eval_mode = EvalMode::Planted;
  c.paths.data = empty.string();
  std::ostringstream os;
  std::string msg;
  try {
    cmd_eval(c, os);
  } catch (const FormatError& e) {
    msg = e.what();
  }
  EXPECT_NE(msg.find("no clips"), std::string::npos);
  EXPECT_EQ(code_of([&] { cmd_eval(c, os); }), kExitData);
  c.paths.data = (empty / "absent").string();
  EXPECT_EQ(code_of([&] { cmd_eval(c, os); }), kExitData);
  c.paths.data = make_dataset("eval_missing_ckpt", 1).string();
  c.eval_mode = EvalMode::Infer;
  EXPECT_EQ(code_of([&] { cmd_eval(c, os); }), kExitUsage);
  c.paths.checkpoint = (empty / "nope").string();
  EXPECT_EQ(code_of([&] { cmd_eval(c, os); }), kExitData);
}

TEST(Eval, ClipsMustFitTheCheckpoint) {
  const fs::path ckpt = scratch("eval_fit_ckpt");
  RunConfig other = small();
  other.model.frames = 3;
  save_checkpoint(build_model<float>(other.model_config(), 0), ckpt);
  RunConfig c = small();
  c.paths.data = make_dataset("eval_fit_data", 1).string();
  c.paths.checkpoint = ckpt.string();
  std::ostringstream os;
  EXPECT_EQ(code_of([&] { cmd_eval(c, os); }), kExitConfig);
}

TEST(Infer, WritesOneRowPerDetection) {
  const fs::path ckpt = scratch("infer_ckpt");
  RunConfig c = small(scratch("infer_out"));
  save_checkpoint(build_model<float>(c.model_config(), 2), ckpt);
  c.paths.checkpoint = ckpt.string();
  const fs::path data = make_dataset("infer_data", 1);
  c.paths.data = (data / "clip_0000").string();
  std::ostringstream os;
  const InferResult r = cmd_infer(c, os);
  const fs::path out = c.paths.out;
  EXPECT_EQ(lines(out / "tracks.csv").size(), r.persons.size() + 1);
  EXPECT_EQ(lines(out / "joints.csv").size(), r.persons.size() * kNumJoints + 1);
  EXPECT_EQ(read_raw_header(out / "vertices.bin").shape.at(0), r.persons.size());
  c.paths.data = data.string();
  EXPECT_EQ(code_of([&] { cmd_infer(c, os); }), kExitUsage);
}

TEST(Bench, ReportsPositiveTimingsAndFormulaTokenCounts) {
  RunConfig c = small(scratch("bench"));
  std::ostringstream os;
  const BenchResult r = cmd_bench(c, os);
  EXPECT_GT(r.ms_per_frame_mean, 0);
  EXPECT_GT(r.fps_mean, 0);
  EXPECT_GE(r.ms_per_frame_std, 0);
  EXPECT_GT(r.temporal_ms, 0);
  EXPECT_GT(r.temporal_ms_doubled, 0);
  EXPECT_TRUE(r.tokens_match());
  ASSERT_EQ(r.tokens.size(), 4u);
  EXPECT_EQ(r.tokens.front().formula, 2u * 64 * 64);
  EXPECT_EQ(r.tokens.back().formula, 128u * 128);
  const KeyValues kv = read_key_values(fs::path(c.paths.out) / "bench.txt");
  EXPECT_EQ(kv.at("tokens_match"), "true");
  EXPECT_EQ(kv.at("runs"), "2");
}

TEST(Gradcheck, ListsEveryOperationAndCatchesAWrongGradient) {
  RunConfig c = small();
  c.gradcheck.seeds = 1;
  c.gradcheck.inject_fault = true;
  std::ostringstream os;
  const GradcheckResult r = cmd_gradcheck(c, os);
  std::set<std::string> names;
  for (const auto& g : r.reports) {
    names.insert(g.name);
    EXPECT_EQ(g.passed(), g.name != "faulty_square") << g.name;
  }
  EXPECT_FALSE(r.passed());
  for (const char* op : {"elementwise", "matmul", "linear", "softmax", "layer_norm", "conv2d", "attend", "rot6d", "body_forward",
                         "project", "bca_focus", "caa", "cel", "st_decoder", "mesh_head", "loss.focal", "loss.prior",
                         "loss.temporal.accel", "loss.temporal.aj3d", "loss.temporal.sm", "loss.spatial.pose",
                         "loss.spatial.mpj", "loss.spatial.pmpj", "loss.spatial.pj2d"}) {
    EXPECT_TRUE(names.count(op)) << op;
    EXPECT_NE(os.str().find(op), std::string::npos) << op;
  }
  c.gradcheck.only = "nonexistent";
  EXPECT_THROW(cmd_gradcheck(c, os), ConfigError);
}

TEST(ExitCodes, DistinctPerFailureClass) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), kExitConfig);
  EXPECT_EQ(exit_code_for(FormatError("x")), kExitData);
  EXPECT_EQ(exit_code_for(VersionError("x")), kExitData);
  EXPECT_EQ(exit_code_for(NumericError("x")), kExitNumeric);
  EXPECT_EQ(exit_code_for(UsageError("x")), kExitUsage);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), kExitFailure);
  const std::set<int> codes = {kExitOk, kExitFailure, kExitUsage, kExitConfig, kExitData, kExitNumeric};
  EXPECT_EQ(codes.size(), 6u);
}
