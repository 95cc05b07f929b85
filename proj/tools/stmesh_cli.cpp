#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "stmesh/cli.hpp"

namespace {

using namespace stmesh;

// Flags collected per subcommand. Precedence: defaults, then --config,
// then --set, then the dedicated flags.
struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::string> direct;
};

void add_flag(CLI::App* app, Flags& f, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(flag, [&f, key](const std::string& v) { f.direct.push_back(key + "=" + v); }, help);
}

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "run config file (sectioned key = value)");
  app->add_option("--set", f.sets, "override one key, section.key=value (repeatable)");
  add_flag(app, f, "--seed", "run.seed", "dataset and initialization seed");
  add_flag(app, f, "--out", "paths.out", "output directory");
  add_flag(app, f, "--jobs", "run.jobs", "worker threads for clip-parallel evaluation");
  add_flag(app, f, "--ablation", "run.ablation", "none, no-caa or no-bca");
}

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
  for (const auto& s : f.sets) apply_override(c, s);
  for (const auto& s : f.direct) apply_override(c, s);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stmesh: multi-person video mesh recovery on synthetic clips"};
  app.require_subcommand(1);

  Flags gen, train, eval, infer, bench, grad;
  bool inject_fault = false;
  bool dump_config = false;
  app.add_flag("--print-config", dump_config, "print the resolved config of the chosen command and exit");

  auto* g = app.add_subcommand("gen", "write a synthetic dataset");
  add_common(g, gen);
  add_flag(g, gen, "--count", "gen.count", "number of clips");

  auto* t = app.add_subcommand("train", "train on synthetic clips, log per-step losses and write checkpoints");
  add_common(t, train);
  add_flag(t, train, "--data", "paths.data", "dataset directory (generated in memory when absent)");
  add_flag(t, train, "--steps", "train.steps", "optimizer steps");
  add_flag(t, train, "--lr", "train.lr", "learning rate");
  add_flag(t, train, "--checkpoint-every", "train.checkpoint_every", "steps between checkpoints");

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint (or planted maps) over a dataset");
  add_common(e, eval);
  add_flag(e, eval, "--data", "paths.data", "dataset directory");
  add_flag(e, eval, "--checkpoint", "paths.checkpoint", "checkpoint directory");
  add_flag(e, eval, "--mode", "eval.mode", "infer, teacher-forced or planted");

  auto* i = app.add_subcommand("infer", "detect, track and reconstruct the people of one clip");
  add_common(i, infer);
  add_flag(i, infer, "--data", "paths.data", "clip directory");
  add_flag(i, infer, "--checkpoint", "paths.checkpoint", "checkpoint directory");

  auto* b = app.add_subcommand("bench", "time forward-only inference and check attention sizes");
  add_common(b, bench);
  add_flag(b, bench, "--checkpoint", "paths.checkpoint", "checkpoint directory (random weights when absent)");
  add_flag(b, bench, "--runs", "bench.runs", "timed runs");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable operation");
  add_common(gc, grad);
  add_flag(gc, grad, "--seeds", "gradcheck.seeds", "seeds per case");
  add_flag(gc, grad, "--only", "gradcheck.only", "comma-separated case names");
  gc->add_flag("--inject-fault", inject_fault, "add a case whose gradient is deliberately wrong");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (g->parsed()) {
      const RunConfig c = resolve(gen);
      if (dump_config) return std::cout << config_to_text(c), kExitOk;
      cmd_gen(c, std::cout);
    } else if (t->parsed()) {
      const RunConfig c = resolve(train);
      if (dump_config) return std::cout << config_to_text(c), kExitOk;
      cmd_train(c, std::cout);
    } else if (e->parsed()) {
      const RunConfig c = resolve(eval);
      if (dump_config) return std::cout << config_to_text(c), kExitOk;
      cmd_eval(c, std::cout);
    } else if (i->parsed()) {
      const RunConfig c = resolve(infer);
      if (dump_config) return std::cout << config_to_text(c), kExitOk;
      cmd_infer(c, std::cout);
    } else if (b->parsed()) {
      const RunConfig c = resolve(bench);
      if (dump_config) return std::cout << config_to_text(c), kExitOk;
      cmd_bench(c, std::cout);
    } else if (gc->parsed()) {
      RunConfig c = resolve(grad);
      if (inject_fault) c.gradcheck.inject_fault = true;
      if (dump_config) return std::cout << config_to_text(c), kExitOk;
      if (!cmd_gradcheck(c, std::cout).passed()) {
        std::cerr << "stmesh: gradient check failed\n";
        return kExitNumeric;
      }
    }
  } catch (const std::exception& err) {
    std::cerr << "stmesh: " << err.what() << '\n';
    return exit_code_for(err);
  }
  return kExitOk;
}
