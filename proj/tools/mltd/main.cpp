#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

#include "commands.hpp"

using namespace mltd;
using namespace mltd::cli;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out_dir;
  std::string preset;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.preset == "gpt2-medium") cfg.model = gpt2_medium();
  else if (!c.preset.empty()) throw ConfigError("unknown preset '" + c.preset + "'");
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  if (c.threads) {
    cfg.meta.threads = *c.threads;
  } else if (const char* env = std::getenv("MLTD_THREADS"); env != nullptr && *env != '\0') {
    try {
      apply_override(cfg, std::string("meta.threads=") + env);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("MLTD_THREADS: ") + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learning the difference: TARP/TAMS overlays on a small decoder LM"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer("Config file defaults (any key may be omitted):\n" + render_run_config(RunConfig{}) +
             "\nExit codes: 0 ok, 2 config error, 3 runtime or numeric error, 4 checkpoint error.");

  Common common;
  app.add_option("-c,--config", common.config, "INI run config")->check(CLI::ExistingFile);
  app.add_option("--set", common.overrides, "Override a config key, section.key=value (repeatable)");
  app.add_option("--seed", common.seed, "Root seed, overrides the config");
  app.add_option("--threads", common.threads, "Inner-loop task parallelism (fallback: MLTD_THREADS)");
  app.add_option("-o,--out-dir", common.out_dir, "Output directory, overrides the config");
  app.add_option("--preset", common.preset, "Model preset: gpt2-medium");

  GenTasksArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-tasks", "Generate (or import) a task suite and print a summary");
  gen_cmd->add_option("--to", gen.out, "Suite directory (default <out_dir>/tasks)");

  MetaTrainArgs train;
  auto* train_cmd = app.add_subcommand("meta-train", "Meta-train TARP/TAMS overlays, write checkpoints and metrics.csv");
  train_cmd->add_option("--resume", train.resume, "Checkpoint to resume from");

  AdaptArgs adapt;
  auto* adapt_cmd = app.add_subcommand("adapt", "Adapt a checkpoint to tasks and write per-task rows");
  adapt_cmd->add_option("--checkpoint", adapt.checkpoint, "Checkpoint to adapt")->required();
  adapt_cmd->add_option("--task", adapt.task_ids, "Task id (repeatable); default: every task of --role");
  adapt_cmd->add_option("--role", adapt.role, "meta_train, meta_val, meta_test or all")->capture_default_str();
  adapt_cmd->add_option("--steps", adapt.steps, "Adaptation steps (default meta.inner_steps)");
  adapt_cmd->add_option("--train-size", adapt.train_size, "Train sequences used, 0 = all")->capture_default_str();
  adapt_cmd->add_flag("--early-stop", adapt.early_stop, "Keep the step with the best validation loss");
  adapt_cmd->add_option("--csv", adapt.output, "Output CSV (default <out_dir>/adapt.csv)");

  auto* compare_cmd = app.add_subcommand("compare", "Pipeline modes x finetune steps x train sizes");
  auto* sweep_cmd = app.add_subcommand("rank-sweep", "TARP rank sweep with a full-finetune baseline");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc_cmd->add_option("scopes", gc.scopes, "primitives, tarp, tams, lm, maml (default all)");
  gc_cmd->add_option("--seeds", gc.seeds, "Random instances per check")->capture_default_str();

  ParamsArgs pa;
  auto* params_cmd = app.add_subcommand("params", "Trainable and frozen parameter counts");
  params_cmd->add_flag("--test-mode", pa.test_mode, "Assert bilinear < 3%, TAMS < 5%, full finetune = 100%");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    const RunConfig cfg = resolve(common);
    if (gen_cmd->parsed()) return cmd_gen_tasks(cfg, gen);
    if (train_cmd->parsed()) return cmd_meta_train(cfg, train);
    if (adapt_cmd->parsed()) return cmd_adapt(cfg, adapt);
    if (compare_cmd->parsed()) return cmd_compare(cfg);
    if (sweep_cmd->parsed()) return cmd_rank_sweep(cfg);
    if (gc_cmd->parsed()) return cmd_gradcheck(cfg, gc);
    if (params_cmd->parsed()) return cmd_params(cfg, pa);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointFailure& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
