#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mltd/baselines.hpp"
#include "mltd/metaloop.hpp"
#include "mltd/taskgen.hpp"

namespace mltd::cli {

/// Everything a run needs, read from an INI-style file.
///
///   seed = 0                 top-level keys come before the first section
///   out_dir = runs/default
///   [model]  ModelConfig keys
///   [tarp]   DecompSpec keys plus attach
///   [tams]   enabled, reduced_dim, n_intermediate, controller_hidden, discrete
///   [meta]   MetaConfig keys plus iterations, checkpoint_every, compact_checkpoints
///   [pretrain]   steps, lr, batch
///   [tasks]      generator keys, or suite_dir / corpus_dir
///   [experiment] compare and rank-sweep grids
struct RunConfig {
  RunConfig() { suite.seq_len = model.max_seq_len; }

  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs/default";

  ModelConfig model;
  OverlayConfig overlay;
  MetaConfig meta;
  std::size_t meta_iters = 100;
  std::size_t checkpoint_every = 10;
  bool compact_checkpoints = false;
  PretrainConfig pretrain;

  SuiteConfig suite;
  std::filesystem::path suite_dir;   // saved suite (gen-tasks output)
  std::filesystem::path corpus_dir;  // one text file per task
  std::size_t alphabet = 64;
  SplitRatios ratios;

  std::vector<PipelineMode> modes;  // empty = every pipeline
  std::vector<std::size_t> steps_grid = {0, 1, 5, 10, 25};
  std::vector<std::size_t> train_sizes = {4, 8, 16, 32};
  double finetune_lr = 0.0;
  std::size_t max_test_tasks = 0;
  bool per_task_rows = false;
  std::vector<std::size_t> ranks = {1, 2, 4, 8, 16, 32};
  std::size_t sweep_steps = 25;
  std::vector<std::size_t> sweep_train_sizes = {4, 32};

  /// Cross-section checks (model vs overlay vs tasks).
  void validate() const;
  ExperimentConfig experiment() const;
};

/// Parses INI text. Unknown sections or keys, duplicates and malformed
/// values throw ConfigError naming the offending line or key.
RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "section.key=value" (or "key=value" for top-level keys).
void apply_override(RunConfig& cfg, const std::string& assignment);

/// The config rendered back as INI; render_run_config(RunConfig{}) is the
/// documented default file.
std::string render_run_config(const RunConfig& cfg);

}  // namespace mltd::cli
