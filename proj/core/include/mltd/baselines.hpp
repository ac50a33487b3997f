#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mltd/metaloop.hpp"

namespace mltd {

struct PretrainConfig {
  std::size_t steps = 200;
  double lr = 3e-3;
  std::size_t batch = 8;  // sequences per Adam step
};

/// Multitask LM training of the base weights on the union of the tasks'
/// train splits, starting from `init`. `trace` receives the loss per step.
NamedTensors multitask_pretrain(const ModelConfig& model, const NamedTensors& init, std::span<const Task> tasks,
                                const PretrainConfig& cfg, std::uint64_t seed, std::vector<double>* trace = nullptr);

enum class PipelineMode {
  kScratchMaml,        // MAML on a random init, all weights adapted
  kPretrainOnly,       // multitask model, never finetuned
  kPretrainFinetune,   // multitask model, all weights finetuned per task
  kPretrainMaml,       // multitask model, then MAML over all weights
  kMultitaskThenTarp,  // multitask model, fresh TARP factors finetuned per task
  kMltd,               // multitask model, then MAML with TARP (and TAMS) inner loops
};
const char* pipeline_name(PipelineMode mode);
PipelineMode parse_pipeline(std::string_view name);
std::span<const PipelineMode> all_pipelines();

struct ExperimentConfig {
  ModelConfig model;
  OverlayConfig overlay;  // TARP/TAMS side of the overlay pipelines
  MetaConfig meta;
  PretrainConfig pretrain;
  std::size_t meta_iters = 100;
  double finetune_lr = 0.0;  // inner/finetune rate when all weights adapt; 0 = meta.inner_lr
  std::vector<std::size_t> steps_grid = {0, 1, 5, 10, 25};
  std::vector<std::size_t> train_sizes = {4, 8, 16, 32};
  std::size_t max_test_tasks = 0;  // 0 = every meta-test task
  bool per_task_rows = false;
  std::uint64_t seed = 0;
};

/// A ready-to-adapt state and the config to adapt it with.
struct PreparedPipeline {
  MetaState state;
  MetaConfig adapt_cfg;
  bool adapts = true;  // false for kPretrainOnly
};

/// Builds `mode` end to end: pretraining (or `pretrained` when given),
/// overlays and meta-training on suite.meta_train.
PreparedPipeline prepare_pipeline(PipelineMode mode, const TaskSuite& suite, const ExperimentConfig& cfg,
                                  const NamedTensors* pretrained = nullptr);

/// Grid of mode × finetune steps × train size over the meta-test tasks.
/// Emits one aggregated row (task_id "all") per cell, plus per-task rows
/// when cfg.per_task_rows is set.
std::vector<MetricsRow> compare_pipelines(const TaskSuite& suite, const ExperimentConfig& cfg,
                                          std::span<const PipelineMode> modes);

struct RankSweepResult {
  std::vector<MetricsRow> rows;  // one per rank per train size, then full finetune
  std::vector<std::size_t> best_rank;  // per train size, ties to the smallest rank
};

/// Adapts a multitask-pretrained model to the meta-test tasks with TARP of
/// each rank (cfg.overlay supplies the decomposition), early-stopped on
/// the validation split after `steps` SGD steps at most, plus a
/// full-finetune baseline.
RankSweepResult rank_sweep(const TaskSuite& suite, const ExperimentConfig& cfg, std::span<const std::size_t> ranks,
                           std::span<const std::size_t> train_sizes, std::size_t steps,
                           const NamedTensors* pretrained = nullptr);

/// RFC-4180 CSV with columns first_column, task_id, steps, train_size, nll,
/// ppl, trainable_ratio, seed.
void write_csv(std::ostream& out, std::span<const MetricsRow> rows, const std::string& first_column = "mode");
std::string csv_field(const std::string& value);

}  // namespace mltd
