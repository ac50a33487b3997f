#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mltd/nanoformer.hpp"
#include "mltd/optim.hpp"
#include "mltd/overlay.hpp"
#include "mltd/rng.hpp"
#include "mltd/taskgen.hpp"

namespace mltd {

enum class MamlOrder { kAuto, kFirst, kSecond };
const char* maml_order_name(MamlOrder order);
MamlOrder parse_maml_order(std::string_view name);

struct MetaConfig {
  std::size_t meta_batch = 8;   // tasks per outer step
  std::size_t inner_steps = 5;  // SGD steps per task
  double inner_lr = 0.01;
  double outer_lr = 3e-4;
  MamlOrder order = MamlOrder::kAuto;
  AdaptSet adapt_set = AdaptSet::kTarpOnly;
  std::size_t inner_batch = 0;  // sequences per inner step, 0 = whole train split
  std::size_t eval_every = 10;  // meta-validation period in meta_train
  std::size_t threads = 1;

  void validate() const;
  /// kAuto resolves to second order for inner_steps ≤ 2.
  bool second_order() const;
};

/// Everything meta-learned plus the bookkeeping to resume training.
struct MetaState {
  ModelConfig model;
  OverlayConfig overlay;
  NamedTensors params;  // base + overlay, see OverlayConfig
  AdamState adam;
  std::uint64_t meta_iter = 0;
  std::uint64_t seed = 0;
  Rng rng;  // drives task sampling
};

/// Base model from `seed` (or `base` when given) plus fresh overlays.
MetaState init_meta_state(const ModelConfig& model, const OverlayConfig& overlay, std::uint64_t seed,
                          const NamedTensors* base = nullptr);

struct InnerResult {
  NamedTensors adapted;        // adapted copies of the adapted keys
  std::vector<double> trace;   // train loss before each step
  Tensor alpha;                // architecture weights used (undefined without TAMS)
};

/// Runs `steps` SGD steps at `lr` on the task's train split starting from
/// the state's parameters. Never modifies `state`. `train_limit` (0 = all)
/// truncates the train split.
InnerResult inner_adapt(const Task& task, const MetaState& state, const MetaConfig& cfg, std::size_t steps,
                        std::size_t train_limit = 0);
inline InnerResult inner_adapt(const Task& task, const MetaState& state, const MetaConfig& cfg) {
  return inner_adapt(task, state, cfg, cfg.inner_steps);
}

struct MetaGradient {
  NamedTensors grads;               // every key of state.params
  double meta_loss = 0.0;           // Σ task test losses
  std::vector<double> task_losses;  // in the order of `tasks`
};

/// Σ_i L_i^test(adapted_i) and its gradient with respect to every
/// meta-parameter. Reductions run in task-id order so the result does not
/// depend on batch order or thread count.
MetaGradient meta_gradient(std::span<const Task* const> tasks, const MetaState& state, const MetaConfig& cfg);

/// meta_gradient followed by one outer Adam step; returns the meta-loss.
double meta_step(std::span<const Task* const> tasks, MetaState& state, const MetaConfig& cfg);

class TaskSampler {
 public:
  virtual ~TaskSampler() = default;
  /// `count` distinct tasks; throws Error when the sampler cannot supply them.
  virtual std::vector<const Task*> next(std::size_t count, Rng& rng) = 0;
};

/// Uniform draws without replacement within a batch.
class RandomTaskSampler final : public TaskSampler {
 public:
  explicit RandomTaskSampler(std::span<const Task> pool);
  std::vector<const Task*> next(std::size_t count, Rng& rng) override;

 private:
  std::vector<const Task*> pool_;
};

/// Walks a fixed list once, in order.
class SequentialTaskSampler final : public TaskSampler {
 public:
  explicit SequentialTaskSampler(std::span<const Task> tasks);
  std::vector<const Task*> next(std::size_t count, Rng& rng) override;

 private:
  std::vector<const Task*> tasks_;
  std::size_t pos_ = 0;
};

/// One CSV row of the metrics contract.
struct MetricsRow {
  std::string mode;  // meta iteration number or pipeline name
  std::string task_id;
  std::size_t steps = 0;
  std::size_t train_size = 0;
  double nll = 0.0;
  double ppl = 0.0;
  double trainable_ratio = 0.0;
  std::uint64_t seed = 0;
};

struct MetaTrainOptions {
  std::span<const Task> val_tasks;     // meta-validation tasks, may be empty
  std::function<void(const MetaState&)> on_iter;  // called after every meta-step
};

/// Mean post-adaptation test NLL over `tasks`.
double mean_adapted_nll(std::span<const Task> tasks, const MetaState& state, const MetaConfig& cfg);

/// n_iters meta-steps. Logs one "meta_batch" row per iteration (nll =
/// meta-loss / batch) and, every cfg.eval_every iterations and at the
/// start and end, one "meta_val" row with the mean adapted test NLL.
std::vector<MetricsRow> meta_train(TaskSampler& sampler, MetaState& state, const MetaConfig& cfg,
                                   std::size_t n_iters, const MetaTrainOptions& options = {});

struct AdaptOptions {
  std::size_t train_limit = 0;  // 0 = whole train split
  bool early_stop = false;      // keep the parameters with the best validation loss
};

struct AdaptMetrics {
  double test_nll = 0.0;
  double ppl = 0.0;
  double zero_shot_nll = 0.0;
  double zero_shot_ppl = 0.0;
  std::size_t steps_to_best = 0;  // by validation loss; 0 without a validation split
  double trainable_ratio = 0.0;
};

/// Test NLL under `params` (TAMS weights from `alpha`).
double evaluate_nll(const ModelConfig& model, const OverlayConfig& overlay, const NamedTensors& params,
                    std::span<const Sequence> seqs, const Tensor& alpha = {});

AdaptMetrics adapt_and_eval(const Task& task, const MetaState& state, const MetaConfig& cfg, std::size_t steps,
                            const AdaptOptions& options = {});

/// Test NLL after each of the (ascending) step counts in `checkpoints`,
/// taken along one adaptation run of max(checkpoints) steps.
std::vector<double> adapt_trajectory(const Task& task, const MetaState& state, const MetaConfig& cfg,
                                     std::span<const std::size_t> checkpoints, std::size_t train_limit = 0);

/// Copy of `params` with the entries of `replacement` substituted.
NamedTensors merge_params(const NamedTensors& params, const NamedTensors& replacement);

}  // namespace mltd
