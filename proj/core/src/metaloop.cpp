#include "mltd/metaloop.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include "mltd/error.hpp"
#include "mltd/ops.hpp"
#include "mltd/tape.hpp"

namespace mltd {

namespace {

NamedTensors subset(const NamedTensors& params, const std::vector<std::string>& keys) {
  NamedTensors out;
  for (const auto& k : keys) out.emplace(k, params.at(k));
  return out;
}

// Sequences for one inner step: the whole (truncated) split, or a random
// subset of inner_batch of them.
std::vector<Sequence> inner_batch(std::span<const Sequence> train, std::size_t batch, Rng& rng) {
  if (batch == 0 || batch >= train.size()) return {train.begin(), train.end()};
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < batch; ++i) std::swap(idx[i], idx[i + rng() % (idx.size() - i)]);
  idx.resize(batch);
  std::sort(idx.begin(), idx.end());
  std::vector<Sequence> out;
  for (auto i : idx) out.push_back(train[i]);
  return out;
}

std::span<const Sequence> truncated(const std::vector<Sequence>& split, std::size_t limit) {
  std::span<const Sequence> s(split);
  return limit == 0 || limit >= s.size() ? s : s.first(limit);
}

Rng inner_rng(const MetaState& state, const Task& task) {
  return substream(state.seed, "inner." + task.id, state.meta_iter);
}

// One detached SGD step on `fast`; returns the updated copy and the loss
// before the step.
NamedTensors plain_inner_step(const MetaState& state, const NamedTensors& fixed, const NamedTensors& fast,
                              const Tensor& alpha, std::span<const Sequence> batch, double lr, double& loss_out) {
  Tape tape;
  TapeScope scope(tape);
  NamedTensors w = tape.watch(fast);
  Tensor loss = overlay_loss(state.model, state.overlay, merge_params(fixed, w), batch, alpha);
  loss_out = loss.item();
  NamedTensors g = grad(loss, w);
  NoGradGuard no_grad;
  return detach_all(sgd_update(fast, g, lr));
}

// Inner loop. With create_graph the updates are recorded on the active tape
// (params must be watched on it); otherwise every step runs on its own tape
// and the result is detached.
NamedTensors run_inner(const MetaState& state, const NamedTensors& params, const std::vector<std::string>& keys,
                       const Tensor& alpha, std::span<const Sequence> train, std::size_t steps, double lr,
                       std::size_t batch_size, Rng& rng, bool create_graph, std::vector<double>* trace) {
  if (train.empty()) throw ConfigError("inner loop: empty training split");
  NamedTensors fast = subset(params, keys);
  if (create_graph) {
    for (std::size_t s = 0; s < steps; ++s) {
      const auto batch = inner_batch(train, batch_size, rng);
      Tensor loss = overlay_loss(state.model, state.overlay, merge_params(params, fast), batch, alpha);
      if (trace) trace->push_back(loss.item());
      NamedTensors g = grad(loss, fast, /*create_graph=*/true);
      fast = sgd_update(fast, g, lr);
    }
    return fast;
  }
  const NamedTensors fixed = detach_all(params);
  const Tensor a = alpha.defined() ? alpha.detach() : alpha;
  fast = detach_all(fast);
  for (std::size_t s = 0; s < steps; ++s) {
    const auto batch = inner_batch(train, batch_size, rng);
    double loss = 0.0;
    fast = plain_inner_step(state, fixed, fast, a, batch, lr, loss);
    if (trace) trace->push_back(loss);
  }
  return fast;
}

Tensor alpha_for(const MetaState& state, const NamedTensors& params, const Task& task) {
  if (!state.overlay.tams_enabled) return {};
  return task_alpha(state.model, state.overlay, params, task.train);
}

struct TaskOutcome {
  NamedTensors grads;
  double loss = 0.0;
};

TaskOutcome task_meta_gradient(const Task& task, const MetaState& state, const MetaConfig& cfg) {
  if (task.train.empty() || task.test.empty()) throw ConfigError("task needs non-empty train and test splits");
  const auto keys = adapt_keys(state.params, state.model, state.overlay, cfg.adapt_set);
  Rng rng = inner_rng(state, task);
  Tape tape;
  TapeScope scope(tape);
  NamedTensors p = tape.watch(state.params);
  Tensor alpha = alpha_for(state, p, task);
  TaskOutcome out;
  if (cfg.second_order()) {
    NamedTensors fast = run_inner(state, p, keys, alpha, task.train, cfg.inner_steps, cfg.inner_lr, cfg.inner_batch,
                                  rng, true, nullptr);
    Tensor loss = overlay_loss(state.model, state.overlay, merge_params(p, fast), task.test, alpha);
    out.loss = loss.item();
    out.grads = grad(loss, p);
  } else {
    NamedTensors fast = run_inner(state, state.params, keys, alpha, task.train, cfg.inner_steps, cfg.inner_lr,
                                  cfg.inner_batch, rng, false, nullptr);
    NamedTensors merged = merge_params(p, tape.watch(fast));
    Tensor loss = overlay_loss(state.model, state.overlay, merged, task.test, alpha);
    out.loss = loss.item();
    out.grads = grad(loss, merged);
  }
  return out;
}

[[noreturn]] void rethrow_for_task(const std::string& id, std::exception_ptr ep) {
  const std::string prefix = "task '" + id + "': ";
  try {
    std::rethrow_exception(ep);
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(prefix + e.what());
  } catch (const std::exception& e) {
    throw Error(prefix + e.what());
  }
}

}  // namespace

const char* maml_order_name(MamlOrder order) {
  switch (order) {
    case MamlOrder::kAuto:
      return "auto";
    case MamlOrder::kFirst:
      return "first";
    case MamlOrder::kSecond:
      return "second";
  }
  return "?";
}

MamlOrder parse_maml_order(std::string_view name) {
  for (auto o : {MamlOrder::kAuto, MamlOrder::kFirst, MamlOrder::kSecond}) {
    if (name == maml_order_name(o)) return o;
  }
  throw ConfigError("unknown MAML order '" + std::string(name) + "'");
}

void MetaConfig::validate() const {
  if (meta_batch < 1) throw ConfigError("meta_batch must be >= 1");
  if (inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
  if (!(inner_lr >= 0.0)) throw ConfigError("inner_lr must be >= 0");
  if (!(outer_lr > 0.0)) throw ConfigError("outer_lr must be > 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

bool MetaConfig::second_order() const {
  return order == MamlOrder::kSecond || (order == MamlOrder::kAuto && inner_steps <= 2);
}

NamedTensors merge_params(const NamedTensors& params, const NamedTensors& replacement) {
  NamedTensors out = params;
  for (const auto& [k, t] : replacement) out[k] = t;
  return out;
}

MetaState init_meta_state(const ModelConfig& model, const OverlayConfig& overlay, std::uint64_t seed,
                          const NamedTensors* base) {
  overlay.validate(model);
  MetaState st;
  st.model = model;
  st.overlay = overlay;
  st.seed = seed;
  st.params = base != nullptr ? clone_all(*base) : build_model(model, seed).params;
  for (auto& [k, t] : init_overlay(model, overlay, substream_seed(seed, "overlay"))) st.params.emplace(k, t);
  st.rng = substream(seed, "sampler");
  return st;
}

InnerResult inner_adapt(const Task& task, const MetaState& state, const MetaConfig& cfg, std::size_t steps,
                        std::size_t train_limit) {
  cfg.validate();
  const auto train = truncated(task.train, train_limit);
  if (train.empty()) throw ConfigError("task '" + task.id + "': empty training split");
  InnerResult r;
  {
    NoGradGuard no_grad;
    r.alpha = alpha_for(state, state.params, task);
  }
  Rng rng = inner_rng(state, task);
  const auto keys = adapt_keys(state.params, state.model, state.overlay, cfg.adapt_set);
  r.adapted = run_inner(state, state.params, keys, r.alpha, train, steps, cfg.inner_lr, cfg.inner_batch, rng, false,
                        &r.trace);
  return r;
}

MetaGradient meta_gradient(std::span<const Task* const> tasks, const MetaState& state, const MetaConfig& cfg) {
  cfg.validate();
  if (tasks.empty()) throw ConfigError("meta_gradient: empty task batch");
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return tasks[a]->id < tasks[b]->id; });

  std::vector<TaskOutcome> outcomes(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < tasks.size();) {
      try {
        outcomes[i] = task_meta_gradient(*tasks[i], state, cfg);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(cfg.threads, tasks.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto i : order) {
    if (errors[i]) rethrow_for_task(tasks[i]->id, errors[i]);
  }

  MetaGradient mg;
  mg.task_losses.resize(tasks.size());
  NoGradGuard no_grad;
  for (auto i : order) {
    mg.meta_loss += outcomes[i].loss;
    mg.task_losses[i] = outcomes[i].loss;
    for (auto& [k, g] : outcomes[i].grads) {
      auto it = mg.grads.find(k);
      if (it == mg.grads.end()) {
        mg.grads.emplace(k, g.detach());
      } else {
        it->second = ops::add(it->second, g).detach();
      }
    }
  }
  return mg;
}

double meta_step(std::span<const Task* const> tasks, MetaState& state, const MetaConfig& cfg) {
  if (tasks.size() != cfg.meta_batch) {
    throw ConfigError("meta_step: got " + std::to_string(tasks.size()) + " tasks, meta_batch is " +
                      std::to_string(cfg.meta_batch));
  }
  MetaGradient mg = meta_gradient(tasks, state, cfg);
  state.adam.lr = cfg.outer_lr;
  adam_step(state.adam, state.params, mg.grads);
  state.meta_iter += 1;
  return mg.meta_loss;
}

RandomTaskSampler::RandomTaskSampler(std::span<const Task> pool) {
  for (const auto& t : pool) pool_.push_back(&t);
}

std::vector<const Task*> RandomTaskSampler::next(std::size_t count, Rng& rng) {
  if (count > pool_.size()) {
    throw Error("task sampler exhausted: batch of " + std::to_string(count) + " requested from " +
                std::to_string(pool_.size()) + " tasks");
  }
  std::vector<const Task*> p = pool_;
  for (std::size_t i = 0; i < count; ++i) std::swap(p[i], p[i + rng() % (p.size() - i)]);
  p.resize(count);
  return p;
}

SequentialTaskSampler::SequentialTaskSampler(std::span<const Task> tasks) {
  for (const auto& t : tasks) tasks_.push_back(&t);
}

std::vector<const Task*> SequentialTaskSampler::next(std::size_t count, Rng&) {
  if (pos_ + count > tasks_.size()) {
    throw Error("task sampler exhausted after " + std::to_string(pos_) + " of " + std::to_string(tasks_.size()) +
                " tasks");
  }
  std::vector<const Task*> out(tasks_.begin() + static_cast<std::ptrdiff_t>(pos_),
                               tasks_.begin() + static_cast<std::ptrdiff_t>(pos_ + count));
  pos_ += count;
  return out;
}

double evaluate_nll(const ModelConfig& model, const OverlayConfig& overlay, const NamedTensors& params,
                    std::span<const Sequence> seqs, const Tensor& alpha) {
  NoGradGuard no_grad;
  return overlay_loss(model, overlay, params, seqs, alpha).item();
}

AdaptMetrics adapt_and_eval(const Task& task, const MetaState& state, const MetaConfig& cfg, std::size_t steps,
                            const AdaptOptions& options) {
  cfg.validate();
  const auto train = truncated(task.train, options.train_limit);
  if (train.empty()) throw ConfigError("task '" + task.id + "': empty training split");
  AdaptMetrics m;
  m.trainable_ratio = trainable_params(state.model, state.overlay, cfg.adapt_set).ratio();
  const NamedTensors fixed = detach_all(state.params);
  Tensor alpha;
  {
    NoGradGuard no_grad;
    alpha = alpha_for(state, fixed, task);
  }
  m.zero_shot_nll = evaluate_nll(state.model, state.overlay, fixed, task.test, alpha);
  m.zero_shot_ppl = perplexity(m.zero_shot_nll);
  if (steps == 0) {
    m.test_nll = m.zero_shot_nll;
    m.ppl = m.zero_shot_ppl;
    return m;
  }

  const auto keys = adapt_keys(state.params, state.model, state.overlay, cfg.adapt_set);
  Rng rng = inner_rng(state, task);
  NamedTensors fast = subset(fixed, keys);
  NamedTensors best = fast;
  const bool track_val = !task.val.empty();
  double best_val = track_val ? evaluate_nll(state.model, state.overlay, fixed, task.val, alpha)
                              : std::numeric_limits<double>::infinity();
  for (std::size_t s = 1; s <= steps; ++s) {
    const auto batch = inner_batch(train, cfg.inner_batch, rng);
    double loss = 0.0;
    fast = plain_inner_step(state, fixed, fast, alpha, batch, cfg.inner_lr, loss);
    if (track_val) {
      const double v = evaluate_nll(state.model, state.overlay, merge_params(fixed, fast), task.val, alpha);
      if (v < best_val) {
        best_val = v;
        best = fast;
        m.steps_to_best = s;
      }
    }
  }
  const NamedTensors& final_fast = options.early_stop && track_val ? best : fast;
  m.test_nll = evaluate_nll(state.model, state.overlay, merge_params(fixed, final_fast), task.test, alpha);
  m.ppl = perplexity(m.test_nll);
  return m;
}

std::vector<double> adapt_trajectory(const Task& task, const MetaState& state, const MetaConfig& cfg,
                                     std::span<const std::size_t> checkpoints, std::size_t train_limit) {
  cfg.validate();
  if (!std::is_sorted(checkpoints.begin(), checkpoints.end())) throw ConfigError("trajectory steps must ascend");
  const auto train = truncated(task.train, train_limit);
  if (train.empty()) throw ConfigError("task '" + task.id + "': empty training split");
  const NamedTensors fixed = detach_all(state.params);
  Tensor alpha;
  {
    NoGradGuard no_grad;
    alpha = alpha_for(state, fixed, task);
  }
  const auto keys = adapt_keys(state.params, state.model, state.overlay, cfg.adapt_set);
  Rng rng = inner_rng(state, task);
  NamedTensors fast = subset(fixed, keys);
  std::vector<double> out;
  std::size_t done = 0;
  for (std::size_t target : checkpoints) {
    for (; done < target; ++done) {
      const auto batch = inner_batch(train, cfg.inner_batch, rng);
      double loss = 0.0;
      fast = plain_inner_step(state, fixed, fast, alpha, batch, cfg.inner_lr, loss);
    }
    out.push_back(evaluate_nll(state.model, state.overlay, merge_params(fixed, fast), task.test, alpha));
  }
  return out;
}

double mean_adapted_nll(std::span<const Task> tasks, const MetaState& state, const MetaConfig& cfg) {
  if (tasks.empty()) throw ConfigError("mean_adapted_nll: no tasks");
  double total = 0.0;
  for (const auto& t : tasks) total += adapt_and_eval(t, state, cfg, cfg.inner_steps).test_nll;
  return total / static_cast<double>(tasks.size());
}

std::vector<MetricsRow> meta_train(TaskSampler& sampler, MetaState& state, const MetaConfig& cfg,
                                   std::size_t n_iters, const MetaTrainOptions& options) {
  cfg.validate();
  std::vector<MetricsRow> rows;
  const double ratio = trainable_params(state.model, state.overlay, cfg.adapt_set).ratio();
  auto log_val = [&] {
    if (options.val_tasks.empty()) return;
    const double nll = mean_adapted_nll(options.val_tasks, state, cfg);
    rows.push_back({std::to_string(state.meta_iter), "meta_val", cfg.inner_steps,
                    options.val_tasks.front().train.size(), nll, perplexity(nll), ratio, state.seed});
  };
  log_val();
  bool logged_last = true;
  for (std::size_t it = 0; it < n_iters; ++it) {
    const auto batch = sampler.next(cfg.meta_batch, state.rng);
    const double loss = meta_step(batch, state, cfg);
    const double mean = loss / static_cast<double>(batch.size());
    rows.push_back({std::to_string(state.meta_iter), "meta_batch", cfg.inner_steps, batch.front()->train.size(), mean,
                    perplexity(mean), ratio, state.seed});
    logged_last = false;
    if (state.meta_iter % cfg.eval_every == 0) {
      log_val();
      logged_last = true;
    }
    if (options.on_iter) options.on_iter(state);
  }
  if (!logged_last) log_val();
  return rows;
}

}  // namespace mltd
