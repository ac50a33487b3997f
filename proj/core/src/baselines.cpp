#include "mltd/baselines.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <ostream>

#include "mltd/error.hpp"
#include "mltd/tape.hpp"

namespace mltd {

namespace {

constexpr std::array<std::pair<PipelineMode, const char*>, 6> kPipelines = {{
    {PipelineMode::kScratchMaml, "scratch_maml"},
    {PipelineMode::kPretrainOnly, "pretrain_only"},
    {PipelineMode::kPretrainFinetune, "pretrain_finetune"},
    {PipelineMode::kPretrainMaml, "pretrain_maml"},
    {PipelineMode::kMultitaskThenTarp, "multitask_then_tarp"},
    {PipelineMode::kMltd, "mltd"},
}};

constexpr std::array<PipelineMode, 6> kAllPipelines = {PipelineMode::kScratchMaml,      PipelineMode::kPretrainOnly,
                                                      PipelineMode::kPretrainFinetune, PipelineMode::kPretrainMaml,
                                                      PipelineMode::kMultitaskThenTarp, PipelineMode::kMltd};

bool needs_pretraining(PipelineMode mode) { return mode != PipelineMode::kScratchMaml; }

OverlayConfig full_weight_overlay() {
  OverlayConfig o;
  o.tarp.kind = DecompKind::kFullFinetune;
  o.tams_enabled = false;
  return o;
}

std::string number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::span<const Task> test_tasks(const TaskSuite& suite, const ExperimentConfig& cfg) {
  std::span<const Task> t(suite.meta_test);
  if (cfg.max_test_tasks != 0 && cfg.max_test_tasks < t.size()) t = t.first(cfg.max_test_tasks);
  if (t.empty()) throw ConfigError("the suite has no meta-test tasks");
  return t;
}

NamedTensors pretrain_for(const TaskSuite& suite, const ExperimentConfig& cfg) {
  const auto init = build_model(cfg.model, cfg.seed).params;
  return multitask_pretrain(cfg.model, init, suite.meta_train, cfg.pretrain, cfg.seed);
}

}  // namespace

NamedTensors multitask_pretrain(const ModelConfig& model, const NamedTensors& init, std::span<const Task> tasks,
                                const PretrainConfig& cfg, std::uint64_t seed, std::vector<double>* trace) {
  if (cfg.batch < 1) throw ConfigError("pretrain batch must be >= 1");
  std::vector<const Sequence*> pool;
  for (const auto& t : tasks) {
    for (const auto& s : t.train) pool.push_back(&s);
  }
  if (pool.empty()) throw ConfigError("multitask pretraining needs at least one training sequence");
  NamedTensors params = clone_all(init);
  AdamState adam;
  adam.lr = cfg.lr;
  Rng rng = substream(seed, "pretrain");
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<Sequence> batch;
    for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(*pool[rng() % pool.size()]);
    Tape tape;
    TapeScope scope(tape);
    NamedTensors w = tape.watch(params);
    Tensor loss = sequence_loss(model, w, batch);
    if (trace) trace->push_back(loss.item());
    NamedTensors g = grad(loss, w);
    adam_step(adam, params, g);
  }
  return params;
}

const char* pipeline_name(PipelineMode mode) {
  for (const auto& [m, name] : kPipelines) {
    if (m == mode) return name;
  }
  return "?";
}

PipelineMode parse_pipeline(std::string_view name) {
  for (const auto& [m, n] : kPipelines) {
    if (name == n) return m;
  }
  throw ConfigError("unknown pipeline mode '" + std::string(name) + "'");
}

std::span<const PipelineMode> all_pipelines() { return kAllPipelines; }

PreparedPipeline prepare_pipeline(PipelineMode mode, const TaskSuite& suite, const ExperimentConfig& cfg,
                                  const NamedTensors* pretrained) {
  NamedTensors own;
  if (needs_pretraining(mode) && pretrained == nullptr) {
    own = pretrain_for(suite, cfg);
    pretrained = &own;
  }
  MetaConfig full_cfg = cfg.meta;
  if (cfg.finetune_lr > 0.0) full_cfg.inner_lr = cfg.finetune_lr;
  OverlayConfig tarp_only = cfg.overlay;
  tarp_only.tams_enabled = false;

  auto meta_train_on = [&](MetaState& st, const MetaConfig& mc) {
    RandomTaskSampler sampler(suite.meta_train);
    meta_train(sampler, st, mc, cfg.meta_iters);
  };

  switch (mode) {
    case PipelineMode::kScratchMaml: {
      PreparedPipeline p{init_meta_state(cfg.model, full_weight_overlay(), cfg.seed), full_cfg};
      meta_train_on(p.state, full_cfg);
      return p;
    }
    case PipelineMode::kPretrainOnly: {
      PreparedPipeline p{init_meta_state(cfg.model, full_weight_overlay(), cfg.seed, pretrained), full_cfg};
      p.adapts = false;
      return p;
    }
    case PipelineMode::kPretrainFinetune:
      return PreparedPipeline{init_meta_state(cfg.model, full_weight_overlay(), cfg.seed, pretrained), full_cfg};
    case PipelineMode::kPretrainMaml: {
      PreparedPipeline p{init_meta_state(cfg.model, full_weight_overlay(), cfg.seed, pretrained), full_cfg};
      meta_train_on(p.state, full_cfg);
      return p;
    }
    case PipelineMode::kMultitaskThenTarp:
      return PreparedPipeline{init_meta_state(cfg.model, tarp_only, cfg.seed, pretrained), cfg.meta};
    case PipelineMode::kMltd: {
      PreparedPipeline p{init_meta_state(cfg.model, cfg.overlay, cfg.seed, pretrained), cfg.meta};
      meta_train_on(p.state, cfg.meta);
      return p;
    }
  }
  throw ConfigError("unhandled pipeline mode");
}

std::vector<MetricsRow> compare_pipelines(const TaskSuite& suite, const ExperimentConfig& cfg,
                                          std::span<const PipelineMode> modes) {
  const auto tasks = test_tasks(suite, cfg);
  std::vector<std::size_t> steps = cfg.steps_grid;
  std::sort(steps.begin(), steps.end());
  NamedTensors pretrained;
  for (auto m : modes) {
    if (needs_pretraining(m)) {
      pretrained = pretrain_for(suite, cfg);
      break;
    }
  }

  std::vector<MetricsRow> rows;
  for (auto mode : modes) {
    const auto prepared = prepare_pipeline(mode, suite, cfg, needs_pretraining(mode) ? &pretrained : nullptr);
    const double ratio =
        prepared.adapts ? trainable_params(prepared.state.model, prepared.state.overlay, prepared.adapt_cfg.adapt_set).ratio()
                        : 0.0;
    const std::string name = pipeline_name(mode);
    for (std::size_t size : cfg.train_sizes) {
      std::vector<double> sums(steps.size(), 0.0);
      for (const auto& task : tasks) {
        std::vector<double> nll;
        if (prepared.adapts) {
          nll = adapt_trajectory(task, prepared.state, prepared.adapt_cfg, steps, size);
        } else {
          const double z = evaluate_nll(prepared.state.model, prepared.state.overlay, prepared.state.params, task.test);
          nll.assign(steps.size(), z);
        }
        for (std::size_t i = 0; i < steps.size(); ++i) {
          sums[i] += nll[i];
          if (cfg.per_task_rows) {
            rows.push_back({name, task.id, steps[i], size, nll[i], perplexity(nll[i]), ratio, cfg.seed});
          }
        }
      }
      for (std::size_t i = 0; i < steps.size(); ++i) {
        const double mean = sums[i] / static_cast<double>(tasks.size());
        rows.push_back({name, "all", steps[i], size, mean, perplexity(mean), ratio, cfg.seed});
      }
    }
  }
  return rows;
}

RankSweepResult rank_sweep(const TaskSuite& suite, const ExperimentConfig& cfg, std::span<const std::size_t> ranks,
                           std::span<const std::size_t> train_sizes, std::size_t steps,
                           const NamedTensors* pretrained) {
  if (ranks.empty() || train_sizes.empty()) throw ConfigError("rank sweep needs ranks and train sizes");
  const auto tasks = test_tasks(suite, cfg);
  NamedTensors own;
  if (pretrained == nullptr) {
    own = pretrain_for(suite, cfg);
    pretrained = &own;
  }
  AdaptOptions opts;
  opts.early_stop = true;

  auto mean_nll = [&](const MetaState& st, const MetaConfig& mc, std::size_t size) {
    double total = 0.0;
    for (const auto& t : tasks) {
      opts.train_limit = size;
      total += adapt_and_eval(t, st, mc, steps, opts).test_nll;
    }
    return total / static_cast<double>(tasks.size());
  };

  RankSweepResult result;
  std::vector<double> best(train_sizes.size(), std::numeric_limits<double>::infinity());
  result.best_rank.assign(train_sizes.size(), 0);
  for (std::size_t r : ranks) {
    OverlayConfig ov = cfg.overlay;
    ov.tams_enabled = false;
    ov.tarp.rank = r;
    const MetaState st = init_meta_state(cfg.model, ov, cfg.seed, pretrained);
    const double ratio = trainable_params(cfg.model, ov).ratio();
    for (std::size_t i = 0; i < train_sizes.size(); ++i) {
      const double nll = mean_nll(st, cfg.meta, train_sizes[i]);
      result.rows.push_back({"tarp_r" + std::to_string(r), "all", steps, train_sizes[i], nll, perplexity(nll), ratio,
                             cfg.seed});
      if (nll < best[i] || (nll == best[i] && r < result.best_rank[i])) {
        best[i] = nll;
        result.best_rank[i] = r;
      }
    }
  }
  MetaConfig full_cfg = cfg.meta;
  if (cfg.finetune_lr > 0.0) full_cfg.inner_lr = cfg.finetune_lr;
  const MetaState st = init_meta_state(cfg.model, full_weight_overlay(), cfg.seed, pretrained);
  for (std::size_t size : train_sizes) {
    const double nll = mean_nll(st, full_cfg, size);
    result.rows.push_back({"full_finetune", "all", steps, size, nll, perplexity(nll), 1.0, cfg.seed});
  }
  return result;
}

std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"\r\n") == std::string::npos) return value;
  std::string out = "\"";
  for (char c : value) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void write_csv(std::ostream& out, std::span<const MetricsRow> rows, const std::string& first_column) {
  out << csv_field(first_column) << ",task_id,steps,train_size,nll,ppl,trainable_ratio,seed\r\n";
  for (const auto& r : rows) {
    out << csv_field(r.mode) << ',' << csv_field(r.task_id) << ',' << r.steps << ',' << r.train_size << ','
        << number(r.nll) << ',' << number(r.ppl) << ',' << number(r.trainable_ratio) << ',' << r.seed << "\r\n";
  }
}

}  // namespace mltd
