#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>

#include "mltd/checks.hpp"
#include "mltd/store.hpp"

namespace mltd::cli {

namespace {

namespace fs = std::filesystem;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::ofstream open_csv(const fs::path& path, bool append = false) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void save_state(const MetaState& st, const fs::path& path, bool compact) {
  try {
    save_checkpoint(st, path, compact);
  } catch (const Error& e) {
    throw CheckpointFailure(e.what());
  }
}

MetaState load_state(const fs::path& path) {
  try {
    return load_checkpoint(path);
  } catch (const Error& e) {
    throw CheckpointFailure(e.what());
  }
}

void check_fits(const RunConfig& cfg, const TaskSuite& suite) {
  for (const auto* role : {&suite.meta_train, &suite.meta_val, &suite.meta_test}) {
    for (const auto& t : *role) {
      if (t.vocab > cfg.model.vocab_size)
        throw ConfigError("task " + t.id + " has vocab " + std::to_string(t.vocab) + " > model.vocab_size " +
                          std::to_string(cfg.model.vocab_size));
      for (const auto* split : {&t.train, &t.val, &t.test})
        for (const auto& s : *split)
          if (s.size() > cfg.model.max_seq_len)
            throw ConfigError("task " + t.id + " has sequences longer than model.max_seq_len");
    }
  }
}

std::vector<const Task*> all_tasks(const TaskSuite& suite) {
  std::vector<const Task*> out;
  for (const auto* role : {&suite.meta_train, &suite.meta_val, &suite.meta_test})
    for (const auto& t : *role) out.push_back(&t);
  return out;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string percent(double ratio) { return fixed(100.0 * ratio, 3) + "%"; }

}  // namespace

ModelConfig gpt2_medium() {
  ModelConfig m;
  m.vocab_size = 50257;
  m.d_model = 1024;
  m.n_layers = 24;
  m.n_heads = 16;
  m.d_ffn = 4096;
  m.max_seq_len = 1024;
  return m;
}

TaskSuite obtain_suite(const RunConfig& cfg) {
  TaskSuite suite;
  if (!cfg.suite_dir.empty()) {
    suite = load_suite(cfg.suite_dir);
  } else if (!cfg.corpus_dir.empty()) {
    // Files in name order: the last ones are meta-test, then meta-validation.
    std::vector<Task> tasks = load_text_tasks(cfg.corpus_dir, cfg.ratios, cfg.suite.seq_len, cfg.alphabet);
    const std::size_t n = tasks.size();
    const std::size_t n_test = std::min(cfg.suite.n_meta_test, n / 2);
    const auto n_val = static_cast<std::size_t>(std::floor(cfg.suite.meta_val_fraction * static_cast<double>(n - n_test)));
    if (n - n_test - n_val == 0) throw ConfigError("corpus has too few files to leave any meta-train task");
    for (std::size_t i = 0; i < n; ++i) {
      auto& role = i < n - n_test - n_val ? suite.meta_train : i < n - n_test ? suite.meta_val : suite.meta_test;
      role.push_back(std::move(tasks[i]));
    }
  } else {
    SuiteConfig sc = cfg.suite;
    sc.seed = cfg.seed;
    suite = generate_suite(sc);
  }
  check_fits(cfg, suite);
  return suite;
}

int cmd_gen_tasks(const RunConfig& cfg, const GenTasksArgs& args) {
  const TaskSuite suite = obtain_suite(cfg);
  const fs::path out = args.out.empty() ? cfg.out_dir / "tasks" : args.out;
  save_suite(suite, out);

  std::set<std::uint32_t> domains;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
  std::size_t known = 0;
  for (const Task* t : all_tasks(suite)) {
    domains.insert(t->domain);
    if (std::isnan(t->entropy_rate)) continue;
    lo = std::min(lo, t->entropy_rate);
    hi = std::max(hi, t->entropy_rate);
    sum += t->entropy_rate;
    ++known;
  }
  std::cout << "wrote " << suite.size() << " tasks to " << out.string() << "\n"
            << "domains      " << domains.size() << "\n"
            << "meta_train   " << suite.meta_train.size() << "\n"
            << "meta_val     " << suite.meta_val.size() << "\n"
            << "meta_test    " << suite.meta_test.size() << "\n";
  if (known > 0) {
    std::cout << "entropy_rate min " << fixed(lo, 6) << " mean " << fixed(sum / static_cast<double>(known), 6)
              << " max " << fixed(hi, 6) << " nats/token\n";
  }
  return kExitOk;
}

int cmd_meta_train(const RunConfig& cfg, const MetaTrainArgs& args) {
  const TaskSuite suite = obtain_suite(cfg);
  if (suite.meta_train.size() < cfg.meta.meta_batch)
    throw ConfigError("meta.meta_batch " + std::to_string(cfg.meta.meta_batch) + " exceeds the " +
                      std::to_string(suite.meta_train.size()) + " meta-train tasks");

  MetaState st;
  const bool resuming = !args.resume.empty();
  if (resuming) {
    st = load_state(args.resume);
    std::cout << "resumed from " << args.resume.string() << " at iteration " << st.meta_iter << "\n";
  } else if (cfg.pretrain.steps > 0) {
    const NamedTensors base = multitask_pretrain(cfg.model, build_model(cfg.model, cfg.seed).params, suite.meta_train,
                                                 cfg.pretrain, cfg.seed);
    st = init_meta_state(cfg.model, cfg.overlay, cfg.seed, &base);
  } else {
    st = init_meta_state(cfg.model, cfg.overlay, cfg.seed);
  }

  ensure_dir(cfg.out_dir);
  const fs::path ckpt = cfg.out_dir / "checkpoint.ckpt";
  const std::size_t remaining = cfg.meta_iters > st.meta_iter ? cfg.meta_iters - st.meta_iter : 0;

  RandomTaskSampler sampler(suite.meta_train);
  MetaTrainOptions opts;
  opts.val_tasks = suite.meta_val;
  opts.on_iter = [&](const MetaState& s) {
    if (cfg.checkpoint_every > 0 && s.meta_iter % cfg.checkpoint_every == 0)
      save_state(s, ckpt, cfg.compact_checkpoints);
  };
  const std::vector<MetricsRow> rows = remaining > 0 ? meta_train(sampler, st, cfg.meta, remaining, opts)
                                                     : std::vector<MetricsRow>{};
  save_state(st, ckpt, cfg.compact_checkpoints);
  save_state(st, cfg.out_dir / "final.ckpt", cfg.compact_checkpoints);

  const fs::path csv = cfg.out_dir / "metrics.csv";
  const bool append = resuming && fs::exists(csv);
  std::ofstream out = open_csv(csv, append);
  if (append) {
    std::ostringstream body;
    write_csv(body, rows);
    const std::string text = body.str();
    out << text.substr(text.find('\n') + 1);
  } else {
    write_csv(out, rows);
  }

  std::cout << "meta-trained " << remaining << " iterations (now at " << st.meta_iter << ")\n";
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    if (it->task_id == "meta_val") {
      std::cout << "meta_val ppl " << fixed(it->ppl) << "\n";
      break;
    }
  }
  std::cout << "checkpoint " << (cfg.out_dir / "final.ckpt").string() << "\nmetrics " << csv.string() << "\n";
  return kExitOk;
}

int cmd_adapt(const RunConfig& cfg, const AdaptArgs& args) {
  const TaskSuite suite = obtain_suite(cfg);
  const MetaState st = load_state(args.checkpoint);

  std::vector<const Task*> tasks;
  if (!args.task_ids.empty()) {
    const auto pool = all_tasks(suite);
    for (const auto& id : args.task_ids) {
      auto it = std::find_if(pool.begin(), pool.end(), [&](const Task* t) { return t->id == id; });
      if (it == pool.end()) throw ConfigError("no task with id '" + id + "'");
      tasks.push_back(*it);
    }
  } else if (args.role == "all") {
    tasks = all_tasks(suite);
  } else {
    const std::vector<Task>* role = args.role == "meta_train" ? &suite.meta_train
                                    : args.role == "meta_val" ? &suite.meta_val
                                    : args.role == "meta_test" ? &suite.meta_test
                                                               : nullptr;
    if (role == nullptr) throw ConfigError("unknown role '" + args.role + "'");
    for (const auto& t : *role) tasks.push_back(&t);
  }
  if (tasks.empty()) throw ConfigError("no tasks to adapt");

  const std::size_t steps = args.steps < 0 ? cfg.meta.inner_steps : static_cast<std::size_t>(args.steps);
  AdaptOptions opts;
  opts.train_limit = args.train_size;
  opts.early_stop = args.early_stop;
  std::vector<MetricsRow> rows;
  double sum = 0.0;
  for (const Task* t : tasks) {
    const AdaptMetrics m = adapt_and_eval(*t, st, cfg.meta, steps, opts);
    const std::size_t used = args.train_size == 0 ? t->train.size() : std::min(args.train_size, t->train.size());
    rows.push_back({"adapt", t->id, steps, used, m.test_nll, m.ppl, m.trainable_ratio, st.seed});
    sum += m.ppl;
  }
  const fs::path out = args.output.empty() ? cfg.out_dir / "adapt.csv" : args.output;
  std::ofstream f = open_csv(out);
  write_csv(f, rows);
  std::cout << "adapted " << rows.size() << " tasks for " << steps << " steps, mean ppl "
            << fixed(sum / static_cast<double>(rows.size())) << "\nrows " << out.string() << "\n";
  return kExitOk;
}

int cmd_compare(const RunConfig& cfg) {
  const TaskSuite suite = obtain_suite(cfg);
  const std::vector<PipelineMode> modes =
      cfg.modes.empty() ? std::vector<PipelineMode>(all_pipelines().begin(), all_pipelines().end()) : cfg.modes;
  const auto rows = compare_pipelines(suite, cfg.experiment(), modes);
  const fs::path out = cfg.out_dir / "compare.csv";
  std::ofstream f = open_csv(out);
  write_csv(f, rows);
  for (const auto& r : rows)
    if (r.task_id == "all")
      std::cout << r.mode << " steps " << r.steps << " size " << r.train_size << " ppl " << fixed(r.ppl) << "\n";
  std::cout << "rows " << out.string() << "\n";
  return kExitOk;
}

int cmd_rank_sweep(const RunConfig& cfg) {
  const TaskSuite suite = obtain_suite(cfg);
  const auto result = rank_sweep(suite, cfg.experiment(), cfg.ranks, cfg.sweep_train_sizes, cfg.sweep_steps);
  const fs::path out = cfg.out_dir / "rank_sweep.csv";
  std::ofstream f = open_csv(out);
  write_csv(f, result.rows, "method");
  for (const auto& r : result.rows)
    std::cout << r.mode << " size " << r.train_size << " ppl " << fixed(r.ppl) << "\n";
  for (std::size_t i = 0; i < cfg.sweep_train_sizes.size(); ++i)
    std::cout << "best rank at size " << cfg.sweep_train_sizes[i] << ": " << result.best_rank[i] << "\n";
  std::cout << "rows " << out.string() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg, const GradcheckArgs& args) {
  std::vector<std::string> scopes = args.scopes;
  if (scopes.empty())
    for (auto s : check_scopes()) scopes.emplace_back(s);
  bool ok = true;
  std::printf("%-11s %-34s %6s %12s %9s  %s\n", "scope", "check", "seeds", "max_rel_err", "tol", "result");
  for (const auto& scope : scopes) {
    for (const auto& r : run_checks(scope, args.seeds, cfg.seed)) {
      std::printf("%-11s %-34s %6zu %12.3e %9.1e  %s\n", r.scope.c_str(), r.name.c_str(), r.seeds, r.max_rel_err,
                  r.tol, r.passed ? "pass" : "FAIL");
      ok = ok && r.passed;
    }
  }
  std::fflush(stdout);
  return ok ? kExitOk : kExitRuntime;
}

int cmd_params(const RunConfig& cfg, const ParamsArgs& args) {
  const ModelConfig& m = cfg.model;
  const OverlayConfig& ov = cfg.overlay;
  ov.validate(m);
  const std::size_t base = count_base_params(m);
  const ParamCount tarp = trainable_params(m, ov, AdaptSet::kTarpOnly);
  const bool reparam = ov.tarp_attached();

  struct Row {
    std::string component;
    std::size_t trainable;
    std::size_t frozen;
  };
  std::vector<Row> rows;
  rows.push_back({std::string("adapted (") + decomp_name(ov.tarp.kind) + ")", tarp.trainable,
                  reparam ? base : base - tarp.trainable});
  ParamCount tams{};
  if (ov.tams_enabled) {
    tams = tams_param_overhead(m, ov.tams);
    rows.push_back({"tams cells+controller", tams.trainable, 0});
  }
  rows.push_back({"base model", 0, base});

  std::printf("%-28s %14s %14s %10s\n", "component", "trainable", "frozen", "ratio");
  for (const auto& r : rows)
    std::printf("%-28s %14zu %14zu %10s\n", r.component.c_str(), r.trainable, r.frozen,
                percent(static_cast<double>(r.trainable) / static_cast<double>(base)).c_str());
  std::fflush(stdout);

  if (!args.test_mode) return kExitOk;
  bool ok = true;
  auto expect = [&](bool cond, const std::string& what) {
    std::cout << (cond ? "pass  " : "FAIL  ") << what << "\n";
    ok = ok && cond;
  };
  if (ov.tarp.kind == DecompKind::kBilinear) expect(tarp.ratio() < 0.03, "bilinear trainable ratio < 3%");
  if (ov.tarp.kind == DecompKind::kFullFinetune) expect(tarp.ratio() == 1.0, "full finetune ratio = 100%");
  if (ov.tams_enabled) expect(tams.ratio() < 0.05, "tams overhead < 5%");
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace mltd::cli
