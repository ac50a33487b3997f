// Acceptance runner: one PASS/FAIL line per criterion.
//
//   mltd_acceptance [--only 1,5,11] [--expect-fail 8]
//
// Exit status is 0 when every selected criterion passes, apart from those
// named in --expect-fail (which are still run and reported).

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mltd/baselines.hpp"
#include "mltd/checks.hpp"
#include "mltd/metaloop.hpp"
#include "mltd/ops.hpp"
#include "mltd/overlay.hpp"
#include "mltd/store.hpp"
#include "mltd/tams.hpp"
#include "mltd/tarp.hpp"
#include "support.hpp"

using namespace mltd;
using oracle::Mat;

namespace {

using clk = std::chrono::steady_clock;

double seconds_since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Shared fixtures

constexpr std::uint64_t kSeeds[] = {0, 1, 2};

SuiteConfig desk_suite(std::uint64_t seed) {
  SuiteConfig sc;
  sc.n_domains = 64;
  sc.tasks_per_domain = 2;
  sc.vocab = 16;
  sc.n_train = 32;
  sc.n_val = 8;
  sc.n_test = 16;
  sc.seq_len = 32;
  sc.n_meta_test = 50;
  sc.seed = seed;
  return sc;
}

ModelConfig desk_model(std::size_t d) {
  ModelConfig m;
  m.vocab_size = 16;
  m.d_model = d;
  m.n_layers = 1;
  m.n_heads = 2;
  m.d_ffn = 2 * d;
  m.max_seq_len = 32;
  return m;
}

// d_model 16, bilinear r = 2, T_in = 5: the meta-learning setup.
ExperimentConfig meta_setup(std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.model = desk_model(16);
  cfg.overlay.tarp.kind = DecompKind::kBilinear;
  cfg.overlay.tarp.rank = 2;
  cfg.meta.meta_batch = 4;
  cfg.meta.inner_steps = 5;
  cfg.meta.inner_lr = 0.5;
  cfg.meta.outer_lr = 3e-3;
  cfg.pretrain.steps = 1000;
  cfg.pretrain.lr = 3e-3;
  cfg.pretrain.batch = 16;
  cfg.meta_iters = 200;
  cfg.seed = seed;
  return cfg;
}

struct SeedData {
  TaskSuite suite;
  NamedTensors pretrained;  // multitask model of meta_setup
  std::optional<PreparedPipeline> mltd;
};

std::map<std::uint64_t, SeedData>& cache() {
  static std::map<std::uint64_t, SeedData> c;
  return c;
}

SeedData& seed_data(std::uint64_t seed) {
  auto it = cache().find(seed);
  if (it != cache().end()) return it->second;
  SeedData d;
  d.suite = generate_suite(desk_suite(seed));
  const ExperimentConfig cfg = meta_setup(seed);
  d.pretrained = multitask_pretrain(cfg.model, build_model(cfg.model, seed).params, d.suite.meta_train, cfg.pretrain, seed);
  return cache().emplace(seed, std::move(d)).first->second;
}

const PreparedPipeline& mltd_pipeline(std::uint64_t seed) {
  SeedData& d = seed_data(seed);
  if (!d.mltd) d.mltd = prepare_pipeline(PipelineMode::kMltd, d.suite, meta_setup(seed), &d.pretrained);
  return *d.mltd;
}

// Smallest margin of any evaluated test perplexity above exp(entropy rate).
struct FloorLog {
  double min_gap = std::numeric_limits<double>::infinity();
  std::string where;
  std::size_t count = 0;

  void add(double ppl, double entropy, const std::string& what) {
    ++count;
    const double gap = ppl - std::exp(entropy);
    if (gap < min_gap) {
      min_gap = gap;
      where = what;
    }
  }
};

FloorLog& floor_log() {
  static FloorLog f;
  return f;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

double mean_entropy(std::span<const Task> tasks) {
  double s = 0.0;
  for (const auto& t : tasks) s += t.entropy_rate;
  return s / static_cast<double>(tasks.size());
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Verdict gradient_suite() {
  const auto t0 = clk::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t families = 0;
  bool ok = true;
  for (const char* scope : {"primitives", "tarp", "tams", "lm"}) {
    for (const auto& r : run_checks(scope, 20)) {
      ++families;
      ok = ok && r.passed && r.seeds >= 20 && r.tol <= 1e-5;
      if (r.max_rel_err >= worst) {
        worst = r.max_rel_err;
        worst_name = r.scope + "/" + r.name;
      }
      if (!r.passed) std::printf("       failing: %s/%s %.3e\n", r.scope.c_str(), r.name.c_str(), r.max_rel_err);
    }
  }
  const double secs = seconds_since(t0);
  ok = ok && secs <= 120.0;
  return {ok, fmt("%zu check families x 20 seeds, worst rel err %.2e (%s), %.1f s of 120", families, worst,
                  worst_name.c_str(), secs)};
}

// ---------------------------------------------------------------------------
// 2. Decomposition oracles

Verdict decomposition_oracles() {
  double kron_err = 0.0, dyn_err = 0.0, static_err = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto kl = testing::random_layer(DecompKind::kKronecker, 8, 8, 2, seed);
    for (int j : {1, 2}) {
      std::vector<KronBlock> blocks;
      for (std::size_t k = 0; k < 2; ++k) {
        const std::string p = "phi" + std::to_string(j) + ".kron." + std::to_string(k) + ".";
        blocks.push_back({kl.factors.at(p + "H"), kl.factors.at(p + "U"), kl.factors.at(p + "V")});
      }
      kron_err = std::max(kron_err, oracle::max_abs_diff(kron_phi(blocks), oracle::kron_oracle(kl, j)));
    }

    const auto dl = testing::random_layer(DecompKind::kDynamic, 6, 5, 2, seed);
    Rng rng(substream_seed(seed, "acceptance.oracle.x"));
    const Tensor xd = randn({4, 6}, 1.0, rng);
    const Tensor yd = dynamic_forward(dl, xd);
    const Mat w0 = oracle::to_mat(dl.w0);
    for (std::size_t t = 0; t < 4; ++t) {
      const auto xt = oracle::vec(ops::slice(xd, 0, t, 1));
      const Mat ref = oracle::reparam_dense({xt}, oracle::plus_one(oracle::dynamic_phi(dl, 1, xt)), w0,
                                            oracle::dynamic_phi(dl, 2, xt), oracle::vec(dl.bias0));
      for (std::size_t o = 0; o < 5; ++o) dyn_err = std::max(dyn_err, std::abs(yd.at({t, o}) - ref[0][o]));
    }

    for (auto kind : {DecompKind::kBilinear, DecompKind::kKronecker}) {
      const auto sl = testing::random_layer(kind, 8, 6, 2, seed);
      const Tensor x = randn({5, 8}, 1.0, rng);
      const Mat ref = oracle::reparam_dense(oracle::to_mat(x), oracle::plus_one(oracle::static_phi(sl, 1)),
                                            oracle::to_mat(sl.w0), oracle::static_phi(sl, 2), oracle::vec(sl.bias0));
      static_err = std::max(static_err, oracle::max_abs_diff(static_forward(sl, x), ref));
    }
  }
  const bool ok = kron_err <= 1e-12 && dyn_err <= 1e-12 && static_err <= 1e-12;
  return {ok, fmt("20 seeds: kronecker %.1e, dynamic per-token %.1e, static triple loop %.1e (tol 1e-12)", kron_err,
                  dyn_err, static_err)};
}

// ---------------------------------------------------------------------------
// 3. Identity initialization

Verdict identity_init() {
  ModelConfig model = desk_model(16);
  model.n_layers = 2;
  const NamedTensors base = build_model(model, 11).params;
  std::size_t configs = 0, mismatches = 0;

  auto compare = [&](const OverlayConfig& ov, const NamedTensors& params, const Tensor& alpha) {
    ++configs;
    Overlay hooks(model, ov, params, alpha);
    for (std::uint64_t s = 0; s < 100; ++s) {
      const auto seqs = testing::random_sequences(2, 12, model.vocab_size, substream_seed(s, "acceptance.identity"));
      const TokenBatch batch(seqs.begin(), seqs.end());
      if (!forward_lm(model, params, batch, &hooks).equal(forward_lm(model, base, batch))) ++mismatches;
    }
  };

  for (auto kind : {DecompKind::kBilinear, DecompKind::kKronecker, DecompKind::kDynamic, DecompKind::kMatmulAblation}) {
    for (bool additive : {false, true}) {
      OverlayConfig ov;
      ov.tarp.kind = kind;
      ov.tarp.rank = 2;
      ov.tarp.additive_only = additive;
      NamedTensors params = base;
      for (auto& [k, t] : init_overlay(model, ov, 3)) params.emplace(k, t);
      compare(ov, params, {});
    }
  }

  OverlayConfig ov;
  ov.tarp.kind = DecompKind::kFullFinetune;
  ov.tams_enabled = true;
  ov.tams.reduced_dim = 4;
  ov.tams.controller_hidden = 16;
  NamedTensors params = base;
  for (auto& [k, t] : init_overlay(model, ov, 5)) params.emplace(k, t);
  Rng rng(substream_seed(5, "acceptance.identity.out"));
  for (auto& [k, t] : params)
    if (k.starts_with("tams.") && k.ends_with(".out.w")) t = randn(t.shape(), 0.5, rng);
  const Tensor zeroize = arch_to_alpha(std::vector<CellOp>(edge_count(ov.tams), CellOp::kZeroize));
  for (bool discrete : {false, true}) {
    ov.discrete_alpha = discrete;
    compare(ov, params, zeroize);
  }

  return {mismatches == 0, fmt("%zu overlay configs x 100 inputs, %zu logit tensors differ from the bare model", configs,
                               mismatches)};
}

// ---------------------------------------------------------------------------
// 4. Parameter efficiency

Verdict parameter_efficiency() {
  ModelConfig m;
  m.vocab_size = 50257;
  m.d_model = 1024;
  m.n_layers = 24;
  m.n_heads = 16;
  m.d_ffn = 4096;
  m.max_seq_len = 1024;
  OverlayConfig ov;
  ov.tarp.kind = DecompKind::kBilinear;
  ov.tarp.rank = 4;
  const double tarp = trainable_params(m, ov).ratio();
  CellConfig cell;
  cell.reduced_dim = 64;
  const double tams = tams_param_overhead(m, cell).ratio();
  return {tarp < 0.03 && tams < 0.05,
          fmt("GPT-2-medium shape: bilinear r=4 trains %.3f%% (< 3%%), TAMS reduced_dim 64 adds %.3f%% (< 5%%)",
              100.0 * tarp, 100.0 * tams)};
}

// ---------------------------------------------------------------------------
// 5. MAML correctness

Verdict maml_correctness() {
  const auto t0 = clk::now();
  bool ok = true;
  std::string parts;
  for (const auto& r : check_maml(20)) {
    ok = ok && r.passed && r.seeds >= 20;
    if (!parts.empty()) parts += ", ";
    parts += fmt("%s %.1e", r.name.c_str(), r.max_rel_err);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs <= 300.0;
  return {ok, fmt("20 seeds: %s (tol 1e-4, zero lr 1e-10), %.1f s of 300", parts.c_str(), secs)};
}

// ---------------------------------------------------------------------------
// 6. Meta-learning efficacy

Verdict meta_learning_efficacy() {
  const auto t0 = clk::now();
  bool ok = true;
  std::string lines;
  for (std::uint64_t seed : kSeeds) {
    SeedData& d = seed_data(seed);
    const ExperimentConfig cfg = meta_setup(seed);
    const PreparedPipeline& mltd = mltd_pipeline(seed);
    const PreparedPipeline multitask = prepare_pipeline(PipelineMode::kMultitaskThenTarp, d.suite, cfg, &d.pretrained);
    const MetaState random_init = init_meta_state(cfg.model, cfg.overlay, substream_seed(seed, "acceptance.random_init"));

    double sum[3] = {0.0, 0.0, 0.0};
    std::size_t wins = 0;
    for (const auto& t : d.suite.meta_test) {
      const double a = adapt_and_eval(t, mltd.state, mltd.adapt_cfg, 5).ppl;
      const double b = adapt_and_eval(t, multitask.state, multitask.adapt_cfg, 5).ppl;
      const double c = adapt_and_eval(t, random_init, cfg.meta, 5).ppl;
      floor_log().add(a, t.entropy_rate, fmt("mltd seed %llu %s", (unsigned long long)seed, t.id.c_str()));
      floor_log().add(b, t.entropy_rate, fmt("multitask+tarp seed %llu %s", (unsigned long long)seed, t.id.c_str()));
      floor_log().add(c, t.entropy_rate, fmt("random+tarp seed %llu %s", (unsigned long long)seed, t.id.c_str()));
      sum[0] += a;
      sum[1] += b;
      sum[2] += c;
      wins += a < b;
    }
    const double n = static_cast<double>(d.suite.meta_test.size());
    const bool seed_ok = sum[0] < sum[1] && sum[1] < sum[2] && static_cast<double>(wins) >= 0.7 * n;
    ok = ok && seed_ok;
    lines += fmt("\n       seed %llu: meta-trained %.3f < multitask %.3f < random %.3f, meta-trained better on %zu/%zu%s",
                 (unsigned long long)seed, sum[0] / n, sum[1] / n, sum[2] / n, wins, d.suite.meta_test.size(),
                 seed_ok ? "" : "  <- fails");
  }
  const double secs = seconds_since(t0);
  ok = ok && secs <= 1800.0;
  return {ok, fmt("test ppl after 5 steps on 50 held-out tasks, %.0f s of 1800", secs) + lines};
}

// ---------------------------------------------------------------------------
// 7. Low-data robustness

Verdict low_data_robustness() {
  const auto t0 = clk::now();
  constexpr std::size_t kSteps = 25;
  bool ok = true;
  std::string lines;
  for (std::uint64_t seed : kSeeds) {
    SeedData& d = seed_data(seed);
    const ModelConfig model = meta_setup(seed).model;
    OverlayConfig tov;
    tov.tarp.kind = DecompKind::kBilinear;
    tov.tarp.rank = 4;
    OverlayConfig fov;
    fov.tarp.kind = DecompKind::kFullFinetune;
    const MetaState tarp = init_meta_state(model, tov, seed, &d.pretrained);
    const MetaState full = init_meta_state(model, fov, seed, &d.pretrained);

    // learning rate per method, chosen on meta-validation at the largest size
    auto pick = [&](const MetaState& st, std::initializer_list<double> grid, AdaptSet set) {
      MetaConfig best;
      double best_nll = std::numeric_limits<double>::infinity();
      AdaptOptions o;
      o.train_limit = 32;
      for (double lr : grid) {
        MetaConfig c;
        c.inner_lr = lr;
        c.adapt_set = set;
        double s = 0.0;
        for (const auto& t : d.suite.meta_val) s += adapt_and_eval(t, st, c, kSteps, o).test_nll;
        if (s < best_nll) {
          best_nll = s;
          best = c;
        }
      }
      return best;
    };
    const MetaConfig tc = pick(tarp, {0.25, 0.5, 1.0, 2.0, 4.0}, AdaptSet::kTarpOnly);
    const MetaConfig fc = pick(full, {0.03, 0.1, 0.3, 1.0}, AdaptSet::kFull);

    std::string sizes;
    double gap_small = 0.0, gap_large = 0.0;
    std::size_t wins_small = 0;
    for (std::size_t size : {std::size_t{4}, std::size_t{32}}) {
      AdaptOptions o;
      o.train_limit = size;
      std::size_t wins = 0;
      double st = 0.0, sf = 0.0;
      for (const auto& t : d.suite.meta_test) {
        const double a = adapt_and_eval(t, tarp, tc, kSteps, o).ppl;
        const double b = adapt_and_eval(t, full, fc, kSteps, o).ppl;
        floor_log().add(a, t.entropy_rate, fmt("tarp r4 size %zu seed %llu %s", size, (unsigned long long)seed, t.id.c_str()));
        floor_log().add(b, t.entropy_rate, fmt("full size %zu seed %llu %s", size, (unsigned long long)seed, t.id.c_str()));
        st += a;
        sf += b;
        wins += a <= b;
      }
      const double n = static_cast<double>(d.suite.meta_test.size());
      (size == 4 ? gap_small : gap_large) = (sf - st) / n;
      if (size == 4) wins_small = wins;
      sizes += fmt(" | size %zu: tarp %.3f full %.3f, tarp <= full on %zu/50", size, st / n, sf / n, wins);
    }
    const bool seed_ok = static_cast<double>(wins_small) >= 0.6 * static_cast<double>(d.suite.meta_test.size());
    ok = ok && seed_ok;
    lines += fmt("\n       seed %llu (lr tarp %g, full %g)%s | full-minus-tarp gap %.3f -> %.3f (%s)%s",
                 (unsigned long long)seed, tc.inner_lr, fc.inner_lr, sizes.c_str(), gap_small, gap_large,
                 gap_large < gap_small ? "shrinks or reverses" : "does not shrink", seed_ok ? "" : "  <- fails");
  }
  const double secs = seconds_since(t0);
  ok = ok && secs <= 1200.0;
  return {ok, fmt("bilinear r=4 vs full finetune, %zu steps, %.0f s of 1200", kSteps, secs) + lines};
}

// ---------------------------------------------------------------------------
// 8. Rank sweep

Verdict rank_sweep_shape() {
  const auto t0 = clk::now();
  std::size_t small_best = 0;
  std::string lines;
  const std::vector<std::size_t> ranks = {1, 2, 4, 8, 16, 32};
  const std::vector<std::size_t> sizes = {4};
  for (std::uint64_t seed : kSeeds) {
    const TaskSuite& suite = seed_data(seed).suite;
    ExperimentConfig cfg;
    cfg.model = desk_model(64);  // r = 32 needs room on both Φ paths
    cfg.overlay.tarp.kind = DecompKind::kBilinear;
    cfg.meta.inner_lr = 0.5;
    cfg.finetune_lr = 0.03;
    cfg.pretrain.steps = 500;
    cfg.pretrain.lr = 3e-3;
    cfg.pretrain.batch = 16;
    cfg.seed = seed;
    const RankSweepResult res = rank_sweep(suite, cfg, ranks, sizes, 25);
    std::string row;
    const double h = mean_entropy(suite.meta_test);
    for (const auto& r : res.rows) {
      floor_log().add(r.ppl, h, fmt("rank sweep %s seed %llu (mean)", r.mode.c_str(), (unsigned long long)seed));
      row += fmt(" %s %.3f", r.mode.c_str(), r.ppl);
    }
    small_best += res.best_rank[0] <= 8;
    lines += fmt("\n       seed %llu: best r = %zu |%s", (unsigned long long)seed, res.best_rank[0], row.c_str());
  }
  const double secs = seconds_since(t0);
  const bool ok = small_best >= 2 && secs <= 1200.0;
  return {ok, fmt("4 train sequences, 25 steps, early stopping: best r <= 8 on %zu/3 seeds, %.0f s of 1200", small_best,
                  secs) +
                  lines};
}

// ---------------------------------------------------------------------------
// 9. TAMS sanity

Verdict tams_sanity() {
  CellConfig cell_cfg;
  cell_cfg.reduced_dim = 4;
  cell_cfg.n_intermediate = 3;
  cell_cfg.controller_hidden = 16;
  std::size_t onehot_mismatch = 0;
  double row_err = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(substream_seed(seed, "acceptance.tams"));
    NamedTensors cell = init_cell(8, cell_cfg, rng);
    cell["out.w"] = randn({cell_cfg.reduced_dim, 8}, 0.5, rng);
    std::vector<CellOp> arch(edge_count(cell_cfg));
    for (auto& op : arch) op = kCellOps[rng() % kNumCellOps];
    const Tensor x = randn({2 * 7, 8}, 1.0, rng);
    if (!cell_forward(cell, arch_to_alpha(arch), x, 2, 7, cell_cfg).equal(discrete_cell_forward(cell, arch, x, 2, 7, cell_cfg)))
      ++onehot_mismatch;

    NamedTensors ctrl;
    for (auto& [k, t] : init_controller(8, cell_cfg, rng)) ctrl.emplace(k, randn(t.shape(), 1.0, rng));
    const Tensor alpha = controller_forward(ctrl, randn({8}, 3.0, rng), cell_cfg);
    for (std::size_t e = 0; e < alpha.dim(0); ++e) {
      double s = 0.0;
      for (std::size_t o = 0; o < alpha.dim(1); ++o) s += alpha.at({e, o});
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
  }

  const std::uint64_t seed = 0;
  SeedData& d = seed_data(seed);
  const PreparedPipeline& tarp_only = mltd_pipeline(seed);
  ExperimentConfig cfg = meta_setup(seed);
  cfg.overlay.tams_enabled = true;
  cfg.overlay.tams.reduced_dim = 4;
  cfg.overlay.tams.n_intermediate = 2;
  cfg.overlay.tams.controller_hidden = 32;
  cfg.meta.adapt_set = AdaptSet::kTarpPlusTams;
  const PreparedPipeline with_tams = prepare_pipeline(PipelineMode::kMltd, d.suite, cfg, &d.pretrained);
  const double ppl_tarp = std::exp(mean_adapted_nll(d.suite.meta_val, tarp_only.state, tarp_only.adapt_cfg));
  const double ppl_tams = std::exp(mean_adapted_nll(d.suite.meta_val, with_tams.state, with_tams.adapt_cfg));
  for (const auto& t : d.suite.meta_test)
    floor_log().add(adapt_and_eval(t, with_tams.state, with_tams.adapt_cfg, 5).ppl, t.entropy_rate,
                    "mltd+tams seed 0 " + t.id);

  const bool ok = onehot_mismatch == 0 && row_err <= 1e-12 && ppl_tams <= ppl_tarp + 0.5;
  return {ok, fmt("one-hot vs discrete mismatches %zu/20, max |row sum - 1| %.1e; meta-val ppl with TAMS %.3f vs "
                  "TARP only %.3f (bound +0.5; strict improvement: %s)",
                  onehot_mismatch, row_err, ppl_tams, ppl_tarp, ppl_tams < ppl_tarp ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 10. Perplexity floor

Verdict perplexity_floor() {
  FloorLog& f = floor_log();
  if (f.count == 0) {
    // run on its own: evaluate the seed-0 meta-trained model
    const SeedData& d = seed_data(0);
    const PreparedPipeline& p = mltd_pipeline(0);
    for (const auto& t : d.suite.meta_test)
      f.add(adapt_and_eval(t, p.state, p.adapt_cfg, 5).ppl, t.entropy_rate, "mltd seed 0 " + t.id);
  }
  return {f.min_gap >= -0.05, fmt("%zu evaluations, smallest ppl - exp(entropy rate) = %.3f at %s (bound -0.05)", f.count,
                                  f.min_gap, f.where.c_str())};
}

// ---------------------------------------------------------------------------
// 11. Persistence

Verdict persistence() {
  const TaskSuite suite = generate_suite(testing::tiny_suite(21));
  OverlayConfig ov;
  ov.tarp.kind = DecompKind::kDynamic;
  ov.tarp.rank = 2;
  ov.tams_enabled = true;
  ov.tams.reduced_dim = 2;
  ov.tams.n_intermediate = 1;
  ov.tams.controller_hidden = 4;
  MetaConfig cfg;
  cfg.meta_batch = 2;
  cfg.inner_steps = 1;
  cfg.inner_lr = 0.1;
  cfg.outer_lr = 1e-2;
  cfg.adapt_set = AdaptSet::kTarpPlusTams;

  testing::TempDir dir("acceptance");
  MetaState straight = init_meta_state(testing::tiny_model(8, 8, 1), ov, 21);
  RandomTaskSampler s1(suite.meta_train);
  meta_train(s1, straight, cfg, 4);

  MetaState first = init_meta_state(testing::tiny_model(8, 8, 1), ov, 21);
  RandomTaskSampler s2(suite.meta_train);
  meta_train(s2, first, cfg, 1);
  save_checkpoint(first, dir.path() / "a.ckpt");
  MetaState resumed = load_checkpoint(dir.path() / "a.ckpt");
  save_checkpoint(resumed, dir.path() / "b.ckpt");
  const bool fixpoint = slurp(dir.path() / "a.ckpt") == slurp(dir.path() / "b.ckpt");
  RandomTaskSampler s3(suite.meta_train);
  meta_train(s3, resumed, cfg, 3);
  const bool resume = encode_checkpoint(state_to_checkpoint(straight)) == encode_checkpoint(state_to_checkpoint(resumed));
  return {fixpoint && resume, fmt("save/load/save byte fixpoint: %s; 1 + resume + 3 iterations vs 4 straight, bit-exact: %s",
                                  fixpoint ? "yes" : "no", resume ? "yes" : "no")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::vector<int> expect_fail;
  app.add_option("--only", only, "Run just these criteria")->delimiter(',');
  app.add_option("--expect-fail", expect_fail, "Criteria whose failure does not fail the run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "gradient suite", gradient_suite},
      {2, "decomposition oracles", decomposition_oracles},
      {3, "identity initialization", identity_init},
      {4, "parameter efficiency", parameter_efficiency},
      {5, "MAML correctness", maml_correctness},
      {6, "meta-learning efficacy", meta_learning_efficacy},
      {7, "low-data robustness", low_data_robustness},
      {8, "rank-sweep shape", rank_sweep_shape},
      {9, "TAMS sanity", tams_sanity},
      {10, "perplexity floor", perplexity_floor},
      {11, "persistence", persistence},
  };

  int unexpected = 0, passed = 0, run = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    ++run;
    const auto t0 = clk::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const bool tolerated = std::find(expect_fail.begin(), expect_fail.end(), c.id) != expect_fail.end();
    std::printf("[%s] %2d %-24s %s (%.1f s)%s\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(),
                seconds_since(t0), !v.pass && tolerated ? " [expected]" : "");
    std::fflush(stdout);
    passed += v.pass;
    if (!v.pass && !tolerated) ++unexpected;
  }
  std::printf("%d/%d criteria passed\n", passed, run);
  return unexpected == 0 ? 0 : 1;
}
