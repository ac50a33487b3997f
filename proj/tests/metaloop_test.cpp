#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mltd/checks.hpp"
#include "mltd/error.hpp"
#include "mltd/metaloop.hpp"
#include "mltd/ops.hpp"
#include "mltd/tape.hpp"
#include "support.hpp"

using namespace mltd;

namespace {

OverlayConfig bilinear_overlay(std::size_t rank = 2) {
  OverlayConfig ov;
  ov.tarp.kind = DecompKind::kBilinear;
  ov.tarp.rank = rank;
  return ov;
}

// Meta-state whose TARP factors are nudged off the identity so the adapted
// path is not trivially linear.
MetaState perturbed_state(const OverlayConfig& ov, std::uint64_t seed) {
  MetaState st = init_meta_state(testing::tiny_model(8, 8, 1), ov, seed);
  Rng rng(seed + 1000);
  for (auto& [k, t] : st.params)
    if (k.starts_with("tarp.")) t = ops::add(t, randn(t.shape(), 0.1, rng));
  return st;
}

MetaConfig small_meta(std::size_t steps = 2) {
  MetaConfig c;
  c.meta_batch = 3;
  c.inner_steps = steps;
  c.inner_lr = 0.1;
  c.outer_lr = 1e-2;
  return c;
}

std::vector<const Task*> pointers(const std::vector<Task>& tasks, std::size_t n) {
  std::vector<const Task*> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(&tasks[i]);
  return out;
}

bool same_grads(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [k, t] : a)
    if (!t.equal(b.at(k))) return false;
  return true;
}

}  // namespace

TEST_SUITE("metaloop") {

TEST_CASE("one inner step records one loss and leaves the meta-state untouched") {
  const auto suite = generate_suite(testing::tiny_suite(1));
  MetaState st = perturbed_state(bilinear_overlay(), 1);
  const NamedTensors before = clone_all(st.params);
  const auto r = inner_adapt(suite.meta_train[0], st, small_meta(), 1);
  CHECK(r.trace.size() == 1);
  CHECK(same_grads(before, st.params));
  const auto keys = adapt_keys(st.params, st.model, st.overlay, AdaptSet::kTarpOnly);
  CHECK(r.adapted.size() == keys.size());
}

TEST_CASE("zero inner learning rate returns the initialization") {
  const auto suite = generate_suite(testing::tiny_suite(2));
  MetaState st = perturbed_state(bilinear_overlay(), 2);
  MetaConfig cfg = small_meta(3);
  cfg.inner_lr = 0.0;
  const auto r = inner_adapt(suite.meta_train[0], st, cfg);
  for (const auto& [k, t] : r.adapted) CHECK(t.equal(st.params.at(k)));
}

TEST_CASE("an inner step is θ − η ∇L_train on the adapted keys") {
  const auto suite = generate_suite(testing::tiny_suite(3));
  const Task& task = suite.meta_train[0];
  MetaState st = perturbed_state(bilinear_overlay(), 3);
  const MetaConfig cfg = small_meta();
  const auto r = inner_adapt(task, st, cfg, 1);

  Tape tape;
  TapeScope scope(tape);
  NamedTensors w = tape.watch(st.params);
  NamedTensors g = grad(overlay_loss(st.model, st.overlay, w, task.train), w);
  CHECK(r.trace[0] == doctest::Approx(overlay_loss(st.model, st.overlay, st.params, task.train).item()).epsilon(1e-14));
  for (const auto& [k, t] : r.adapted) {
    const Tensor expect = ops::sub(st.params.at(k), ops::scale(g.at(k), cfg.inner_lr));
    CHECK(oracle::max_abs_diff(t, expect) <= 1e-14);
  }
}

TEST_CASE("meta-loss is the sum of the per-task adapted test losses") {
  const auto suite = generate_suite(testing::tiny_suite(4));
  MetaState st = perturbed_state(bilinear_overlay(), 4);
  const MetaConfig cfg = small_meta();
  const auto batch = pointers(suite.meta_train, 3);
  const MetaGradient mg = meta_gradient(batch, st, cfg);
  double sum = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto r = inner_adapt(*batch[i], st, cfg);
    const double li = evaluate_nll(st.model, st.overlay, merge_params(st.params, r.adapted), batch[i]->test);
    CHECK(std::abs(mg.task_losses[i] - li) <= 1e-10);
    sum += li;
  }
  CHECK(std::abs(mg.meta_loss - sum) <= 1e-10);
}

TEST_CASE("meta-gradient ignores batch order and thread count") {
  const auto suite = generate_suite(testing::tiny_suite(5));
  MetaState st = perturbed_state(bilinear_overlay(), 5);
  MetaConfig cfg = small_meta();
  auto batch = pointers(suite.meta_train, 3);
  const MetaGradient ref = meta_gradient(batch, st, cfg);
  std::reverse(batch.begin(), batch.end());
  const MetaGradient rev = meta_gradient(batch, st, cfg);
  CHECK(same_grads(ref.grads, rev.grads));
  CHECK(ref.meta_loss == rev.meta_loss);
  cfg.threads = 3;
  const MetaGradient threaded = meta_gradient(batch, st, cfg);
  CHECK(same_grads(ref.grads, threaded.grads));
  CHECK(ref.meta_loss == threaded.meta_loss);
}

TEST_CASE("first-order and second-order meta-gradients differ") {
  const auto suite = generate_suite(testing::tiny_suite(6));
  MetaState st = perturbed_state(bilinear_overlay(), 6);
  MetaConfig cfg = small_meta(2);
  const auto batch = pointers(suite.meta_train, 3);
  cfg.order = MamlOrder::kSecond;
  const MetaGradient second = meta_gradient(batch, st, cfg);
  cfg.order = MamlOrder::kFirst;
  const MetaGradient first = meta_gradient(batch, st, cfg);
  CHECK(std::abs(first.meta_loss - second.meta_loss) <= 1e-12);
  double diff = 0.0;
  for (const auto& [k, t] : first.grads) diff = std::max(diff, oracle::max_abs_diff(t, second.grads.at(k)));
  CHECK(diff > 1e-8);
}

TEST_CASE("auto order picks second order up to two inner steps") {
  MetaConfig cfg;
  cfg.inner_steps = 2;
  CHECK(cfg.second_order());
  cfg.inner_steps = 3;
  CHECK_FALSE(cfg.second_order());
  cfg.order = MamlOrder::kSecond;
  CHECK(cfg.second_order());
}

TEST_CASE("second-order meta-gradient matches central differences of the meta-loss") {
  for (const auto& r : check_maml(2)) {
    CAPTURE(r.name);
    CAPTURE(r.max_rel_err);
    CHECK(r.passed);
  }
}

TEST_CASE("sequential sampler throws once exhausted, random sampler rejects oversize batches") {
  const auto suite = generate_suite(testing::tiny_suite(7));
  Rng rng(0);
  SequentialTaskSampler seq(std::span<const Task>(suite.meta_train.data(), 3));
  CHECK(seq.next(2, rng).size() == 2);
  CHECK_THROWS_AS(seq.next(2, rng), Error);
  RandomTaskSampler rnd(std::span<const Task>(suite.meta_train.data(), 3));
  const auto b = rnd.next(3, rng);
  std::vector<std::string> ids;
  for (auto* t : b) ids.push_back(t->id);
  std::sort(ids.begin(), ids.end());
  CHECK(std::unique(ids.begin(), ids.end()) == ids.end());
  CHECK_THROWS_AS(rnd.next(4, rng), Error);
}

TEST_CASE("meta_step rejects a batch of the wrong size") {
  const auto suite = generate_suite(testing::tiny_suite(8));
  MetaState st = perturbed_state(bilinear_overlay(), 8);
  const auto batch = pointers(suite.meta_train, 2);
  CHECK_THROWS_AS(meta_step(batch, st, small_meta()), ConfigError);
}

TEST_CASE("meta_train is deterministic for a fixed seed") {
  const auto suite = generate_suite(testing::tiny_suite(9));
  auto run = [&] {
    MetaState st = init_meta_state(testing::tiny_model(8, 8, 1), bilinear_overlay(), 9);
    RandomTaskSampler sampler(suite.meta_train);
    MetaConfig cfg = small_meta(1);
    cfg.meta_batch = 2;
    cfg.eval_every = 2;
    MetaTrainOptions opts;
    opts.val_tasks = suite.meta_val;
    const auto rows = meta_train(sampler, st, cfg, 3, opts);
    return std::pair{st.params, rows};
  };
  const auto [pa, ra] = run();
  const auto [pb, rb] = run();
  CHECK(same_grads(pa, pb));
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].nll == rb[i].nll);
  CHECK(std::count_if(ra.begin(), ra.end(), [](const MetricsRow& r) { return r.task_id == "meta_batch"; }) == 3);
}

TEST_CASE("outer steps reduce the meta-loss on a fixed batch") {
  const auto suite = generate_suite(testing::tiny_suite(10));
  MetaState st = init_meta_state(testing::tiny_model(8, 8, 1), bilinear_overlay(), 10);
  MetaConfig cfg = small_meta(1);
  cfg.outer_lr = 1e-2;
  const auto batch = pointers(suite.meta_train, 3);
  const double first = meta_step(batch, st, cfg);
  double last = first;
  for (int i = 0; i < 20; ++i) last = meta_step(batch, st, cfg);
  CHECK(last < first);
  CHECK(st.meta_iter == 21);
}

TEST_CASE("adapting for zero steps reports the zero-shot loss") {
  const auto suite = generate_suite(testing::tiny_suite(11));
  MetaState st = perturbed_state(bilinear_overlay(), 11);
  const auto m = adapt_and_eval(suite.meta_test[0], st, small_meta(), 0);
  CHECK(m.test_nll == m.zero_shot_nll);
  CHECK(m.zero_shot_nll == evaluate_nll(st.model, st.overlay, st.params, suite.meta_test[0].test));
  CHECK(m.trainable_ratio > 0.0);
}

TEST_CASE("adapt_trajectory agrees with adapt_and_eval at each checkpoint") {
  const auto suite = generate_suite(testing::tiny_suite(12));
  MetaState st = perturbed_state(bilinear_overlay(), 12);
  const MetaConfig cfg = small_meta();
  const Task& task = suite.meta_test[0];
  const std::vector<std::size_t> cps = {0, 1, 3};
  const auto traj = adapt_trajectory(task, st, cfg, cps);
  REQUIRE(traj.size() == 3);
  for (std::size_t i = 0; i < cps.size(); ++i)
    CHECK(std::abs(traj[i] - adapt_and_eval(task, st, cfg, cps[i]).test_nll) <= 1e-12);
}

}  // TEST_SUITE
