#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "mltd/error.hpp"
#include "mltd/taskgen.hpp"
#include "support.hpp"

using namespace mltd;

namespace {

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

bool rows_stochastic(const std::vector<double>& m, std::size_t v) {
  for (std::size_t s = 0; s < v; ++s) {
    double total = 0.0;
    for (std::size_t t = 0; t < v; ++t) {
      if (!(m[s * v + t] > 0.0)) return false;
      total += m[s * v + t];
    }
    if (std::abs(total - 1.0) > 1e-12) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("taskgen") {

TEST_CASE("domains are reproducible from the seed and distinct across ids") {
  const auto a = sample_domain(7, 16, 0.5, 3), b = sample_domain(7, 16, 0.5, 3), c = sample_domain(7, 16, 0.5, 4);
  CHECK(a.transition == b.transition);
  CHECK(a.transition != c.transition);
  CHECK(rows_stochastic(a.transition, 16));
}

TEST_CASE("large concentration gives near-uniform rows") {
  const auto d = sample_domain(1, 16, 1e4, 0);
  for (double p : d.transition) CHECK(std::abs(p - 1.0 / 16.0) < 0.02);
}

TEST_CASE("binary alphabet and tiny concentration still give positive stochastic rows") {
  CHECK(rows_stochastic(sample_domain(2, 2, 1.0).transition, 2));
  CHECK(rows_stochastic(sample_domain(2, 16, 1e-3).transition, 16));
  CHECK_THROWS_AS(sample_domain(2, 1, 1.0), ConfigError);
  CHECK_THROWS_AS(sample_domain(2, 65, 1.0), ConfigError);
  CHECK_THROWS_AS(sample_domain(2, 8, 0.0), ConfigError);
}

TEST_CASE("zero perturbation returns the domain matrix exactly") {
  const auto d = sample_domain(3, 8, 0.5);
  CHECK(perturb_transition(d.transition, 8, 11, 0.0) == d.transition);
  const auto p = perturb_transition(d.transition, 8, 11, 1.0);
  CHECK(p != d.transition);
  CHECK(rows_stochastic(p, 8));
}

TEST_CASE("perturbation is a rank-one logit bump") {
  // log P'(t|s) − log P(t|s) = scale·a_s·b_t − log Z_s, so the centered
  // log-ratio matrix has rank one
  const std::size_t v = 6;
  const auto d = sample_domain(4, v, 0.8);
  const auto p = perturb_transition(d.transition, v, 5, 0.7);
  oracle::Mat m(v, std::vector<double>(v));
  for (std::size_t s = 0; s < v; ++s) {
    double mean = 0.0;
    for (std::size_t t = 0; t < v; ++t) mean += std::log(p[s * v + t] / d.transition[s * v + t]) / v;
    for (std::size_t t = 0; t < v; ++t) m[s][t] = std::log(p[s * v + t] / d.transition[s * v + t]) - mean;
  }
  // every 2×2 minor vanishes
  double worst = 0.0;
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = i + 1; j < v; ++j)
      for (std::size_t k = 0; k < v; ++k)
        for (std::size_t l = k + 1; l < v; ++l)
          worst = std::max(worst, std::abs(m[i][k] * m[j][l] - m[i][l] * m[j][k]));
  CHECK(worst <= 1e-12);
}

TEST_CASE("tasks are reproducible and symbols stay inside the alphabet") {
  const auto d = sample_domain(5, 16, 0.5, 2);
  TaskSpec spec;
  spec.perturb_seed = 99;
  spec.n_train = 4;
  spec.n_val = 2;
  spec.n_test = 3;
  spec.seq_len = 40;
  const Task a = sample_task(d, spec, "x"), b = sample_task(d, spec, "x");
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
  CHECK(a.train.size() == 4);
  CHECK(a.val.size() == 2);
  CHECK(a.test.size() == 3);
  for (const auto* split : {&a.train, &a.val, &a.test})
    for (const auto& s : *split) {
      CHECK(s.size() == 40);
      for (int tok : s) CHECK((tok >= 0 && tok < 16));
    }
  CHECK(a.train[0] != a.test[0]);
}

TEST_CASE("empirical bigram distribution matches π(s)·P(t|s)") {
  const std::size_t v = 8, n = 100000;
  const auto d = sample_domain(6, v, 0.7);
  const auto pi = stationary_distribution(d.transition, v);
  const auto seq = markov_rollout(d.transition, pi, v, n + 1, 17);
  std::vector<double> counts(v * v, 0.0);
  for (std::size_t i = 0; i < n; ++i) counts[static_cast<std::size_t>(seq[i]) * v + seq[i + 1]] += 1.0;
  double tv = 0.0;
  for (std::size_t s = 0; s < v; ++s)
    for (std::size_t t = 0; t < v; ++t) tv += std::abs(counts[s * v + t] / n - pi[s] * d.transition[s * v + t]);
  CHECK(0.5 * tv < 0.02);
}

TEST_CASE("stationary distribution is a fixed point of the chain") {
  const std::size_t v = 10;
  const auto d = sample_domain(8, v, 0.3);
  const auto pi = stationary_distribution(d.transition, v);
  double total = 0.0;
  for (std::size_t t = 0; t < v; ++t) {
    double next = 0.0;
    for (std::size_t s = 0; s < v; ++s) next += pi[s] * d.transition[s * v + t];
    CHECK(std::abs(next - pi[t]) <= 1e-12);
    total += pi[t];
  }
  CHECK(std::abs(total - 1.0) <= 1e-12);
}

TEST_CASE("entropy rate: uniform chain, deterministic cycle and Monte-Carlo estimate") {
  const std::size_t v = 16;
  std::vector<double> uniform(v * v, 1.0 / v);
  CHECK(std::abs(entropy_rate(uniform, v) - std::log(16.0)) <= 1e-12);

  std::vector<double> cycle(v * v, 0.0);
  for (std::size_t s = 0; s < v; ++s) cycle[s * v + (s + 1) % v] = 1.0;
  CHECK(entropy_rate(cycle, v) == 0.0);

  const auto d = sample_domain(9, v, 0.5);
  const auto pi = stationary_distribution(d.transition, v);
  const std::size_t n = 1000000;
  const auto seq = markov_rollout(d.transition, pi, v, n + 1, 23);
  double nll = 0.0;
  for (std::size_t i = 0; i < n; ++i) nll -= std::log(d.transition[static_cast<std::size_t>(seq[i]) * v + seq[i + 1]]);
  CHECK(std::abs(nll / n - entropy_rate(d.transition, v)) < 0.01);
}

TEST_CASE("a reducible chain is rejected") {
  std::vector<double> identity(9, 0.0);
  for (std::size_t s = 0; s < 3; ++s) identity[s * 3 + s] = 1.0;
  CHECK_THROWS_AS(stationary_distribution(identity, 3), ConfigError);
  CHECK_THROWS_AS(entropy_rate(identity, 3), ConfigError);
}

TEST_CASE("suite roles partition the tasks") {
  const auto cfg = testing::tiny_suite(3);
  const auto suite = generate_suite(cfg);
  CHECK(suite.size() == 12);
  CHECK(suite.meta_test.size() == 3);
  CHECK(suite.meta_val.size() == 2);
  CHECK(suite.meta_train.size() == 7);
  std::set<std::string> ids;
  for (const auto* role : {&suite.meta_train, &suite.meta_val, &suite.meta_test})
    for (const auto& t : *role) ids.insert(t.id);
  CHECK(ids.size() == 12);

  const auto again = generate_suite(cfg);
  for (std::size_t i = 0; i < suite.meta_train.size(); ++i) {
    CHECK(suite.meta_train[i].id == again.meta_train[i].id);
    CHECK(suite.meta_train[i].train == again.meta_train[i].train);
  }
}

TEST_CASE("suite config leaving no meta-training tasks is rejected") {
  auto cfg = testing::tiny_suite(0);
  cfg.n_meta_test = 10;
  CHECK_THROWS_AS(generate_suite(cfg), ConfigError);
}

TEST_CASE("task files round-trip bit-exactly") {
  testing::TempDir dir("taskfile");
  const auto suite = generate_suite(testing::tiny_suite(4));
  const Task& t = suite.meta_train[0];
  save_task(t, dir.path() / "a.task");
  const Task back = load_task(dir.path() / "a.task");
  CHECK(back.id == "a");
  CHECK(back.vocab == t.vocab);
  CHECK(back.train == t.train);
  CHECK(back.val == t.val);
  CHECK(back.test == t.test);
  save_task(back, dir.path() / "b.task");
  CHECK(slurp(dir.path() / "a.task") == slurp(dir.path() / "b.task"));
}

TEST_CASE("damaged task files raise format errors") {
  testing::TempDir dir("taskbad");
  const auto suite = generate_suite(testing::tiny_suite(5));
  save_task(suite.meta_train[0], dir.path() / "a.task");
  auto bytes = slurp(dir.path() / "a.task");

  auto raw = std::vector<unsigned char>(bytes.begin(), bytes.end());
  raw[0] = 'X';
  write_bytes(dir.path() / "magic.task", raw);
  CHECK_THROWS_AS(load_task(dir.path() / "magic.task"), FormatError);

  raw = std::vector<unsigned char>(bytes.begin(), bytes.end());
  raw[8] = 2;
  write_bytes(dir.path() / "version.task", raw);
  CHECK_THROWS_AS(load_task(dir.path() / "version.task"), UnsupportedVersionError);

  raw = std::vector<unsigned char>(bytes.begin(), bytes.end() - 5);
  write_bytes(dir.path() / "short.task", raw);
  try {
    load_task(dir.path() / "short.task");
    FAIL("truncated file accepted");
  } catch (const FormatError& e) {
    CHECK(e.section() == "test split");
  }
}

TEST_CASE("suite directories round-trip tasks, roles and entropy rates") {
  testing::TempDir dir("suite");
  const auto suite = generate_suite(testing::tiny_suite(6));
  save_suite(suite, dir.path());
  const auto back = load_suite(dir.path());
  REQUIRE(back.meta_train.size() == suite.meta_train.size());
  REQUIRE(back.meta_val.size() == suite.meta_val.size());
  REQUIRE(back.meta_test.size() == suite.meta_test.size());
  for (std::size_t i = 0; i < suite.meta_test.size(); ++i) {
    CHECK(back.meta_test[i].id == suite.meta_test[i].id);
    CHECK(back.meta_test[i].domain == suite.meta_test[i].domain);
    CHECK(back.meta_test[i].entropy_rate == suite.meta_test[i].entropy_rate);
    CHECK(back.meta_test[i].test == suite.meta_test[i].test);
  }
}

TEST_CASE("text loader: chunking, byte clamping and empty directories") {
  testing::TempDir dir("text");
  CHECK(load_text_tasks(dir.path(), {}, 128, 256).empty());

  std::vector<unsigned char> bytes(300);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<unsigned char>(i * 7);
  write_bytes(dir.path() / "a.txt", bytes);
  write_bytes(dir.path() / "b.txt", bytes);
  const auto tasks = load_text_tasks(dir.path(), {0.5, 0.0, 0.5}, 128, 64);
  REQUIRE(tasks.size() == 2);
  CHECK(tasks[0].id == "a.txt");
  CHECK(tasks[0].train.size() + tasks[0].val.size() + tasks[0].test.size() == 300 / 128);
  CHECK(tasks[0].train == tasks[1].train);
  CHECK(tasks[0].test == tasks[1].test);
  CHECK(std::isnan(tasks[0].entropy_rate));
  for (std::size_t i = 0; i < 128; ++i) CHECK(tasks[0].train[0][i] == std::min<int>(bytes[i], 63));
  CHECK_THROWS_AS(load_text_tasks(dir.path() / "missing", {}, 128, 256), IoError);
}

}  // TEST_SUITE
