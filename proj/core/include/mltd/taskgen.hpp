#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mltd/nanoformer.hpp"

namespace mltd {

/// Order-1 Markov source over `vocab` symbols; `transition` is row-major
/// [vocab × vocab], every row a probability vector with positive entries.
struct DomainSpec {
  std::uint32_t id = 0;
  std::size_t vocab = 0;
  double concentration = 1.0;
  std::vector<double> transition;
};

DomainSpec sample_domain(std::uint64_t seed, std::size_t vocab, double concentration, std::uint32_t id = 0);

struct TaskSpec {
  std::uint32_t domain_id = 0;
  std::uint64_t perturb_seed = 0;
  double perturb_scale = 1.0;
  std::size_t n_train = 32;
  std::size_t n_val = 8;
  std::size_t n_test = 32;
  std::size_t seq_len = 128;
};

struct Task {
  std::string id;
  std::uint32_t domain = 0;
  std::size_t vocab = 0;
  std::vector<Sequence> train;
  std::vector<Sequence> val;
  std::vector<Sequence> test;
  /// Nats per token of the generating source; NaN when unknown (text corpora).
  double entropy_rate = 0.0;
  /// Generating transition matrix; empty when unknown.
  std::vector<double> transition;
};

/// Domain matrix with a rank-1 logit bump of size `scale` (drawn from
/// `seed`), rows renormalized. scale = 0 returns the matrix unchanged.
std::vector<double> perturb_transition(std::span<const double> transition, std::size_t vocab, std::uint64_t seed,
                                       double scale);

/// Rollout of `length` symbols, first symbol drawn from `initial`.
Sequence markov_rollout(std::span<const double> transition, std::span<const double> initial, std::size_t vocab,
                        std::size_t length, std::uint64_t seed);

Task sample_task(const DomainSpec& domain, const TaskSpec& spec, std::string id = {});

/// Stationary distribution by power iteration on (P + I)/2. Throws
/// ConfigError when the chain is not irreducible.
std::vector<double> stationary_distribution(std::span<const double> transition, std::size_t vocab);
/// Σ_s π(s) Σ_t −P(t|s) log P(t|s).
double entropy_rate(std::span<const double> transition, std::size_t vocab);

struct SplitRatios {
  double train = 0.6;
  double val = 0.1;
  double test = 0.3;
};

/// One task per regular file in `directory` (sorted by name). Bytes are
/// tokens; bytes ≥ alphabet map to alphabet−1. Each file yields
/// ⌊size/seq_len⌋ sequences split contiguously by `ratios`.
std::vector<Task> load_text_tasks(const std::filesystem::path& directory, const SplitRatios& ratios,
                                  std::size_t seq_len, std::size_t alphabet);

struct SuiteConfig {
  std::size_t n_domains = 64;
  std::size_t tasks_per_domain = 2;
  std::size_t vocab = 16;
  double concentration = 0.5;
  double perturb_scale = 1.0;
  std::size_t n_train = 32;
  std::size_t n_val = 8;
  std::size_t n_test = 32;
  std::size_t seq_len = 128;
  double meta_val_fraction = 0.1;
  std::size_t n_meta_test = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Tasks partitioned into meta-train / meta-validation / meta-test roles.
struct TaskSuite {
  std::vector<Task> meta_train;
  std::vector<Task> meta_val;
  std::vector<Task> meta_test;

  std::size_t size() const { return meta_train.size() + meta_val.size() + meta_test.size(); }
};

TaskSuite generate_suite(const SuiteConfig& cfg);

/// Binary task file: "MLTDTASK", u32 version, u32 vocab, u32 n_train,
/// u32 n_val, u32 n_test, then per sequence u32 length and u8 tokens, all
/// little-endian.
void save_task(const Task& task, const std::filesystem::path& path);
Task load_task(const std::filesystem::path& path);

/// Writes <id>.task files and a suite.tsv manifest (id, role, domain,
/// entropy_rate) into `directory`.
void save_suite(const TaskSuite& suite, const std::filesystem::path& directory);
TaskSuite load_suite(const std::filesystem::path& directory);

}  // namespace mltd
