#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mltd/ops.hpp"

namespace mltd {

/// Outcome of one gradient check family, maximized over its seeds.
struct CheckResult {
  std::string scope;
  std::string name;
  std::size_t seeds = 0;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool passed = false;
};

/// Random instance of primitive `kind` for seed `seed`: the inputs, the
/// attributes, and a scalar probe sum(out ⊙ weights) to differentiate.
struct PrimitiveCase {
  ops::OpKind kind;
  std::vector<Tensor> inputs;
  ops::OpAttrs attrs;
  Tensor probe;  // same shape as the op output
};
PrimitiveCase primitive_case(ops::OpKind kind, std::uint64_t seed);

/// Central-difference checks at h = 1e-5, tol = 1e-5 unless noted.
///   primitives  every op kind of apply_primitive
///   tarp        bilinear, kronecker, dynamic and matmul-ablation layers
///   tams        controller → α → cell → LM loss
///   lm          full LM loss through TARP + TAMS overlays
///   maml        second-order meta-gradient vs differences of the meta-loss,
///               T_in ∈ {1, 2}, tol 1e-4, on models of ≤ 100 parameters
std::vector<CheckResult> check_primitives(std::size_t n_seeds, std::uint64_t seed = 0);
std::vector<CheckResult> check_tarp(std::size_t n_seeds, std::uint64_t seed = 0);
std::vector<CheckResult> check_tams(std::size_t n_seeds, std::uint64_t seed = 0);
std::vector<CheckResult> check_lm(std::size_t n_seeds, std::uint64_t seed = 0);
std::vector<CheckResult> check_maml(std::size_t n_seeds, std::uint64_t seed = 0);

std::span<const std::string_view> check_scopes();
/// Dispatch by scope name; throws ConfigError for unknown scopes.
std::vector<CheckResult> run_checks(std::string_view scope, std::size_t n_seeds, std::uint64_t seed = 0);

}  // namespace mltd
