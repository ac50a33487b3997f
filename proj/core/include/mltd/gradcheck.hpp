#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mltd/tensor.hpp"

namespace mltd {

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;
  bool passed = false;

  double max_rel_err() const;
};

/// Relative error used by grad_check: |a − n| / max(|a|, |n|, floor).
/// The floor keeps exactly-zero gradients from dividing roundoff by zero.
double grad_rel_err(double analytic, double numeric, double floor = 1e-3);

/// Compares reverse-mode gradients of `fn` against central differences with
/// step `h` for every element of every parameter. `fn` must be deterministic
/// (checked by evaluating it twice) and return a single-element tensor.
GradCheckReport grad_check(const ScalarFn& fn, std::span<const Tensor> params, double h = 1e-5, double tol = 1e-5,
                           std::span<const std::string> names = {});

}  // namespace mltd
