#pragma once

#include <cstdint>

#include "mltd/tensor.hpp"

namespace mltd {

/// p ← p − lr·g in place for every entry of `params`. Throws ConfigError
/// if lr ≤ 0 and Error if a parameter has no gradient.
void sgd_step(NamedTensors& params, const NamedTensors& grads, double lr);

/// Functional SGD update built from recorded ops: returns p − lr·g for each
/// parameter, so the step itself can be differentiated (second-order MAML).
/// lr may be 0.
NamedTensors sgd_update(const NamedTensors& params, const NamedTensors& grads, double lr);

struct AdamState {
  std::uint64_t step = 0;
  NamedTensors m;
  NamedTensors v;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.998;
  double eps = 1e-8;
};

/// Bias-corrected Adam step in place. Moment buffers are created on first
/// use; a buffer whose shape differs from its parameter is an error.
void adam_step(AdamState& state, NamedTensors& params, const NamedTensors& grads);

}  // namespace mltd
