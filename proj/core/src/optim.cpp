#include "mltd/optim.hpp"

#include <cmath>

#include "mltd/error.hpp"
#include "mltd/ops.hpp"

namespace mltd {

namespace {

const Tensor& grad_for(const NamedTensors& grads, const std::string& name, const Tensor& param) {
  auto it = grads.find(name);
  if (it == grads.end()) throw Error("missing gradient for parameter '" + name + "'");
  if (it->second.shape() != param.shape()) {
    throw DimensionError("gradient for '" + name + "' has shape " + shape_str(it->second.shape()) +
                         ", parameter has " + shape_str(param.shape()));
  }
  return it->second;
}

}  // namespace

void sgd_step(NamedTensors& params, const NamedTensors& grads, double lr) {
  if (!(lr > 0.0)) throw ConfigError("sgd_step: learning rate must be positive");
  for (auto& [name, p] : params) {
    const Tensor& g = grad_for(grads, name, p);
    auto pv = p.mutable_data();
    auto gv = g.data();
    for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= lr * gv[i];
  }
}

NamedTensors sgd_update(const NamedTensors& params, const NamedTensors& grads, double lr) {
  if (lr < 0.0) throw ConfigError("sgd_update: learning rate must be non-negative");
  NamedTensors out;
  for (const auto& [name, p] : params) {
    out.emplace(name, ops::sub(p, ops::scale(grad_for(grads, name, p), lr)));
  }
  return out;
}

void adam_step(AdamState& state, NamedTensors& params, const NamedTensors& grads) {
  if (!(state.lr > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
  for (const auto& [name, p] : params) {
    grad_for(grads, name, p);
    for (auto* buf : {&state.m, &state.v}) {
      auto it = buf->find(name);
      if (it == buf->end()) {
        buf->emplace(name, Tensor::zeros(p.shape()));
      } else if (it->second.shape() != p.shape()) {
        throw DimensionError("adam_step: moment buffer for '" + name + "' has shape " +
                             shape_str(it->second.shape()) + ", parameter has " + shape_str(p.shape()));
      }
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, p] : params) {
    auto gv = grads.at(name).data();
    auto mv = state.m.at(name).mutable_data();
    auto vv = state.v.at(name).mutable_data();
    auto pv = p.mutable_data();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = state.beta1 * mv[i] + (1.0 - state.beta1) * gv[i];
      vv[i] = state.beta2 * vv[i] + (1.0 - state.beta2) * gv[i] * gv[i];
      const double mhat = mv[i] / c1;
      const double vhat = vv[i] / c2;
      pv[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace mltd
