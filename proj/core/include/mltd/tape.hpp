#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mltd/tensor.hpp"

namespace mltd {

/// Vector-Jacobian product of one recorded op: receives the adjoint of the
/// op's output (and the output itself) and returns one adjoint per input, or
/// an undefined Tensor for inputs that do not need one. It is written with
/// the same differentiable ops, so running it while recording builds the
/// graph of the gradient (used for second-order meta-gradients).
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out)>;

struct TapeNode {
  std::string kind;
  std::vector<std::int64_t> inputs;
  Tensor output;
  BackwardFn backward;  // empty for leaves
};

/// Ordered record of differentiable ops. Nodes are appended in execution
/// order, so every node's inputs precede it.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `t` as a leaf and returns a handle that carries its node id.
  Tensor watch(const Tensor& t);
  NamedTensors watch(const NamedTensors& tensors);

  /// Appends a node; called by ops. `out` receives its id.
  void record(std::string kind, std::span<const Tensor> inputs, Tensor& out, BackwardFn backward);

  bool owns(const Tensor& t) const noexcept {
    return t.tape_serial() == serial_ && t.tape_id() >= 0;
  }
  std::size_t size() const noexcept { return nodes_.size(); }
  const TapeNode& node(std::size_t id) const { return nodes_.at(id); }
  std::uint64_t serial() const noexcept { return serial_; }

 private:
  std::uint64_t serial_;
  std::deque<TapeNode> nodes_;
};

/// Makes `tape` the recording tape of the calling thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
  bool previous_enabled_;
};

/// Suspends recording on the calling thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Tape* active_tape() noexcept;
bool recording_enabled() noexcept;

using GradientMap = std::unordered_map<std::int64_t, Tensor>;

/// Reverse sweep from `output` seeded with `seed`. Returns adjoints keyed by
/// tape id for every node reached. With `create_graph` the sweep itself is
/// recorded on `tape`, so the returned gradients can be differentiated again.
GradientMap backward(Tape& tape, const Tensor& output, const Tensor& seed, bool create_graph = false);

/// Gradients of the scalar `output` with respect to `wrt` on the active tape.
/// Tensors that `output` does not depend on get zeros.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool create_graph = false);
NamedTensors grad(const Tensor& output, const NamedTensors& wrt, bool create_graph = false);

}  // namespace mltd
