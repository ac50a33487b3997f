#include "mltd/tape.hpp"

#include <atomic>

#include "mltd/error.hpp"
#include "mltd/ops.hpp"

namespace mltd {

namespace {

std::atomic<std::uint64_t> g_next_serial{1};

thread_local Tape* t_active = nullptr;
thread_local bool t_enabled = true;

}  // namespace

Tape* active_tape() noexcept { return t_active; }
bool recording_enabled() noexcept { return t_active != nullptr && t_enabled; }

Tape::Tape() : serial_(g_next_serial.fetch_add(1)) {}

Tensor Tape::watch(const Tensor& t) {
  Tensor leaf = t.detach();
  nodes_.push_back(TapeNode{"leaf", {}, leaf, {}});
  leaf.attach(serial_, static_cast<std::int64_t>(nodes_.size() - 1));
  nodes_.back().output = leaf;
  return leaf;
}

NamedTensors Tape::watch(const NamedTensors& tensors) {
  NamedTensors out;
  for (const auto& [k, t] : tensors) out.emplace(k, watch(t));
  return out;
}

void Tape::record(std::string kind, std::span<const Tensor> inputs, Tensor& out, BackwardFn backward) {
  std::vector<std::int64_t> ids;
  ids.reserve(inputs.size());
  for (const auto& in : inputs) ids.push_back(owns(in) ? in.tape_id() : -1);
  nodes_.push_back(TapeNode{std::move(kind), std::move(ids), Tensor{}, std::move(backward)});
  out.attach(serial_, static_cast<std::int64_t>(nodes_.size() - 1));
  nodes_.back().output = out;
}

TapeScope::TapeScope(Tape& tape) : previous_(t_active), previous_enabled_(t_enabled) {
  t_active = &tape;
  t_enabled = true;
}

TapeScope::~TapeScope() {
  t_active = previous_;
  t_enabled = previous_enabled_;
}

NoGradGuard::NoGradGuard() : previous_(t_enabled) { t_enabled = false; }
NoGradGuard::~NoGradGuard() { t_enabled = previous_; }

namespace {

class RecordingMode {
 public:
  RecordingMode(Tape& tape, bool enabled) : scope_(tape), previous_(t_enabled) { t_enabled = enabled; }
  ~RecordingMode() { t_enabled = previous_; }

 private:
  TapeScope scope_;
  bool previous_;
};

}  // namespace

GradientMap backward(Tape& tape, const Tensor& output, const Tensor& seed, bool create_graph) {
  if (!tape.owns(output)) throw TapeError("backward: output tensor was not recorded on this tape");
  if (seed.shape() != output.shape()) {
    throw TapeError("backward: seed shape " + shape_str(seed.shape()) + " does not match output shape " +
                    shape_str(output.shape()));
  }
  const auto last = static_cast<std::size_t>(output.tape_id());
  std::vector<Tensor> adjoint(last + 1);
  std::vector<bool> has(last + 1, false);
  adjoint[last] = seed;
  has[last] = true;

  RecordingMode mode(tape, create_graph);
  for (std::size_t i = last + 1; i-- > 0;) {
    if (!has[i]) continue;
    // Copy what we need: recording may append to the tape while we run.
    const TapeNode& node = tape.node(i);
    if (!node.backward) continue;
    const BackwardFn fn = node.backward;
    const std::vector<std::int64_t> inputs = node.inputs;
    const Tensor out = node.output;
    std::vector<Tensor> grads = fn(adjoint[i], out);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const auto id = inputs[k];
      if (id < 0 || k >= grads.size() || !grads[k].defined()) continue;
      const auto j = static_cast<std::size_t>(id);
      if (has[j]) {
        adjoint[j] = ops::add(adjoint[j], grads[k]);
      } else {
        adjoint[j] = grads[k];
        has[j] = true;
      }
    }
  }

  GradientMap result;
  for (std::size_t i = 0; i <= last; ++i) {
    if (has[i]) result.emplace(static_cast<std::int64_t>(i), adjoint[i]);
  }
  return result;
}

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool create_graph) {
  Tape* tape = active_tape();
  if (tape == nullptr) throw TapeError("grad: no active tape");
  if (output.size() != 1) throw TapeError("grad: output must be a scalar, got " + shape_str(output.shape()));
  GradientMap adj = backward(*tape, output, Tensor::full(output.shape(), 1.0), create_graph);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = tape->owns(w) ? adj.find(w.tape_id()) : adj.end();
    if (it == adj.end()) {
      out.push_back(Tensor::zeros(w.shape()));
    } else {
      out.push_back(create_graph ? it->second : it->second.detach());
    }
  }
  return out;
}

NamedTensors grad(const Tensor& output, const NamedTensors& wrt, bool create_graph) {
  std::vector<Tensor> list;
  list.reserve(wrt.size());
  for (const auto& [_, t] : wrt) list.push_back(t);
  auto g = grad(output, list, create_graph);
  NamedTensors out;
  std::size_t i = 0;
  for (const auto& [k, _] : wrt) out.emplace(k, std::move(g[i++]));
  return out;
}

}  // namespace mltd
