#include "mltd/tams.hpp"

#include <cmath>
#include <sstream>

#include "mltd/error.hpp"
#include "mltd/ops.hpp"
#include "mltd/tape.hpp"

namespace mltd {

namespace {

std::string edge_key(std::size_t e, const char* leaf) { return "e" + std::to_string(e) + "." + leaf; }

const Tensor& get(const NamedTensors& p, const std::string& key) {
  auto it = p.find(key);
  if (it == p.end()) throw ConfigError("cell parameter '" + key + "' missing");
  return it->second;
}

Tensor conv_op(const NamedTensors& cell, std::size_t e, const char* name, const Tensor& x, std::size_t batch,
               std::size_t steps) {
  const std::size_t rd = x.dim(1);
  Tensor xs = ops::reshape(x, {batch, steps, rd});
  Tensor y = ops::conv1d(xs, get(cell, edge_key(e, (std::string(name) + ".w").c_str())), ops::ConvPadding::kCausal);
  y = ops::reshape(y, {batch * steps, rd});
  return ops::add(y, get(cell, edge_key(e, (std::string(name) + ".b").c_str())));
}

// Output of `op` on edge `e`; undefined for zeroize.
Tensor apply_op(const NamedTensors& cell, std::size_t e, CellOp op, const Tensor& x, std::size_t batch,
                std::size_t steps) {
  switch (op) {
    case CellOp::kLinear:
      return ops::add(ops::matmul(x, get(cell, edge_key(e, "linear.w"))), get(cell, edge_key(e, "linear.b")));
    case CellOp::kConv3:
      return conv_op(cell, e, "conv3", x, batch, steps);
    case CellOp::kConv5:
      return conv_op(cell, e, "conv5", x, batch, steps);
    case CellOp::kGlu:
      return ops::glu(ops::add(ops::matmul(x, get(cell, edge_key(e, "glu.w"))), get(cell, edge_key(e, "glu.b"))));
    case CellOp::kZeroize:
      return Tensor();
    case CellOp::kSkip:
      return x;
  }
  return Tensor();
}

Tensor accumulate(const Tensor& total, const Tensor& term) {
  if (!term.defined()) return total;
  return total.defined() ? ops::add(total, term) : term;
}

template <typename EdgeFn>
Tensor run_cell(const NamedTensors& cell, const Tensor& x, const CellConfig& cfg, EdgeFn edge_fn) {
  const std::size_t rows = x.dim(0), rd = cfg.reduced_dim;
  std::vector<Tensor> nodes;
  nodes.push_back(ops::add(ops::matmul(x, get(cell, "in0.w")), get(cell, "in0.b")));
  nodes.push_back(ops::add(ops::matmul(x, get(cell, "in1.w")), get(cell, "in1.b")));
  const auto edges = cell_edges(cfg);
  std::size_t e = 0;
  Tensor out_sum;
  for (std::size_t node = 2; node < 2 + cfg.n_intermediate; ++node) {
    Tensor acc;
    for (; e < edges.size() && edges[e].dst == node; ++e) acc = accumulate(acc, edge_fn(e, nodes[edges[e].src]));
    if (!acc.defined()) acc = Tensor::zeros({rows, rd});
    nodes.push_back(acc);
    out_sum = accumulate(out_sum, acc);
  }
  return ops::matmul(out_sum, get(cell, "out.w"));
}

}  // namespace

const char* cell_op_name(CellOp op) {
  switch (op) {
    case CellOp::kLinear:
      return "linear";
    case CellOp::kConv3:
      return "conv3x1";
    case CellOp::kConv5:
      return "conv5x1";
    case CellOp::kGlu:
      return "glu";
    case CellOp::kZeroize:
      return "zeroize";
    case CellOp::kSkip:
      return "skip";
  }
  return "?";
}

void CellConfig::validate() const {
  if (reduced_dim < 1) throw ConfigError("tams: reduced_dim must be >= 1");
  if (n_intermediate < 1) throw ConfigError("tams: a cell needs at least one intermediate node");
  if (controller_hidden < 1) throw ConfigError("tams: controller_hidden must be >= 1");
}

std::vector<CellEdge> cell_edges(const CellConfig& cfg) {
  cfg.validate();
  std::vector<CellEdge> edges;
  for (std::size_t dst = 2; dst < 2 + cfg.n_intermediate; ++dst) {
    for (std::size_t src = 0; src < dst; ++src) edges.push_back({src, dst});
  }
  return edges;
}

std::size_t edge_count(const CellConfig& cfg) {
  cfg.validate();
  // intermediate k (0-based) has k + 2 predecessors
  const std::size_t m = cfg.n_intermediate;
  return m * (m + 3) / 2;
}

NamedTensors init_cell(std::size_t d_model, const CellConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t rd = cfg.reduced_dim;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d_model));
  auto op_std = [rd](std::size_t k) { return 1.0 / std::sqrt(static_cast<double>(k * rd)); };
  NamedTensors p;
  p["in0.w"] = randn({d_model, rd}, in_std, rng);
  p["in0.b"] = Tensor::zeros({rd});
  p["in1.w"] = randn({d_model, rd}, in_std, rng);
  p["in1.b"] = Tensor::zeros({rd});
  p["out.w"] = Tensor::zeros({rd, d_model});
  for (std::size_t e = 0; e < edge_count(cfg); ++e) {
    p[edge_key(e, "linear.w")] = randn({rd, rd}, op_std(1), rng);
    p[edge_key(e, "linear.b")] = Tensor::zeros({rd});
    p[edge_key(e, "conv3.w")] = randn({3, rd, rd}, op_std(3), rng);
    p[edge_key(e, "conv3.b")] = Tensor::zeros({rd});
    p[edge_key(e, "conv5.w")] = randn({5, rd, rd}, op_std(5), rng);
    p[edge_key(e, "conv5.b")] = Tensor::zeros({rd});
    p[edge_key(e, "glu.w")] = randn({rd, 2 * rd}, op_std(1), rng);
    p[edge_key(e, "glu.b")] = Tensor::zeros({2 * rd});
  }
  return p;
}

NamedTensors init_controller(std::size_t repr_dim, const CellConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t h = cfg.controller_hidden, out = edge_count(cfg) * kNumCellOps;
  NamedTensors p;
  p["l1.w"] = randn({repr_dim, h}, 1.0 / std::sqrt(static_cast<double>(repr_dim)), rng);
  p["l1.b"] = Tensor::zeros({h});
  p["l2.w"] = randn({h, out}, 1.0 / std::sqrt(static_cast<double>(h)), rng);
  p["l2.b"] = Tensor::zeros({out});
  return p;
}

std::size_t cell_param_count(std::size_t d_model, const CellConfig& cfg) {
  const std::size_t rd = cfg.reduced_dim;
  const std::size_t per_edge = 11 * rd * rd + 5 * rd;
  return 2 * (d_model * rd + rd) + rd * d_model + edge_count(cfg) * per_edge;
}

std::size_t controller_param_count(std::size_t repr_dim, const CellConfig& cfg) {
  const std::size_t h = cfg.controller_hidden, out = edge_count(cfg) * kNumCellOps;
  return repr_dim * h + h + h * out + out;
}

Tensor controller_forward(const NamedTensors& controller, const Tensor& task_repr, const CellConfig& cfg) {
  const Tensor& w1 = get(controller, "l1.w");
  if (task_repr.rank() != 1 || task_repr.dim(0) != w1.dim(0)) {
    throw DimensionError("controller expects a task representation of size " + std::to_string(w1.dim(0)) +
                         ", got " + shape_str(task_repr.shape()));
  }
  Tensor x = ops::reshape(task_repr, {1, task_repr.dim(0)});
  Tensor h = ops::relu(ops::add(ops::matmul(x, w1), get(controller, "l1.b")));
  Tensor logits = ops::add(ops::matmul(h, get(controller, "l2.w")), get(controller, "l2.b"));
  return ops::softmax(ops::reshape(logits, {edge_count(cfg), kNumCellOps}), -1);
}

Tensor cell_forward(const NamedTensors& cell, const Tensor& alpha, const Tensor& x, std::size_t batch,
                    std::size_t steps, const CellConfig& cfg) {
  const std::size_t n_edges = edge_count(cfg);
  if (alpha.rank() != 2 || alpha.dim(0) != n_edges || alpha.dim(1) != kNumCellOps) {
    throw DimensionError("cell_forward: alpha must be [" + std::to_string(n_edges) + " x " +
                         std::to_string(kNumCellOps) + "], got " + shape_str(alpha.shape()));
  }
  return run_cell(cell, x, cfg, [&](std::size_t e, const Tensor& src) {
    Tensor row = ops::slice(alpha, 0, e, 1);
    Tensor mix;
    for (std::size_t o = 0; o < kNumCellOps; ++o) {
      Tensor y = apply_op(cell, e, kCellOps[o], src, batch, steps);
      if (!y.defined()) continue;
      mix = accumulate(mix, ops::mul(ops::slice(row, 1, o, 1), y));
    }
    return mix;
  });
}

Tensor discrete_cell_forward(const NamedTensors& cell, std::span<const CellOp> arch, const Tensor& x,
                             std::size_t batch, std::size_t steps, const CellConfig& cfg) {
  if (arch.size() != edge_count(cfg)) {
    throw DimensionError("discrete cell: expected " + std::to_string(edge_count(cfg)) + " edge ops, got " +
                         std::to_string(arch.size()));
  }
  return run_cell(cell, x, cfg,
                  [&](std::size_t e, const Tensor& src) { return apply_op(cell, e, arch[e], src, batch, steps); });
}

std::vector<CellOp> argmax_arch(const Tensor& alpha) {
  if (alpha.rank() != 2 || alpha.dim(1) != kNumCellOps) {
    throw DimensionError("alpha must be [E x " + std::to_string(kNumCellOps) + "], got " + shape_str(alpha.shape()));
  }
  std::vector<CellOp> arch;
  auto v = alpha.data();
  for (std::size_t e = 0; e < alpha.dim(0); ++e) {
    std::size_t best = 0;
    for (std::size_t o = 1; o < kNumCellOps; ++o) {
      if (v[e * kNumCellOps + o] > v[e * kNumCellOps + best]) best = o;
    }
    arch.push_back(kCellOps[best]);
  }
  return arch;
}

Tensor arch_to_alpha(std::span<const CellOp> arch) {
  Tensor a = Tensor::zeros({arch.size(), kNumCellOps});
  auto v = a.mutable_data();
  for (std::size_t e = 0; e < arch.size(); ++e) v[e * kNumCellOps + static_cast<std::size_t>(arch[e])] = 1.0;
  return a;
}

Tensor discretize(const Tensor& alpha) { return arch_to_alpha(argmax_arch(alpha)); }

std::string export_architecture(std::span<const CellOp> arch, const CellConfig& cfg) {
  const auto edges = cell_edges(cfg);
  if (arch.size() != edges.size()) throw DimensionError("export_architecture: edge count mismatch");
  std::ostringstream out;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    out << "edge " << edges[e].src << "->" << edges[e].dst << ": " << cell_op_name(arch[e]) << "\n";
  }
  return out.str();
}

Tensor encode_task(const ModelConfig& model_cfg, const NamedTensors& base, std::span<const Sequence> train) {
  if (train.empty()) throw ConfigError("encode_task: empty training split");
  NoGradGuard guard;
  TokenBatch batch(train.begin(), train.end());
  Tensor h = forward_hidden(model_cfg, detach_all(base), batch);
  return ops::mean_axis(h, 0).detach();
}

}  // namespace mltd
