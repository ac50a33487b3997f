#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "mltd/nanoformer.hpp"
#include "mltd/rng.hpp"
#include "mltd/tensor.hpp"

namespace mltd {

/// Candidate operations of a cell edge, in the order used by α's columns.
enum class CellOp { kLinear = 0, kConv3, kConv5, kGlu, kZeroize, kSkip };
inline constexpr std::size_t kNumCellOps = 6;
inline constexpr std::array<CellOp, kNumCellOps> kCellOps = {CellOp::kLinear, CellOp::kConv3,   CellOp::kConv5,
                                                            CellOp::kGlu,    CellOp::kZeroize, CellOp::kSkip};
const char* cell_op_name(CellOp op);

struct CellConfig {
  std::size_t reduced_dim = 8;
  std::size_t n_intermediate = 3;
  std::size_t controller_hidden = 128;

  void validate() const;
};

/// Node ids: 0 and 1 are the input projections, 2.. the intermediates.
/// Every intermediate receives an edge from each earlier node.
struct CellEdge {
  std::size_t src;
  std::size_t dst;
};
std::vector<CellEdge> cell_edges(const CellConfig& cfg);
std::size_t edge_count(const CellConfig& cfg);

/// Keys: in0.{w,b}, in1.{w,b}, out.w, and per edge k
/// e<k>.linear.{w,b}, e<k>.conv3.{w,b}, e<k>.conv5.{w,b}, e<k>.glu.{w,b}.
/// out.w starts at zero so a fresh cell contributes nothing.
NamedTensors init_cell(std::size_t d_model, const CellConfig& cfg, Rng& rng);
/// Keys: l1.{w,b}, l2.{w,b}.
NamedTensors init_controller(std::size_t repr_dim, const CellConfig& cfg, Rng& rng);

std::size_t cell_param_count(std::size_t d_model, const CellConfig& cfg);
std::size_t controller_param_count(std::size_t repr_dim, const CellConfig& cfg);

/// Row-softmaxed architecture weights α, [E × |O|].
Tensor controller_forward(const NamedTensors& controller, const Tensor& task_repr, const CellConfig& cfg);

/// Mixed cell on x [batch*steps, d_model]: each edge applies Σ_o α[e,o]·o(src).
Tensor cell_forward(const NamedTensors& cell, const Tensor& alpha, const Tensor& x, std::size_t batch,
                    std::size_t steps, const CellConfig& cfg);
/// Cell with one fixed op per edge.
Tensor discrete_cell_forward(const NamedTensors& cell, std::span<const CellOp> arch, const Tensor& x,
                             std::size_t batch, std::size_t steps, const CellConfig& cfg);

/// Per-row argmax, ties to the lowest op index.
std::vector<CellOp> argmax_arch(const Tensor& alpha);
/// One-hot α of argmax_arch.
Tensor discretize(const Tensor& alpha);
Tensor arch_to_alpha(std::span<const CellOp> arch);
/// One "edge <src>-><dst>: <op>" line per edge.
std::string export_architecture(std::span<const CellOp> arch, const CellConfig& cfg);

/// Mean of the bare model's final hidden states over every token of
/// `train`, [d_model]. Computed without recording gradients.
Tensor encode_task(const ModelConfig& model_cfg, const NamedTensors& base, std::span<const Sequence> train);

}  // namespace mltd
