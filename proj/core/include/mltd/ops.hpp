#pragma once

#include <span>
#include <vector>

#include "mltd/tape.hpp"
#include "mltd/tensor.hpp"

/// Differentiable primitives. Every op checks its output for NaN/Inf and,
/// when a tape is recording and an input lives on it, appends a node.
/// Binary elementwise ops broadcast numpy-style (shapes aligned right,
/// size-1 dimensions stretch).
namespace mltd::ops {

// --- elementwise -----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Hadamard product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }
Tensor relu(const Tensor& a);
/// Smallest |input| relu has seen on this thread since the last reset.
/// Gradient checks use it to reject instances sitting next to the kink.
double relu_margin();
void reset_relu_margin();
Tensor sigmoid(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);

// --- broadcasting / reductions --------------------------------------------
Tensor broadcast_to(const Tensor& a, const Shape& shape);
/// Sums `a` down to `shape` (inverse of broadcast_to).
Tensor sum_to(const Tensor& a, const Shape& shape);
/// Sum of all elements, rank-0 result.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, int axis, bool keepdim = false);

// --- linear algebra ---------------------------------------------------------
/// op(a)·op(b) for rank-2 operands, or batched over the leading axis for
/// rank-3 operands with equal batch size.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// --- shape ------------------------------------------------------------------
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);
/// Zero-pads `a` along `axis` to `full_length`, placing it at `before`.
Tensor pad(const Tensor& a, int axis, std::size_t before, std::size_t full_length);
/// out[b, t] = a[b, t + shift] for rank-3 [batch, time, channels]; zero
/// where t + shift falls outside the sequence.
Tensor time_shift(const Tensor& a, std::ptrdiff_t shift);

// --- neural -----------------------------------------------------------------
/// Softmax along `axis`. With `causal`, `axis` must be the last of a
/// [.., T, T] tensor and entries above the diagonal get probability 0.
Tensor softmax(const Tensor& a, int axis = -1, bool causal = false);
/// Normalizes over the last axis, then scales by `gain` and shifts by `bias`.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Smallest row standard deviation layernorm has normalized on this thread
/// since the last reset; near zero the map approaches a sign function.
double layernorm_margin();
void reset_layernorm_margin();
/// Splits the last axis into halves (a, b) and returns a ⊙ sigmoid(b).
Tensor glu(const Tensor& x);

enum class ConvPadding { kSame, kCausal };
/// 1-D convolution along time. x: [B, T, Cin] (or [T, Cin]); w: [K, Cin, Cout].
/// kSame zero-pads symmetrically; kCausal only looks at positions ≤ t.
Tensor conv1d(const Tensor& x, const Tensor& w, ConvPadding padding);

/// Rows of `table` ([V, d]) selected by `ids`; result [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const int> ids);
/// Scatter-add of `grad` rows into a [rows, d] table (adjoint of embedding).
Tensor embedding_scatter(const Tensor& grad, std::span<const int> ids, std::size_t rows);

/// Per-row −log softmax(logits)[target]; logits [N, V] → [N].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// --- generic dispatch -------------------------------------------------------
enum class OpKind {
  kMatmul,
  kHadamard,
  kAdd,
  kScale,
  kSoftmax,
  kLayerNorm,
  kRelu,
  kGlu,
  kConv1dSame,
  kEmbeddingLookup,
  kReshape,
  kMean,
  kSum,
  kCrossEntropyWithLogits,
  kConcat,
  kSlice,
};

struct OpAttrs {
  int axis = -1;
  bool causal = false;
  bool trans_a = false;
  bool trans_b = false;
  double scalar = 1.0;
  double eps = 1e-5;
  Shape shape;
  std::size_t start = 0;
  std::size_t length = 0;
  std::vector<int> indices;  // embedding ids or cross-entropy targets
};

const char* op_name(OpKind kind);
std::span<const OpKind> all_op_kinds();

/// Runs one primitive by kind. Layernorm takes (x, gain, bias); conv1d_same
/// takes (x, w) with kernel size 3 or 5 and honours `attrs.causal`.
Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

}  // namespace mltd::ops
