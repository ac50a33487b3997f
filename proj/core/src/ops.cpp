#include "mltd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

#include "mltd/error.hpp"

namespace mltd::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void check_finite(const Tensor& t, const char* kind) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(kind) + ": non-finite value in output");
  }
}

Tensor finish(const char* kind, Tensor out, std::span<const Tensor> inputs, BackwardFn backward) {
  check_finite(out, kind);
  if (recording_enabled()) {
    Tape* tape = active_tape();
    const bool any = std::any_of(inputs.begin(), inputs.end(), [&](const Tensor& t) { return tape->owns(t); });
    if (any) tape->record(kind, inputs, out, std::move(backward));
  }
  return out;
}

Tensor finish(const char* kind, Tensor out, std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return finish(kind, std::move(out), std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(backward));
}

std::size_t norm_axis(int axis, std::size_t rank, const char* kind) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(kind) + ": axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, length, inner) extents.
std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* kind) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(kind) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " do not broadcast");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` viewed against `out` (right-aligned); 0 on stretched axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    const std::size_t i = k + (r - in.size());
    strides[i] = (in[k] == 1 && out[i] != 1) ? 0 : stride;
    stride *= in[k];
  }
  return strides;
}

template <class F>
void broadcast_loop(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                    F&& f) {
  const std::size_t r = out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t n = shape_size(out);
  const std::size_t inner = out[r - 1];
  const std::size_t ia_step = sa[r - 1], ib_step = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class F>
Tensor binary_forward(const Tensor& a, const Tensor& b, const char* kind, F&& f) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    auto o = out.mutable_data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape(), kind);
  Tensor out(shape);
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  broadcast_loop(shape, broadcast_strides(a.shape(), shape), broadcast_strides(b.shape(), shape),
                 [&](std::size_t oi, std::size_t ai, std::size_t bi) { o[oi] = f(x[ai], y[bi]); });
  return out;
}

template <class F>
Tensor unary_forward(const Tensor& a, F&& f) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i]);
  return out;
}

// Reduces a broadcast adjoint back to an operand's shape when needed.
Tensor reduce_like(const Tensor& g, const Shape& shape) {
  return g.shape() == shape ? g : sum_to(g, shape);
}

std::shared_ptr<const std::vector<int>> share_ids(std::span<const int> ids) {
  return std::make_shared<const std::vector<int>>(ids.begin(), ids.end());
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = binary_forward(a, b, "add", [](double x, double y) { return x + y; });
  Shape sa = a.shape(), sb = b.shape();
  return finish("add", std::move(out), {a, b}, [sa, sb](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{reduce_like(g, sa), reduce_like(g, sb)};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary_forward(a, b, "sub", [](double x, double y) { return x - y; });
  Shape sa = a.shape(), sb = b.shape();
  return finish("sub", std::move(out), {a, b}, [sa, sb](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{reduce_like(g, sa), reduce_like(neg(g), sb)};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary_forward(a, b, "hadamard", [](double x, double y) { return x * y; });
  return finish("hadamard", std::move(out), {a, b}, [a, b](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{reduce_like(mul(g, b), a.shape()), reduce_like(mul(g, a), b.shape())};
  });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = unary_forward(a, [s](double x) { return x * s; });
  return finish("scale", std::move(out), {a},
                [s](const Tensor& g, const Tensor&) { return std::vector<Tensor>{scale(g, s)}; });
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = unary_forward(a, [s](double x) { return x + s; });
  return finish("add_scalar", std::move(out), {a},
                [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g}; });
}

namespace {
thread_local double relu_margin_ = std::numeric_limits<double>::infinity();
thread_local double layernorm_margin_ = std::numeric_limits<double>::infinity();
}

double relu_margin() { return relu_margin_; }
void reset_relu_margin() { relu_margin_ = std::numeric_limits<double>::infinity(); }
double layernorm_margin() { return layernorm_margin_; }
void reset_layernorm_margin() { layernorm_margin_ = std::numeric_limits<double>::infinity(); }

Tensor relu(const Tensor& a) {
  for (double x : a.data()) relu_margin_ = std::min(relu_margin_, std::abs(x));
  Tensor out = unary_forward(a, [](double x) { return x > 0.0 ? x : 0.0; });
  return finish("relu", std::move(out), {a}, [a](const Tensor& g, const Tensor&) {
    Tensor mask = unary_forward(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
    return std::vector<Tensor>{mul(g, mask)};
  });
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = unary_forward(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return finish("sigmoid", std::move(out), {a}, [](const Tensor& g, const Tensor& s) {
    return std::vector<Tensor>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
  });
}

Tensor pow(const Tensor& a, double exponent) {
  Tensor out = unary_forward(a, [exponent](double x) { return std::pow(x, exponent); });
  return finish("pow", std::move(out), {a}, [a, exponent](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{mul(g, scale(pow(a, exponent - 1.0), exponent))};
  });
}

// ---------------------------------------------------------------------------
// broadcasting / reductions

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const Shape check = broadcast_shape(a.shape(), shape, "broadcast_to");
  if (check != shape) {
    throw DimensionError("broadcast_to: cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out(shape);
  auto o = out.mutable_data();
  auto x = a.data();
  const auto sa = broadcast_strides(a.shape(), shape);
  broadcast_loop(shape, sa, sa, [&](std::size_t oi, std::size_t ai, std::size_t) { o[oi] = x[ai]; });
  Shape src = a.shape();
  return finish("broadcast_to", std::move(out), {a},
                [src](const Tensor& g, const Tensor&) { return std::vector<Tensor>{sum_to(g, src)}; });
}

Tensor sum_to(const Tensor& a, const Shape& shape) {
  if (shape.size() > a.rank() || broadcast_shape(shape, a.shape(), "sum_to") != a.shape()) {
    throw DimensionError("sum_to: cannot reduce " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out(shape);
  auto o = out.mutable_data();
  auto x = a.data();
  const auto st = broadcast_strides(shape, a.shape());
  broadcast_loop(a.shape(), st, st, [&](std::size_t xi, std::size_t ti, std::size_t) { o[ti] += x[xi]; });
  Shape src = a.shape();
  return finish("sum_to", std::move(out), {a},
                [src](const Tensor& g, const Tensor&) { return std::vector<Tensor>{broadcast_to(g, src)}; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Shape src = a.shape();
  return finish("sum", Tensor::scalar(s), {a},
                [src](const Tensor& g, const Tensor&) { return std::vector<Tensor>{broadcast_to(g, src)}; });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, a.rank(), "sum_axis");
  const auto [outer, len, inner] = split_axis(a.shape(), ax);
  Shape kept = a.shape();
  kept[ax] = 1;
  Tensor out(kept);
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t p = 0; p < outer; ++p) {
    for (std::size_t k = 0; k < len; ++k) {
      const double* src = x.data() + (p * len + k) * inner;
      double* dst = o.data() + p * inner;
      for (std::size_t q = 0; q < inner; ++q) dst[q] += src[q];
    }
  }
  if (!keepdim) {
    Shape s = a.shape();
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(ax));
    out = out.view(s);
  }
  Shape src = a.shape();
  return finish("sum_axis", std::move(out), {a}, [src, kept](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{broadcast_to(reshape(g, kept), src)};
  });
}

Tensor mean_axis(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, a.rank(), "mean_axis");
  return scale(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[ax]));
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0)))) {
    throw DimensionError("matmul: unsupported operand shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t off = batched ? 1 : 0;
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t ar = a.dim(off), ac = a.dim(off + 1);
  const std::size_t br = b.dim(off), bc = b.dim(off + 1);
  const std::size_t m = trans_a ? ac : ar;
  const std::size_t k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br;
  const std::size_t n = trans_b ? br : bc;
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + (trans_a ? "ᵀ" : "") +
                         " x " + shape_str(b.shape()) + (trans_b ? "ᵀ" : ""));
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor out(shape);
  auto o = out.mutable_data();
  for (std::size_t p = 0; p < batch; ++p) {
    ConstMap A(a.data().data() + p * ar * ac, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
    ConstMap B(b.data().data() + p * br * bc, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
    MutMap C(o.data() + p * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (!trans_a && !trans_b) {
      C.noalias() = A * B;
    } else if (trans_a && !trans_b) {
      C.noalias() = A.transpose() * B;
    } else if (!trans_a && trans_b) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A.transpose() * B.transpose();
    }
  }
  return finish("matmul", std::move(out), {a, b}, [a, b, trans_a, trans_b](const Tensor& g, const Tensor&) {
    Tensor ga = trans_a ? matmul(b, g, trans_b, true) : matmul(g, b, false, !trans_b);
    Tensor gb = trans_b ? matmul(g, a, true, trans_a) : matmul(a, g, !trans_a, false);
    return std::vector<Tensor>{ga, gb};
  });
}

// ---------------------------------------------------------------------------
// shape

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Shape src = a.shape();
  return finish("reshape", a.view(shape), {a},
                [src](const Tensor& g, const Tensor&) { return std::vector<Tensor>{reshape(g, src)}; });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw DimensionError("permute: axis list does not match rank of " + shape_str(a.shape()));
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw DimensionError("permute: invalid axis permutation");
    seen[ax] = true;
  }
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) shape[i] = a.dim(axes[i]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
  std::vector<std::size_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) src_strides[i] = in_strides[axes[i]];
  Tensor out(shape);
  auto o = out.mutable_data();
  auto x = a.data();
  broadcast_loop(shape, src_strides, src_strides, [&](std::size_t oi, std::size_t ai, std::size_t) { o[oi] = x[ai]; });
  std::vector<std::size_t> inverse(r);
  for (std::size_t i = 0; i < r; ++i) inverse[axes[i]] = i;
  return finish("permute", std::move(out), {a},
                [inverse](const Tensor& g, const Tensor&) { return std::vector<Tensor>{permute(g, inverse)}; });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const std::size_t ax = norm_axis(axis, parts[0].rank(), "concat");
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    s[ax] = shape[ax];
    if (s != shape) throw DimensionError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                                         shape_str(p.shape()));
    total += p.dim(ax);
  }
  shape[ax] = total;
  const auto [outer, len, inner] = split_axis(shape, ax);
  (void)len;
  Tensor out(shape);
  auto o = out.mutable_data();
  std::size_t offset = 0;
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) {
    const std::size_t pl = p.dim(ax);
    auto x = p.data();
    for (std::size_t q = 0; q < outer; ++q) {
      std::copy_n(x.data() + q * pl * inner, pl * inner, o.data() + (q * total + offset) * inner);
    }
    offset += pl;
    lengths.push_back(pl);
  }
  return finish("concat", std::move(out), parts, [ax, lengths](const Tensor& g, const Tensor&) {
    std::vector<Tensor> grads;
    std::size_t start = 0;
    for (auto l : lengths) {
      grads.push_back(slice(g, static_cast<int>(ax), start, l));
      start += l;
    }
    return grads;
  });
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, a.rank(), "slice");
  const auto [outer, len, inner] = split_axis(a.shape(), ax);
  if (length == 0 || start + length > len) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of bounds for " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[ax] = length;
  Tensor out(shape);
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t q = 0; q < outer; ++q) {
    std::copy_n(x.data() + (q * len + start) * inner, length * inner, o.data() + q * length * inner);
  }
  return finish("slice", std::move(out), {a}, [ax, start, len](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{pad(g, static_cast<int>(ax), start, len)};
  });
}

Tensor pad(const Tensor& a, int axis, std::size_t before, std::size_t full_length) {
  const std::size_t ax = norm_axis(axis, a.rank(), "pad");
  const auto [outer, len, inner] = split_axis(a.shape(), ax);
  if (before + len > full_length) throw DimensionError("pad: target length too small");
  Shape shape = a.shape();
  shape[ax] = full_length;
  Tensor out(shape);
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t q = 0; q < outer; ++q) {
    std::copy_n(x.data() + q * len * inner, len * inner, o.data() + (q * full_length + before) * inner);
  }
  return finish("pad", std::move(out), {a}, [ax, before, len](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{slice(g, static_cast<int>(ax), before, len)};
  });
}

Tensor time_shift(const Tensor& a, std::ptrdiff_t shift) {
  if (a.rank() != 3) throw DimensionError("time_shift: expected [batch, time, channels], got " + shape_str(a.shape()));
  const std::size_t batch = a.dim(0), steps = a.dim(1), ch = a.dim(2);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  const auto T = static_cast<std::ptrdiff_t>(steps);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::ptrdiff_t t = 0; t < T; ++t) {
      const std::ptrdiff_t s = t + shift;
      if (s < 0 || s >= T) continue;
      std::copy_n(x.data() + (b * steps + static_cast<std::size_t>(s)) * ch, ch,
                  o.data() + (b * steps + static_cast<std::size_t>(t)) * ch);
    }
  }
  return finish("time_shift", std::move(out), {a},
                [shift](const Tensor& g, const Tensor&) { return std::vector<Tensor>{time_shift(g, -shift)}; });
}

// ---------------------------------------------------------------------------
// neural

Tensor softmax(const Tensor& a, int axis, bool causal) {
  const std::size_t ax = norm_axis(axis, a.rank(), "softmax");
  if (causal && (ax != a.rank() - 1 || a.rank() < 2 || a.dim(ax) != a.dim(ax - 1))) {
    throw DimensionError("softmax: causal masking needs a trailing square [.., T, T] block, got " +
                         shape_str(a.shape()));
  }
  const auto [outer, len, inner] = split_axis(a.shape(), ax);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t p = 0; p < outer; ++p) {
    const std::size_t visible = causal ? (p % len) + 1 : len;
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = p * len * inner + q;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < visible; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < visible; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        o[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < visible; ++k) o[base + k * inner] /= z;
    }
  }
  const int axis_i = static_cast<int>(ax);
  return finish("softmax", std::move(out), {a}, [axis_i](const Tensor& g, const Tensor& y) {
    return std::vector<Tensor>{mul(y, sub(g, sum_axis(mul(g, y), axis_i, true)))};
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1) throw DimensionError("layernorm: input must have rank >= 1");
  const std::size_t c = x.dim(x.rank() - 1);
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
    throw DimensionError("layernorm: gain/bias must be [" + std::to_string(c) + "], got " + shape_str(gain.shape()) +
                         " and " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.size() / c;
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double std_dev = std::sqrt(var + eps);
    layernorm_margin_ = std::min(layernorm_margin_, std_dev);
    const double rstd = 1.0 / std_dev;
    for (std::size_t j = 0; j < c; ++j) o[r * c + j] = (row[j] - mu) * rstd * gv[j] + bv[j];
  }
  return finish("layernorm", std::move(out), {x, gain, bias}, [x, gain, eps](const Tensor& g, const Tensor&) {
    // Recompute the normalization with ops so the adjoint is differentiable.
    Tensor xc = sub(x, mean_axis(x, -1, true));
    Tensor rstd = pow(add_scalar(mean_axis(mul(xc, xc), -1, true), eps), -0.5);
    Tensor xhat = mul(xc, rstd);
    Tensor dxhat = mul(g, gain);
    Tensor gx = mul(rstd, sub(sub(dxhat, mean_axis(dxhat, -1, true)), mul(xhat, mean_axis(mul(dxhat, xhat), -1, true))));
    return std::vector<Tensor>{gx, sum_to(mul(g, xhat), gain.shape()), sum_to(g, gain.shape())};
  });
}

Tensor glu(const Tensor& x) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) % 2 != 0) {
    throw DimensionError("glu: last dimension must be even, got " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(x.rank() - 1);
  const std::size_t h = c / 2;
  const std::size_t rows = x.size() / c;
  Shape shape = x.shape();
  shape.back() = h;
  Tensor out(shape);
  auto o = out.mutable_data();
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < h; ++j) {
      const double a = xv[r * c + j];
      const double b = xv[r * c + h + j];
      o[r * h + j] = a * (1.0 / (1.0 + std::exp(-b)));
    }
  }
  return finish("glu", std::move(out), {x}, [x, h](const Tensor& g, const Tensor&) {
    Tensor a = slice(x, -1, 0, h);
    Tensor s = sigmoid(slice(x, -1, h, h));
    Tensor ga = mul(g, s);
    Tensor gb = mul(mul(g, a), mul(s, add_scalar(neg(s), 1.0)));
    const std::array<Tensor, 2> parts{ga, gb};
    return std::vector<Tensor>{concat(parts, -1)};
  });
}

Tensor conv1d(const Tensor& x, const Tensor& w, ConvPadding padding) {
  if (x.rank() == 2) {
    Tensor y = conv1d(reshape(x, {1, x.dim(0), x.dim(1)}), w, padding);
    return reshape(y, {x.dim(0), w.dim(2)});
  }
  if (x.rank() != 3 || w.rank() != 3 || w.dim(1) != x.dim(2)) {
    throw DimensionError("conv1d: expected x [B,T,Cin] and w [K,Cin,Cout], got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
  }
  const std::size_t kernel = w.dim(0);
  if (kernel % 2 == 0) throw DimensionError("conv1d: kernel size must be odd, got " + std::to_string(kernel));
  const std::size_t batch = x.dim(0), steps = x.dim(1), cin = x.dim(2), cout = w.dim(2);
  const auto offset = static_cast<std::ptrdiff_t>(padding == ConvPadding::kCausal ? kernel - 1 : (kernel - 1) / 2);
  const auto T = static_cast<std::ptrdiff_t>(steps);
  Tensor out({batch, steps, cout});
  auto o = out.mutable_data();
  for (std::size_t k = 0; k < kernel; ++k) {
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - offset;
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(T, T - shift);
    if (hi <= lo) continue;
    ConstMap W(w.data().data() + k * cin * cout, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(cout));
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMap X(x.data().data() + (b * steps + static_cast<std::size_t>(lo + shift)) * cin,
                 static_cast<Eigen::Index>(hi - lo), static_cast<Eigen::Index>(cin));
      MutMap Y(o.data() + (b * steps + static_cast<std::size_t>(lo)) * cout, static_cast<Eigen::Index>(hi - lo),
               static_cast<Eigen::Index>(cout));
      Y.noalias() += X * W;
    }
  }
  return finish("conv1d", std::move(out), {x, w}, [x, w, offset, kernel, batch, steps, cin, cout](const Tensor& g,
                                                                                               const Tensor&) {
    Tensor g2 = reshape(g, {batch * steps, cout});
    Tensor gx;
    std::vector<Tensor> gw;
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - offset;
      Tensor wk = reshape(slice(w, 0, k, 1), {cin, cout});
      Tensor part = time_shift(reshape(matmul(g2, wk, false, true), {batch, steps, cin}), -shift);
      gx = k > 0 ? add(gx, part) : part;
      Tensor xs = reshape(time_shift(x, shift), {batch * steps, cin});
      gw.push_back(reshape(matmul(xs, g2, true, false), {1, cin, cout}));
    }
    return std::vector<Tensor>{gx, concat(gw, 0)};
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t rows = table.dim(0), d = table.dim(1);
  Tensor out({ids.size(), d});
  auto o = out.mutable_data();
  auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " out of range [0, " + std::to_string(rows) +
                           ")");
    }
    std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
  }
  auto shared = share_ids(ids);
  return finish("embedding_lookup", std::move(out), {table}, [shared, rows](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{embedding_scatter(g, *shared, rows)};
  });
}

Tensor embedding_scatter(const Tensor& grad, std::span<const int> ids, std::size_t rows) {
  if (grad.rank() != 2 || grad.dim(0) != ids.size()) {
    throw DimensionError("embedding_scatter: gradient shape " + shape_str(grad.shape()) + " does not match ids");
  }
  const std::size_t d = grad.dim(1);
  Tensor out({rows, d});
  auto o = out.mutable_data();
  auto g = grad.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto r = static_cast<std::size_t>(ids[i]);
    if (r >= rows) throw DimensionError("embedding_scatter: id out of range");
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] += g[i * d + j];
  }
  auto shared = share_ids(ids);
  return finish("embedding_scatter", std::move(out), {grad}, [shared](const Tensor& gg, const Tensor&) {
    return std::vector<Tensor>{embedding(gg, *shared)};
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  Tensor out({n});
  auto o = out.mutable_data();
  auto x = logits.data();
  Tensor onehot({n, v});
  auto oh = onehot.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    }
    const double* row = x.data() + i * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    o[i] = (mx + std::log(z)) - row[targets[i]];
    oh[i * v + static_cast<std::size_t>(targets[i])] = 1.0;
  }
  return finish("cross_entropy_with_logits", std::move(out), {logits},
                [logits, onehot, n](const Tensor& g, const Tensor&) {
                  return std::vector<Tensor>{mul(reshape(g, {n, 1}), sub(softmax(logits, -1), onehot))};
                });
}

// ---------------------------------------------------------------------------
// dispatch

namespace {

constexpr std::array<OpKind, 16> kAllKinds = {
    OpKind::kMatmul,      OpKind::kHadamard,   OpKind::kAdd,        OpKind::kScale,
    OpKind::kSoftmax,     OpKind::kLayerNorm,  OpKind::kRelu,       OpKind::kGlu,
    OpKind::kConv1dSame,  OpKind::kEmbeddingLookup, OpKind::kReshape, OpKind::kMean,
    OpKind::kSum,         OpKind::kCrossEntropyWithLogits, OpKind::kConcat, OpKind::kSlice,
};

void expect_inputs(OpKind kind, std::span<const Tensor> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw DimensionError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                         std::to_string(inputs.size()));
  }
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kHadamard: return "hadamard";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kRelu: return "relu";
    case OpKind::kGlu: return "glu";
    case OpKind::kConv1dSame: return "conv1d_same";
    case OpKind::kEmbeddingLookup: return "embedding_lookup";
    case OpKind::kReshape: return "reshape";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kCrossEntropyWithLogits: return "cross_entropy_with_logits";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
  }
  return "unknown";
}

std::span<const OpKind> all_op_kinds() { return kAllKinds; }

Tensor apply_primitive(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::kMatmul:
      expect_inputs(kind, in, 2);
      return matmul(in[0], in[1], attrs.trans_a, attrs.trans_b);
    case OpKind::kHadamard:
      expect_inputs(kind, in, 2);
      return mul(in[0], in[1]);
    case OpKind::kAdd:
      expect_inputs(kind, in, 2);
      return add(in[0], in[1]);
    case OpKind::kScale:
      expect_inputs(kind, in, 1);
      return scale(in[0], attrs.scalar);
    case OpKind::kSoftmax:
      expect_inputs(kind, in, 1);
      return softmax(in[0], attrs.axis, attrs.causal);
    case OpKind::kLayerNorm:
      expect_inputs(kind, in, 3);
      return layernorm(in[0], in[1], in[2], attrs.eps);
    case OpKind::kRelu:
      expect_inputs(kind, in, 1);
      return relu(in[0]);
    case OpKind::kGlu:
      expect_inputs(kind, in, 1);
      return glu(in[0]);
    case OpKind::kConv1dSame:
      expect_inputs(kind, in, 2);
      if (in[1].rank() != 3 || (in[1].dim(0) != 3 && in[1].dim(0) != 5)) {
        throw DimensionError("conv1d_same: kernel size must be 3 or 5, weight shape " + shape_str(in[1].shape()));
      }
      return conv1d(in[0], in[1], attrs.causal ? ConvPadding::kCausal : ConvPadding::kSame);
    case OpKind::kEmbeddingLookup:
      expect_inputs(kind, in, 1);
      return embedding(in[0], attrs.indices);
    case OpKind::kReshape:
      expect_inputs(kind, in, 1);
      return reshape(in[0], attrs.shape);
    case OpKind::kMean:
      expect_inputs(kind, in, 1);
      return mean(in[0]);
    case OpKind::kSum:
      expect_inputs(kind, in, 1);
      return sum(in[0]);
    case OpKind::kCrossEntropyWithLogits:
      expect_inputs(kind, in, 1);
      return cross_entropy(in[0], attrs.indices);
    case OpKind::kConcat:
      return concat(in, attrs.axis);
    case OpKind::kSlice:
      expect_inputs(kind, in, 1);
      return slice(in[0], attrs.axis, attrs.start, attrs.length);
  }
  throw DimensionError("apply_primitive: unknown op kind");
}

}  // namespace mltd::ops
