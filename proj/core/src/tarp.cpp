#include "mltd/tarp.hpp"

#include <array>
#include <cmath>
#include <vector>

#include "mltd/error.hpp"
#include "mltd/ops.hpp"

namespace mltd {

namespace {

constexpr std::array<std::pair<DecompKind, const char*>, 7> kNames = {{
    {DecompKind::kBilinear, "bilinear"},
    {DecompKind::kKronecker, "kronecker"},
    {DecompKind::kDynamic, "dynamic"},
    {DecompKind::kMatmulAblation, "matmul_ablation"},
    {DecompKind::kBiasOnly, "bias_only"},
    {DecompKind::kTopKLayers, "top_k_layers"},
    {DecompKind::kFullFinetune, "full_finetune"},
}};

std::string path_key(int j, std::string_view leaf) { return "phi" + std::to_string(j) + "." + std::string(leaf); }

std::string kron_key(int j, std::size_t k, std::string_view leaf) {
  return "phi" + std::to_string(j) + ".kron." + std::to_string(k) + "." + std::string(leaf);
}

const Tensor& factor(const ReparamLayer& layer, const std::string& key) {
  auto it = layer.factors.find(key);
  if (it == layer.factors.end()) throw ConfigError("reparameterized layer has no factor '" + key + "'");
  return it->second;
}

void init_sigma_mlp(NamedTensors& f, int j, std::size_t c_in, const DecompSpec& spec, Rng& rng) {
  const std::size_t r = spec.rank, h = spec.hidden();
  f[path_key(j, "sigma.w1")] = randn({c_in, h}, 1.0 / std::sqrt(static_cast<double>(c_in)), rng);
  f[path_key(j, "sigma.b1")] = Tensor::zeros({h});
  f[path_key(j, "sigma.w2")] = randn({h, r * r}, 0.01, rng);
  Tensor b2 = Tensor::zeros({r * r});
  auto bv = b2.mutable_data();
  for (std::size_t a = 0; a < r; ++a) bv[a * r + a] = 1.0;
  f[path_key(j, "sigma.b2")] = b2;
}

// [.., C] → [N, C]
Tensor flatten_rows(const Tensor& x, std::size_t c) {
  if (x.rank() == 0 || x.shape().back() != c) {
    throw DimensionError("reparameterized layer expects input [.., " + std::to_string(c) + "], got " +
                         shape_str(x.shape()));
  }
  return x.rank() == 2 ? x : ops::reshape(x, {x.size() / c, c});
}

Tensor restore_rows(const Tensor& y, const Tensor& x) {
  if (x.rank() == 2) return y;
  Shape s = x.shape();
  s.back() = y.dim(1);
  return ops::reshape(y, s);
}

Tensor materialize(const ReparamLayer& layer, int j) {
  const auto& spec = layer.spec;
  if (spec.kind == DecompKind::kBilinear) {
    return bilinear_phi(factor(layer, path_key(j, "U")), factor(layer, path_key(j, "V")));
  }
  std::vector<KronBlock> blocks;
  for (std::size_t k = 0; k < spec.kron_n; ++k) {
    blocks.push_back({factor(layer, kron_key(j, k, "H")), factor(layer, kron_key(j, k, "U")),
                      factor(layer, kron_key(j, k, "V"))});
  }
  return kron_phi(blocks);
}

Tensor sigma_of(const ReparamLayer& layer, int j, const Tensor& x) {
  return sigma_mlp_forward(factor(layer, path_key(j, "sigma.w1")), factor(layer, path_key(j, "sigma.b1")),
                           factor(layer, path_key(j, "sigma.w2")), factor(layer, path_key(j, "sigma.b2")), x,
                           layer.spec.rank);
}

// Rows of ((x·U) Σ(x)) Vᵀ: the per-token product x Φ(x) without materializing Φ.
Tensor low_rank_apply(const Tensor& x, const Tensor& u, const Tensor& sigma, const Tensor& v) {
  const std::size_t n = x.dim(0), r = u.dim(1);
  Tensor xu = ops::reshape(ops::matmul(x, u), {n, 1, r});
  Tensor xus = ops::reshape(ops::matmul(xu, sigma), {n, r});
  return ops::matmul(xus, v, false, true);
}

void require_kind(const ReparamLayer& layer, std::initializer_list<DecompKind> kinds, const char* fn) {
  for (auto k : kinds) {
    if (layer.spec.kind == k) return;
  }
  throw ConfigError(std::string(fn) + ": wrong mode for decomposition '" + decomp_name(layer.spec.kind) + "'");
}

}  // namespace

const char* decomp_name(DecompKind kind) {
  for (const auto& [k, name] : kNames) {
    if (k == kind) return name;
  }
  return "?";
}

DecompKind parse_decomp(std::string_view name) {
  for (const auto& [k, n] : kNames) {
    if (name == n) return k;
  }
  throw ConfigError("unknown decomposition kind '" + std::string(name) + "'");
}

bool is_reparam(DecompKind kind) {
  return kind == DecompKind::kBilinear || kind == DecompKind::kKronecker || kind == DecompKind::kDynamic ||
         kind == DecompKind::kMatmulAblation;
}

void DecompSpec::validate(std::size_t c_in, std::size_t c_out) const {
  if (!is_reparam(kind)) return;
  const std::size_t lim = std::min(c_in, c_out);
  if (rank < 1 || 2 * rank > lim) {
    throw ConfigError("rank " + std::to_string(rank) + " must satisfy 1 <= r <= min(C_in, C_out)/2 = " +
                      std::to_string(lim / 2));
  }
  if (kind == DecompKind::kKronecker) {
    if (kron_n < 1 || c_in % kron_n != 0 || c_out % kron_n != 0) {
      throw ConfigError("kron_n " + std::to_string(kron_n) + " must divide C_in " + std::to_string(c_in) +
                        " and C_out " + std::to_string(c_out));
    }
    if (rank > std::min(c_in, c_out) / kron_n) {
      throw ConfigError("rank " + std::to_string(rank) + " exceeds Kronecker block size");
    }
  }
}

NamedTensors init_factors(std::size_t c_in, std::size_t c_out, const DecompSpec& spec, Rng& rng) {
  spec.validate(c_in, c_out);
  if (!is_reparam(spec.kind)) {
    throw ConfigError(std::string("decomposition '") + decomp_name(spec.kind) + "' attaches no factors");
  }
  const std::size_t r = spec.rank;
  const double u_std = 1.0 / std::sqrt(static_cast<double>(r));
  NamedTensors f;
  for (int j = spec.additive_only ? 2 : 1; j <= 2; ++j) {
    switch (spec.kind) {
      case DecompKind::kBilinear:
        f[path_key(j, "U")] = randn({c_in, r}, u_std, rng);
        f[path_key(j, "V")] = Tensor::zeros({c_out, r});
        break;
      case DecompKind::kKronecker: {
        const std::size_t n = spec.kron_n;
        for (std::size_t k = 0; k < n; ++k) {
          f[kron_key(j, k, "H")] = randn({n, n}, 1.0, rng);
          f[kron_key(j, k, "U")] = randn({c_in / n, r}, u_std, rng);
          f[kron_key(j, k, "V")] = Tensor::zeros({c_out / n, r});
        }
        break;
      }
      case DecompKind::kDynamic:
      case DecompKind::kMatmulAblation: {
        const bool square = spec.kind == DecompKind::kMatmulAblation && j == 1;
        f[path_key(j, "U")] = randn({c_in, r}, u_std, rng);
        f[path_key(j, "V")] = Tensor::zeros({square ? c_in : c_out, r});
        init_sigma_mlp(f, j, c_in, spec, rng);
        break;
      }
      default:
        break;
    }
  }
  return f;
}

ReparamLayer wrap_layer(const Tensor& w0, const Tensor& bias0, const DecompSpec& spec, std::uint64_t seed) {
  if (w0.rank() != 2) throw DimensionError("wrap_layer: W0 must be a matrix, got " + shape_str(w0.shape()));
  if (bias0.rank() != 1 || bias0.dim(0) != w0.dim(1)) {
    throw DimensionError("wrap_layer: bias " + shape_str(bias0.shape()) + " does not match W0 " +
                         shape_str(w0.shape()));
  }
  Rng rng = substream(seed, "tarp.wrap");
  return ReparamLayer{w0, bias0, spec, init_factors(w0.dim(0), w0.dim(1), spec, rng)};
}

std::size_t factor_count(std::size_t c_in, std::size_t c_out, const DecompSpec& spec) {
  if (!is_reparam(spec.kind)) return 0;
  const std::size_t r = spec.rank, h = spec.hidden();
  const std::size_t mlp = c_in * h + h + h * r * r + r * r;
  std::size_t per_path[3] = {0, 0, 0};
  for (int j = 1; j <= 2; ++j) {
    switch (spec.kind) {
      case DecompKind::kBilinear:
        per_path[j] = (c_in + c_out) * r;
        break;
      case DecompKind::kKronecker: {
        const std::size_t n = spec.kron_n;
        per_path[j] = n * (n * n + (c_in / n + c_out / n) * r);
        break;
      }
      case DecompKind::kDynamic:
        per_path[j] = (c_in + c_out) * r + mlp;
        break;
      case DecompKind::kMatmulAblation:
        per_path[j] = (c_in + (j == 1 ? c_in : c_out)) * r + mlp;
        break;
      default:
        break;
    }
  }
  return (spec.additive_only ? 0 : per_path[1]) + per_path[2];
}

Tensor bilinear_phi(const Tensor& u, const Tensor& v) {
  if (u.rank() != 2 || v.rank() != 2 || u.dim(1) != v.dim(1)) {
    throw DimensionError("bilinear_phi: U " + shape_str(u.shape()) + " and V " + shape_str(v.shape()) +
                         " disagree on rank");
  }
  return ops::matmul(u, v, false, true);
}

Tensor kron_phi(std::span<const KronBlock> blocks) {
  if (blocks.empty()) throw DimensionError("kron_phi: no blocks");
  const std::size_t n = blocks.size();
  Tensor total;
  for (const auto& b : blocks) {
    if (b.h.rank() != 2 || b.h.dim(0) != n || b.h.dim(1) != n) {
      throw DimensionError("kron_phi: H must be " + std::to_string(n) + "x" + std::to_string(n) + ", got " +
                           shape_str(b.h.shape()));
    }
    Tensor m = bilinear_phi(b.u, b.v);
    const std::size_t p = m.dim(0), q = m.dim(1);
    Tensor prod = ops::mul(ops::reshape(b.h, {n, 1, n, 1}), ops::reshape(m, {1, p, 1, q}));
    Tensor term = ops::reshape(prod, {n * p, n * q});
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

Tensor static_forward(const ReparamLayer& layer, const Tensor& x) {
  require_kind(layer, {DecompKind::kBilinear, DecompKind::kKronecker}, "static_forward");
  Tensor xr = flatten_rows(x, layer.w0.dim(0));
  Tensor w = layer.w0;
  if (!layer.spec.additive_only) w = ops::mul(ops::add_scalar(materialize(layer, 1), 1.0), w);
  w = ops::add(w, materialize(layer, 2));
  return restore_rows(ops::add(ops::matmul(xr, w), layer.bias0), x);
}

Tensor sigma_mlp_forward(const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2, const Tensor& x,
                         std::size_t rank) {
  if (x.rank() != 2 || x.dim(1) != w1.dim(0)) {
    throw DimensionError("sigma MLP expects input [N, " + std::to_string(w1.dim(0)) + "], got " +
                         shape_str(x.shape()));
  }
  if (w2.dim(1) != rank * rank) {
    throw DimensionError("sigma MLP output width " + std::to_string(w2.dim(1)) + " is not rank^2");
  }
  Tensor hidden = ops::relu(ops::add(ops::matmul(x, w1), b1));
  Tensor out = ops::add(ops::matmul(hidden, w2), b2);
  return ops::reshape(out, {x.dim(0), rank, rank});
}

Tensor dynamic_forward(const ReparamLayer& layer, const Tensor& x) {
  require_kind(layer, {DecompKind::kDynamic}, "dynamic_forward");
  const Tensor& w0 = layer.w0;
  const std::size_t c_in = w0.dim(0), c_out = w0.dim(1), r = layer.spec.rank;
  Tensor xr = flatten_rows(x, c_in);
  const std::size_t n = xr.dim(0);
  Tensor y = ops::matmul(xr, w0);
  if (!layer.spec.additive_only) {
    // Σ_i x_i Φ1(x)_io W0_io = Σ_a [(x ⊙ U_:a)·W0]_o · [Σ(x) V1ᵀ]_ao
    const Tensor& u1 = factor(layer, "phi1.U");
    Tensor xu = ops::mul(ops::reshape(xr, {n, 1, c_in}), ops::reshape(ops::permute(u1, {1, 0}), {1, r, c_in}));
    Tensor z = ops::reshape(ops::matmul(ops::reshape(xu, {n * r, c_in}), w0), {n, r, c_out});
    Tensor sv = ops::matmul(ops::reshape(sigma_of(layer, 1, xr), {n * r, r}), factor(layer, "phi1.V"), false, true);
    y = ops::add(y, ops::sum_axis(ops::mul(z, ops::reshape(sv, {n, r, c_out})), 1));
  }
  y = ops::add(y, low_rank_apply(xr, factor(layer, "phi2.U"), sigma_of(layer, 2, xr), factor(layer, "phi2.V")));
  return restore_rows(ops::add(y, layer.bias0), x);
}

Tensor matmul_ablation_forward(const ReparamLayer& layer, const Tensor& x) {
  require_kind(layer, {DecompKind::kMatmulAblation}, "matmul_ablation_forward");
  const Tensor& w0 = layer.w0;
  Tensor xr = flatten_rows(x, w0.dim(0));
  Tensor xphi = xr;
  if (!layer.spec.additive_only) {
    xphi = ops::add(xr, low_rank_apply(xr, factor(layer, "phi1.U"), sigma_of(layer, 1, xr), factor(layer, "phi1.V")));
  }
  Tensor y = ops::matmul(xphi, w0);
  y = ops::add(y, low_rank_apply(xr, factor(layer, "phi2.U"), sigma_of(layer, 2, xr), factor(layer, "phi2.V")));
  return restore_rows(ops::add(y, layer.bias0), x);
}

Tensor reparam_forward(const ReparamLayer& layer, const Tensor& x) {
  switch (layer.spec.kind) {
    case DecompKind::kBilinear:
    case DecompKind::kKronecker:
      return static_forward(layer, x);
    case DecompKind::kDynamic:
      return dynamic_forward(layer, x);
    case DecompKind::kMatmulAblation:
      return matmul_ablation_forward(layer, x);
    default:
      throw ConfigError(std::string("decomposition '") + decomp_name(layer.spec.kind) +
                        "' has no reparameterized forward");
  }
}

}  // namespace mltd
