#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "mltd/rng.hpp"
#include "mltd/tensor.hpp"

namespace mltd {

/// How a dense layer's task-specific weights are obtained. The first four
/// kinds reparameterize W = Φ1 ⊙ W0 + Φ2; the last three are plain
/// finetuning baselines that select a subset of base weights instead.
enum class DecompKind {
  kBilinear,
  kKronecker,
  kDynamic,
  kMatmulAblation,
  kBiasOnly,
  kTopKLayers,
  kFullFinetune,
};

const char* decomp_name(DecompKind kind);
/// Inverse of decomp_name; throws ConfigError for unknown names.
DecompKind parse_decomp(std::string_view name);
/// True for the kinds that attach factors to a layer.
bool is_reparam(DecompKind kind);

struct DecompSpec {
  DecompKind kind = DecompKind::kBilinear;
  std::size_t rank = 4;
  std::size_t kron_n = 2;
  std::size_t sigma_hidden = 0;  // 0 means "same as rank"
  bool additive_only = false;    // Φ1 fixed to all-ones
  std::size_t top_k = 2;         // blocks trained by kTopKLayers

  std::size_t hidden() const noexcept { return sigma_hidden == 0 ? rank : sigma_hidden; }
  /// Checks the decomposition against a [c_in × c_out] layer.
  void validate(std::size_t c_in, std::size_t c_out) const;
};

/// A frozen dense layer plus the factors of its reparameterization.
///
/// Factor keys, per path j ∈ {1, 2} (path 1 absent when additive_only):
///   bilinear        phi<j>.U [C_in×r], phi<j>.V [C_out×r]
///   kronecker       phi<j>.kron.<k>.H [n×n], .U [C_in/n×r], .V [C_out/n×r]
///   dynamic         phi<j>.U, phi<j>.V, phi<j>.sigma.{w1,b1,w2,b2}
///   matmul_ablation as dynamic, except phi1.V is [C_in×r]
struct ReparamLayer {
  Tensor w0;
  Tensor bias0;
  DecompSpec spec;
  NamedTensors factors;
};

/// Factors whose initial transform is the identity on W0: every V is zero,
/// so Φ1 ≡ 1 and Φ2 ≡ 0.
NamedTensors init_factors(std::size_t c_in, std::size_t c_out, const DecompSpec& spec, Rng& rng);
ReparamLayer wrap_layer(const Tensor& w0, const Tensor& bias0, const DecompSpec& spec, std::uint64_t seed);
/// Closed-form number of trainable scalars init_factors creates.
std::size_t factor_count(std::size_t c_in, std::size_t c_out, const DecompSpec& spec);

/// U·Vᵀ.
Tensor bilinear_phi(const Tensor& u, const Tensor& v);

struct KronBlock {
  Tensor h;
  Tensor u;
  Tensor v;
};
/// Σ_k H_k ⊗ (U_k V_kᵀ).
Tensor kron_phi(std::span<const KronBlock> blocks);

/// x·(Φ1 ⊙ W0 + Φ2) + bias0 with Φ materialized (bilinear or kronecker).
Tensor static_forward(const ReparamLayer& layer, const Tensor& x);
/// Per-row r×r Σ(x) = reshape(W2ᵀ relu(W1ᵀx + b1) + b2); x [N, C_in] → [N, r, r].
Tensor sigma_mlp_forward(const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2, const Tensor& x,
                         std::size_t rank);
/// Per-token y_t = x_t·(Φ1(x_t) ⊙ W0 + Φ2(x_t)) + bias0 with Φ_j(x) = U_j Σ_j(x) V_jᵀ.
Tensor dynamic_forward(const ReparamLayer& layer, const Tensor& x);
/// As dynamic_forward with the Hadamard product replaced by Φ1(x)·W0, where
/// Φ1(x) = I + U1 Σ1(x) V1ᵀ is [C_in×C_in].
Tensor matmul_ablation_forward(const ReparamLayer& layer, const Tensor& x);
/// Dispatches on layer.spec.kind.
Tensor reparam_forward(const ReparamLayer& layer, const Tensor& x);

}  // namespace mltd
