#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mltd/tensor.hpp"

namespace mltd {

using Sequence = std::vector<int>;
/// Equal-length token sequences processed together.
using TokenBatch = std::vector<Sequence>;

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t d_model = 16;
  std::size_t n_layers = 1;
  std::size_t n_heads = 2;
  std::size_t d_ffn = 32;
  std::size_t max_seq_len = 64;
  bool tied_head = true;
  DType dtype = DType::kFloat64;

  void validate() const;
};

/// The six dense matrices of a block, in attachment order.
inline constexpr std::array<std::string_view, 6> kDenseLayers = {"attn_q", "attn_k", "attn_v",
                                                                 "attn_o", "ffn_in", "ffn_out"};

/// "blocks.<layer>.<which>"; weight key appends ".w", bias key ".b".
std::string dense_name(std::size_t layer, std::string_view which);
/// (C_in, C_out) of a dense matrix kind.
std::pair<std::size_t, std::size_t> dense_shape(const ModelConfig& cfg, std::string_view which);

/// Parameter count from the config alone.
std::size_t count_base_params(const ModelConfig& cfg);

struct BaseModel {
  ModelConfig cfg;
  NamedTensors params;
};

/// Deterministic init: N(0, 1/fan_in) dense weights, N(0, 0.02) embeddings,
/// zero biases, unit layernorm gains.
BaseModel build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Reroutes parts of the forward pass; the default implementation is the
/// bare model.
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;
  /// Replacement for the dense layer `layer` (x·w0 + b0), or nullopt.
  virtual std::optional<Tensor> dense(const std::string& layer, const Tensor& x, const Tensor& w0,
                                      const Tensor& b0) const;
  /// Extra branch added to block `layer`'s FFN output. `x` is the FFN input
  /// as [batch*steps, d_model].
  virtual std::optional<Tensor> ffn_branch(std::size_t layer, const Tensor& x, std::size_t batch,
                                           std::size_t steps) const;
};

/// Final-layernorm hidden states, [batch*steps, d_model].
Tensor forward_hidden(const ModelConfig& cfg, const NamedTensors& params, const TokenBatch& tokens,
                      const ForwardHooks* hooks = nullptr);
/// Next-token logits, [batch*steps, vocab].
Tensor forward_lm(const ModelConfig& cfg, const NamedTensors& params, const TokenBatch& tokens,
                  const ForwardHooks* hooks = nullptr);
inline Tensor forward_lm(const ModelConfig& cfg, const NamedTensors& params, const Sequence& tokens,
                         const ForwardHooks* hooks = nullptr) {
  return forward_lm(cfg, params, TokenBatch{tokens}, hooks);
}

/// Mean token-level negative log-likelihood.
Tensor lm_loss(const Tensor& logits, std::span<const int> targets);
double perplexity(double mean_nll);

/// Splits sequences into model inputs (all but the last token) and the
/// flattened next-token targets.
std::pair<TokenBatch, std::vector<int>> next_token_split(std::span<const Sequence> sequences);

/// Mean next-token NLL of `sequences`, which must share one length ≥ 2.
Tensor sequence_loss(const ModelConfig& cfg, const NamedTensors& params, std::span<const Sequence> sequences,
                     const ForwardHooks* hooks = nullptr);

}  // namespace mltd
