#include "mltd/nanoformer.hpp"

#include <cmath>

#include "mltd/error.hpp"
#include "mltd/ops.hpp"
#include "mltd/rng.hpp"

namespace mltd {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ffn == 0 || max_seq_len == 0) {
    throw ConfigError("model: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model: d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
}

std::string dense_name(std::size_t layer, std::string_view which) {
  return "blocks." + std::to_string(layer) + "." + std::string(which);
}

std::pair<std::size_t, std::size_t> dense_shape(const ModelConfig& cfg, std::string_view which) {
  if (which == "ffn_in") return {cfg.d_model, cfg.d_ffn};
  if (which == "ffn_out") return {cfg.d_ffn, cfg.d_model};
  if (which == "attn_q" || which == "attn_k" || which == "attn_v" || which == "attn_o") {
    return {cfg.d_model, cfg.d_model};
  }
  throw ConfigError("unknown dense layer kind '" + std::string(which) + "'");
}

std::size_t count_base_params(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, f = cfg.d_ffn;
  const std::size_t block = 2 * d                 // ln1
                            + 4 * (d * d + d)     // q, k, v, o
                            + 2 * d               // ln2
                            + (d * f + f)         // ffn_in
                            + (f * d + d);        // ffn_out
  std::size_t n = cfg.vocab_size * d + cfg.max_seq_len * d + cfg.n_layers * block + 2 * d;
  if (!cfg.tied_head) n += d * cfg.vocab_size;
  return n;
}

BaseModel build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = substream(seed, "model.init");
  BaseModel model{cfg, {}};
  auto& p = model.params;
  const std::size_t d = cfg.d_model;
  p["tok_emb"] = randn({cfg.vocab_size, d}, 0.02, rng);
  p["pos_emb"] = randn({cfg.max_seq_len, d}, 0.02, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string prefix = "blocks." + std::to_string(l) + ".";
    p[prefix + "ln1.gain"] = Tensor::ones({d});
    p[prefix + "ln1.bias"] = Tensor::zeros({d});
    p[prefix + "ln2.gain"] = Tensor::ones({d});
    p[prefix + "ln2.bias"] = Tensor::zeros({d});
    for (auto which : kDenseLayers) {
      const auto [cin, cout] = dense_shape(cfg, which);
      const std::string name = dense_name(l, which);
      p[name + ".w"] = randn({cin, cout}, 1.0 / std::sqrt(static_cast<double>(cin)), rng);
      p[name + ".b"] = Tensor::zeros({cout});
    }
  }
  p["ln_f.gain"] = Tensor::ones({d});
  p["ln_f.bias"] = Tensor::zeros({d});
  if (!cfg.tied_head) p["head.w"] = randn({d, cfg.vocab_size}, 0.02, rng);
  if (cfg.dtype == DType::kFloat32) {
    for (auto& [_, t] : p) t = t.to(DType::kFloat32);
  }
  return model;
}

std::optional<Tensor> ForwardHooks::dense(const std::string&, const Tensor&, const Tensor&, const Tensor&) const {
  return std::nullopt;
}

std::optional<Tensor> ForwardHooks::ffn_branch(std::size_t, const Tensor&, std::size_t, std::size_t) const {
  return std::nullopt;
}

namespace {

const Tensor& param(const NamedTensors& p, const std::string& key) {
  auto it = p.find(key);
  if (it == p.end()) throw ConfigError("model parameter '" + key + "' missing");
  return it->second;
}

Tensor dense(const NamedTensors& p, const std::string& layer, const Tensor& x, const ForwardHooks* hooks) {
  const Tensor& w = param(p, layer + ".w");
  const Tensor& b = param(p, layer + ".b");
  if (hooks != nullptr) {
    if (auto y = hooks->dense(layer, x, w, b)) return *y;
  }
  return ops::add(ops::matmul(x, w), b);
}

// [B*T, d] -> [B*H, T, dh]
Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t steps, std::size_t heads) {
  const std::size_t dh = x.dim(1) / heads;
  Tensor t = ops::permute(ops::reshape(x, {batch, steps, heads, dh}), {0, 2, 1, 3});
  return ops::reshape(t, {batch * heads, steps, dh});
}

// [B*H, T, dh] -> [B*T, d]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t steps, std::size_t heads) {
  const std::size_t dh = x.dim(2);
  Tensor t = ops::permute(ops::reshape(x, {batch, heads, steps, dh}), {0, 2, 1, 3});
  return ops::reshape(t, {batch * steps, heads * dh});
}

}  // namespace

Tensor forward_hidden(const ModelConfig& cfg, const NamedTensors& p, const TokenBatch& tokens,
                      const ForwardHooks* hooks) {
  if (tokens.empty()) throw DimensionError("forward: empty batch");
  const std::size_t batch = tokens.size();
  const std::size_t steps = tokens.front().size();
  if (steps == 0 || steps > cfg.max_seq_len) {
    throw DimensionError("forward: sequence length " + std::to_string(steps) + " outside [1, " +
                         std::to_string(cfg.max_seq_len) + "]");
  }
  std::vector<int> ids;
  std::vector<int> positions;
  ids.reserve(batch * steps);
  positions.reserve(batch * steps);
  for (const auto& seq : tokens) {
    if (seq.size() != steps) throw DimensionError("forward: sequences in a batch must share one length");
    for (std::size_t t = 0; t < steps; ++t) {
      if (seq[t] < 0 || static_cast<std::size_t>(seq[t]) >= cfg.vocab_size) {
        throw DimensionError("forward: token id " + std::to_string(seq[t]) + " outside vocabulary of size " +
                             std::to_string(cfg.vocab_size));
      }
      ids.push_back(seq[t]);
      positions.push_back(static_cast<int>(t));
    }
  }

  const std::size_t heads = cfg.n_heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model / heads));
  Tensor h = ops::add(ops::embedding(param(p, "tok_emb"), ids), ops::embedding(param(p, "pos_emb"), positions));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string prefix = "blocks." + std::to_string(l) + ".";
    Tensor a_in = ops::layernorm(h, param(p, prefix + "ln1.gain"), param(p, prefix + "ln1.bias"));
    Tensor q = split_heads(dense(p, dense_name(l, "attn_q"), a_in, hooks), batch, steps, heads);
    Tensor k = split_heads(dense(p, dense_name(l, "attn_k"), a_in, hooks), batch, steps, heads);
    Tensor v = split_heads(dense(p, dense_name(l, "attn_v"), a_in, hooks), batch, steps, heads);
    Tensor att = ops::softmax(ops::scale(ops::matmul(q, k, false, true), attn_scale), -1, /*causal=*/true);
    Tensor ctx = merge_heads(ops::matmul(att, v), batch, steps, heads);
    h = ops::add(h, dense(p, dense_name(l, "attn_o"), ctx, hooks));

    Tensor f_in = ops::layernorm(h, param(p, prefix + "ln2.gain"), param(p, prefix + "ln2.bias"));
    Tensor f = dense(p, dense_name(l, "ffn_out"), ops::relu(dense(p, dense_name(l, "ffn_in"), f_in, hooks)), hooks);
    if (hooks != nullptr) {
      if (auto extra = hooks->ffn_branch(l, f_in, batch, steps)) f = ops::add(f, *extra);
    }
    h = ops::add(h, f);
  }
  return ops::layernorm(h, param(p, "ln_f.gain"), param(p, "ln_f.bias"));
}

Tensor forward_lm(const ModelConfig& cfg, const NamedTensors& p, const TokenBatch& tokens,
                  const ForwardHooks* hooks) {
  Tensor h = forward_hidden(cfg, p, tokens, hooks);
  if (cfg.tied_head) return ops::matmul(h, param(p, "tok_emb"), false, true);
  return ops::matmul(h, param(p, "head.w"));
}

Tensor lm_loss(const Tensor& logits, std::span<const int> targets) {
  return ops::mean(ops::cross_entropy(logits, targets));
}

double perplexity(double mean_nll) { return std::exp(mean_nll); }

std::pair<TokenBatch, std::vector<int>> next_token_split(std::span<const Sequence> sequences) {
  TokenBatch inputs;
  std::vector<int> targets;
  inputs.reserve(sequences.size());
  for (const auto& s : sequences) {
    if (s.size() < 2) throw DimensionError("next-token split needs sequences of length >= 2");
    inputs.emplace_back(s.begin(), s.end() - 1);
    targets.insert(targets.end(), s.begin() + 1, s.end());
  }
  return {std::move(inputs), std::move(targets)};
}

Tensor sequence_loss(const ModelConfig& cfg, const NamedTensors& params, std::span<const Sequence> sequences,
                     const ForwardHooks* hooks) {
  auto [inputs, targets] = next_token_split(sequences);
  return lm_loss(forward_lm(cfg, params, inputs, hooks), targets);
}

}  // namespace mltd
