#include "mltd/overlay.hpp"

#include <algorithm>

#include "mltd/error.hpp"
#include "mltd/ops.hpp"
#include "mltd/rng.hpp"

namespace mltd {

namespace {

bool starts_with(const std::string& s, std::string_view prefix) { return s.rfind(prefix, 0) == 0; }

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string cell_prefix(std::size_t layer) { return "tams.blocks." + std::to_string(layer) + "."; }

NamedTensors with_prefix_stripped(const NamedTensors& params, const std::string& prefix) {
  NamedTensors out;
  for (auto it = params.lower_bound(prefix); it != params.end() && starts_with(it->first, prefix); ++it) {
    out.emplace(it->first.substr(prefix.size()), it->second);
  }
  return out;
}

// Block index of a "blocks.<l>." key, or -1.
long block_of(const std::string& key) {
  if (!starts_with(key, "blocks.")) return -1;
  return std::stol(key.substr(7, key.find('.', 7) - 7));
}

std::size_t block_param_count(const ModelConfig& m) {
  const std::size_t d = m.d_model, f = m.d_ffn;
  return 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
}

}  // namespace

void OverlayConfig::validate(const ModelConfig& model) const {
  model.validate();
  for (const auto& which : attach) {
    const auto [cin, cout] = dense_shape(model, which);
    tarp.validate(cin, cout);
  }
  if (tarp.kind == DecompKind::kTopKLayers && (tarp.top_k < 1 || tarp.top_k > model.n_layers)) {
    throw ConfigError("top_k " + std::to_string(tarp.top_k) + " must lie in [1, n_layers]");
  }
  if (tams_enabled) tams.validate();
}

const char* adapt_set_name(AdaptSet set) {
  switch (set) {
    case AdaptSet::kTarpOnly:
      return "tarp_only";
    case AdaptSet::kTarpPlusTams:
      return "tarp_plus_tams";
    case AdaptSet::kFull:
      return "full";
  }
  return "?";
}

AdaptSet parse_adapt_set(std::string_view name) {
  for (auto s : {AdaptSet::kTarpOnly, AdaptSet::kTarpPlusTams, AdaptSet::kFull}) {
    if (name == adapt_set_name(s)) return s;
  }
  throw ConfigError("unknown adapt set '" + std::string(name) + "'");
}

std::string tarp_prefix(const std::string& layer) { return "tarp." + layer + "."; }

bool is_base_key(const std::string& key) {
  return !starts_with(key, "tarp.") && !starts_with(key, "tams.") && !starts_with(key, "controller.");
}

NamedTensors init_overlay(const ModelConfig& model, const OverlayConfig& cfg, std::uint64_t seed) {
  cfg.validate(model);
  NamedTensors out;
  if (cfg.tarp_attached()) {
    for (std::size_t l = 0; l < model.n_layers; ++l) {
      for (const auto& which : cfg.attach) {
        const std::string layer = dense_name(l, which);
        const auto [cin, cout] = dense_shape(model, which);
        Rng rng = substream(seed, "overlay.tarp." + layer);
        for (auto& [k, t] : init_factors(cin, cout, cfg.tarp, rng)) out.emplace(tarp_prefix(layer) + k, t);
      }
    }
  }
  if (cfg.tams_enabled) {
    for (std::size_t l = 0; l < model.n_layers; ++l) {
      Rng rng = substream(seed, "overlay.tams", l);
      for (auto& [k, t] : init_cell(model.d_model, cfg.tams, rng)) out.emplace(cell_prefix(l) + k, t);
    }
    Rng rng = substream(seed, "overlay.controller");
    for (auto& [k, t] : init_controller(model.d_model, cfg.tams, rng)) out.emplace("controller." + k, t);
  }
  return out;
}

std::vector<std::string> adapt_keys(const NamedTensors& params, const ModelConfig& model, const OverlayConfig& cfg,
                                    AdaptSet set) {
  std::vector<std::string> keys;
  for (const auto& [k, _] : params) {
    bool take = false;
    if (is_base_key(k)) {
      switch (cfg.tarp.kind) {
        case DecompKind::kBiasOnly:
          take = ends_with(k, ".b") || ends_with(k, ".bias");
          break;
        case DecompKind::kTopKLayers:
          take = block_of(k) >= static_cast<long>(model.n_layers - cfg.tarp.top_k);
          break;
        case DecompKind::kFullFinetune:
          take = true;
          break;
        default:
          take = set == AdaptSet::kFull;
          break;
      }
    } else if (starts_with(k, "tarp.")) {
      take = true;
    } else if (starts_with(k, "tams.")) {
      take = set != AdaptSet::kTarpOnly;
    }
    if (take) keys.push_back(k);
  }
  return keys;
}

Overlay::Overlay(const ModelConfig& model, const OverlayConfig& cfg, const NamedTensors& params, Tensor alpha)
    : cfg_(cfg), alpha_(std::move(alpha)) {
  if (cfg_.tarp_attached()) {
    for (std::size_t l = 0; l < model.n_layers; ++l) {
      for (const auto& which : cfg_.attach) {
        const std::string layer = dense_name(l, which);
        NamedTensors f = with_prefix_stripped(params, tarp_prefix(layer));
        if (f.empty()) throw ConfigError("no TARP factors for layer '" + layer + "'");
        factors_.emplace(layer, std::move(f));
      }
    }
  }
  if (cfg_.tams_enabled) {
    if (!alpha_.defined()) throw ConfigError("TAMS overlay needs architecture weights");
    for (std::size_t l = 0; l < model.n_layers; ++l) {
      cells_.push_back(with_prefix_stripped(params, cell_prefix(l)));
      if (cells_.back().empty()) throw ConfigError("no TAMS cell for block " + std::to_string(l));
    }
    if (cfg_.discrete_alpha) arch_ = argmax_arch(alpha_);
  }
}

std::optional<Tensor> Overlay::dense(const std::string& layer, const Tensor& x, const Tensor& w0,
                                     const Tensor& b0) const {
  auto it = factors_.find(layer);
  if (it == factors_.end()) return std::nullopt;
  return reparam_forward(ReparamLayer{w0, b0, cfg_.tarp, it->second}, x);
}

std::optional<Tensor> Overlay::ffn_branch(std::size_t layer, const Tensor& x, std::size_t batch,
                                          std::size_t steps) const {
  if (!cfg_.tams_enabled) return std::nullopt;
  if (cfg_.discrete_alpha) return discrete_cell_forward(cells_.at(layer), arch_, x, batch, steps, cfg_.tams);
  return cell_forward(cells_.at(layer), alpha_, x, batch, steps, cfg_.tams);
}

Tensor task_alpha(const ModelConfig& model, const OverlayConfig& cfg, const NamedTensors& params,
                  std::span<const Sequence> train) {
  NamedTensors base;
  for (const auto& [k, t] : params) {
    if (is_base_key(k)) base.emplace(k, t);
  }
  Tensor repr = encode_task(model, base, train);
  return controller_forward(with_prefix_stripped(params, "controller."), repr, cfg.tams);
}

Tensor overlay_loss(const ModelConfig& model, const OverlayConfig& cfg, const NamedTensors& params,
                    std::span<const Sequence> seqs, const Tensor& alpha) {
  if (!cfg.tarp_attached() && !cfg.tams_enabled) return sequence_loss(model, params, seqs);
  Overlay hooks(model, cfg, params, alpha);
  return sequence_loss(model, params, seqs, &hooks);
}

ParamCount trainable_params(const ModelConfig& model, const OverlayConfig& cfg, AdaptSet set) {
  ParamCount c;
  c.base = count_base_params(model);
  const std::size_t d = model.d_model, f = model.d_ffn;
  switch (cfg.tarp.kind) {
    case DecompKind::kBiasOnly:
      c.trainable = model.n_layers * (4 * d + f + d + 2 * d) + d;
      return c;
    case DecompKind::kTopKLayers:
      c.trainable = std::min(cfg.tarp.top_k, model.n_layers) * block_param_count(model);
      return c;
    case DecompKind::kFullFinetune:
      c.trainable = c.base;
      return c;
    default:
      break;
  }
  for (const auto& which : cfg.attach) {
    const auto [cin, cout] = dense_shape(model, which);
    c.trainable += model.n_layers * factor_count(cin, cout, cfg.tarp);
  }
  if (set != AdaptSet::kTarpOnly && cfg.tams_enabled) c.trainable += model.n_layers * cell_param_count(d, cfg.tams);
  if (set == AdaptSet::kFull) c.trainable += c.base;
  return c;
}

ParamCount tams_param_overhead(const ModelConfig& model, const CellConfig& cell) {
  ParamCount c;
  c.base = count_base_params(model);
  c.trainable = model.n_layers * cell_param_count(model.d_model, cell) + controller_param_count(model.d_model, cell);
  return c;
}

}  // namespace mltd
