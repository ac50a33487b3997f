#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mltd/nanoformer.hpp"
#include "mltd/tams.hpp"
#include "mltd/tarp.hpp"

namespace mltd {

/// What is attached on top of the base model.
///
/// All parameters of a model with overlays live in one NamedTensors:
///   base keys              tok_emb, blocks.<l>.attn_q.w, ln_f.gain, ...
///   tarp.<layer>.<factor>  e.g. tarp.blocks.0.attn_q.phi2.U
///   tams.blocks.<l>.<key>  per-block cell weights
///   controller.<key>       architecture controller
struct OverlayConfig {
  DecompSpec tarp;
  /// Dense matrices that get reparameterized, by kDenseLayers name.
  std::vector<std::string> attach = {"attn_q", "attn_k", "attn_v", "attn_o", "ffn_in", "ffn_out"};
  bool tams_enabled = false;
  CellConfig tams;
  /// Use the argmax architecture instead of the soft mixture.
  bool discrete_alpha = false;

  bool tarp_attached() const noexcept { return is_reparam(tarp.kind); }
  void validate(const ModelConfig& model) const;
};

/// Which parameters the inner loop adapts.
enum class AdaptSet { kTarpOnly, kTarpPlusTams, kFull };
const char* adapt_set_name(AdaptSet set);
AdaptSet parse_adapt_set(std::string_view name);

std::string tarp_prefix(const std::string& layer);
bool is_base_key(const std::string& key);

/// Freshly initialized overlay parameters (identity TARP factors, zero-output
/// cells, controller); empty when nothing is attached.
NamedTensors init_overlay(const ModelConfig& model, const OverlayConfig& cfg, std::uint64_t seed);

/// Keys adapted per task. Reparameterizing kinds select tarp.* (plus
/// tams.* for kTarpPlusTams); the finetuning kinds select base weights
/// (biases, the last top_k blocks, or everything). kFull adds every base
/// key to the reparameterizing selection.
std::vector<std::string> adapt_keys(const NamedTensors& params, const ModelConfig& model, const OverlayConfig& cfg,
                                    AdaptSet set);

/// Forward hooks routing dense layers through TARP and adding TAMS cells.
class Overlay final : public ForwardHooks {
 public:
  /// `alpha` is required when cfg.tams_enabled.
  Overlay(const ModelConfig& model, const OverlayConfig& cfg, const NamedTensors& params, Tensor alpha = {});

  std::optional<Tensor> dense(const std::string& layer, const Tensor& x, const Tensor& w0,
                              const Tensor& b0) const override;
  std::optional<Tensor> ffn_branch(std::size_t layer, const Tensor& x, std::size_t batch,
                                   std::size_t steps) const override;

 private:
  OverlayConfig cfg_;
  std::map<std::string, NamedTensors> factors_;
  std::vector<NamedTensors> cells_;
  Tensor alpha_;
  std::vector<CellOp> arch_;
};

/// Architecture weights for a task: controller(encode_task(train)).
Tensor task_alpha(const ModelConfig& model, const OverlayConfig& cfg, const NamedTensors& params,
                  std::span<const Sequence> train);

/// Mean next-token NLL of `seqs` under base + overlays.
Tensor overlay_loss(const ModelConfig& model, const OverlayConfig& cfg, const NamedTensors& params,
                    std::span<const Sequence> seqs, const Tensor& alpha = {});

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t base = 0;
  double ratio() const { return base == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(base); }
};

/// Closed-form per-task trainable count relative to the base model: the
/// TARP factors of `cfg` (or the finetuning baseline it names), plus the
/// cells for kTarpPlusTams and the base weights for kFull.
ParamCount trainable_params(const ModelConfig& model, const OverlayConfig& cfg,
                            AdaptSet set = AdaptSet::kTarpOnly);
/// Closed-form TAMS overhead: all cells plus the controller, relative to base.
ParamCount tams_param_overhead(const ModelConfig& model, const CellConfig& cell);

}  // namespace mltd
