#include "mltd/checks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>

#include "mltd/error.hpp"
#include "mltd/gradcheck.hpp"
#include "mltd/metaloop.hpp"
#include "mltd/overlay.hpp"
#include "mltd/rng.hpp"
#include "mltd/tape.hpp"
#include "mltd/taskgen.hpp"

namespace mltd {

namespace {

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-5;
constexpr double kMamlTol = 1e-4;
// Central differences straddling a relu kink are meaningless; instances with
// a relu input this close to zero are redrawn. Likewise for layernorm rows
// with almost no spread, where the normalization is close to a step.
constexpr double kKinkMargin = 1e-2;
constexpr double kSpreadMargin = 5e-2;
constexpr std::size_t kMaxDraws = 200;

constexpr std::array<std::string_view, 5> kScopes = {"primitives", "tarp", "tams", "lm", "maml"};

// Normal draws pushed at least 0.2 away from zero, so piecewise ops (relu)
// are never probed across their kink.
Tensor away_from_zero(const Shape& shape, Rng& rng) {
  Tensor t = randn(shape, 1.0, rng);
  for (auto& v : t.mutable_data()) v = v < 0.0 ? v - 0.2 : v + 0.2;
  return t;
}

std::vector<int> random_ids(std::size_t n, std::size_t bound, Rng& rng) {
  std::vector<int> ids(n);
  for (auto& i : ids) i = static_cast<int>(rng() % bound);
  return ids;
}

std::vector<Sequence> random_sequences(std::size_t n, std::size_t len, std::size_t vocab, Rng& rng) {
  std::vector<Sequence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_ids(len, vocab, rng));
  return out;
}

bool smooth_at(const std::function<void()>& eval) {
  ops::reset_relu_margin();
  ops::reset_layernorm_margin();
  eval();
  return ops::relu_margin() >= kKinkMargin && ops::layernorm_margin() >= kSpreadMargin;
}

// Accumulates per-seed checks of one family into a single result.
class Family {
 public:
  Family(std::string scope, std::string name, double tol) {
    r_.scope = std::move(scope);
    r_.name = std::move(name);
    r_.tol = tol;
    r_.passed = true;
  }
  void add(double err) {
    r_.seeds += 1;
    if (std::isnan(err) || err > r_.max_rel_err) r_.max_rel_err = err;
    r_.passed = r_.passed && err <= r_.tol;
  }
  CheckResult result() const { return r_; }

 private:
  CheckResult r_;
};

// Gradient check over a named parameter set; `fn` sees the parameters
// rebuilt under their names.
GradCheckReport check_named(const NamedTensors& params, const std::function<Tensor(const NamedTensors&)>& fn,
                            double tol = kTol) {
  std::vector<std::string> names;
  std::vector<Tensor> values;
  for (const auto& [k, t] : params) {
    names.push_back(k);
    values.push_back(t);
  }
  auto wrapped = [&](std::span<const Tensor> p) {
    NamedTensors m;
    for (std::size_t i = 0; i < names.size(); ++i) m.emplace(names[i], p[i]);
    return fn(m);
  };
  return grad_check(wrapped, values, kStep, tol, names);
}

NamedTensors with_prefix(const NamedTensors& params, const std::string& prefix) {
  NamedTensors out;
  for (const auto& [k, t] : params) {
    if (k.rfind(prefix, 0) == 0) out.emplace(k.substr(prefix.size()), t);
  }
  return out;
}

// Every tensor replaced by N(0, stddev) noise, so identity-initialized
// factors exercise all gradient paths.
NamedTensors randomized(const NamedTensors& params, double stddev, Rng& rng) {
  NamedTensors out;
  for (const auto& [k, t] : params) out.emplace(k, randn(t.shape(), stddev, rng));
  return out;
}

ModelConfig lm_model() {
  ModelConfig m;
  m.vocab_size = 4;
  m.d_model = 4;
  m.n_layers = 2;
  m.n_heads = 2;
  m.d_ffn = 4;
  m.max_seq_len = 6;
  return m;
}

// Loss of `params` with α from the controller on a fixed representation
// (encode_task is detached, so it is not part of the differentiated map).
Tensor lm_overlay_loss(const ModelConfig& model, const OverlayConfig& ov, const NamedTensors& params,
                       const Tensor& repr, std::span<const Sequence> seqs) {
  Tensor alpha;
  if (ov.tams_enabled) alpha = controller_forward(with_prefix(params, "controller."), repr, ov.tams);
  Overlay hooks(model, ov, params, alpha);
  return sequence_loss(model, params, seqs, &hooks);
}

ModelConfig maml_model() {
  ModelConfig m;
  m.vocab_size = 3;
  m.d_model = 2;
  m.n_layers = 1;
  m.n_heads = 1;
  m.d_ffn = 2;
  m.max_seq_len = 6;
  return m;
}

std::vector<Task> maml_tasks(std::uint64_t seed) {
  std::vector<Task> tasks;
  for (std::uint32_t i = 0; i < 2; ++i) {
    DomainSpec dom = sample_domain(substream_seed(seed, "check.maml.domain", i), 3, 1.0, i);
    TaskSpec spec;
    spec.domain_id = i;
    spec.perturb_seed = substream_seed(seed, "check.maml.task", i);
    spec.n_train = 2;
    spec.n_val = 1;
    spec.n_test = 2;
    spec.seq_len = 5;
    tasks.push_back(sample_task(dom, spec, "t" + std::to_string(i)));
  }
  return tasks;
}

}  // namespace

PrimitiveCase primitive_case(ops::OpKind kind, std::uint64_t seed) {
  using ops::OpKind;
  Rng rng = substream(seed, "check.primitive", static_cast<std::uint64_t>(kind));
  PrimitiveCase c{kind, {}, {}, {}};
  auto& in = c.inputs;
  auto& at = c.attrs;
  const bool odd = seed % 2 == 1;
  switch (kind) {
    case OpKind::kMatmul:
      switch (seed % 4) {
        case 0:
          in = {randn({3, 4}, 1.0, rng), randn({4, 2}, 1.0, rng)};
          break;
        case 1:
          in = {randn({4, 3}, 1.0, rng), randn({4, 2}, 1.0, rng)};
          at.trans_a = true;
          break;
        case 2:
          in = {randn({3, 4}, 1.0, rng), randn({2, 4}, 1.0, rng)};
          at.trans_b = true;
          break;
        default:
          in = {randn({2, 3, 4}, 1.0, rng), randn({2, 4, 2}, 1.0, rng)};
          break;
      }
      break;
    case OpKind::kHadamard:
      in = {randn({3, 4}, 1.0, rng), randn(odd ? Shape{4} : Shape{3, 4}, 1.0, rng)};
      break;
    case OpKind::kAdd:
      in = odd ? std::vector<Tensor>{randn({3, 1}, 1.0, rng), randn({1, 4}, 1.0, rng)}
               : std::vector<Tensor>{randn({3, 4}, 1.0, rng), randn({3, 4}, 1.0, rng)};
      break;
    case OpKind::kScale:
      in = {randn({3, 4}, 1.0, rng)};
      at.scalar = randn({1}, 1.0, rng)[0];
      break;
    case OpKind::kSoftmax:
      switch (seed % 3) {
        case 0:
          in = {randn({3, 5}, 1.0, rng)};
          break;
        case 1:
          in = {randn({2, 4, 4}, 1.0, rng)};
          at.causal = true;
          break;
        default:
          in = {randn({4, 3}, 1.0, rng)};
          at.axis = 0;
          break;
      }
      break;
    case OpKind::kLayerNorm:
      in = {randn({3, 6}, 1.0, rng), randn({6}, 1.0, rng), randn({6}, 1.0, rng)};
      break;
    case OpKind::kRelu:
      in = {away_from_zero({3, 4}, rng)};
      break;
    case OpKind::kGlu:
      in = {randn({3, 6}, 1.0, rng)};
      break;
    case OpKind::kConv1dSame: {
      const std::size_t k = odd ? 5 : 3;
      in = {randn({2, 7, 3}, 1.0, rng), randn({k, 3, 4}, 1.0, rng)};
      at.causal = (seed / 2) % 2 == 1;
      break;
    }
    case OpKind::kEmbeddingLookup:
      in = {randn({5, 3}, 1.0, rng)};
      at.indices = random_ids(6, 5, rng);
      break;
    case OpKind::kReshape:
      in = {randn({3, 4}, 1.0, rng)};
      at.shape = odd ? Shape{2, 6} : Shape{12};
      break;
    case OpKind::kMean:
    case OpKind::kSum:
      in = {randn({3, 4}, 1.0, rng)};
      break;
    case OpKind::kCrossEntropyWithLogits:
      in = {randn({4, 5}, 1.0, rng)};
      at.indices = random_ids(4, 5, rng);
      break;
    case OpKind::kConcat:
      if (odd) {
        in = {randn({1, 3}, 1.0, rng), randn({2, 3}, 1.0, rng)};
        at.axis = 0;
      } else {
        in = {randn({2, 3}, 1.0, rng), randn({2, 2}, 1.0, rng), randn({2, 1}, 1.0, rng)};
        at.axis = 1;
      }
      break;
    case OpKind::kSlice:
      in = {randn({3, 5}, 1.0, rng)};
      at.axis = odd ? 0 : 1;
      at.start = 1;
      at.length = 2;
      break;
  }
  NoGradGuard guard;
  c.probe = randn(ops::apply_primitive(kind, in, at).shape(), 1.0, rng);
  return c;
}

std::vector<CheckResult> check_primitives(std::size_t n_seeds, std::uint64_t seed) {
  std::vector<CheckResult> out;
  for (auto kind : ops::all_op_kinds()) {
    Family fam("primitives", ops::op_name(kind), kTol);
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const auto c = primitive_case(kind, seed + s);
      auto fn = [&](std::span<const Tensor> p) {
        return ops::sum(ops::mul(ops::apply_primitive(c.kind, p, c.attrs), c.probe));
      };
      fam.add(grad_check(fn, c.inputs, kStep, kTol).max_rel_err());
    }
    out.push_back(fam.result());
  }
  return out;
}

std::vector<CheckResult> check_tarp(std::size_t n_seeds, std::uint64_t seed) {
  struct Variant {
    const char* name;
    DecompKind kind;
    bool additive_only;
  };
  const Variant variants[] = {{"bilinear", DecompKind::kBilinear, false},
                              {"bilinear_additive", DecompKind::kBilinear, true},
                              {"kronecker", DecompKind::kKronecker, false},
                              {"dynamic", DecompKind::kDynamic, false},
                              {"matmul_ablation", DecompKind::kMatmulAblation, false}};
  std::vector<CheckResult> out;
  for (const auto& v : variants) {
    Family fam("tarp", v.name, kTol);
    for (std::size_t s = 0; s < n_seeds; ++s) {
     for (std::size_t draw = 0;; ++draw) {
      Rng rng = substream(seed + s, std::string("check.tarp.") + v.name, draw);
      DecompSpec spec;
      spec.kind = v.kind;
      spec.rank = 2;
      spec.kron_n = 2;
      spec.sigma_hidden = 3;
      spec.additive_only = v.additive_only;
      const std::size_t cin = 6, cout = 4;
      NamedTensors params = randomized(init_factors(cin, cout, spec, rng), 0.5, rng);
      params["x"] = randn({5, cin}, 1.0, rng);
      params["w0"] = randn({cin, cout}, 1.0, rng);
      params["bias0"] = randn({cout}, 1.0, rng);
      const Tensor probe = randn({5, cout}, 1.0, rng);
      auto fn = [&](const NamedTensors& p) {
        ReparamLayer layer{p.at("w0"), p.at("bias0"), spec, {}};
        for (const auto& [k, t] : p) {
          if (k != "x" && k != "w0" && k != "bias0") layer.factors.emplace(k, t);
        }
        return ops::sum(ops::mul(reparam_forward(layer, p.at("x")), probe));
      };
      if (!smooth_at([&] { fn(params); }) && draw + 1 < kMaxDraws) continue;
      fam.add(check_named(params, fn).max_rel_err());
      break;
     }
    }
    out.push_back(fam.result());
  }
  return out;
}

std::vector<CheckResult> check_tams(std::size_t n_seeds, std::uint64_t seed) {
  ModelConfig model = lm_model();
  model.n_layers = 1;
  OverlayConfig ov;
  ov.tarp.kind = DecompKind::kFullFinetune;
  ov.tams_enabled = true;
  ov.tams.reduced_dim = 2;
  ov.tams.n_intermediate = 3;
  ov.tams.controller_hidden = 4;

  Family fam("tams", "controller_cell_lm", kTol);
  for (std::size_t s = 0; s < n_seeds; ++s) {
   for (std::size_t draw = 0;; ++draw) {
    Rng rng = substream(seed + s, "check.tams", draw);
    const std::uint64_t inst = substream_seed(seed + s, "check.tams.instance", draw);
    const NamedTensors base = build_model(model, inst).params;
    NamedTensors params = randomized(init_overlay(model, ov, inst), 0.5, rng);
    params["repr"] = randn({model.d_model}, 1.0, rng);
    const auto seqs = random_sequences(2, 6, model.vocab_size, rng);
    auto fn = [&](const NamedTensors& p) {
      NamedTensors all = base;
      for (const auto& [k, t] : p) all[k] = t;
      return lm_overlay_loss(model, ov, all, p.at("repr"), seqs);
    };
    if (!smooth_at([&] { fn(params); }) && draw + 1 < kMaxDraws) continue;
    fam.add(check_named(params, fn).max_rel_err());
    break;
   }
  }
  return {fam.result()};
}

std::vector<CheckResult> check_lm(std::size_t n_seeds, std::uint64_t seed) {
  struct Variant {
    const char* name;
    DecompKind kind;
    bool tams;
  };
  const Variant variants[] = {{"bare", DecompKind::kFullFinetune, false},
                              {"bilinear", DecompKind::kBilinear, false},
                              {"kronecker", DecompKind::kKronecker, false},
                              {"dynamic", DecompKind::kDynamic, false},
                              {"matmul_ablation", DecompKind::kMatmulAblation, false},
                              {"bilinear_tams", DecompKind::kBilinear, true},
                              {"dynamic_tams", DecompKind::kDynamic, true}};
  const ModelConfig model = lm_model();
  std::vector<CheckResult> out;
  for (const auto& v : variants) {
    OverlayConfig ov;
    ov.tarp.kind = v.kind;
    ov.tarp.rank = 1;
    ov.tarp.kron_n = 2;
    ov.tams_enabled = v.tams;
    ov.tams.reduced_dim = 2;
    ov.tams.n_intermediate = 1;
    ov.tams.controller_hidden = 4;
    Family fam("lm", v.name, kTol);
    for (std::size_t s = 0; s < n_seeds; ++s) {
     for (std::size_t draw = 0;; ++draw) {
      Rng rng = substream(seed + s, std::string("check.lm.") + v.name, draw);
      const std::uint64_t inst = substream_seed(seed + s, "check.lm.instance", draw);
      // base weights at a common scale too: 0.02 embeddings put every
      // layernorm row near zero spread
      NamedTensors params = randomized(build_model(model, inst).params, 0.5, rng);
      for (auto& [k, t] : randomized(init_overlay(model, ov, inst), 0.5, rng)) params.emplace(k, t);
      const Tensor repr = randn({model.d_model}, 1.0, rng);
      const auto seqs = random_sequences(2, 6, model.vocab_size, rng);
      auto fn = [&](const NamedTensors& p) { return lm_overlay_loss(model, ov, p, repr, seqs); };
      if (!smooth_at([&] { fn(params); }) && draw + 1 < kMaxDraws) continue;
      fam.add(check_named(params, fn).max_rel_err());
      break;
     }
    }
    out.push_back(fam.result());
  }
  return out;
}

std::vector<CheckResult> check_maml(std::size_t n_seeds, std::uint64_t seed) {
  struct Variant {
    const char* name;
    DecompKind kind;
    std::size_t inner_steps;
  };
  const Variant variants[] = {{"full_T1", DecompKind::kFullFinetune, 1},
                              {"full_T2", DecompKind::kFullFinetune, 2},
                              {"tarp_T1", DecompKind::kBilinear, 1},
                              {"tarp_T2", DecompKind::kBilinear, 2}};
  const ModelConfig model = maml_model();
  std::vector<CheckResult> out;
  Family zero_lr("maml", "zero_inner_lr", 1e-10);
  for (const auto& v : variants) {
    OverlayConfig ov;
    ov.tarp.kind = v.kind;
    ov.tarp.rank = 1;
    ov.attach = {"attn_q", "ffn_in"};
    MetaConfig cfg;
    cfg.meta_batch = 2;
    cfg.inner_steps = v.inner_steps;
    cfg.inner_lr = 0.5;
    cfg.order = MamlOrder::kSecond;
    MetaConfig value_cfg = cfg;
    value_cfg.order = MamlOrder::kFirst;

    Family fam("maml", v.name, kMamlTol);
    for (std::size_t s = 0; s < n_seeds; ++s) {
      MetaState st;
      std::vector<Task> tasks;
      std::vector<const Task*> batch;
      for (std::size_t draw = 0;; ++draw) {
        Rng rng = substream(seed + s, std::string("check.maml.") + v.name, draw);
        const std::uint64_t inst = substream_seed(seed + s, "check.maml.instance", draw);
        st = init_meta_state(model, ov, inst);
        // every weight redrawn at a common scale: with d_model = 2 the default
        // 0.02 embeddings leave layernorm nearly singular
        for (auto& [k, t] : st.params) t = randn(t.shape(), 0.5, rng);
        if (total_size(st.params) > 100) throw Error("maml check model exceeds 100 parameters");
        tasks = maml_tasks(inst);
        batch = {&tasks[0], &tasks[1]};
        if (smooth_at([&] { meta_gradient(batch, st, value_cfg); }) || draw + 1 == kMaxDraws) break;
      }

      const MetaGradient mg = meta_gradient(batch, st, cfg);
      double err = 0.0;
      for (auto& [k, t] : st.params) {
        const Tensor orig = t;
        const Tensor& g = mg.grads.at(k);
        for (std::size_t i = 0; i < orig.size(); ++i) {
          Tensor probe = orig.clone();
          probe.mutable_data()[i] = orig[i] + kStep;
          t = probe;
          const double fp = meta_gradient(batch, st, value_cfg).meta_loss;
          probe = orig.clone();
          probe.mutable_data()[i] = orig[i] - kStep;
          t = probe;
          const double fm = meta_gradient(batch, st, value_cfg).meta_loss;
          t = orig;
          err = std::max(err, grad_rel_err(g[i], (fp - fm) / (2.0 * kStep)));
        }
      }
      fam.add(err);

      // With η_in = 0 the meta-gradient is the plain gradient of Σ test losses.
      MetaConfig frozen = cfg;
      frozen.inner_lr = 0.0;
      const MetaGradient mg0 = meta_gradient(batch, st, frozen);
      Tape tape;
      TapeScope scope(tape);
      NamedTensors w = tape.watch(st.params);
      Tensor total = ops::add(overlay_loss(model, ov, w, tasks[0].test), overlay_loss(model, ov, w, tasks[1].test));
      const NamedTensors g0 = grad(total, w);
      double diff = 0.0;
      for (const auto& [k, g] : g0) {
        for (std::size_t i = 0; i < g.size(); ++i) diff = std::max(diff, std::abs(g[i] - mg0.grads.at(k)[i]));
      }
      zero_lr.add(diff);
    }
    out.push_back(fam.result());
  }
  out.push_back(zero_lr.result());
  return out;
}

std::span<const std::string_view> check_scopes() { return kScopes; }

std::vector<CheckResult> run_checks(std::string_view scope, std::size_t n_seeds, std::uint64_t seed) {
  if (scope == "primitives") return check_primitives(n_seeds, seed);
  if (scope == "tarp") return check_tarp(n_seeds, seed);
  if (scope == "tams") return check_tams(n_seeds, seed);
  if (scope == "lm") return check_lm(n_seeds, seed);
  if (scope == "maml") return check_maml(n_seeds, seed);
  throw ConfigError("unknown gradcheck scope '" + std::string(scope) + "'");
}

}  // namespace mltd
