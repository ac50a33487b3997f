#include "run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "mltd/error.hpp"

namespace mltd::cli {

namespace {

namespace pt = boost::property_tree;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_integer(const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError("expected a finite number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::string real_text(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <class T, class F>
std::string join(const std::vector<T>& items, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += fmt(items[i]);
  }
  return out;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
using Access = T& (*)(RunConfig&);

template <class T>
Key integer(std::string name, Access<T> at) {
  return {std::move(name), [at](RunConfig& c, const std::string& v) { at(c) = parse_integer<T>(v); },
          [at](const RunConfig& c) { return std::to_string(at(const_cast<RunConfig&>(c))); }};
}

Key real(std::string name, Access<double> at) {
  return {std::move(name), [at](RunConfig& c, const std::string& v) { at(c) = parse_real(v); },
          [at](const RunConfig& c) { return real_text(at(const_cast<RunConfig&>(c))); }};
}

Key boolean(std::string name, Access<bool> at) {
  return {std::move(name), [at](RunConfig& c, const std::string& v) { at(c) = parse_bool(v); },
          [at](const RunConfig& c) { return std::string(at(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

Key path(std::string name, Access<std::filesystem::path> at) {
  return {std::move(name), [at](RunConfig& c, const std::string& v) { at(c) = v; },
          [at](const RunConfig& c) { return at(const_cast<RunConfig&>(c)).string(); }};
}

Key sizes(std::string name, Access<std::vector<std::size_t>> at) {
  return {std::move(name),
          [at](RunConfig& c, const std::string& v) {
            std::vector<std::size_t> out;
            for (const auto& item : split_list(v)) out.push_back(parse_integer<std::size_t>(item));
            at(c) = std::move(out);
          },
          [at](const RunConfig& c) {
            return join(at(const_cast<RunConfig&>(c)), [](std::size_t x) { return std::to_string(x); });
          }};
}

struct Section {
  std::string name;  // "" for top-level keys
  std::vector<Key> keys;
};

const std::vector<Section>& schema() {
  static const std::vector<Section> sections = [] {
    std::vector<Section> s;
    s.push_back({"",
                 {integer<std::uint64_t>("seed", [](RunConfig& c) -> auto& { return c.seed; }),
                  path("out_dir", [](RunConfig& c) -> auto& { return c.out_dir; })}});
    s.push_back(
        {"model",
         {integer<std::size_t>("vocab_size", [](RunConfig& c) -> auto& { return c.model.vocab_size; }),
          integer<std::size_t>("d_model", [](RunConfig& c) -> auto& { return c.model.d_model; }),
          integer<std::size_t>("n_layers", [](RunConfig& c) -> auto& { return c.model.n_layers; }),
          integer<std::size_t>("n_heads", [](RunConfig& c) -> auto& { return c.model.n_heads; }),
          integer<std::size_t>("d_ffn", [](RunConfig& c) -> auto& { return c.model.d_ffn; }),
          integer<std::size_t>("max_seq_len", [](RunConfig& c) -> auto& { return c.model.max_seq_len; }),
          boolean("tied_head", [](RunConfig& c) -> auto& { return c.model.tied_head; }),
          {"dtype",
           [](RunConfig& c, const std::string& v) {
             if (v == "f64") c.model.dtype = DType::kFloat64;
             else if (v == "f32") c.model.dtype = DType::kFloat32;
             else throw ConfigError("expected f64 or f32, got '" + v + "'");
           },
           [](const RunConfig& c) { return std::string(c.model.dtype == DType::kFloat64 ? "f64" : "f32"); }}}});
    s.push_back(
        {"tarp",
         {{"kind", [](RunConfig& c, const std::string& v) { c.overlay.tarp.kind = parse_decomp(v); },
           [](const RunConfig& c) { return std::string(decomp_name(c.overlay.tarp.kind)); }},
          integer<std::size_t>("rank", [](RunConfig& c) -> auto& { return c.overlay.tarp.rank; }),
          integer<std::size_t>("kron_n", [](RunConfig& c) -> auto& { return c.overlay.tarp.kron_n; }),
          integer<std::size_t>("sigma_hidden", [](RunConfig& c) -> auto& { return c.overlay.tarp.sigma_hidden; }),
          boolean("additive_only", [](RunConfig& c) -> auto& { return c.overlay.tarp.additive_only; }),
          integer<std::size_t>("top_k", [](RunConfig& c) -> auto& { return c.overlay.tarp.top_k; }),
          {"attach",
           [](RunConfig& c, const std::string& v) {
             auto items = split_list(v);
             for (const auto& item : items)
               if (std::find(kDenseLayers.begin(), kDenseLayers.end(), item) == kDenseLayers.end())
                 throw ConfigError("unknown dense layer '" + item + "'");
             c.overlay.attach = std::move(items);
           },
           [](const RunConfig& c) { return join(c.overlay.attach, [](const std::string& x) { return x; }); }}}});
    s.push_back(
        {"tams",
         {boolean("enabled", [](RunConfig& c) -> auto& { return c.overlay.tams_enabled; }),
          integer<std::size_t>("reduced_dim", [](RunConfig& c) -> auto& { return c.overlay.tams.reduced_dim; }),
          integer<std::size_t>("n_intermediate", [](RunConfig& c) -> auto& { return c.overlay.tams.n_intermediate; }),
          integer<std::size_t>("controller_hidden",
                               [](RunConfig& c) -> auto& { return c.overlay.tams.controller_hidden; }),
          boolean("discrete", [](RunConfig& c) -> auto& { return c.overlay.discrete_alpha; })}});
    s.push_back(
        {"meta",
         {integer<std::size_t>("meta_batch", [](RunConfig& c) -> auto& { return c.meta.meta_batch; }),
          integer<std::size_t>("inner_steps", [](RunConfig& c) -> auto& { return c.meta.inner_steps; }),
          real("inner_lr", [](RunConfig& c) -> auto& { return c.meta.inner_lr; }),
          real("outer_lr", [](RunConfig& c) -> auto& { return c.meta.outer_lr; }),
          {"order", [](RunConfig& c, const std::string& v) { c.meta.order = parse_maml_order(v); },
           [](const RunConfig& c) { return std::string(maml_order_name(c.meta.order)); }},
          {"adapt_set", [](RunConfig& c, const std::string& v) { c.meta.adapt_set = parse_adapt_set(v); },
           [](const RunConfig& c) { return std::string(adapt_set_name(c.meta.adapt_set)); }},
          integer<std::size_t>("inner_batch", [](RunConfig& c) -> auto& { return c.meta.inner_batch; }),
          integer<std::size_t>("eval_every", [](RunConfig& c) -> auto& { return c.meta.eval_every; }),
          integer<std::size_t>("threads", [](RunConfig& c) -> auto& { return c.meta.threads; }),
          integer<std::size_t>("iterations", [](RunConfig& c) -> auto& { return c.meta_iters; }),
          integer<std::size_t>("checkpoint_every", [](RunConfig& c) -> auto& { return c.checkpoint_every; }),
          boolean("compact_checkpoints", [](RunConfig& c) -> auto& { return c.compact_checkpoints; })}});
    s.push_back({"pretrain",
                 {integer<std::size_t>("steps", [](RunConfig& c) -> auto& { return c.pretrain.steps; }),
                  real("lr", [](RunConfig& c) -> auto& { return c.pretrain.lr; }),
                  integer<std::size_t>("batch", [](RunConfig& c) -> auto& { return c.pretrain.batch; })}});
    s.push_back(
        {"tasks",
         {integer<std::size_t>("n_domains", [](RunConfig& c) -> auto& { return c.suite.n_domains; }),
          integer<std::size_t>("tasks_per_domain", [](RunConfig& c) -> auto& { return c.suite.tasks_per_domain; }),
          integer<std::size_t>("vocab", [](RunConfig& c) -> auto& { return c.suite.vocab; }),
          real("concentration", [](RunConfig& c) -> auto& { return c.suite.concentration; }),
          real("perturb_scale", [](RunConfig& c) -> auto& { return c.suite.perturb_scale; }),
          integer<std::size_t>("n_train", [](RunConfig& c) -> auto& { return c.suite.n_train; }),
          integer<std::size_t>("n_val", [](RunConfig& c) -> auto& { return c.suite.n_val; }),
          integer<std::size_t>("n_test", [](RunConfig& c) -> auto& { return c.suite.n_test; }),
          integer<std::size_t>("seq_len", [](RunConfig& c) -> auto& { return c.suite.seq_len; }),
          real("meta_val_fraction", [](RunConfig& c) -> auto& { return c.suite.meta_val_fraction; }),
          integer<std::size_t>("n_meta_test", [](RunConfig& c) -> auto& { return c.suite.n_meta_test; }),
          path("suite_dir", [](RunConfig& c) -> auto& { return c.suite_dir; }),
          path("corpus_dir", [](RunConfig& c) -> auto& { return c.corpus_dir; }),
          integer<std::size_t>("alphabet", [](RunConfig& c) -> auto& { return c.alphabet; }),
          real("train_ratio", [](RunConfig& c) -> auto& { return c.ratios.train; }),
          real("val_ratio", [](RunConfig& c) -> auto& { return c.ratios.val; }),
          real("test_ratio", [](RunConfig& c) -> auto& { return c.ratios.test; })}});
    s.push_back(
        {"experiment",
         {{"modes",
           [](RunConfig& c, const std::string& v) {
             std::vector<PipelineMode> out;
             for (const auto& item : split_list(v)) out.push_back(parse_pipeline(item));
             c.modes = std::move(out);
           },
           [](const RunConfig& c) { return join(c.modes, [](PipelineMode m) { return std::string(pipeline_name(m)); }); }},
          sizes("steps", [](RunConfig& c) -> auto& { return c.steps_grid; }),
          sizes("train_sizes", [](RunConfig& c) -> auto& { return c.train_sizes; }),
          real("finetune_lr", [](RunConfig& c) -> auto& { return c.finetune_lr; }),
          integer<std::size_t>("max_test_tasks", [](RunConfig& c) -> auto& { return c.max_test_tasks; }),
          boolean("per_task_rows", [](RunConfig& c) -> auto& { return c.per_task_rows; }),
          sizes("ranks", [](RunConfig& c) -> auto& { return c.ranks; }),
          integer<std::size_t>("sweep_steps", [](RunConfig& c) -> auto& { return c.sweep_steps; }),
          sizes("sweep_train_sizes", [](RunConfig& c) -> auto& { return c.sweep_train_sizes; })}});
    return s;
  }();
  return sections;
}

const Key& find_key(const std::string& section, const std::string& key) {
  for (const auto& s : schema()) {
    if (s.name != section) continue;
    for (const auto& k : s.keys)
      if (k.name == key) return k;
    throw ConfigError(section.empty() ? "unknown top-level key '" + key + "'"
                                      : "unknown key '" + key + "' in [" + section + "]");
  }
  throw ConfigError("unknown section [" + section + "]");
}

void assign(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value) {
  const Key& k = find_key(section, key);
  try {
    k.set(cfg, trim(value));
  } catch (const ConfigError& e) {
    throw ConfigError((section.empty() ? key : section + "." + key) + ": " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  overlay.validate(model);
  meta.validate();
  if (meta_iters == 0) throw ConfigError("meta.iterations must be >= 1");
  if (pretrain.batch == 0) throw ConfigError("pretrain.batch must be >= 1");
  if (!suite_dir.empty() && !corpus_dir.empty()) throw ConfigError("tasks.suite_dir and tasks.corpus_dir are exclusive");
  if (suite_dir.empty() && corpus_dir.empty()) {
    suite.validate();
    if (suite.vocab > model.vocab_size)
      throw ConfigError("tasks.vocab " + std::to_string(suite.vocab) + " exceeds model.vocab_size " +
                        std::to_string(model.vocab_size));
    if (suite.seq_len > model.max_seq_len) throw ConfigError("tasks.seq_len exceeds model.max_seq_len");
  }
  if (!corpus_dir.empty() && alphabet > model.vocab_size) throw ConfigError("tasks.alphabet exceeds model.vocab_size");
  if (steps_grid.empty() || train_sizes.empty()) throw ConfigError("experiment grids must not be empty");
  if (ranks.empty() || sweep_train_sizes.empty()) throw ConfigError("rank sweep grids must not be empty");
}

ExperimentConfig RunConfig::experiment() const {
  ExperimentConfig e;
  e.model = model;
  e.overlay = overlay;
  e.meta = meta;
  e.pretrain = pretrain;
  e.meta_iters = meta_iters;
  e.finetune_lr = finetune_lr;
  e.steps_grid = steps_grid;
  e.train_sizes = train_sizes;
  e.max_test_tasks = max_test_tasks;
  e.per_task_rows = per_task_rows;
  e.seed = seed;
  return e;
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig cfg;
  try {
    for (const auto& [name, node] : tree) {
      if (node.empty()) {
        const bool empty_section = std::any_of(schema().begin(), schema().end(),
                                               [&](const Section& s) { return s.name == name; });
        if (empty_section && node.data().empty()) continue;
        assign(cfg, "", name, node.data());
        continue;
      }
      find_key(name, node.begin()->first);  // reject the section before its keys
      for (const auto& [key, leaf] : node) assign(cfg, name, key, leaf.data());
    }
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string lhs = trim(std::string_view(assignment).substr(0, eq));
  const auto dot = lhs.find('.');
  const std::string section = dot == std::string::npos ? "" : lhs.substr(0, dot);
  const std::string key = dot == std::string::npos ? lhs : lhs.substr(dot + 1);
  assign(cfg, section, key, assignment.substr(eq + 1));
}

std::string render_run_config(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& s : schema()) {
    if (!s.name.empty()) out << "\n[" << s.name << "]\n";
    for (const auto& k : s.keys) out << k.name << " = " << k.get(cfg) << '\n';
  }
  return out.str();
}

}  // namespace mltd::cli
