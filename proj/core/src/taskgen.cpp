#include "mltd/taskgen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "binio.hpp"
#include "mltd/error.hpp"
#include "mltd/rng.hpp"

namespace mltd {

namespace {

constexpr char kTaskMagic[] = "MLTDTASK";
constexpr std::uint32_t kTaskVersion = 1;

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int sample_index(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  // u landed in the rounding slack above the last cumulative sum
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return static_cast<int>(i);
  }
  throw NumericError("cannot sample from an all-zero distribution");
}

void check_square(std::span<const double> transition, std::size_t vocab) {
  if (vocab < 1 || transition.size() != vocab * vocab) {
    throw DimensionError("transition matrix has " + std::to_string(transition.size()) + " entries, expected " +
                         std::to_string(vocab) + "^2");
  }
}

void check_vocab(std::size_t vocab) {
  if (vocab < 2 || vocab > 64) throw ConfigError("alphabet size " + std::to_string(vocab) + " outside [2, 64]");
}

std::vector<Sequence> rollouts(const std::vector<double>& transition, const std::vector<double>& initial,
                               std::size_t vocab, std::size_t count, std::size_t length, std::uint64_t seed,
                               std::string_view split) {
  std::vector<Sequence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(markov_rollout(transition, initial, vocab, length, substream_seed(seed, split, i)));
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

DomainSpec sample_domain(std::uint64_t seed, std::size_t vocab, double concentration, std::uint32_t id) {
  check_vocab(vocab);
  if (!(concentration > 0.0) || !std::isfinite(concentration)) {
    throw ConfigError("Dirichlet concentration must be positive and finite");
  }
  Rng rng = substream(seed, "domain", id);
  std::gamma_distribution<double> gamma(concentration, 1.0);
  DomainSpec d{id, vocab, concentration, std::vector<double>(vocab * vocab)};
  for (std::size_t s = 0; s < vocab; ++s) {
    double total = 0.0;
    for (std::size_t t = 0; t < vocab; ++t) {
      // tiny concentrations can underflow a gamma draw to 0; rows must stay positive
      const double g = std::max(gamma(rng), std::numeric_limits<double>::min());
      d.transition[s * vocab + t] = g;
      total += g;
    }
    for (std::size_t t = 0; t < vocab; ++t) d.transition[s * vocab + t] /= total;
  }
  return d;
}

std::vector<double> perturb_transition(std::span<const double> transition, std::size_t vocab, std::uint64_t seed,
                                       double scale) {
  check_square(transition, vocab);
  std::vector<double> out(transition.begin(), transition.end());
  if (scale == 0.0) return out;
  Rng rng = substream(seed, "perturb");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> a(vocab), b(vocab);
  for (auto& v : a) v = normal(rng);
  for (auto& v : b) v = normal(rng);
  for (std::size_t s = 0; s < vocab; ++s) {
    double total = 0.0;
    for (std::size_t t = 0; t < vocab; ++t) {
      double& p = out[s * vocab + t];
      p *= std::exp(scale * a[s] * b[t]);
      total += p;
    }
    for (std::size_t t = 0; t < vocab; ++t) out[s * vocab + t] /= total;
  }
  return out;
}

Sequence markov_rollout(std::span<const double> transition, std::span<const double> initial, std::size_t vocab,
                        std::size_t length, std::uint64_t seed) {
  check_square(transition, vocab);
  if (initial.size() != vocab) throw DimensionError("initial distribution size does not match alphabet");
  Rng rng(seed);
  Sequence seq;
  seq.reserve(length);
  if (length == 0) return seq;
  seq.push_back(sample_index(initial, rng));
  while (seq.size() < length) {
    const auto row = transition.subspan(static_cast<std::size_t>(seq.back()) * vocab, vocab);
    seq.push_back(sample_index(row, rng));
  }
  return seq;
}

Task sample_task(const DomainSpec& domain, const TaskSpec& spec, std::string id) {
  check_vocab(domain.vocab);
  if (spec.n_train < 1) throw ConfigError("a task needs at least one training sequence");
  if (spec.seq_len < 2) throw ConfigError("sequence length must be >= 2");
  if (!(spec.perturb_scale >= 0.0)) throw ConfigError("perturbation scale must be >= 0");
  Task task;
  task.id = id.empty() ? "d" + std::to_string(domain.id) + "-" + std::to_string(spec.perturb_seed) : std::move(id);
  task.domain = domain.id;
  task.vocab = domain.vocab;
  task.transition = perturb_transition(domain.transition, domain.vocab, spec.perturb_seed, spec.perturb_scale);
  const auto pi = stationary_distribution(task.transition, task.vocab);
  task.entropy_rate = entropy_rate(task.transition, task.vocab);
  task.train = rollouts(task.transition, pi, task.vocab, spec.n_train, spec.seq_len, spec.perturb_seed, "split.train");
  task.val = rollouts(task.transition, pi, task.vocab, spec.n_val, spec.seq_len, spec.perturb_seed, "split.val");
  task.test = rollouts(task.transition, pi, task.vocab, spec.n_test, spec.seq_len, spec.perturb_seed, "split.test");
  return task;
}

std::vector<double> stationary_distribution(std::span<const double> transition, std::size_t vocab) {
  check_square(transition, vocab);
  // irreducibility: every state reaches every other along positive entries
  for (std::size_t start = 0; start < vocab; ++start) {
    std::vector<char> seen(vocab, 0);
    std::vector<std::size_t> stack{start};
    seen[start] = 1;
    std::size_t reached = 1;
    while (!stack.empty()) {
      const std::size_t s = stack.back();
      stack.pop_back();
      for (std::size_t t = 0; t < vocab; ++t) {
        if (transition[s * vocab + t] > 0.0 && !seen[t]) {
          seen[t] = 1;
          ++reached;
          stack.push_back(t);
        }
      }
    }
    if (reached != vocab) {
      throw ConfigError("Markov chain is not irreducible: state " + std::to_string(start) + " reaches only " +
                        std::to_string(reached) + " of " + std::to_string(vocab) + " states");
    }
  }
  std::vector<double> pi(vocab, 1.0 / static_cast<double>(vocab)), next(vocab);
  for (int iter = 0; iter < 1000000; ++iter) {
    for (std::size_t t = 0; t < vocab; ++t) next[t] = 0.5 * pi[t];
    for (std::size_t s = 0; s < vocab; ++s) {
      for (std::size_t t = 0; t < vocab; ++t) next[t] += 0.5 * pi[s] * transition[s * vocab + t];
    }
    double total = 0.0, delta = 0.0;
    for (double v : next) total += v;
    for (std::size_t t = 0; t < vocab; ++t) {
      next[t] /= total;
      delta = std::max(delta, std::abs(next[t] - pi[t]));
    }
    pi.swap(next);
    if (delta < 1e-14) break;
  }
  return pi;
}

double entropy_rate(std::span<const double> transition, std::size_t vocab) {
  const auto pi = stationary_distribution(transition, vocab);
  double h = 0.0;
  for (std::size_t s = 0; s < vocab; ++s) {
    double row = 0.0;
    for (std::size_t t = 0; t < vocab; ++t) {
      const double p = transition[s * vocab + t];
      if (p > 0.0) row -= p * std::log(p);
    }
    h += pi[s] * row;
  }
  return h;
}

std::vector<Task> load_text_tasks(const std::filesystem::path& directory, const SplitRatios& ratios,
                                  std::size_t seq_len, std::size_t alphabet) {
  namespace fs = std::filesystem;
  if (alphabet < 2 || alphabet > 256) throw ConfigError("text alphabet must lie in [2, 256]");
  if (seq_len < 2) throw ConfigError("sequence length must be >= 2");
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || ratios.train + ratios.val + ratios.test <= 0) {
    throw ConfigError("split ratios must be non-negative with a positive sum");
  }
  std::error_code ec;
  if (!fs::is_directory(directory, ec)) throw IoError("'" + directory.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(directory)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  const double total_ratio = ratios.train + ratios.val + ratios.test;
  std::vector<Task> tasks;
  for (const auto& path : files) {
    const auto bytes = binio::read_file(path);
    std::vector<Sequence> chunks;
    for (std::size_t start = 0; start + seq_len <= bytes.size(); start += seq_len) {
      Sequence s(seq_len);
      for (std::size_t i = 0; i < seq_len; ++i) {
        s[i] = std::min<int>(bytes[start + i], static_cast<int>(alphabet) - 1);
      }
      chunks.push_back(std::move(s));
    }
    const std::size_t n = chunks.size();
    const auto n_train = static_cast<std::size_t>(std::floor(n * ratios.train / total_ratio));
    const auto n_val = static_cast<std::size_t>(std::floor(n * ratios.val / total_ratio));
    Task t;
    t.id = path.filename().string();
    t.vocab = alphabet;
    t.entropy_rate = std::numeric_limits<double>::quiet_NaN();
    t.train.assign(chunks.begin(), chunks.begin() + n_train);
    t.val.assign(chunks.begin() + n_train, chunks.begin() + n_train + n_val);
    t.test.assign(chunks.begin() + n_train + n_val, chunks.end());
    tasks.push_back(std::move(t));
  }
  return tasks;
}

void SuiteConfig::validate() const {
  check_vocab(vocab);
  if (n_domains < 1 || tasks_per_domain < 1) throw ConfigError("suite needs at least one domain and task");
  if (!(concentration > 0.0)) throw ConfigError("concentration must be positive");
  if (!(perturb_scale >= 0.0)) throw ConfigError("perturb_scale must be >= 0");
  if (n_train < 1 || n_test < 1) throw ConfigError("tasks need non-empty train and test splits");
  if (seq_len < 2) throw ConfigError("seq_len must be >= 2");
  if (!(meta_val_fraction >= 0.0 && meta_val_fraction < 1.0)) throw ConfigError("meta_val_fraction must lie in [0, 1)");
  const std::size_t total = n_domains * tasks_per_domain;
  const auto n_val = static_cast<std::size_t>(std::llround(meta_val_fraction * static_cast<double>(total)));
  if (n_meta_test + n_val >= total) {
    throw ConfigError("suite of " + std::to_string(total) + " tasks leaves no meta-training tasks after " +
                      std::to_string(n_meta_test) + " meta-test and " + std::to_string(n_val) + " meta-val tasks");
  }
}

TaskSuite generate_suite(const SuiteConfig& cfg) {
  cfg.validate();
  std::vector<Task> all;
  for (std::size_t d = 0; d < cfg.n_domains; ++d) {
    const auto domain = sample_domain(cfg.seed, cfg.vocab, cfg.concentration, static_cast<std::uint32_t>(d));
    for (std::size_t k = 0; k < cfg.tasks_per_domain; ++k) {
      TaskSpec spec;
      spec.domain_id = domain.id;
      spec.perturb_seed = substream_seed(cfg.seed, "task", d * cfg.tasks_per_domain + k);
      spec.perturb_scale = cfg.perturb_scale;
      spec.n_train = cfg.n_train;
      spec.n_val = cfg.n_val;
      spec.n_test = cfg.n_test;
      spec.seq_len = cfg.seq_len;
      char id[32];
      std::snprintf(id, sizeof id, "d%03zu-t%02zu", d, k);
      all.push_back(sample_task(domain, spec, id));
    }
  }
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = substream(cfg.seed, "suite.roles");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.meta_val_fraction * static_cast<double>(all.size())));

  TaskSuite suite;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < cfg.n_meta_test ? suite.meta_test : (i < cfg.n_meta_test + n_val ? suite.meta_val : suite.meta_train);
    dst.push_back(std::move(all[order[i]]));
  }
  for (auto* role : {&suite.meta_train, &suite.meta_val, &suite.meta_test}) {
    std::sort(role->begin(), role->end(), [](const Task& a, const Task& b) { return a.id < b.id; });
  }
  return suite;
}

void save_task(const Task& task, const std::filesystem::path& path) {
  if (task.vocab < 1 || task.vocab > 256) throw ConfigError("task alphabet must fit in a byte");
  std::vector<std::uint8_t> out;
  binio::put_bytes(out, std::string_view(kTaskMagic, 8));
  binio::put<std::uint32_t>(out, kTaskVersion);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(task.vocab));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(task.train.size()));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(task.val.size()));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(task.test.size()));
  for (const auto* split : {&task.train, &task.val, &task.test}) {
    for (const auto& seq : *split) {
      binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.size()));
      for (int tok : seq) {
        if (tok < 0 || static_cast<std::size_t>(tok) >= task.vocab) {
          throw ConfigError("task '" + task.id + "' has token " + std::to_string(tok) + " outside its alphabet");
        }
        out.push_back(static_cast<std::uint8_t>(tok));
      }
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("error writing '" + path.string() + "'");
}

Task load_task(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  binio::Reader r(bytes.data(), bytes.size());
  r.section("task header");
  if (r.get_bytes(8) != std::string_view(kTaskMagic, 8)) r.fail("bad magic in '" + path.string() + "'");
  const auto version = r.get<std::uint32_t>();
  if (version != kTaskVersion) {
    throw UnsupportedVersionError("task header", "unsupported task file version " + std::to_string(version));
  }
  Task t;
  t.id = path.stem().string();
  t.vocab = r.get<std::uint32_t>();
  t.entropy_rate = std::numeric_limits<double>::quiet_NaN();
  const std::uint32_t counts[3] = {r.get<std::uint32_t>(), r.get<std::uint32_t>(), r.get<std::uint32_t>()};
  std::vector<Sequence>* splits[3] = {&t.train, &t.val, &t.test};
  const char* names[3] = {"train split", "val split", "test split"};
  for (int s = 0; s < 3; ++s) {
    r.section(names[s]);
    for (std::uint32_t i = 0; i < counts[s]; ++i) {
      const auto len = r.get<std::uint32_t>();
      const std::uint8_t* p = r.take(len);
      Sequence seq(p, p + len);
      for (int tok : seq) {
        if (static_cast<std::size_t>(tok) >= t.vocab) r.fail("token " + std::to_string(tok) + " outside alphabet");
      }
      splits[s]->push_back(std::move(seq));
    }
  }
  if (r.remaining() != 0) {
    r.section("trailer");
    r.fail(std::to_string(r.remaining()) + " unexpected trailing bytes");
  }
  return t;
}

void save_suite(const TaskSuite& suite, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  std::ostringstream manifest;
  manifest << "id\trole\tdomain\tentropy_rate\n";
  const std::pair<const char*, const std::vector<Task>*> roles[] = {
      {"meta_train", &suite.meta_train}, {"meta_val", &suite.meta_val}, {"meta_test", &suite.meta_test}};
  for (const auto& [role, tasks] : roles) {
    for (const auto& t : *tasks) {
      save_task(t, directory / (t.id + ".task"));
      manifest << t.id << '\t' << role << '\t' << t.domain << '\t' << format_double(t.entropy_rate) << '\n';
    }
  }
  std::ofstream f(directory / "suite.tsv", std::ios::trunc);
  if (!f) throw IoError("cannot write '" + (directory / "suite.tsv").string() + "'");
  f << manifest.str();
}

TaskSuite load_suite(const std::filesystem::path& directory) {
  const auto manifest_path = directory / "suite.tsv";
  std::ifstream f(manifest_path);
  if (!f) throw IoError("cannot open '" + manifest_path.string() + "'");
  std::string line;
  std::getline(f, line);
  if (line != "id\trole\tdomain\tentropy_rate") throw FormatError("suite manifest", "unexpected header line");
  TaskSuite suite;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string id, role, domain, entropy;
    if (!std::getline(fields, id, '\t') || !std::getline(fields, role, '\t') || !std::getline(fields, domain, '\t') ||
        !std::getline(fields, entropy)) {
      throw FormatError("suite manifest", "line " + std::to_string(lineno) + " needs 4 tab-separated fields");
    }
    Task t = load_task(directory / (id + ".task"));
    t.domain = static_cast<std::uint32_t>(std::stoul(domain));
    t.entropy_rate = entropy == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(entropy);
    if (role == "meta_train") {
      suite.meta_train.push_back(std::move(t));
    } else if (role == "meta_val") {
      suite.meta_val.push_back(std::move(t));
    } else if (role == "meta_test") {
      suite.meta_test.push_back(std::move(t));
    } else {
      throw FormatError("suite manifest", "unknown role '" + role + "' on line " + std::to_string(lineno));
    }
  }
  return suite;
}

}  // namespace mltd
