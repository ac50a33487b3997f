#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "mltd/nanoformer.hpp"
#include "mltd/rng.hpp"
#include "mltd/tarp.hpp"
#include "mltd/taskgen.hpp"
#include "mltd/tensor.hpp"

// Plain-loop reference implementations used as oracles. None of them goes
// through mltd::ops.
namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const mltd::Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

// Σ_a u[i][a] v[j][a]
inline Mat outer_sum(const Mat& u, const Mat& v) { return matmul(u, transpose(v)); }

// Dense Kronecker product, element by element.
inline Mat kron(const Mat& h, const Mat& m) {
  const std::size_t n = h.size(), p = m.size(), q = m[0].size();
  Mat out(n * p, std::vector<double>(h[0].size() * q, 0.0));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < h[0].size(); ++b)
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[a * p + i][b * q + j] = h[a][b] * m[i][j];
  return out;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) c[i][j] += b[i][j];
  return c;
}

inline double max_abs_diff(const mltd::Tensor& t, const Mat& m) {
  double d = 0.0;
  const std::size_t cols = m[0].size();
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) d = std::max(d, std::abs(t[i * cols + j] - m[i][j]));
  return d;
}

inline double max_abs_diff(const mltd::Tensor& a, const mltd::Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// Σ(x) of the two-layer Σ-MLP for one token.
inline Mat sigma_mlp(const std::vector<double>& x, const Mat& w1, const std::vector<double>& b1, const Mat& w2,
                     const std::vector<double>& b2, std::size_t r) {
  std::vector<double> h(b1);
  for (std::size_t j = 0; j < h.size(); ++j) {
    for (std::size_t i = 0; i < x.size(); ++i) h[j] += x[i] * w1[i][j];
    h[j] = std::max(h[j], 0.0);
  }
  Mat s(r, std::vector<double>(r));
  for (std::size_t a = 0; a < r; ++a)
    for (std::size_t b = 0; b < r; ++b) {
      double v = b2[a * r + b];
      for (std::size_t j = 0; j < h.size(); ++j) v += h[j] * w2[j][a * r + b];
      s[a][b] = v;
    }
  return s;
}

inline std::vector<double> vec(const mltd::Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline const mltd::Tensor& factor(const mltd::ReparamLayer& l, const std::string& key) { return l.factors.at(key); }

// Reparameterized dense layer, elementwise: y[t][o] = Σ_i x[t][i]·(Φ1[i][o]·W0[i][o] + Φ2[i][o]) + b[o]
inline Mat reparam_dense(const Mat& x, const Mat& phi1, const Mat& w0, const Mat& phi2, const std::vector<double>& b) {
  Mat y(x.size(), std::vector<double>(w0[0].size()));
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t o = 0; o < w0[0].size(); ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < w0.size(); ++i) acc += x[t][i] * (phi1[i][o] * w0[i][o] + phi2[i][o]);
      y[t][o] = acc;
    }
  return y;
}

inline Mat plus_one(Mat m) {
  for (auto& row : m)
    for (auto& v : row) v += 1.0;
  return m;
}

// Σ_k H_k ⊗ (U_k V_kᵀ) of path j.
inline Mat kron_oracle(const mltd::ReparamLayer& l, int j) {
  const std::size_t n = l.spec.kron_n;
  Mat total;
  for (std::size_t k = 0; k < n; ++k) {
    const std::string p = "phi" + std::to_string(j) + ".kron." + std::to_string(k) + ".";
    Mat term = kron(to_mat(factor(l, p + "H")), outer_sum(to_mat(factor(l, p + "U")), to_mat(factor(l, p + "V"))));
    total = total.empty() ? term : add(total, term);
  }
  return total;
}

inline Mat static_phi(const mltd::ReparamLayer& l, int j) {
  if (l.spec.kind == mltd::DecompKind::kKronecker) return kron_oracle(l, j);
  const std::string p = "phi" + std::to_string(j) + ".";
  return outer_sum(to_mat(factor(l, p + "U")), to_mat(factor(l, p + "V")));
}

inline Mat sigma_oracle(const mltd::ReparamLayer& l, int j, const std::vector<double>& x) {
  const std::string p = "phi" + std::to_string(j) + ".sigma.";
  return sigma_mlp(x, to_mat(factor(l, p + "w1")), vec(factor(l, p + "b1")), to_mat(factor(l, p + "w2")),
                   vec(factor(l, p + "b2")), l.spec.rank);
}

// Φ_j(x) = U_j Σ_j(x) V_jᵀ, materialized.
inline Mat dynamic_phi(const mltd::ReparamLayer& l, int j, const std::vector<double>& x) {
  const std::string p = "phi" + std::to_string(j) + ".";
  Mat us = matmul(to_mat(factor(l, p + "U")), sigma_oracle(l, j, x));
  return outer_sum(us, to_mat(factor(l, p + "V")));
}

}  // namespace oracle

namespace testing {

// Random layer with every factor drawn from N(0, 0.5), so no path is at
// its identity value.
inline mltd::ReparamLayer random_layer(mltd::DecompKind kind, std::size_t cin, std::size_t cout, std::size_t rank,
                                       std::uint64_t seed, std::size_t kron_n = 2) {
  mltd::Rng rng(seed);
  mltd::DecompSpec spec;
  spec.kind = kind;
  spec.rank = rank;
  spec.kron_n = kron_n;
  spec.sigma_hidden = rank + 1;
  mltd::ReparamLayer layer{mltd::randn({cin, cout}, 1.0, rng), mltd::randn({cout}, 1.0, rng), spec, {}};
  for (auto& [k, t] : mltd::init_factors(cin, cout, spec, rng)) layer.factors.emplace(k, mltd::randn(t.shape(), 0.5, rng));
  return layer;
}

inline mltd::ModelConfig tiny_model(std::size_t vocab = 8, std::size_t d = 8, std::size_t layers = 1) {
  mltd::ModelConfig m;
  m.vocab_size = vocab;
  m.d_model = d;
  m.n_layers = layers;
  m.n_heads = 2;
  m.d_ffn = 2 * d;
  m.max_seq_len = 32;
  return m;
}

inline std::vector<mltd::Sequence> random_sequences(std::size_t n, std::size_t len, std::size_t vocab,
                                                    std::uint64_t seed) {
  mltd::Rng rng(seed);
  std::vector<mltd::Sequence> out(n, mltd::Sequence(len));
  for (auto& s : out)
    for (auto& t : s) t = static_cast<int>(rng() % vocab);
  return out;
}

inline mltd::SuiteConfig tiny_suite(std::uint64_t seed, std::size_t vocab = 8) {
  mltd::SuiteConfig c;
  c.n_domains = 6;
  c.tasks_per_domain = 2;
  c.vocab = vocab;
  c.n_train = 4;
  c.n_val = 2;
  c.n_test = 4;
  c.seq_len = 12;
  c.n_meta_test = 3;
  c.meta_val_fraction = 0.2;
  c.seed = seed;
  return c;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("mltd-" + tag + "-" + std::to_string(std::hash<std::string>{}(tag) ^ counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  static std::uint64_t& counter() {
    static std::uint64_t c = static_cast<std::uint64_t>(::getpid()) << 20;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace testing
