#include "mltd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mltd/error.hpp"
#include "mltd/tape.hpp"

namespace mltd {

double GradCheckReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_err);
  return m;
}

double grad_rel_err(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double eval_plain(const ScalarFn& fn, std::span<const Tensor> params) {
  NoGradGuard guard;
  Tensor out = fn(params);
  if (out.size() != 1) throw DimensionError("grad_check: function must return a scalar");
  return out.item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& fn, std::span<const Tensor> params, double h, double tol,
                           std::span<const std::string> names) {
  for (const auto& p : params) {
    if (p.dtype() != DType::kFloat64) throw ConfigError("grad_check: parameters must be float64");
  }
  std::vector<Tensor> base;
  for (const auto& p : params) base.push_back(p.clone());

  const double f0 = eval_plain(fn, base);
  const double f1 = eval_plain(fn, base);
  if (std::memcmp(&f0, &f1, sizeof(double)) != 0) {
    throw Error("grad_check: function is not deterministic across identical calls");
  }

  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    std::vector<Tensor> watched;
    for (const auto& p : base) watched.push_back(tape.watch(p));
    Tensor out = fn(watched);
    if (out.size() != 1) throw DimensionError("grad_check: function must return a scalar");
    analytic = grad(out, watched);
  }

  GradCheckReport report;
  report.tol = tol;
  for (std::size_t k = 0; k < base.size(); ++k) {
    GradCheckEntry entry;
    entry.name = k < names.size() ? names[k] : "param" + std::to_string(k);
    auto values = base[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = eval_plain(fn, base);
      values[i] = orig - h;
      const double fm = eval_plain(fn, base);
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      entry.max_rel_err = std::max(entry.max_rel_err, grad_rel_err(analytic[k][i], numeric));
    }
    report.entries.push_back(std::move(entry));
  }
  report.passed = std::all_of(report.entries.begin(), report.entries.end(),
                              [tol](const GradCheckEntry& e) { return e.max_rel_err <= tol; });
  return report;
}

}  // namespace mltd
