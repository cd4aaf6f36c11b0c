#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fcvae/autodiff.hpp"

namespace fcvae {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor for the relative error, so that entries whose true
  // gradient is ~0 are judged on absolute error against this scale.
  double magnitude_floor = 1e-6;
};

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  GradCheckOptions options;
  bool pass = true;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares reverse-mode gradients of a scalar function against central
// differences (f(x+h) - f(x-h)) / 2h, element by element, for each of the
// given parameters. `f` must build its graph on the supplied tape and be a
// deterministic function of the parameter values.
inline GradCheckReport grad_check(const std::vector<Parameter*>& inputs, const std::function<Var(Tape&)>& f,
                                  GradCheckOptions opts = {}) {
  auto eval = [&](const std::string& where) {
    Tape tape;
    tape.set_grad_enabled(false);
    const double v = f(tape).value().item();
    if (!std::isfinite(v)) throw EvaluationError("non-finite function value at probe " + where);
    return v;
  };

  for (Parameter* p : inputs) {
    if (!p->tensor.requires_grad) p->tensor.enable_grad();
    p->tensor.zero_grad();
  }
  {
    Tape tape;
    Var y = f(tape);
    if (!y.value().all_finite()) throw EvaluationError("non-finite function value at the base point");
    tape.backward(y);
  }

  GradCheckReport report;
  report.options = opts;
  for (Parameter* p : inputs) {
    GradCheckEntry e;
    e.name = p->name;
    e.elements = p->tensor.size();
    auto& data = p->tensor.storage();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + opts.step;
      const double fp = eval(p->name + "[" + std::to_string(i) + "]+h");
      data[i] = orig - opts.step;
      const double fm = eval(p->name + "[" + std::to_string(i) + "]-h");
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double analytic = p->tensor.grad[i];
      const double rel = relative_error(analytic, numeric, opts.magnitude_floor);
      if (i == 0 || rel > e.max_rel_error) {
        e.max_rel_error = rel;
        e.worst_index = i;
        e.analytic_at_worst = analytic;
        e.numeric_at_worst = numeric;
      }
    }
    e.pass = e.max_rel_error < opts.tolerance;
    report.pass = report.pass && e.pass;
    report.entries.push_back(std::move(e));
  }
  return report;
}

inline std::ostream& operator<<(std::ostream& os, const GradCheckReport& r) {
  for (const auto& e : r.entries) {
    os << (e.pass ? "PASS " : "FAIL ") << e.name << " n=" << e.elements << " max_rel_err=" << e.max_rel_error;
    if (!e.pass) os << " (index " << e.worst_index << ": analytic " << e.analytic_at_worst << ", numeric " << e.numeric_at_worst << ")";
    os << '\n';
  }
  os << (r.pass ? "gradcheck passed" : "gradcheck FAILED") << " (h=" << r.options.step << ", tol=" << r.options.tolerance
     << ", max_rel_err=" << r.max_rel_error() << ")\n";
  return os;
}

}  // namespace fcvae
