#include "modabs/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace modabs {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Array>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Array& p : params) vars.push_back(tape.leaf(p, false));
  const double v = tape.value(f(tape, vars)).item();
  if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite function value");
  return v;
}

struct Measurement {
  double rel = 0.0;
  double abs = 0.0;
};

Measurement central_difference(const ScalarFn& f, std::vector<Array>& work, size_t pi, int i,
                               double analytic, double h) {
  Array& target = work[pi];
  const double orig = target.at(i);
  target.at(i) = orig + h;
  const double f_plus = evaluate(f, work);
  target.at(i) = orig - h;
  const double f_minus = evaluate(f, work);
  target.at(i) = orig;
  const double numeric = (f_plus - f_minus) / (2.0 * h);
  Measurement m;
  m.abs = std::fabs(analytic - numeric);
  m.rel = m.abs / std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return m;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Array>& params,
                           const std::vector<std::string>& names, double h, double tol) {
  if (h <= 0.0 || h > 1e-2) throw std::invalid_argument("grad_check: h must be in (0, 1e-2]");
  if (names.size() != params.size())
    throw std::invalid_argument("grad_check: names/params size mismatch");

  // Analytic gradients from one taped evaluation.
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Array& p : params) vars.push_back(tape.leaf(p, true));
  Var loss = f(tape, vars);
  if (!std::isfinite(tape.value(loss).item()))
    throw std::runtime_error("grad_check: non-finite function value");
  tape.backward(loss);
  std::vector<Array> analytic;
  analytic.reserve(params.size());
  for (Var v : vars) analytic.push_back(tape.grad(v));

  const double steps[5] = {h, std::min(h * 5.0, 1e-2), h / 5.0, std::min(h * 25.0, 1e-2), h / 25.0};

  GradCheckReport report;
  report.tolerance = tol;
  std::vector<Array> work = params;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    GradCheckEntry entry;
    entry.name = names[pi];
    for (int i = 0; i < params[pi].numel(); ++i) {
      const double a = analytic[pi].at(i);
      Measurement best = central_difference(f, work, pi, i, a, steps[0]);
      for (int s = 1; s < 5 && best.rel > tol; ++s) {
        const Measurement m = central_difference(f, work, pi, i, a, steps[s]);
        if (m.rel < best.rel) best = m;
      }
      if (best.rel > entry.max_rel_error) {
        entry.max_rel_error = best.rel;
        entry.worst_index = i;
      }
      entry.max_abs_error = std::max(entry.max_abs_error, best.abs);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.per_parameter.push_back(std::move(entry));
  }
  return report;
}

}  // namespace modabs
