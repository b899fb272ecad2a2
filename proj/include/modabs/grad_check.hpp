#pragma once

#include <functional>
#include <string>
#include <vector>

#include "modabs/autodiff.hpp"

namespace modabs {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  int worst_index = -1;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> per_parameter;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

/// Scalar function of a fixed set of parameter arrays, rebuilt on a fresh
/// tape for every evaluation.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares reverse-mode gradients against central differences
/// (f(x+h) - f(x-h)) / 2h per coordinate; relative error uses the
/// denominator max(|analytic|, |numeric|, 1e-8).
///
/// A double-precision loss value is rounded to ~1 ulp, so no single step
/// size can resolve both low-curvature coordinates (which need a large h to
/// beat quotient rounding) and high-curvature ones (which need a small h to
/// beat truncation). Coordinates whose error exceeds `tol` at the base step
/// are therefore re-measured at h*5 and h/5 (clamped to the valid range) and
/// report the smallest discrepancy of the three.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Array>& params,
                           const std::vector<std::string>& names, double h, double tol = 1e-5);

}  // namespace modabs
