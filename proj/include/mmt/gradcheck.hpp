#pragma once

// Central-difference gradient checking against the tape.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mmt/tensor.hpp"

namespace mmt {

template <class T>
using GradCheckParams = std::vector<std::pair<std::string, TensorPtr<T>>>;

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double analytic = 0;
  double numeric = 0;
  std::int64_t checked = 0;
  double loss = 0;
  double denom_floor = 1e-8;
};

// eval(compute_grads) evaluates the loss at the current parameter values and
// returns it; when compute_grads is true it must also leave d(loss)/d(param)
// in each tensor's .grad. The closure has to be deterministic: fixed data,
// dropout off, no generator draws.
//
// For tensors larger than max_per_tensor a strided subset of coordinates is
// checked (0 means every coordinate). Relative error per coordinate is
// |analytic - numeric| / max(|analytic|, |numeric|, floor) with floor 1e-8.
//
// A central difference resolves a gradient only down to
// ulp(loss) / (2 * eps): below that, |analytic - numeric| is rounding noise
// regardless of whether the backward rule is right. When rel_tol is given,
// the floor is raised so that coordinates under the measurement resolution
// are compared against the noise scale instead of against themselves; a real
// discrepancy larger than the noise still fails, and coordinates above the
// resolution are judged exactly as before.
template <class T, class Eval>
GradCheckReport grad_check(Eval&& eval,
                           const std::vector<std::pair<std::string, TensorPtr<T>>>& params,
                           double eps, std::int64_t max_per_tensor = 0, double rel_tol = 0) {
  static_assert(sizeof(T) >= 8, "grad_check needs 64-bit precision");
  GradCheckReport report;
  report.loss = eval(true);
  if (rel_tol > 0) {
    const double resolution =
        std::fabs(report.loss) * std::numeric_limits<double>::epsilon() / (2.0 * eps);
    report.denom_floor = std::max(report.denom_floor, 8.0 * resolution / rel_tol);
  }
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) {
    (void)name;
    p->ensure_grad();
    analytic.push_back(p->grad);
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, p] = params[pi];
    const std::int64_t n = p->numel();
    const std::int64_t take = (max_per_tensor > 0 && n > max_per_tensor) ? max_per_tensor : n;
    const std::int64_t stride = n / take;
    for (std::int64_t s = 0; s < take; ++s) {
      const std::int64_t i = s * stride;
      const T saved = p->values[i];
      p->values[i] = saved + static_cast<T>(eps);
      const double up = eval(false);
      p->values[i] = saved - static_cast<T>(eps);
      const double down = eval(false);
      p->values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), report.denom_floor});
      const double rel = std::fabs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace mmt
