#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "caps/numerics/rng.hpp"
#include "caps/numerics/tape.hpp"

namespace caps {

/// Builds a scalar on `tape` from parameter leaves (same order as the arrays given).
using ScalarFn = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double worst_tape = 0.0;
  double worst_fd = 0.0;
};

namespace detail {

inline double evaluate_scalar(const ScalarFn& f, const std::vector<Array>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Array& p : params) leaves.push_back(tape.constant(p));
  const double v = f(tape, leaves).value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
  return v;
}

}  // namespace detail

/// Compares tape gradients against central differences (f(x+h) - f(x-h)) / 2h at
/// `samples` randomly chosen scalar coordinates. Relative error uses
/// max(|g_fd|, 1e-8) as the denominator.
inline GradCheckResult grad_check(const ScalarFn& f, std::vector<Array> params, double step,
                                  std::size_t samples, Rng& rng) {
  if (!(step > 1e-7 && step < 1e-3)) throw ConfigError("grad_check step must lie in (1e-7, 1e-3)");

  Tape tape;
  std::vector<Var> leaves;
  for (const Array& p : params) leaves.push_back(tape.leaf(p));
  const Var out = f(tape, leaves);
  if (!std::isfinite(out.value().item())) throw NumericError("grad_check: objective is not finite");
  tape.backward(out);

  std::size_t total = 0;
  for (const Array& p : params) total += p.size();
  if (total == 0) return {};

  GradCheckResult result;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = rng.below(total);
    std::size_t which = 0;
    while (flat >= params[which].size()) flat -= params[which++].size();

    const double analytic = tape.grad(leaves[which])[flat];
    const double saved = params[which][flat];
    params[which][flat] = saved + step;
    const double up = detail::evaluate_scalar(f, params);
    params[which][flat] = saved - step;
    const double down = detail::evaluate_scalar(f, params);
    params[which][flat] = saved;

    const double fd = (up - down) / (2.0 * step);
    const double rel = std::abs(analytic - fd) / std::max(std::abs(fd), 1e-8);
    if (rel > result.max_rel_error || result.checked == 0) {
      result.max_rel_error = std::max(rel, result.max_rel_error);
      result.worst_tape = analytic;
      result.worst_fd = fd;
    }
    ++result.checked;
  }
  return result;
}

}  // namespace caps
