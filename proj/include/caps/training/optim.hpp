#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "caps/numerics/ops.hpp"

namespace caps {

/// Mean squared error; differentiable in both arguments.
inline Var mse_loss(Var pred, Var truth) {
  if (pred.shape() != truth.shape()) {
    throw ConfigError("mse_loss: shape " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  }
  return mean(square(pred - truth));
}

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  double max_lr = 1e-3;
  double warmup_fraction = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(max_lr >= 0.0)) throw ConfigError("max_lr must be >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1]");
    if (!(div_factor > 0.0 && final_div_factor > 0.0)) throw ConfigError("schedule divisors must be > 0");
  }
};

/// Cosine ramp from max_lr/div_factor to max_lr over the warmup fraction, then
/// cosine anneal to max_lr/final_div_factor at `total_steps`.
inline double one_cycle_lr(std::size_t step, std::size_t total_steps, const OptimConfig& c) {
  if (step > total_steps) throw ConfigError("schedule step beyond total_steps");
  const double initial = c.max_lr / c.div_factor, last = c.max_lr / c.final_div_factor;
  const double warm = c.warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  auto cosine = [](double from, double to, double pct) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * pct));
  };
  if (s <= warm) return warm > 0.0 ? cosine(initial, c.max_lr, s / warm) : c.max_lr;
  const double rest = static_cast<double>(total_steps) - warm;
  return cosine(c.max_lr, last, (s - warm) / rest);
}

struct OptimState {
  std::vector<Array> m, v;
  std::size_t step = 0;
};

inline double global_norm(const std::vector<Array>& grads) {
  double ss = 0.0;
  for (const Array& g : grads)
    for (double x : g.data()) ss += x * x;
  return std::sqrt(ss);
}

/// Rescales grads so their joint L2 norm is at most max_norm; returns the norm
/// before clipping.
inline double clip_global_norm(std::vector<Array>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (Array& g : grads)
      for (double& x : g.data()) x *= s;
  }
  return norm;
}

/// Decoupled weight decay followed by a bias-corrected Adam update. Returns false
/// and leaves everything untouched when any gradient is non-finite.
inline bool adamw_step(std::vector<Array*> params, const std::vector<Array>& grads, OptimState& st, double lr,
                       const OptimConfig& c) {
  if (params.size() != grads.size()) throw ConfigError("adamw_step: one gradient per parameter required");
  for (const Array& g : grads) {
    if (!g.all_finite()) return false;
  }
  if (st.m.empty()) {
    for (const Array* p : params) {
      st.m.emplace_back(p->shape(), 0.0);
      st.v.emplace_back(p->shape(), 0.0);
    }
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Array& p = *params[i];
    const Array& g = grads[i];
    if (g.shape() != p.shape()) throw ConfigError("adamw_step: gradient shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= 1.0 - lr * c.weight_decay;
      double& m = st.m[i][j];
      double& v = st.v[i][j];
      m = c.beta1 * m + (1.0 - c.beta1) * g[j];
      v = c.beta2 * v + (1.0 - c.beta2) * g[j] * g[j];
      p[j] -= lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
    }
  }
  return true;
}

}  // namespace caps
