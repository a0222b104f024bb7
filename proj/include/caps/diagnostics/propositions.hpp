#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "caps/attention/layer.hpp"

namespace caps {

struct PropositionReport {
  std::string id;
  double max_violation = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  nlohmann::json params = nlohmann::json::object();

  void finish() { pass = std::isfinite(max_violation) && max_violation <= tolerance; }
};

inline nlohmann::json to_json(const PropositionReport& r) {
  return {{"id", r.id},
          {"max_violation", r.max_violation},
          {"tolerance", r.tolerance},
          {"pass", r.pass},
          {"params", r.params}};
}

/// One JSON object per line.
inline void write_reports_jsonl(const std::string& path, const std::vector<PropositionReport>& reports) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + path);
  for (const auto& r : reports) os << to_json(r).dump() << '\n';
}

/// Applied to gate signals before path weights are formed (mutation fixtures).
using GateHook = std::function<void(GateSignals&)>;

namespace detail {

inline std::vector<double> causal_softmax(const std::vector<double>& s) {
  const double m = *std::max_element(s.begin(), s.end());
  std::vector<double> a(s.size());
  double z = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) z += (a[j] = std::exp(s[j] - m));
  for (double& x : a) x /= z;
  return a;
}

inline Array uniform_array(Shape shape, Rng& rng, double lo, double hi) {
  Array a(std::move(shape));
  for (double& x : a.data()) x = rng.uniform(lo, hi);
  return a;
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace detail

/// Softmax Jacobian d alpha_i / d s_j = alpha_i (delta_ij - alpha_j) at query t = T-1
/// against central differences, plus nonzero cross-coupling.
inline PropositionReport verify_prop2(std::size_t T, std::size_t trials, Rng& rng) {
  if (T < 3) throw ConfigError("verify_prop2 requires T >= 3");
  const double h = 1e-6;
  double worst = 0.0, min_coupling = std::numeric_limits<double>::infinity();
  for (std::size_t trial = 0; trial < trials; ++trial) {
    std::vector<double> s(T);
    for (double& x : s) x = rng.uniform(-2.0, 2.0);
    const auto a = detail::causal_softmax(s);
    for (std::size_t j = 0; j < T; ++j) {
      auto up = s, dn = s;
      up[j] += h;
      dn[j] -= h;
      const auto ap = detail::causal_softmax(up), am = detail::causal_softmax(dn);
      for (std::size_t i = 0; i < T; ++i) {
        const double analytic = a[i] * ((i == j ? 1.0 : 0.0) - a[j]);
        worst = std::max(worst, std::abs(analytic - (ap[i] - am[i]) / (2.0 * h)));
        if (i != j) min_coupling = std::min(min_coupling, std::abs(analytic));
      }
    }
  }
  PropositionReport r{"prop2", worst, 1e-8};
  r.params = {{"T", T}, {"trials", trials}, {"fd_step", h}, {"min_coupling", min_coupling}};
  if (!(min_coupling > 0.0)) r.max_violation = std::numeric_limits<double>::infinity();
  r.finish();
  return r;
}

/// Gates of a sequence with the optional hook applied.
inline GateSignals hooked_gates(const Array& h, const KernelParams& params, const CapsConfig& cfg,
                                const GateHook& hook) {
  GateSignals g = build_gates(h, params, cfg);
  if (hook) hook(g);
  return g;
}

struct Prop3Setup {
  std::size_t d = 8;
  double param_std = 0.5;
};

/// (i) G numerators, (ii) locality and decay of A, (iii) shift invariance of the
/// rotary score, over `trials` random kernels and inputs.
inline std::vector<PropositionReport> verify_prop3(const CapsConfig& cfg, std::size_t T, std::size_t trials, Rng& rng,
                                                   const GateHook& hook = {}, Prop3Setup setup = {}) {
  if (T < 4) throw ConfigError("verify_prop3 requires T >= 4");
  cfg.validate();
  const std::size_t H = cfg.num_heads, dh = cfg.head_dim, d = setup.d;
  PathFlags all{};
  double v1 = 0.0, v2 = 0.0, v3 = 0.0, min_sensitivity = std::numeric_limits<double>::infinity(), max_a = 0.0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng r = rng.fork(trial);
    const KernelParams kp = init_kernel_params(d, cfg, setup.param_std, r);
    const Array h = detail::uniform_array({T, d}, r, -1.0, 1.0);
    const GateSignals g = hooked_gates(h, kp, cfg, hook);
    const ScoreDecomposition w = path_weights(g, all);

    // (i): G_{t,i} * Z_t = exp(p_i) * delta_i for every t >= i
    for (std::size_t hd = 0; hd < H; ++hd) {
      double z = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        z += g.delta[t * H + hd] * std::exp(g.p[t * H + hd]);
        for (std::size_t i = 0; i <= t; ++i) {
          const double numerator = g.delta[i * H + hd] * std::exp(g.p[i * H + hd]);
          v1 = std::max(v1, detail::rel_diff(w.G[(t * T + i) * H + hd] * z, numerator));
        }
      }
    }

    // (ii): upstream perturbation leaves A unchanged; perturbation inside (i, t] moves it
    const std::size_t i = r.below(T - 1);
    const std::size_t t = i + 1 + r.below(std::min<std::size_t>(T - 1 - i, 4));
    for (std::size_t tt = 0; tt < T; ++tt)
      for (std::size_t ii = 0; ii <= tt; ++ii)
        for (std::size_t hd = 0; hd < H; ++hd) max_a = std::max(max_a, w.A[(tt * T + ii) * H + hd]);
    Array up = h;
    for (std::size_t l = 0; l <= i; ++l)
      for (std::size_t c = 0; c < d; ++c) up[l * d + c] += r.normal() * 3.0;
    const ScoreDecomposition wu = path_weights(hooked_gates(up, kp, cfg, hook), all);
    Array inside = h;
    const std::size_t l = i + 1 + r.below(t - i);
    for (std::size_t c = 0; c < d; ++c) inside[l * d + c] += r.normal() * 3.0;
    const ScoreDecomposition wi = path_weights(hooked_gates(inside, kp, cfg, hook), all);
    for (std::size_t hd = 0; hd < H; ++hd) {
      const std::size_t idx = (t * T + i) * H + hd;
      v2 = std::max(v2, std::abs(wu.A[idx] - w.A[idx]));
      min_sensitivity = std::min(min_sensitivity, std::abs(wi.A[idx] - w.A[idx]));
    }

    // (iii): <R(t+s) q, R(i+s) k> = <R(t) q, R(i) k>
    const Array q = detail::uniform_array({T, H, dh}, r, -1.0, 1.0);
    const Array k = detail::uniform_array({T, H, dh}, r, -1.0, 1.0);
    const Array qa = apply_rotation(q, kp.omega, default_positions(T));
    const Array ka = apply_rotation(k, kp.omega, default_positions(T));
    for (double s : {1.0, 5.0, 50.0}) {
      auto shifted = default_positions(T);
      for (double& p : shifted) p += s;
      const Array qb = apply_rotation(q, kp.omega, shifted);
      const Array kb = apply_rotation(k, kp.omega, shifted);
      for (std::size_t tt = 0; tt < T; ++tt)
        for (std::size_t ii = 0; ii <= tt; ++ii)
          for (std::size_t hd = 0; hd < H; ++hd) {
            double a0 = 0.0, a1 = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              a0 += qa[(tt * H + hd) * dh + c] * ka[(ii * H + hd) * dh + c];
              a1 += qb[(tt * H + hd) * dh + c] * kb[(ii * H + hd) * dh + c];
            }
            v3 = std::max(v3, std::abs(a1 - a0));
          }
    }
  }
  const nlohmann::json base = {{"T", T}, {"trials", trials}, {"heads", H}, {"head_dim", dh}, {"d", d}};
  PropositionReport r1{"prop3.i", v1, 1e-12, false, base};
  PropositionReport r2{"prop3.ii", v2, 1e-12, false, base};
  r2.params["min_sensitivity"] = min_sensitivity;
  r2.params["max_A"] = max_a;
  // decay must not amplify, and interior perturbations must be visible
  if (max_a > 1.0) r2.max_violation = std::max(r2.max_violation, max_a - 1.0);
  if (!(min_sensitivity > 1e-6)) r2.max_violation = std::numeric_limits<double>::infinity();
  PropositionReport r3{"prop3.iii", v3, 1e-10, false, base};
  r3.params["shifts"] = {1, 5, 50};
  r1.finish();
  r2.finish();
  r3.finish();
  return {r1, r2, r3};
}

/// With delta = 1 the Riemann weights reduce to softmax(p) over each causal prefix.
inline PropositionReport verify_riemann_reduction(std::size_t T, std::size_t trials, Rng& rng) {
  double worst = 0.0;
  const std::size_t H = 2;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    GateSignals g{Array({T, H}, 1.0), detail::uniform_array({T, H}, rng, -3.0, 3.0), Array({T, H}, -0.1)};
    const ScoreDecomposition w = path_weights(g);
    for (std::size_t hd = 0; hd < H; ++hd)
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> s(t + 1);
        for (std::size_t i = 0; i <= t; ++i) s[i] = g.p[i * H + hd];
        const auto a = detail::causal_softmax(s);
        for (std::size_t i = 0; i <= t; ++i) worst = std::max(worst, std::abs(w.G[(t * T + i) * H + hd] - a[i]));
      }
  }
  PropositionReport r{"riemann_reduction", worst, 1e-12};
  r.params = {{"T", T}, {"trials", trials}};
  r.finish();
  return r;
}

/// Recurrent vs materialized evaluation (identity score map) over a grid of
/// sequence lengths and head widths; elementwise |a - b| / (|b| + 1e-8).
inline PropositionReport verify_equivalence(const std::vector<std::size_t>& lengths,
                                            const std::vector<std::size_t>& head_dims, Rng& rng) {
  double worst = 0.0;
  for (std::size_t T : lengths)
    for (std::size_t dh : head_dims) {
      CapsConfig cfg;
      cfg.num_heads = 2;
      cfg.head_dim = dh;
      const std::size_t d = 8;
      const KernelParams kp = init_kernel_params(d, cfg, 0.5, rng);
      const Array h = detail::uniform_array({T, d}, rng, -1.0, 1.0);
      const Array lin = attend_linear(h, kp, cfg);
      const Array quad = attend_quadratic(h, kp, cfg).outputs;
      for (std::size_t j = 0; j < quad.size(); ++j) {
        worst = std::max(worst, std::abs(lin[j] - quad[j]) / (std::abs(quad[j]) + 1e-8));
      }
    }
  PropositionReport r{"linear_quadratic_equivalence", worst, 1e-5};
  r.params = {{"T", lengths}, {"head_dim", head_dims}};
  r.finish();
  return r;
}

}  // namespace caps
