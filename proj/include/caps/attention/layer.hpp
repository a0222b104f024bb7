#pragma once

// CAPS attention: Clock, rotary alignment, gating paths and their composition.
//
// Tape-level entry point is caps_attention(); the remaining free functions are
// untracked conveniences over a single sequence h[T, d], used by diagnostics,
// the CLI inspector and tests.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "caps/attention/config.hpp"
#include "caps/attention/ops.hpp"
#include "caps/numerics/rng.hpp"

namespace caps {

/// Per-layer kernel weights. W_q, W_k, W_v: [d, H*d_h]; W_c, W_p, W_g: [d, H];
/// omega: [H, d_h/2].
template <class T>
struct KernelSlots {
  T w_q, w_k, w_v, w_c, w_p, w_g, omega;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("w_q", self.w_q);
    f("w_k", self.w_k);
    f("w_v", self.w_v);
    f("w_c", self.w_c);
    f("w_p", self.w_p);
    f("w_g", self.w_g);
    f("omega", self.omega);
  }
  template <class F> void for_each(F&& f) { visit(*this, f); }
  template <class F> void for_each(F&& f) const { visit(*this, f); }
};

using KernelParams = KernelSlots<Array>;

inline Array rope_frequencies(const CapsConfig& config, Rng& rng) {
  const std::size_t half = config.head_dim / 2;
  Array omega({config.num_heads, half});
  for (std::size_t h = 0; h < config.num_heads; ++h) {
    for (std::size_t l = 0; l < half; ++l) {
      omega[h * half + l] =
          config.rope.kind == RopeInit::Kind::kStandard
              ? std::pow(config.rope.base, -2.0 * static_cast<double>(l) / static_cast<double>(config.head_dim))
              : rng.uniform(config.rope.lo, config.rope.hi);
    }
  }
  return omega;
}

/// Normal(0, std^2) projections and rotary frequencies for a hidden width d.
inline KernelParams init_kernel_params(std::size_t d, const CapsConfig& config, double std, Rng& rng) {
  const std::size_t H = config.num_heads, hd = H * config.head_dim;
  auto normal = [&](Shape shape) {
    Array a(std::move(shape));
    for (double& x : a.data()) x = rng.normal(0.0, std);
    return a;
  };
  KernelParams p;
  p.w_q = normal({d, hd});
  p.w_k = normal({d, hd});
  p.w_v = normal({d, hd});
  p.w_c = normal({d, H});
  p.w_p = normal({d, H});
  p.w_g = normal({d, H});
  p.omega = rope_frequencies(config, rng);
  return p;
}

/// Per-head, per-position gate signals.
struct GateSignals {
  Array delta;    // Clock, >= epsilon
  Array p;        // Riemann logits
  Array g_tilde;  // -softplus(g) * delta, < 0
};

struct GateVars {
  Var delta, p, g_tilde;
};

/// Delta = softplus(h W_c) + epsilon.
inline Var clock(Var h, Var w_c, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("clock epsilon must be > 0");
  return add_scalar(softplus(matmul(h, w_c)), epsilon);
}

inline GateVars build_gates(Var h, const KernelSlots<Var>& params, const CapsConfig& config) {
  const Var delta = clock(h, params.w_c, config.clock_epsilon);
  const Var p = matmul(h, params.w_p);
  const Var g_tilde = neg(mul(softplus(matmul(h, params.w_g)), delta));
  return {delta, p, g_tilde};
}

inline std::vector<double> default_positions(std::size_t T) {
  std::vector<double> pos(T);
  std::iota(pos.begin(), pos.end(), 0.0);
  return pos;
}

/// Rotated queries/keys, values and gates for h[S, T, d].
struct AttentionInputs {
  Var q_hat, k_hat, v;
  GateVars gates;
};

inline AttentionInputs prepare_attention(Var h, const KernelSlots<Var>& params, const CapsConfig& config,
                                         const std::vector<double>& positions) {
  const Shape& sh = h.shape();
  if (sh.size() != 3) throw ConfigError("attention expects h of shape [S,T,d], got " + shape_str(sh));
  const std::size_t S = sh[0], T = sh[1], H = config.num_heads, dh = config.head_dim;
  const Shape vec{S, T, H, dh};
  AttentionInputs a;
  a.q_hat = rotate(reshape(matmul(h, params.w_q), vec), params.omega, positions);
  a.k_hat = rotate(reshape(matmul(h, params.w_k), vec), params.omega, positions);
  a.v = reshape(matmul(h, params.w_v), vec);
  a.gates = build_gates(h, params, config);
  return a;
}

/// CAPS attention over h[S, T, d] -> [S, T, H, d_h]. Identity score map uses the
/// recurrent evaluation; softmax uses the materialized one.
inline Var caps_attention(Var h, const KernelSlots<Var>& params, const CapsConfig& config, FlopCount* count = nullptr) {
  const AttentionInputs a = prepare_attention(h, params, config, default_positions(h.shape().at(1)));
  const double scale = config.resolved_scale();
  if (config.phi_mode == PhiMode::kIdentity) {
    return caps_attend_linear(a.q_hat, a.k_hat, a.v, a.gates.p, a.gates.delta, a.gates.g_tilde, config.paths, scale,
                              count);
  }
  return caps_attend_quadratic(a.q_hat, a.k_hat, a.v, a.gates.p, a.gates.delta, a.gates.g_tilde, config.paths,
                               config.phi_mode, scale, count);
}

// ---------------------------------------------------------------------------
// Untracked single-sequence API.

namespace detail {

inline KernelSlots<Var> bind_constants(Tape& tape, const KernelParams& params) {
  KernelSlots<Var> out;
  out.w_q = tape.constant(params.w_q);
  out.w_k = tape.constant(params.w_k);
  out.w_v = tape.constant(params.w_v);
  out.w_c = tape.constant(params.w_c);
  out.w_p = tape.constant(params.w_p);
  out.w_g = tape.constant(params.w_g);
  out.omega = tape.constant(params.omega);
  return out;
}

inline Array drop_leading(const Array& a) {
  Shape s(a.shape().begin() + 1, a.shape().end());
  return a.reshaped(std::move(s));
}

inline void check_sequence(const Array& h) {
  if (h.rank() != 2) throw ConfigError("expected a single sequence h[T, d], got " + shape_str(h.shape()));
  if (h.dim(0) == 0) throw ConfigError("empty sequence (T = 0)");
}

}  // namespace detail

inline Array clock(const Array& h, const Array& w_c, double epsilon) {
  Tape tape;
  return clock(tape.constant(h), tape.constant(w_c), epsilon).value();
}

/// x[T, H, d_h] rotated pairwise by positions[t] * omega[h, l].
inline Array apply_rotation(const Array& x, const Array& omega, const std::vector<double>& positions) {
  if (x.rank() != 3) throw ConfigError("apply_rotation expects x[T, H, d_h]");
  for (double p : positions) {
    if (p < 0.0) throw ConfigError("rotation positions must be nonnegative");
  }
  Tape tape;
  const Shape s4{1, x.dim(0), x.dim(1), x.dim(2)};
  return detail::drop_leading(rotate(tape.constant(x.reshaped(s4)), tape.constant(omega), positions).value());
}

inline GateSignals build_gates(const Array& h, const KernelParams& params, const CapsConfig& config) {
  detail::check_sequence(h);
  Tape tape;
  const GateVars g = build_gates(tape.constant(h), detail::bind_constants(tape, params), config);
  return {g.delta.value(), g.p.value(), g.g_tilde.value()};
}

/// Per-pair additive weights and scores; every array is [T, T, H] with zero
/// support above the diagonal (i > t) and zeros for disabled paths.
struct ScoreDecomposition {
  Array G, A, B;
  Array rot_score;
  Array total;  // score_scale * rot_score * (G + A + B), before the score map
};

namespace detail {

/// Fills G, A, B (and rot/total when q, k are supplied) from [T, H] gates.
inline ScoreDecomposition materialize(const GateSignals& gates, const Array* q_hat, const Array* k_hat,
                                      const PathFlags& paths, double scale) {
  if (gates.delta.rank() != 2) throw ConfigError("gate signals must be [T, H]");
  const std::size_t T = gates.delta.dim(0), H = gates.delta.dim(1);
  if (T == 0) throw ConfigError("path weights need T >= 1");
  const std::size_t dh = q_hat ? q_hat->dim(2) : 0;
  std::vector<double> zeros(T * H * std::max<std::size_t>(dh, 1), 0.0);
  const kernel::Inputs in{q_hat ? q_hat->data().data() : zeros.data(),
                          k_hat ? k_hat->data().data() : zeros.data(),
                          zeros.data(),
                          gates.p.data().data(),
                          gates.delta.data().data(),
                          gates.g_tilde.data().data()};
  ScoreDecomposition out{Array({T, T, H}), Array({T, T, H}), Array({T, T, H}), Array({T, T, H}), Array({T, T, H})};
  kernel::Row row;
  for (std::size_t h = 0; h < H; ++h) {
    const kernel::Slice sl = kernel::make_slice(0, h, T, H, dh);
    const kernel::Prefix pre = kernel::make_prefix(in, sl, paths, nullptr);
    for (std::size_t t = 0; t < T; ++t) {
      kernel::fill_row(in, sl, paths, PhiMode::kIdentity, scale, pre, t, row, nullptr);
      for (std::size_t i = 0; i <= t; ++i) {
        const std::size_t idx = (t * T + i) * H + h;
        out.G[idx] = row.G[i];
        out.A[idx] = row.A[i];
        out.B[idx] = row.B[i];
        out.rot_score[idx] = row.rot[i];
        out.total[idx] = row.alpha[i];
      }
    }
  }
  return out;
}

}  // namespace detail

/// G, A, B weights from gate signals (rot_score and total left zero).
inline ScoreDecomposition path_weights(const GateSignals& gates, const PathFlags& paths = {}) {
  return detail::materialize(gates, nullptr, nullptr, paths, 1.0);
}

struct QuadraticResult {
  Array outputs;  // [T, H, d_h]
  ScoreDecomposition decomposition;
};

inline QuadraticResult attend_quadratic(const Array& h, const KernelParams& params, const CapsConfig& config) {
  detail::check_sequence(h);
  config.validate();
  Tape tape;
  const Shape s3{1, h.dim(0), h.dim(1)};
  const Var hv = tape.constant(h.reshaped(s3));
  const AttentionInputs a =
      prepare_attention(hv, detail::bind_constants(tape, params), config, default_positions(h.dim(0)));
  const double scale = config.resolved_scale();
  const Var out = caps_attend_quadratic(a.q_hat, a.k_hat, a.v, a.gates.p, a.gates.delta, a.gates.g_tilde,
                                        config.paths, config.phi_mode, scale);
  const GateSignals gates{detail::drop_leading(a.gates.delta.value()), detail::drop_leading(a.gates.p.value()),
                          detail::drop_leading(a.gates.g_tilde.value())};
  const Array q = detail::drop_leading(a.q_hat.value());
  const Array k = detail::drop_leading(a.k_hat.value());
  return {detail::drop_leading(out.value()), detail::materialize(gates, &q, &k, config.paths, scale)};
}

inline Array attend_linear(const Array& h, const KernelParams& params, const CapsConfig& config) {
  if (config.phi_mode != PhiMode::kIdentity) {
    throw UnsupportedModeError("recurrent evaluation requires the identity score map; use attend_quadratic for softmax");
  }
  detail::check_sequence(h);
  config.validate();
  Tape tape;
  const Var hv = tape.constant(h.reshaped({1, h.dim(0), h.dim(1)}));
  return detail::drop_leading(caps_attention(hv, detail::bind_constants(tape, params), config).value());
}

/// Feature-axis concatenation of per-path query/key factors [N, d_m] (d_m may differ per path).
inline std::pair<Array, Array> concat_paths(const Array& q1, const Array& k1, const Array& q2, const Array& k2,
                                            const Array& q3, const Array& k3) {
  auto cat = [](std::initializer_list<const Array*> parts) {
    const std::size_t n = (*parts.begin())->dim(0);
    std::size_t width = 0;
    for (const Array* p : parts) {
      if (p->rank() != 2 || p->dim(0) != n) throw ConfigError("concat_paths: leading shapes differ");
      width += p->dim(1);
    }
    Array out({n, width});
    std::size_t off = 0;
    for (const Array* p : parts) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < p->dim(1); ++c) out[r * width + off + c] = (*p)[r * p->dim(1) + c];
      }
      off += p->dim(1);
    }
    return out;
  };
  if (q1.shape() != k1.shape() || q2.shape() != k2.shape() || q3.shape() != k3.shape()) {
    throw ConfigError("concat_paths: query and key factors of a path must match");
  }
  return {cat({&q1, &q2, &q3}), cat({&k1, &k2, &k3})};
}

/// Explicit per-path factors for one head at query position t:
///   q1 = q_hat_t / E_t,            k1_i = exp(p~_i - p~max_t) k_hat_i
///   q2 = Gamma_t q_hat_t,          k2_i = k_hat_i / Gamma_i
///   q3 = q_hat_t / sum_{j<=t} delta_j,  k3_i = delta_i k_hat_i
/// Returned as rows [t+1, d_h]: queries repeated per key row so that
/// row-wise dot products give the per-pair scores. Gamma is formed explicitly,
/// so this is only suitable for short sequences.
struct PathFactors {
  Array q1, k1, q2, k2, q3, k3;
};

inline PathFactors path_factors(const Array& q_hat, const Array& k_hat, const GateSignals& gates, std::size_t head,
                                std::size_t t, const PathFlags& paths = {}) {
  const std::size_t T = q_hat.dim(0), H = q_hat.dim(1), dh = q_hat.dim(2);
  if (t >= T || head >= H) throw ConfigError("path_factors: index out of range");
  auto g = [&](const Array& a, std::size_t i) { return a[i * H + head]; };
  const std::size_t n = t + 1;
  double pmax = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j <= t; ++j) pmax = std::max(pmax, g(gates.p, j) + std::log(g(gates.delta, j)));
  double E = 0.0, den = 0.0, logg = 0.0;
  std::vector<double> log_gamma(n);
  for (std::size_t j = 0; j <= t; ++j) {
    E += std::exp(g(gates.p, j) + std::log(g(gates.delta, j)) - pmax);
    den += g(gates.delta, j);
    log_gamma[j] = (logg += g(gates.g_tilde, j));
  }
  PathFactors f{Array({n, dh}), Array({n, dh}), Array({n, dh}), Array({n, dh}), Array({n, dh}), Array({n, dh})};
  for (std::size_t i = 0; i < n; ++i) {
    const double w1 = std::exp(g(gates.p, i) + std::log(g(gates.delta, i)) - pmax);
    for (std::size_t a = 0; a < dh; ++a) {
      const double qa = q_hat[(t * H + head) * dh + a];
      const double ka = k_hat[(i * H + head) * dh + a];
      if (paths.riemann) {
        f.q1[i * dh + a] = qa / E;
        f.k1[i * dh + a] = w1 * ka;
      }
      if (paths.prefix) {
        f.q2[i * dh + a] = std::exp(log_gamma[t]) * qa;
        f.k2[i * dh + a] = ka / std::exp(log_gamma[i]);
      }
      if (paths.clock) {
        f.q3[i * dh + a] = qa / den;
        f.k3[i * dh + a] = g(gates.delta, i) * ka;
      }
    }
  }
  return f;
}

}  // namespace caps
