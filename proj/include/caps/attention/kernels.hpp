#pragma once

// Per-(sequence, head) CAPS kernels on raw strided storage.
//
// Layouts: vectors [S, T, H, d_h], per-head scalars [S, T, H]. Each kernel
// processes one (s, h) slice; the tape ops in attention/ops.hpp loop over slices.
//
// Score for query t and key i <= t:
//   alpha_{t,i} = scale * <q_t, k_i> * (G_{t,i} + A_{t,i} + B_{t,i})   (enabled paths)
//   G_{t,i} = e^{p~_i} / sum_{j<=t} e^{p~_j},  p~ = p + log(delta)
//   A_{t,i} = exp(sum_{j in (i,t]} g~_j)
//   B_{t,i} = delta_i / sum_{j<=t} delta_j

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "caps/attention/config.hpp"

namespace caps {

/// Operation counters. Division is counted as a multiplication; exp/log/cos/sin
/// count as transcendentals.
struct FlopCount {
  std::uint64_t mults = 0;
  std::uint64_t adds = 0;
  std::uint64_t transcendentals = 0;
  std::uint64_t state_update_mults = 0;  // linear mode: running-state outer-product updates

  FlopCount& operator+=(const FlopCount& o) {
    mults += o.mults;
    adds += o.adds;
    transcendentals += o.transcendentals;
    state_update_mults += o.state_update_mults;
    return *this;
  }
  friend bool operator==(const FlopCount&, const FlopCount&) = default;
};

namespace kernel {

/// Strided view of one (sequence, head) slice.
struct Slice {
  std::size_t T = 0;
  std::size_t dh = 0;
  std::size_t vec_base = 0;    // offset of (s, 0, h, 0)
  std::size_t vec_stride = 0;  // H * dh
  std::size_t gate_base = 0;   // offset of (s, 0, h)
  std::size_t gate_stride = 0; // H

  std::size_t vec(std::size_t t) const { return vec_base + t * vec_stride; }
  std::size_t gate(std::size_t t) const { return gate_base + t * gate_stride; }
};

inline Slice make_slice(std::size_t s, std::size_t h, std::size_t T, std::size_t H, std::size_t dh) {
  return Slice{T, dh, (s * T * H + h) * dh, H * dh, s * T * H + h, H};
}

struct Inputs {
  const double* q;
  const double* k;
  const double* v;
  const double* p;
  const double* delta;
  const double* gtilde;
};

struct Grads {
  double* q;
  double* k;
  double* v;
  double* p;
  double* delta;
  double* gtilde;
};

/// State saved by the linear forward for its backward pass.
struct LinearSaved {
  std::vector<double> m, zbar, e, den;  // [T]
  std::vector<double> p1, s2, p3;       // [T * dh * dh] normalized path states
};

/// Prefix log-sum-exp of p~ with a running max.
inline void prefix_lse(const Inputs& in, const Slice& sl, std::vector<double>& ptilde, std::vector<double>& lse,
                       FlopCount* count) {
  ptilde.resize(sl.T);
  lse.resize(sl.T);
  double m = -std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (std::size_t t = 0; t < sl.T; ++t) {
    const std::size_t g = sl.gate(t);
    ptilde[t] = in.p[g] + std::log(in.delta[g]);
    const double m_new = std::max(m, ptilde[t]);
    s = s * std::exp(m - m_new) + std::exp(ptilde[t] - m_new);
    m = m_new;
    lse[t] = m + std::log(s);
  }
  if (count) {
    count->adds += 5 * sl.T;
    count->mults += sl.T;
    count->transcendentals += 4 * sl.T;
  }
}

/// Recurrent evaluation, identity score map. O(T d_h^2) per slice.
inline void linear_forward(const Inputs& in, const Slice& sl, const PathFlags& paths, double scale, double* out,
                           LinearSaved* saved, FlopCount* count) {
  const std::size_t T = sl.T, dh = sl.dh, dd = dh * dh;
  std::vector<double> S1(paths.riemann ? dd : 0, 0.0), S2(paths.prefix ? dd : 0, 0.0),
      S3(paths.clock ? dd : 0, 0.0), M(dd), scaled_k(dh);
  if (saved) {
    if (paths.riemann) {
      saved->m.resize(T);
      saved->zbar.resize(T);
      saved->e.resize(T);
      saved->p1.resize(T * dd);
    }
    if (paths.prefix) saved->s2.resize(T * dd);
    if (paths.clock) {
      saved->den.resize(T);
      saved->p3.resize(T * dd);
    }
  }
  double m = -std::numeric_limits<double>::infinity();
  double zbar = 0.0, den = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double* q = in.q + sl.vec(t);
    const double* k = in.k + sl.vec(t);
    const double* v = in.v + sl.vec(t);
    const std::size_t g = sl.gate(t);
    const double delta = in.delta[g];
    double inv_z = 0.0, inv_d = 0.0;

    if (paths.riemann) {
      // Online softmax accumulator: rescale by exp(m_prev - m) every step.
      const double pt = in.p[g] + std::log(delta);
      const double m_new = std::max(m, pt);
      const double r = std::exp(m - m_new);
      const double e = std::exp(pt - m_new);
      m = m_new;
      zbar = r * zbar + e;
      for (std::size_t a = 0; a < dh; ++a) scaled_k[a] = e * k[a];
      for (std::size_t a = 0; a < dh; ++a) {
        for (std::size_t b = 0; b < dh; ++b) S1[a * dh + b] = r * S1[a * dh + b] + scaled_k[a] * v[b];
      }
      inv_z = 1.0 / zbar;
      if (saved) {
        saved->m[t] = m;
        saved->zbar[t] = zbar;
        saved->e[t] = e;
        for (std::size_t j = 0; j < dd; ++j) saved->p1[t * dd + j] = S1[j] * inv_z;
      }
      if (count) {
        count->adds += 4 + dd;
        count->mults += 2 + dh + 2 * dd;
        count->transcendentals += 3;
        count->state_update_mults += 2 * dd;
      }
    }
    if (paths.prefix) {
      const double gamma = std::exp(in.gtilde[g]);
      for (std::size_t a = 0; a < dh; ++a) {
        for (std::size_t b = 0; b < dh; ++b) S2[a * dh + b] = gamma * S2[a * dh + b] + k[a] * v[b];
      }
      if (saved) std::copy(S2.begin(), S2.end(), saved->s2.begin() + static_cast<std::ptrdiff_t>(t * dd));
      if (count) {
        count->adds += dd;
        count->mults += 2 * dd;
        count->transcendentals += 1;
        count->state_update_mults += 2 * dd;
      }
    }
    if (paths.clock) {
      den += delta;
      for (std::size_t a = 0; a < dh; ++a) scaled_k[a] = delta * k[a];
      for (std::size_t a = 0; a < dh; ++a) {
        for (std::size_t b = 0; b < dh; ++b) S3[a * dh + b] += scaled_k[a] * v[b];
      }
      inv_d = 1.0 / den;
      if (saved) {
        saved->den[t] = den;
        for (std::size_t j = 0; j < dd; ++j) saved->p3[t * dd + j] = S3[j] * inv_d;
      }
      if (count) {
        count->adds += 1 + dd;
        count->mults += 1 + dh + dd;
        count->state_update_mults += dd;
      }
    }

    for (std::size_t j = 0; j < dd; ++j) {
      double acc = 0.0;
      if (paths.riemann) acc += S1[j] * inv_z;
      if (paths.prefix) acc += S2[j];
      if (paths.clock) acc += S3[j] * inv_d;
      M[j] = acc;
    }
    double* o = out + sl.vec(t);
    for (std::size_t b = 0; b < dh; ++b) {
      double acc = 0.0;
      for (std::size_t a = 0; a < dh; ++a) acc += q[a] * M[a * dh + b];
      o[b] = scale * acc;
    }
    if (count) {
      const auto n = static_cast<std::uint64_t>(paths.count());
      count->adds += n * dd + dd;
      count->mults += static_cast<std::uint64_t>(int(paths.riemann) + int(paths.clock)) * dd + dd + dh;
    }
  }
}

/// Reverse pass of linear_forward. Accumulates into `grad`.
inline void linear_backward(const Inputs& in, const Slice& sl, const PathFlags& paths, double scale,
                            const double* grad_out, const LinearSaved& saved, const Grads& grad) {
  const std::size_t T = sl.T, dh = sl.dh, dd = dh * dh;
  std::vector<double> M(dd), dM(dd), R1(dd, 0.0), Lam(dd, 0.0), R3(dd, 0.0), Rv(dh), RTk(dh);
  double zeta = 0.0, xi = 0.0;

  // Rv = R v, RTk = R^T k, returns k^T R v.
  auto contract = [&](const std::vector<double>& R, const double* k, const double* v) {
    double kRv = 0.0;
    for (std::size_t a = 0; a < dh; ++a) {
      double acc = 0.0;
      for (std::size_t b = 0; b < dh; ++b) acc += R[a * dh + b] * v[b];
      Rv[a] = acc;
      kRv += k[a] * acc;
    }
    for (std::size_t b = 0; b < dh; ++b) {
      double acc = 0.0;
      for (std::size_t a = 0; a < dh; ++a) acc += R[a * dh + b] * k[a];
      RTk[b] = acc;
    }
    return kRv;
  };

  for (std::size_t t = T; t-- > 0;) {
    const double* q = in.q + sl.vec(t);
    const double* k = in.k + sl.vec(t);
    const double* v = in.v + sl.vec(t);
    const double* dO = grad_out + sl.vec(t);
    const std::size_t g = sl.gate(t);
    const double delta = in.delta[g];

    for (std::size_t j = 0; j < dd; ++j) {
      double acc = 0.0;
      if (paths.riemann) acc += saved.p1[t * dd + j];
      if (paths.prefix) acc += saved.s2[t * dd + j];
      if (paths.clock) acc += saved.p3[t * dd + j];
      M[j] = acc;
    }
    if (grad.q) {
      double* dq = grad.q + sl.vec(t);
      for (std::size_t a = 0; a < dh; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < dh; ++b) acc += M[a * dh + b] * dO[b];
        dq[a] += scale * acc;
      }
    }
    for (std::size_t a = 0; a < dh; ++a) {
      for (std::size_t b = 0; b < dh; ++b) dM[a * dh + b] = scale * q[a] * dO[b];
    }

    double* dk = grad.k ? grad.k + sl.vec(t) : nullptr;
    double* dv = grad.v ? grad.v + sl.vec(t) : nullptr;
    auto apply_kv = [&](double w) {
      if (dk) for (std::size_t a = 0; a < dh; ++a) dk[a] += w * Rv[a];
      if (dv) for (std::size_t b = 0; b < dh; ++b) dv[b] += w * RTk[b];
    };

    if (paths.riemann) {
      // R1_t = sum_{u>=t} dM_u exp(m_t - m_u) / zbar_u, so that a_t * dS1 = e_t * R1_t.
      if (t + 1 < T) {
        const double f = std::exp(saved.m[t] - saved.m[t + 1]);
        for (double& x : R1) x *= f;
        zeta *= f;
      }
      const double inv_z = 1.0 / saved.zbar[t];
      double dot = 0.0;
      for (std::size_t j = 0; j < dd; ++j) {
        R1[j] += dM[j] * inv_z;
        dot += dM[j] * saved.p1[t * dd + j];
      }
      zeta += dot * inv_z;
      const double e = saved.e[t];
      const double kRv = contract(R1, k, v);
      apply_kv(e);
      const double dpt = e * (kRv - zeta);
      if (grad.p) grad.p[g] += dpt;
      if (grad.delta) grad.delta[g] += dpt / delta;
    }
    if (paths.prefix) {
      if (t + 1 < T) {
        const double gamma_next = std::exp(in.gtilde[sl.gate(t + 1)]);
        for (double& x : Lam) x *= gamma_next;
      }
      for (std::size_t j = 0; j < dd; ++j) Lam[j] += dM[j];
      const double kLv = contract(Lam, k, v);
      apply_kv(1.0);
      if (grad.gtilde) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dd; ++j) dot += Lam[j] * saved.s2[t * dd + j];
        grad.gtilde[g] += dot - kLv;
      }
    }
    if (paths.clock) {
      const double inv_d = 1.0 / saved.den[t];
      double dot = 0.0;
      for (std::size_t j = 0; j < dd; ++j) {
        R3[j] += dM[j] * inv_d;
        dot += dM[j] * saved.p3[t * dd + j];
      }
      xi += dot * inv_d;
      const double kRv = contract(R3, k, v);
      apply_kv(delta);
      if (grad.delta) grad.delta[g] += kRv - xi;
    }
  }
}

/// Per-slice quantities shared by the quadratic routes.
struct Prefix {
  std::vector<double> ptilde, lse;  // Riemann path
  std::vector<double> cum_log_gate; // L_t = sum_{j<=t} g~_j
  std::vector<double> den;          // sum_{j<=t} delta_j
};

inline Prefix make_prefix(const Inputs& in, const Slice& sl, const PathFlags& paths, FlopCount* count) {
  Prefix pre;
  if (paths.riemann) prefix_lse(in, sl, pre.ptilde, pre.lse, count);
  if (paths.prefix) {
    pre.cum_log_gate.resize(sl.T);
    double acc = 0.0;
    for (std::size_t t = 0; t < sl.T; ++t) pre.cum_log_gate[t] = (acc += in.gtilde[sl.gate(t)]);
    if (count) count->adds += sl.T;
  }
  if (paths.clock) {
    pre.den.resize(sl.T);
    double acc = 0.0;
    for (std::size_t t = 0; t < sl.T; ++t) pre.den[t] = (acc += in.delta[sl.gate(t)]);
    if (count) {
      count->adds += sl.T;
      count->mults += sl.T;
    }
  }
  return pre;
}

/// One materialized row t of per-pair weights, i in [0, t].
struct Row {
  std::vector<double> G, A, B, rot, W, alpha, pi;
};

inline void fill_row(const Inputs& in, const Slice& sl, const PathFlags& paths, PhiMode phi, double scale,
                     const Prefix& pre, std::size_t t, Row& row, FlopCount* count) {
  const std::size_t n = t + 1, dh = sl.dh;
  for (auto* vec : {&row.rot, &row.W, &row.alpha, &row.pi}) vec->resize(n);
  for (auto [vec, on] : {std::pair{&row.G, paths.riemann}, std::pair{&row.A, paths.prefix}, std::pair{&row.B, paths.clock}}) {
    if (on) vec->resize(n);
    else vec->assign(n, 0.0);  // disabled paths keep all-zero rows
  }
  const double* q = in.q + sl.vec(t);
  const double inv_d = paths.clock ? 1.0 / pre.den[t] : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* k = in.k + sl.vec(i);
    double r = 0.0;
    for (std::size_t a = 0; a < dh; ++a) r += q[a] * k[a];
    double w = 0.0;
    if (paths.riemann) w += (row.G[i] = std::exp(pre.ptilde[i] - pre.lse[t]));
    if (paths.prefix) w += (row.A[i] = std::exp(pre.cum_log_gate[t] - pre.cum_log_gate[i]));
    if (paths.clock) w += (row.B[i] = in.delta[sl.gate(i)] * inv_d);
    row.rot[i] = r;
    row.W[i] = w;
    row.alpha[i] = scale * r * w;
  }
  if (phi == PhiMode::kSoftmax) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double a : row.alpha) mx = std::max(mx, a);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (row.pi[i] = std::exp(row.alpha[i] - mx));
    const double inv = 1.0 / z;
    for (double& x : row.pi) x *= inv;
  } else {
    row.pi = row.alpha;
  }
  if (count) {
    const auto N = static_cast<std::uint64_t>(n);
    count->mults += N * (dh + 2 + (paths.clock ? 1 : 0));
    count->adds += N * (dh + (paths.riemann ? 1 : 0) + (paths.prefix ? 1 : 0) + paths.count());
    count->transcendentals += N * ((paths.riemann ? 1 : 0) + (paths.prefix ? 1 : 0));
    if (phi == PhiMode::kSoftmax) {
      count->adds += 2 * N;
      count->transcendentals += N;
      count->mults += 1 + N;
    }
  }
}

/// Materialized evaluation, either score map. O(T^2 d_h) per slice.
inline void quadratic_forward(const Inputs& in, const Slice& sl, const PathFlags& paths, PhiMode phi, double scale,
                              double* out, FlopCount* count) {
  const Prefix pre = make_prefix(in, sl, paths, count);
  Row row;
  for (std::size_t t = 0; t < sl.T; ++t) {
    fill_row(in, sl, paths, phi, scale, pre, t, row, count);
    double* o = out + sl.vec(t);
    for (std::size_t b = 0; b < sl.dh; ++b) o[b] = 0.0;
    for (std::size_t i = 0; i <= t; ++i) {
      const double* v = in.v + sl.vec(i);
      for (std::size_t b = 0; b < sl.dh; ++b) o[b] += row.pi[i] * v[b];
    }
    if (count) {
      count->mults += (t + 1) * sl.dh;
      count->adds += (t + 1) * sl.dh;
    }
  }
}

/// Reverse pass of quadratic_forward; rows are recomputed rather than stored.
inline void quadratic_backward(const Inputs& in, const Slice& sl, const PathFlags& paths, PhiMode phi, double scale,
                               const double* grad_out, const Grads& grad) {
  const std::size_t T = sl.T, dh = sl.dh;
  const Prefix pre = make_prefix(in, sl, paths, nullptr);
  std::vector<double> dpt(T, 0.0), dL(T, 0.0), dDen(T, 0.0), dpi, dalpha;
  Row row;
  for (std::size_t t = 0; t < T; ++t) {
    fill_row(in, sl, paths, phi, scale, pre, t, row, nullptr);
    const std::size_t n = t + 1;
    const double* dO = grad_out + sl.vec(t);
    const double* q = in.q + sl.vec(t);
    dpi.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* v = in.v + sl.vec(i);
      double acc = 0.0;
      for (std::size_t b = 0; b < dh; ++b) acc += dO[b] * v[b];
      dpi[i] = acc;
      if (grad.v) {
        double* dv = grad.v + sl.vec(i);
        for (std::size_t b = 0; b < dh; ++b) dv[b] += row.pi[i] * dO[b];
      }
    }
    if (phi == PhiMode::kSoftmax) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += row.pi[i] * dpi[i];
      dalpha.resize(n);
      for (std::size_t i = 0; i < n; ++i) dalpha[i] = row.pi[i] * (dpi[i] - dot);
    } else {
      dalpha = dpi;
    }
    double g_dot = 0.0;  // sum_j G_{t,j} dW_{t,j}
    const double inv_d = paths.clock ? 1.0 / pre.den[t] : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dr = dalpha[i] * scale * row.W[i];
      const double dW = dalpha[i] * scale * row.rot[i];
      const double* k = in.k + sl.vec(i);
      if (grad.q) {
        double* dq = grad.q + sl.vec(t);
        for (std::size_t a = 0; a < dh; ++a) dq[a] += dr * k[a];
      }
      if (grad.k) {
        double* dk = grad.k + sl.vec(i);
        for (std::size_t a = 0; a < dh; ++a) dk[a] += dr * q[a];
      }
      if (paths.riemann) {
        dpt[i] += row.G[i] * dW;
        g_dot += row.G[i] * dW;
      }
      if (paths.prefix) {
        dL[t] += dW * row.A[i];
        dL[i] -= dW * row.A[i];
      }
      if (paths.clock) {
        const double d_i = in.delta[sl.gate(i)];
        if (grad.delta) grad.delta[sl.gate(i)] += dW * inv_d;
        dDen[t] -= dW * d_i * inv_d * inv_d;
      }
    }
    if (paths.riemann) {
      for (std::size_t i = 0; i < n; ++i) dpt[i] -= row.G[i] * g_dot;
    }
  }
  double acc_l = 0.0, acc_d = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const std::size_t g = sl.gate(t);
    acc_l += dL[t];
    acc_d += dDen[t];
    if (paths.prefix && grad.gtilde) grad.gtilde[g] += acc_l;
    if (paths.clock && grad.delta) grad.delta[g] += acc_d;
    if (paths.riemann) {
      if (grad.p) grad.p[g] += dpt[t];
      if (grad.delta) grad.delta[g] += dpt[t] / in.delta[g];
    }
  }
}

}  // namespace kernel
}  // namespace caps
