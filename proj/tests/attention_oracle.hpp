#pragma once

// Brute-force reference for CAPS attention, written directly from the
// definitions with no shared code from the kernels: explicit projections,
// explicit cos/sin rotation, dense softmax for G, explicit interval sums for A.

#include <cmath>
#include <vector>

#include "caps/attention/layer.hpp"

namespace caps::testing {

struct OracleGates {
  std::vector<std::vector<double>> delta, p, gt;  // [T][H]
};

struct OracleResult {
  std::vector<std::vector<std::vector<double>>> out;  // [T][H][dh]
  std::vector<std::vector<std::vector<double>>> G, A, B, rot, total;  // [H][T][T]
  std::vector<std::vector<std::vector<double>>> qh, kh, v;  // [T][H][dh]
  OracleGates gates;
};

inline double oracle_softplus(double z) { return z > 30 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline OracleResult oracle_attention(const Array& h, const KernelParams& prm, const CapsConfig& cfg) {
  const std::size_t T = h.dim(0), d = h.dim(1), H = cfg.num_heads, dh = cfg.head_dim;
  const double scale = cfg.resolved_scale();
  auto proj = [&](const Array& W, std::size_t t, std::size_t col) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += h[t * d + j] * W[j * W.dim(1) + col];
    return acc;
  };
  OracleResult r;
  auto cube = [](std::size_t a, std::size_t b, std::size_t c) {
    return std::vector<std::vector<std::vector<double>>>(a, std::vector<std::vector<double>>(b, std::vector<double>(c, 0.0)));
  };
  r.qh = cube(T, H, dh);
  r.kh = cube(T, H, dh);
  r.v = cube(T, H, dh);
  r.out = cube(T, H, dh);
  r.G = cube(H, T, T);
  r.A = cube(H, T, T);
  r.B = cube(H, T, T);
  r.rot = cube(H, T, T);
  r.total = cube(H, T, T);
  r.gates.delta.assign(T, std::vector<double>(H));
  r.gates.p = r.gates.delta;
  r.gates.gt = r.gates.delta;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t hd = 0; hd < H; ++hd) {
      const double delta = oracle_softplus(proj(prm.w_c, t, hd)) + cfg.clock_epsilon;
      r.gates.delta[t][hd] = delta;
      r.gates.p[t][hd] = proj(prm.w_p, t, hd);
      r.gates.gt[t][hd] = -oracle_softplus(proj(prm.w_g, t, hd)) * delta;
      std::vector<double> q(dh), k(dh);
      for (std::size_t a = 0; a < dh; ++a) {
        q[a] = proj(prm.w_q, t, hd * dh + a);
        k[a] = proj(prm.w_k, t, hd * dh + a);
        r.v[t][hd][a] = proj(prm.w_v, t, hd * dh + a);
      }
      for (std::size_t l = 0; l < dh / 2; ++l) {
        const double th = static_cast<double>(t) * prm.omega[hd * (dh / 2) + l];
        const double c = std::cos(th), s = std::sin(th);
        r.qh[t][hd][2 * l] = c * q[2 * l] - s * q[2 * l + 1];
        r.qh[t][hd][2 * l + 1] = s * q[2 * l] + c * q[2 * l + 1];
        r.kh[t][hd][2 * l] = c * k[2 * l] - s * k[2 * l + 1];
        r.kh[t][hd][2 * l + 1] = s * k[2 * l] + c * k[2 * l + 1];
      }
    }
  }
  for (std::size_t hd = 0; hd < H; ++hd) {
    for (std::size_t t = 0; t < T; ++t) {
      double z = 0.0, dsum = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        z += std::exp(r.gates.p[j][hd]) * r.gates.delta[j][hd];
        dsum += r.gates.delta[j][hd];
      }
      std::vector<double> alpha(t + 1);
      for (std::size_t i = 0; i <= t; ++i) {
        double interval = 0.0;
        for (std::size_t j = i + 1; j <= t; ++j) interval += r.gates.gt[j][hd];
        const double G = cfg.paths.riemann ? std::exp(r.gates.p[i][hd]) * r.gates.delta[i][hd] / z : 0.0;
        const double A = cfg.paths.prefix ? std::exp(interval) : 0.0;
        const double B = cfg.paths.clock ? r.gates.delta[i][hd] / dsum : 0.0;
        double rot = 0.0;
        for (std::size_t a = 0; a < dh; ++a) rot += r.qh[t][hd][a] * r.kh[i][hd][a];
        r.G[hd][t][i] = G;
        r.A[hd][t][i] = A;
        r.B[hd][t][i] = B;
        r.rot[hd][t][i] = rot;
        r.total[hd][t][i] = alpha[i] = scale * rot * (G + A + B);
      }
      if (cfg.phi_mode == PhiMode::kSoftmax) {
        double mx = alpha[0];
        for (double a : alpha) mx = std::max(mx, a);
        double s = 0.0;
        for (double& a : alpha) s += (a = std::exp(a - mx));
        for (double& a : alpha) a /= s;
      }
      for (std::size_t i = 0; i <= t; ++i) {
        for (std::size_t a = 0; a < dh; ++a) r.out[t][hd][a] += alpha[i] * r.v[i][hd][a];
      }
    }
  }
  return r;
}

}  // namespace caps::testing
