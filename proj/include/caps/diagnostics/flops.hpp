#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "caps/attention/layer.hpp"

namespace caps {

/// Forward cost of one CAPS attention block (projections, gates, rotation,
/// kernel, output projection) over a single sequence of length T.
struct FlopReport {
  std::string mode;  // "linear" or "softmax"
  std::size_t T = 0, d = 0, heads = 0, head_dim = 0;
  FlopCount count;
  FlopCount kernel;  // attention kernel share of `count`
  double wall_time = 0.0;  // seconds, median over repetitions
};

/// Kernel operations for one sequence, matching the instrumented kernels.
inline FlopCount kernel_flops(const CapsConfig& cfg, std::size_t T) {
  const std::uint64_t H = cfg.num_heads, dh = cfg.head_dim, dd = dh * dh, n = cfg.paths.count();
  const std::uint64_t r = cfg.paths.riemann, p = cfg.paths.prefix, c = cfg.paths.clock;
  const std::uint64_t t = T;
  FlopCount f;
  if (cfg.phi_mode == PhiMode::kIdentity) {
    f.adds = t * (r * (4 + dd) + p * dd + c * (1 + dd) + n * dd + dd);
    f.mults = t * (r * (2 + dh + 2 * dd) + p * 2 * dd + c * (1 + dh + dd) + (r + c) * dd + dd + dh);
    f.transcendentals = t * (3 * r + p);
    f.state_update_mults = t * (r * 2 * dd + p * 2 * dd + c * dd);
  } else {
    const std::uint64_t pairs = t * (t + 1) / 2;
    f.adds = r * 5 * t + p * t + c * t + pairs * (dh + r + p + n) + 2 * pairs + pairs * dh;
    f.mults = r * t + c * t + pairs * (dh + 2 + c) + t + pairs + pairs * dh;
    f.transcendentals = r * 4 * t + pairs * (r + p) + pairs;
  }
  FlopCount out;
  out.adds = H * f.adds;
  out.mults = H * f.mults;
  out.transcendentals = H * f.transcendentals;
  out.state_update_mults = H * f.state_update_mults;
  return out;
}

/// Operations outside the kernel: q/k/v and gate projections, softplus gates,
/// two rotations and the output projection.
inline FlopCount projection_flops(const CapsConfig& cfg, std::size_t d, std::size_t T) {
  const std::uint64_t t = T, H = cfg.num_heads, hd = H * cfg.head_dim, half = cfg.head_dim / 2, dm = d;
  FlopCount f;
  const std::uint64_t matmul = t * dm * (3 * hd + 3 * H) + t * hd * dm;
  const std::uint64_t pairs = 2 * t * H * half;  // rotated (q, k) coordinate pairs
  f.mults = matmul + t * H + pairs * 5;
  f.adds = matmul + 3 * t * H + pairs * 2;
  f.transcendentals = 4 * t * H + pairs * 2;
  return f;
}

/// Analytic counters plus a median wall-clock time of the forward pass.
inline FlopReport count_flops(const CapsConfig& cfg, std::size_t d, std::size_t T, std::size_t reps = 10,
                              bool time_it = true) {
  cfg.validate();
  FlopReport r;
  r.mode = cfg.phi_mode == PhiMode::kIdentity ? "linear" : "softmax";
  r.T = T;
  r.d = d;
  r.heads = cfg.num_heads;
  r.head_dim = cfg.head_dim;
  r.kernel = kernel_flops(cfg, T);
  r.count = projection_flops(cfg, d, T);
  r.count += r.kernel;
  if (!time_it || T == 0) return r;

  Rng rng(7);
  const KernelParams kp = init_kernel_params(d, cfg, 0.1, rng);
  Array w_o({cfg.num_heads * cfg.head_dim, d});
  for (double& x : w_o.data()) x = rng.normal() * 0.1;
  Array h({1, T, d});
  for (double& x : h.data()) x = rng.uniform(-1.0, 1.0);
  std::vector<double> times;
  for (std::size_t k = 0; k < std::max<std::size_t>(reps, 10); ++k) {
    const auto start = std::chrono::steady_clock::now();
    Tape tape;
    const Var att = caps_attention(tape.constant(h), detail::bind_constants(tape, kp), cfg);
    const Var out = matmul(reshape(att, {1, T, cfg.num_heads * cfg.head_dim}), tape.constant(w_o));
    (void)out;
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
  r.wall_time = times[times.size() / 2];
  return r;
}

/// Least-squares polynomial fit of y on x (degree 1 or 2); returns the largest
/// residual relative to max |y|.
inline double polyfit_residual(const std::vector<double>& x, const std::vector<double>& y, int degree) {
  const std::size_t n = x.size(), m = static_cast<std::size_t>(degree) + 1;
  if (n < m) throw ConfigError("polyfit needs at least degree + 1 points");
  // normal equations in long double, Gaussian elimination with partial pivoting
  std::vector<std::vector<long double>> a(m, std::vector<long double>(m + 1, 0.0L));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<long double> pw(2 * m, 1.0L);
    for (std::size_t k = 1; k < 2 * m; ++k) pw[k] = pw[k - 1] * x[i];
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < m; ++c) a[r][c] += pw[r + c];
      a[r][m] += pw[r] * y[i];
    }
  }
  for (std::size_t c = 0; c < m; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < m; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    for (std::size_t r = 0; r < m; ++r) {
      if (r == c) continue;
      const long double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k <= m; ++k) a[r][k] -= f * a[c][k];
    }
  }
  long double worst = 0.0L, scale = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    long double fit = 0.0L, pw = 1.0L;
    for (std::size_t k = 0; k < m; ++k, pw *= x[i]) fit += (a[k][m] / a[k][k]) * pw;
    worst = std::max(worst, std::abs(fit - static_cast<long double>(y[i])));
    scale = std::max(scale, std::abs(static_cast<long double>(y[i])));
  }
  return static_cast<double>(scale > 0 ? worst / scale : worst);
}

}  // namespace caps
