#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "caps/data/series.hpp"

namespace caps {

/// Trend + phase-dependent seasonality + decaying sparse shocks + noise:
///   y_t = mu0 + beta t + a cos(omega t + phi_c) + s_t + e_t,  s_t = rho s_{t-1} + u_t
/// for t = 1..length. Channel c uses phase phi + 2 pi c / C and its own shocks
/// and noise; the trend is shared.
struct SyntheticSpec {
  double mu0 = 0.0;
  double beta = 0.0;
  double amp = 1.0;
  double omega = 2.0 * std::numbers::pi / 24.0;
  double phase = 0.0;
  double rho = 0.9;
  double impulse_prob = 0.02;
  double impulse_std = 1.0;
  std::size_t length = 1000;
  std::size_t channels = 1;
  double noise_std = 0.0;
  std::uint64_t seed = 2026;

  void validate() const {
    if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("synthetic rho must lie in (0, 1)");
    if (!(omega > 0.0)) throw ConfigError("synthetic omega must be > 0");
    if (!(impulse_prob >= 0.0 && impulse_prob <= 1.0)) throw ConfigError("impulse_prob must lie in [0, 1]");
    if (impulse_std < 0.0 || noise_std < 0.0) throw ConfigError("synthetic standard deviations must be >= 0");
    if (length == 0 || channels == 0) throw ConfigError("synthetic length and channels must be >= 1");
  }
};

/// All arrays [length, channels]; y = trend + seasonal + shock + noise.
struct SyntheticSeries {
  SeriesTable table;
  Array trend, seasonal, shock, impulses, noise;
};

/// s_t = rho s_{t-1} + u_t with s_0 = u_0.
inline std::vector<double> shock_series(const std::vector<double>& u, double rho) {
  std::vector<double> s(u.size());
  double prev = 0.0;
  for (std::size_t t = 0; t < u.size(); ++t) s[t] = prev = rho * prev + u[t];
  return s;
}

inline SyntheticSeries generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t T = spec.length, C = spec.channels;
  SyntheticSeries out{{}, Array({T, C}), Array({T, C}), Array({T, C}), Array({T, C}), Array({T, C})};
  Array y({T, C});
  const Rng root(spec.seed, 0x53594e544845ULL);
  for (std::size_t c = 0; c < C; ++c) {
    Rng shocks = root.fork(2 * c);
    Rng noise = root.fork(2 * c + 1);
    const double phi = spec.phase + 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(C);
    std::vector<double> u(T, 0.0);
    for (std::size_t i = 0; i < T; ++i) {
      // fixed number of draws per step keeps streams aligned across settings
      const double gate = shocks.uniform();
      const double mag = shocks.normal(0.0, spec.impulse_std);
      if (gate < spec.impulse_prob) u[i] = mag;
    }
    const std::vector<double> s = shock_series(u, spec.rho);
    for (std::size_t i = 0; i < T; ++i) {
      const double t = static_cast<double>(i + 1);
      const std::size_t k = i * C + c;
      out.trend[k] = spec.mu0 + spec.beta * t;
      out.seasonal[k] = spec.amp * std::cos(spec.omega * t + phi);
      out.impulses[k] = u[i];
      out.shock[k] = s[i];
      out.noise[k] = spec.noise_std > 0.0 ? noise.normal(0.0, spec.noise_std) : 0.0;
      y[k] = out.trend[k] + out.seasonal[k] + out.shock[k] + out.noise[k];
    }
  }
  for (std::size_t c = 0; c < C; ++c) out.table.names.push_back("y" + std::to_string(c));
  for (std::size_t i = 0; i < T; ++i) out.table.timestamps.push_back(std::to_string(i + 1));
  for (std::size_t c = 0; c < C; ++c) out.table.targets.push_back(c);
  out.table.values = std::move(y);
  return out;
}

}  // namespace caps
