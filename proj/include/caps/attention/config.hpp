#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>

#include "caps/errors.hpp"

namespace caps {

/// Map applied to the composed scores before aggregating values.
enum class PhiMode { kIdentity, kSoftmax };

inline std::string to_string(PhiMode m) { return m == PhiMode::kIdentity ? "identity" : "softmax"; }

inline PhiMode parse_phi_mode(const std::string& s) {
  if (s == "identity" || s == "linear") return PhiMode::kIdentity;
  if (s == "softmax") return PhiMode::kSoftmax;
  throw ConfigError("unknown phi mode '" + s + "' (expected identity|softmax)");
}

/// Which additive weight paths contribute to the score.
struct PathFlags {
  bool riemann = true;
  bool prefix = true;
  bool clock = true;

  bool any() const noexcept { return riemann || prefix || clock; }
  int count() const noexcept { return int(riemann) + int(prefix) + int(clock); }
  friend bool operator==(const PathFlags&, const PathFlags&) = default;
};

/// Rotary frequency initialization.
struct RopeInit {
  enum class Kind { kStandard, kUniform };
  Kind kind = Kind::kStandard;
  double base = 10000.0;  // kStandard: omega_l = base^(-2l/d_h)
  double lo = 0.0;        // kUniform bounds
  double hi = 1.0;
};

struct CapsConfig {
  std::size_t num_heads = 4;
  std::size_t head_dim = 4;
  PhiMode phi_mode = PhiMode::kIdentity;
  PathFlags paths{};
  double clock_epsilon = 1e-4;
  RopeInit rope{};
  /// Unset means 1/d_h for identity and 1/sqrt(d_h) for softmax.
  std::optional<double> score_scale{};

  double resolved_scale() const {
    if (score_scale) return *score_scale;
    const double dh = static_cast<double>(head_dim);
    return phi_mode == PhiMode::kIdentity ? 1.0 / dh : 1.0 / std::sqrt(dh);
  }

  void validate() const {
    if (num_heads == 0) throw ConfigError("num_heads must be positive");
    if (head_dim == 0 || head_dim % 2 != 0) throw ConfigError("head_dim must be a positive even number");
    if (!(clock_epsilon > 0.0)) throw ConfigError("clock_epsilon must be > 0");
    if (!paths.any()) throw ConfigError("at least one attention path must be enabled");
    if (rope.kind == RopeInit::Kind::kStandard && !(rope.base > 1.0)) throw ConfigError("rope base must be > 1");
    if (rope.kind == RopeInit::Kind::kUniform && !(rope.hi >= rope.lo)) throw ConfigError("rope uniform bounds inverted");
  }
};

}  // namespace caps
