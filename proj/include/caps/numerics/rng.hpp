#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace caps {

/// Counter-based generator: draw n of stream (seed, stream) is a pure function of
/// (seed, stream, n), so results do not depend on how work is scheduled.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Independent child stream, keyed by an arbitrary id.
  Rng fork(std::uint64_t id) const { return Rng(seed_, mix(stream_ ^ mix(id + 0x632be59bd9b4e019ULL))); }

  std::uint64_t next_u64() {
    const std::uint64_t key = mix(seed_ ^ mix(stream_ + 0x9e3779b97f4a7c15ULL));
    return mix(key + 0xd1b54a32d192ed03ULL * ++counter_);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Normal(mean, std^2) via Box-Muller; consumes two draws.
  double normal(double mean = 0.0, double std = 1.0) {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return mean + std * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace caps
