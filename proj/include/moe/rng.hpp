// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace moe {

/// Counter-based splittable random generator.
///
/// Every draw is a pure function of (key, counter): the counter advances by
/// one per 64-bit output and the value is the SplitMix64 finalizer applied to
/// `key + GOLDEN * counter`. `split(stream)` derives an independent child key
/// without consuming parent state, so per-token / per-run streams are stable
/// regardless of evaluation order. No libc or platform RNG is involved.
class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(mix(seed + kGolden)) {}

  uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

  /// Uniform in [0, 1), 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Multiply-shift mapping, n > 0.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double normal() {
    // First uniform shifted into (0, 1] so log() stays finite.
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  /// Bernoulli draw, P(1) = p.
  int bernoulli(double p) { return uniform() < p ? 1 : 0; }

  /// Independent child stream; parent state is untouched.
  Rng split(uint64_t stream) const { return Rng(FromKey{}, mix(key_ ^ mix(stream + kGolden))); }

 private:
  struct FromKey {};
  Rng(FromKey, uint64_t key) : key_(key) {}

  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;
  static constexpr double kPi = 3.14159265358979323846;

  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace moe
