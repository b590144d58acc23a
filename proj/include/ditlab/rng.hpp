#pragma once

#include <cstdint>
#include <cmath>

namespace ditlab {

/// Counter-based pseudo-random generator (SplitMix64 finalizer over a
/// keyed counter). Every draw is a pure function of (seed, stream, counter),
/// so results are reproducible bit-for-bit across platforms and support
/// random access by counter.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed ^ 0x2545F4914F6CDD1DULL, stream)) {}

  std::uint64_t next_u64() { return value_at(counter_++); }

  /// Uniform in (0, 1), never exactly 0 or 1.
  double uniform() { return to_unit(next_u64()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes two counter slots per draw
  /// so normals are random-accessible too.
  double normal() {
    const double z = normal_at_counter(counter_);
    counter_ += 2;
    return z;
  }

  /// Random access: the n-th normal of this (seed, stream).
  double normal_at(std::uint64_t n) const { return normal_at_counter(2 * n); }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static double to_unit(std::uint64_t x) {
    return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
  }

  std::uint64_t value_at(std::uint64_t c) const { return mix(key_, c); }

  double normal_at_counter(std::uint64_t c) const {
    const double u1 = to_unit(value_at(c));
    const double u2 = to_unit(value_at(c + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace ditlab
