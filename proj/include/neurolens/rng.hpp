#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace neurolens {

/// SplitMix64. Pinned so that fixtures are reproducible from other languages.
///
/// Test vectors (first three outputs):
///   seed 0  -> e220a8397b1dcdaf 6e789e6aa1b965f4 06c45d188009454f
///   seed 42 -> bdd732262feb6e95 28efe333b266f103 47526757130f9f52
///
/// uniform() takes the top 53 bits; normal() is Box-Muller using two
/// consecutive uniforms (u1 mapped to (0,1]) and returns the cosine branch only.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) by rejection; n > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~0ULL - (~0ULL % n);
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::uint64_t state_;
};

}  // namespace neurolens
