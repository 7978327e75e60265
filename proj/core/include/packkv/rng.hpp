#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace packkv {

/// SplitMix64 generator with portable uniform and normal draws.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next() % n; }

  /// Standard normal via Box-Muller (one value per call).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Derives an independent stream seed from a parent seed and a tag.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) noexcept {
    SplitMix64 g(seed ^ (tag * 0xd1b54a32d192ed03ull));
    g.next();
    return g.next();
  }

 private:
  std::uint64_t state_;
};

}  // namespace packkv
