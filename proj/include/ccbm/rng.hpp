#pragma once

// Counter-based pseudo-random numbers.
//
// Every draw is a pure function of (seed, stream, counter): the 64-bit word is
// the SplitMix64 finalizer applied to key + (counter + 1) * golden, where
// key = mix(seed) ^ mix(stream). Uniforms use the top 53 bits; normals use
// Box-Muller on consecutive uniform pairs. No state beyond the counter, so a
// generator can be recreated at any position and results do not depend on the
// standard library's distribution implementations.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace ccbm {

constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// FNV-1a; used to derive stream ids from readable names.
constexpr std::uint64_t stream_id(std::string_view name) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

class CounterRng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
      : key_(splitmix64(seed + kGolden) ^ splitmix64(stream ^ 0xD1B54A32D192ED03ULL)) {}

  constexpr CounterRng(std::uint64_t seed, std::string_view stream) noexcept
      : CounterRng(seed, stream_id(stream)) {}

  /// Derive an independent generator for a sub-stream (e.g. one per example).
  constexpr CounterRng fork(std::uint64_t sub) const noexcept {
    CounterRng r(*this);
    r.key_ = splitmix64(key_ ^ splitmix64(sub + 0x632BE59BD9B4E019ULL));
    r.counter_ = 0;
    return r;
  }

  constexpr std::uint64_t next_u64() noexcept {
    ++counter_;
    return splitmix64(key_ + counter_ * kGolden);
  }

  /// Uniform in [0, 1).
  constexpr double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection (unbiased).
  constexpr std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  double normal() noexcept {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  constexpr std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Fisher-Yates permutation of 0..n-1.
template <typename Index>
void shuffle_indices(Index* first, std::size_t n, CounterRng& rng) {
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace ccbm
