#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

namespace gippo {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based generator: output n is a pure function of (key, n), so a
// stream can be reproduced from its key without replaying other streams.
// Satisfies UniformRandomBitGenerator.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng() = default;
  explicit CounterRng(std::uint64_t key) : key_(splitmix64(key)) {}

  // Stream for parallel worker `index` of a run seeded with `seed`.
  static CounterRng stream(std::uint64_t seed, std::uint64_t index) { return CounterRng(seed ^ index); }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return splitmix64(key_ ^ splitmix64(counter_++)); }

  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal by Box-Muller; no cached state beyond the counter.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = splitmix64(0);
  std::uint64_t counter_ = 0;
};

}  // namespace gippo
