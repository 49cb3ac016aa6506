#pragma once

#include <cmath>
#include <cstdint>

namespace oneref {

// Deterministic xoshiro256** generator. The standard <random> distributions
// are implementation-defined, so every draw helper is hand-rolled here; all
// randomness in the project flows through this class for bit-exact replay.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    // splitmix64 expansion of the seed into the four state words.
    uint64_t x = seed;
    for (auto& word : state_) {
      x += 0x9e3779b97f4a7c15ull;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      word = z ^ (z >> 31);
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be >= 1.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // Uniform integer in [lo, hi] inclusive.
  int64_t range_inclusive(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // Log-uniform on [lo, hi]: exp of uniform on [ln lo, ln hi].
  double log_uniform(double lo, double hi) {
    return std::exp(uniform(std::log(lo), std::log(hi)));
  }

  // Standard normal via Box-Muller; one spare value cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(6.283185307179586476925286766559 * u2);
    have_spare_ = true;
    return mag * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Normal(0, stddev) rejected outside +-bound*stddev.
  double truncated_normal(double stddev, double bound = 2.0) {
    double x = normal();
    while (std::abs(x) > bound) x = normal();
    return x * stddev;
  }

 private:
  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  uint64_t state_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Per-sample stream derivation used by data pipelines: seed XOR sample index,
// re-diffused through the Rng constructor.
inline Rng per_sample_rng(uint64_t seed, uint64_t sample_index) {
  return Rng(seed ^ sample_index);
}

}  // namespace oneref
