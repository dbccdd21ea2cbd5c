#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

// Deterministic PRNG used for every random draw in the library.
//
// Algorithm: xoshiro256** 1.0 (Blackman & Vigna, public domain), state seeded
// through splitmix64. Bounded integers use Lemire's multiply-shift reduction
// and doubles take the top 53 bits of a draw, so sequences are identical on
// any platform with 64-bit integers and IEEE-754 doubles. Version tag below
// changes if any of this ever changes.

namespace hdv {

inline constexpr const char* kRngVersion = "xoshiro256ss-v1";

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, n), n > 0.
  uint64_t next_below(uint64_t n) {
    // Lemire reduction with rejection to stay exactly uniform.
    uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto lo = static_cast<uint64_t>(m);
    if (lo < n) {
      const uint64_t threshold = (0 - n) % n;
      while (lo < threshold) {
        x = next_u64();
        m = static_cast<__uint128_t>(x) * n;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller (deterministic, no cached spare).
  double normal() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream; mixing constant keeps derived streams disjoint
  // from reseeding with small integers.
  Rng fork(uint64_t salt) const {
    uint64_t sm = s_[0] ^ (salt * 0x9e3779b97f4a7c15ULL + 0x7f4a7c159e3779b9ULL);
    Rng child(0);
    for (auto& word : child.s_) word = splitmix64(sm);
    return child;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4]{};
};

}  // namespace hdv
