#pragma once

// Portable seeded randomness. Every random decision in the project flows
// through one named generator (xoshiro256** seeded via splitmix64) so that
// runs are bit-reproducible across platforms and standard-library versions.
// Streams are keyed by (seed, purpose, epoch, index); distinct purposes never
// share a stream.

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "msvp/common.hpp"

namespace msvp::rng {

inline uint64_t splitmix64_next(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Xoshiro256 {
 public:
  Xoshiro256() : Xoshiro256(0, "default") {}

  Xoshiro256(uint64_t seed, std::string_view purpose, uint64_t epoch = 0,
             uint64_t index = 0) {
    uint64_t k = seed;
    k ^= fnv1a64(purpose);
    (void)splitmix64_next(k);
    k ^= epoch * 0x9e3779b97f4a7c15ull;
    (void)splitmix64_next(k);
    k ^= index * 0xd1342543de82ef95ull;
    for (auto& w : s_) w = splitmix64_next(k);
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  uint64_t next() {
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

  // Uniform in [0,1) with 53 random bits.
  double next_double() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0,n) (Lemire with rejection).
  uint64_t next_below(uint64_t n) {
    MSVP_CHECK(n > 0, "next_below: n must be positive");
    uint64_t x = next();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto lo = static_cast<uint64_t>(m);
    if (lo < n) {
      const uint64_t threshold = (0 - n) % n;
      while (lo < threshold) {
        x = next();
        m = static_cast<__uint128_t>(x) * n;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Box-Muller; always consumes exactly two draws per value.
  double next_normal() {
    double u1 = next_double();
    const double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
};

}  // namespace msvp::rng
