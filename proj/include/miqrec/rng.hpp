#pragma once

#include <cmath>
#include <cstdint>

namespace miqrec {

// Counter-based deterministic RNG (splitmix64 finalizer applied to seed+counter).
// The draw sequence depends only on (seed, number of draws), never on library
// distribution state, so training and evaluation replay exactly. Integer and
// uniform draws are bit-portable across platforms; normal() goes through libm
// and can differ in the last ulp between C libraries.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : seed_(seed) {}

  uint64_t next_u64() {
    uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // (0, 1] for log()
  double uniform_open0() { return double((next_u64() >> 11) + 1) * 0x1.0p-53; }

  // unbiased integer in [0, n)
  uint64_t below(uint64_t n) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // standard normal via Box-Muller (cosine branch only; keeps state = counter)
  double normal() {
    const double u1 = uniform_open0();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // N(0, sigma^2) truncated at +-2 sigma, by redraw
  double truncated_normal(double sigma) {
    double z;
    do {
      z = normal();
    } while (z < -2.0 || z > 2.0);
    return z * sigma;
  }

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t seed_;
  uint64_t counter_ = 0;
};

}  // namespace miqrec
