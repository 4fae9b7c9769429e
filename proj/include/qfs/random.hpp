#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace qfs {

// Deterministic random source.
//
// Algorithm: std::mt19937_64 (bit-exact per the C++ standard) with explicit
// 53-bit uniform construction and Box-Muller normals, so the draw sequence
// for a given seed does not depend on the standard library's distribution
// implementations. Gaussian draws go through libm (sqrt/log/cos), which is
// identical across runs on one platform.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), gen_(seed) {}

  uint64_t seed() const { return seed_; }
  static const char* algorithm() { return "mt19937_64+box-muller"; }

  // Derives an independent deterministic stream (data shuffling vs. init
  // vs. sampling) without coupling their draw counts.
  Rng fork(uint64_t stream) const {
    // splitmix64 of (seed, stream)
    uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z = z ^ (z >> 31);
    return Rng(z);
  }

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = gen_();
    while (x >= limit) x = gen_();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    const double two_pi = 6.283185307179586476925286766559;
    const double a = uniform();
    const double u = 1.0 - uniform();  // avoid log(0)
    const double r = std::sqrt(-2.0 * std::log(u));
    spare_ = r * std::sin(two_pi * a);
    has_spare_ = true;
    return mean + stddev * r * std::cos(two_pi * a);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace qfs
