#pragma once

#include <cmath>
#include <cstdint>

namespace s2rm {

// Deterministic splitmix64 generator. We roll our own instead of using
// <random> so that streams are identical across standard libraries and the
// bit patterns written into dataset files never depend on the toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is negligible for the small n used
  // here and keeps the draw count per call fixed, which matters for stream
  // alignment between runs.
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; consumes two uniforms per pair.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 == 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Derives an independent stream seed from a master seed and an index, so any
// element of a generated collection can be reproduced without generating its
// predecessors.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  Rng r(master ^ (0x9E3779B97F4A7C15ull * (index + 1)));
  return r.next_u64();
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b) {
  return derive_seed(derive_seed(master, a), b);
}

}  // namespace s2rm
