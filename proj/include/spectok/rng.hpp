#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace spectok {

// Deterministic RNG with a fixed cross-platform bit stream (splitmix64 core,
// Box-Muller normals). Standard-library distributions are implementation
// defined, which would break byte-for-byte reproducibility guarantees.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Derives an independent stream keyed by (seed, name). Used to give every
  // parameter tensor its own stream, so adding or removing tensors from a
  // model never shifts the draws another tensor sees.
  static Rng keyed(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 14695981039346656037ull;  // FNV-1a 64-bit
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    Rng rng(seed ^ h);
    rng.next_u64();  // decouple nearby seeds
    return rng;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller. The log argument is in (0, 1], never 0.
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal(mean, stddev) with samples outside +/- 2 stddev redrawn.
  double trunc_normal(double mean, double stddev) {
    double z = normal();
    while (std::fabs(z) > 2.0) z = normal();
    return mean + stddev * z;
  }

  // Integer in [0, n). n must be positive; modulo bias is negligible for
  // n far below 2^64 and irrelevant here (determinism matters, not equidistribution).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

}  // namespace spectok
