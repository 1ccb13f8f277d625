#pragma once

// Seeded random streams. Every random draw in the pipeline comes from a
// named stream derived from one root seed, so data generation, noise,
// weight init and batch order can be varied independently.
//
// Distribution sampling is hand-rolled on top of std::mt19937_64 because
// the std::*_distribution output sequences are implementation-defined and
// the corpus / noise plans must be reproducible byte for byte.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace vgt {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stream identified by (seed, name, a, b). Distinct names give
// statistically independent engines.
inline std::mt19937_64 named_stream(std::uint64_t seed, std::string_view name,
                                    std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t s = seed ^ fnv1a64(name);
  std::uint64_t z = splitmix64(s);
  s ^= a * 0x9e3779b97f4a7c15ULL;
  z ^= splitmix64(s);
  s ^= b * 0xc2b2ae3d27d4eb4fULL;
  z ^= splitmix64(s);
  return std::mt19937_64(z);
}

// Uniform in [0, 1) with 53 random bits.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n) without modulo bias.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - (std::numeric_limits<std::uint64_t>::max() % n);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

inline double uniform_range(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Box-Muller, cosine branch only. Stateless draw, two engine words each.
inline double gaussian(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238462643 * u2);
}

// Poisson via CDF inversion; fine for the small means used here.
inline int poisson(std::mt19937_64& rng, double lambda) {
  const double u = uniform01(rng);
  double p = std::exp(-lambda);
  double cdf = p;
  int k = 0;
  while (u > cdf && k < 10000) {
    ++k;
    p *= lambda / k;
    cdf += p;
  }
  return k;
}

}  // namespace vgt
