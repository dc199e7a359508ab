#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace difsr::numcore {

using Rng = std::mt19937_64;

/// Normal(0, std) draws rejected outside +-2 std.
inline std::vector<double> truncated_normal(std::size_t count, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(count);
  for (double& v : out) {
    double z;
    do {
      z = normal(rng);
    } while (z < -2.0 || z > 2.0);
    v = z * stddev;
  }
  return out;
}

inline std::vector<double> standard_normal(std::size_t count, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(count);
  for (double& v : out) v = normal(rng);
  return out;
}

/// splitmix64 finaliser; derives independent stream seeds from (seed, salt).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace difsr::numcore
