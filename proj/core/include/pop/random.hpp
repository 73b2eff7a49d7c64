#pragma once

#include <cstdint>
#include <random>

namespace pop {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Independent stream seed for (seed, purpose, index).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index = 0) {
  return splitmix64(splitmix64(splitmix64(seed) ^ purpose) ^ index);
}

// Stream purposes.
namespace stream {
inline constexpr std::uint64_t kDataClass = 1;
inline constexpr std::uint64_t kBackboneInit = 2;
inline constexpr std::uint64_t kPretrainShuffle = 3;
inline constexpr std::uint64_t kPromptInit = 4;
inline constexpr std::uint64_t kHeadInit = 5;
inline constexpr std::uint64_t kEpochShuffle = 6;
inline constexpr std::uint64_t kBuffer = 7;
inline constexpr std::uint64_t kKShot = 8;
inline constexpr std::uint64_t kBalance = 9;
}  // namespace stream

// N(0, std^2) truncated at two standard deviations.
template <typename T>
T truncated_normal(Rng& rng, double std) {
  std::normal_distribution<double> dist(0.0, 1.0);
  double z = dist(rng);
  while (z < -2.0 || z > 2.0) z = dist(rng);
  return static_cast<T>(z * std);
}

}  // namespace pop
