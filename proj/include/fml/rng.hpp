#pragma once

// Platform-independent random helpers. The standard distributions are
// implementation-defined, so everything that feeds generated data or
// parameter initialization goes through these instead.

#include <cstddef>
#include <cstdint>
#include <random>

namespace fml {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream seed for item `index` of a run seeded with `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x51ed2701f3a5c7b1ULL));
}

// Uniform in [0, 1).
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Uniform in [0, count).
inline std::size_t uniform_index(Rng& rng, std::size_t count) {
  auto i = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(count));
  return i < count ? i : count - 1;
}

}  // namespace fml
