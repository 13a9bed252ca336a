#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace relreason {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Order-sensitive hash of several stream coordinates into one seed, e.g.
/// (master_seed, epoch, image_index, view).
constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p));
  return h;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline bool bernoulli(Rng& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

}  // namespace relreason
