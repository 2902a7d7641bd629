#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace pmtpp {

using Rng = std::mt19937_64;

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

/// Deterministic independent stream keyed by (seed, keys...). Used wherever work
/// is split across sequences, replicates, or threads so results do not depend
/// on scheduling.
inline Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {}) {
  std::uint64_t h = detail::splitmix64(seed);
  for (auto k : keys) h = detail::splitmix64(h ^ detail::splitmix64(k + 0x632be59bd9b4e019ULL));
  return Rng(h);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Open on the left so that a + (b-a)*u never returns a.
inline double uniform_open_left(Rng& rng) {
  return 1.0 - uniform01(rng);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace pmtpp
