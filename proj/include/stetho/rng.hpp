#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace stetho {

// Deterministic, named substreams derived from one master seed. Separate
// streams keep unrelated consumers (parameter init, batch order, data
// generation) from perturbing each other when one of them is added or removed.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_mix(uint64_t seed, std::string_view tag) {
  uint64_t h = 0xcbf29ce484222325ULL ^ splitmix64(seed);
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(h);
}

inline uint64_t hash_mix(uint64_t seed, std::string_view tag, uint64_t index) {
  return splitmix64(hash_mix(seed, tag) ^ splitmix64(index * 0x9e3779b97f4a7c15ULL + 1));
}

inline std::mt19937_64 rng_stream(uint64_t seed, std::string_view tag) {
  return std::mt19937_64(hash_mix(seed, tag));
}

inline std::mt19937_64 rng_stream(uint64_t seed, std::string_view tag, uint64_t index) {
  return std::mt19937_64(hash_mix(seed, tag, index));
}

/// Normal draw rejected outside two standard deviations.
inline double truncated_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  double z;
  do {
    z = dist(rng);
  } while (z < -2.0 || z > 2.0);
  return z * stddev;
}

}  // namespace stetho
