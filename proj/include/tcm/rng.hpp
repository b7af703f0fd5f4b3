#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tcm {

// splitmix64 finalizer; decorrelates nearby seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64_step(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffULL;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// All randomness flows from one root seed through named sub-seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return mix64(seed ^ mix64(fnv1a64(label)));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label,
                                 std::uint64_t index) {
  return mix64(derive_seed(seed, label) ^ mix64(index));
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
  return std::mt19937_64(mix64(seed));
}

}  // namespace tcm
