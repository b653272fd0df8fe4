#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bevtrack {

// Seed splitting: every random consumer derives its own stream from
// (base seed, purpose string[, index]), so adding a new consumer never
// perturbs existing streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t split_seed(std::uint64_t seed, std::string_view purpose,
                                std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ fnv1a(purpose)) ^ index);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view purpose,
                                std::uint64_t index = 0) {
  return std::mt19937_64(split_seed(seed, purpose, index));
}

}  // namespace bevtrack
