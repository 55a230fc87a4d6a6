#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fedtune {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t seed_tag(std::string_view tag) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Mixes a base seed with any number of integer coordinates (round, client,
// epoch, ...) into an independent stream seed.
template <typename... Parts>
constexpr std::uint64_t derive_seed(std::uint64_t base, Parts... parts) noexcept {
  std::uint64_t h = splitmix64(base);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(parts))), ...);
  return h;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

}  // namespace fedtune
