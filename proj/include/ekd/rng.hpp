#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ekd {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a root seed and a tuple of tags.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = mix64(root);
  for (auto t : tags) s = mix64(s ^ mix64(t + 0x632be59bd9b4e019ULL));
  return s;
}

// Stream tags, kept stable so stored runs stay reproducible.
namespace stream {
inline constexpr std::uint64_t shuffle = 0x5348;
inline constexpr std::uint64_t augment = 0x4155;
inline constexpr std::uint64_t student = 0x5354;
inline constexpr std::uint64_t teacher = 0x5445;
inline constexpr std::uint64_t subsample = 0x5355;
inline constexpr std::uint64_t synthetic = 0x5359;
}  // namespace stream

}  // namespace ekd
