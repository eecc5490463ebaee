#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace diffdet3d {

/// Engine seeded from a tuple of integers (run seed, phase, epoch, step, ...),
/// so any step's randomness can be reproduced without replaying the stream.
inline std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> key) {
  std::vector<std::uint32_t> words;
  words.reserve(key.size() * 2);
  for (const auto k : key) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

inline std::uint64_t draw_seed(std::mt19937_64& rng) { return rng(); }

}  // namespace diffdet3d
