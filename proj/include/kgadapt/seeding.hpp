#pragma once
// All randomness flows from one root seed. Per-module streams are derived by
// hashing (root seed, name) so they stay reproducible but decorrelated.

#include <cstdint>
#include <random>
#include <string_view>

namespace kgadapt {

using Rng = std::mt19937_64;

std::uint64_t derive_seed(std::uint64_t root, std::string_view name);
std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t index);

inline Rng make_rng(std::uint64_t root, std::string_view name) {
  return Rng(derive_seed(root, name));
}

}  // namespace kgadapt
