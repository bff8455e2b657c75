#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace noisemap {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t value);

// Deterministic child seed for a (master, stream ids...) tuple.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> stream);

// n i.i.d. N(0, 1) draws from a generator seeded with `seed`.
std::vector<float> standard_normal(std::size_t n, std::uint64_t seed);

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

}  // namespace noisemap
