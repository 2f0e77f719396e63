#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fewseg {

using Rng = std::mt19937_64;

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::uint64_t splitmix64(std::uint64_t x);

// Stage seeds: splitmix64(seed ^ fnv1a64(tag)). Stable across platforms.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

// Uniform double in [lo, hi]; returns lo exactly when lo == hi.
double uniform(Rng& rng, double lo, double hi);

// Uniform integer in [lo, hi] inclusive, via rejection on the raw 64-bit
// stream so results do not depend on the standard library's distributions.
std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi);

bool bernoulli(Rng& rng, double p);

double standard_normal(Rng& rng);

}  // namespace fewseg
