#pragma once

#include <cstdint>
#include <random>

namespace civb {

// All randomness flows through std::mt19937_64 engines seeded from named
// substreams of a 64-bit run seed. The substream seed is the SplitMix64
// finalizer applied to (seed, stream id, index), so adding a new consumer
// never shifts the draws of an existing one.
enum class Stream : std::uint64_t {
  confounders = 1,
  instrument = 2,
  treatment = 3,
  noise = 4,
  selection = 5,
  init = 6,
  split = 7,
  s_hat = 8,
  shuffle = 9,
  replication = 10,
  training = 11,
};

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index = 0) noexcept;
Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0);

// Uniform draw in [0, 1).
double uniform01(Rng& rng);
double standard_normal(Rng& rng);
bool bernoulli(Rng& rng, double p);

}  // namespace civb
