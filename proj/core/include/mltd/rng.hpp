#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "mltd/tensor.hpp"

namespace mltd {

using Rng = std::mt19937_64;

/// Seed of the named substream `name`/`index` under `root`. Streams with
/// different names or indices are decorrelated through splitmix64.
std::uint64_t substream_seed(std::uint64_t root, std::string_view name, std::uint64_t index = 0);
Rng substream(std::uint64_t root, std::string_view name, std::uint64_t index = 0);

/// Normal(0, stddev) tensor.
Tensor randn(const Shape& shape, double stddev, Rng& rng);
/// Uniform[lo, hi) tensor.
Tensor rand_uniform(const Shape& shape, double lo, double hi, Rng& rng);

std::string rng_state(const Rng& rng);
Rng rng_from_state(const std::string& state);

}  // namespace mltd
