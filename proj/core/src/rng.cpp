#include "mltd/rng.hpp"

#include <sstream>

#include "mltd/error.hpp"

namespace mltd {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t substream_seed(std::uint64_t root, std::string_view name, std::uint64_t index) {
  return splitmix64(splitmix64(root ^ fnv1a(name)) + splitmix64(index));
}

Rng substream(std::uint64_t root, std::string_view name, std::uint64_t index) {
  return Rng(substream_seed(root, name, index));
}

Tensor randn(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

Tensor rand_uniform(const Shape& shape, double lo, double hi, Rng& rng) {
  Tensor t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream is(state);
  is >> rng;
  if (!is) throw FormatError("rng", "malformed generator state");
  return rng;
}

}  // namespace mltd
