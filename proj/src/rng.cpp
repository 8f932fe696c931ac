#include "derain/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace derain {

std::string CountingRng::serialize() const {
  std::ostringstream os;
  os << engine_ << ' ' << draws_;
  return os.str();
}

CountingRng CountingRng::deserialize(const std::string& text) {
  std::istringstream is(text);
  CountingRng rng;
  is >> rng.engine_ >> rng.draws_;
  if (is.fail()) throw std::invalid_argument("malformed rng state");
  return rng;
}

std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace derain
