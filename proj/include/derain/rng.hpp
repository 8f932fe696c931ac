#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string>

namespace derain {

/// mt19937_64 that counts how many 64-bit words it has produced. Training
/// and augmentation draw through this so tests can see how much of the
/// stream a code path consumed.
class CountingRng {
 public:
  using result_type = std::uint64_t;

  explicit CountingRng(std::uint64_t seed = 0) : engine_(seed) {}

  result_type operator()() {
    ++draws_;
    return engine_();
  }
  static constexpr result_type min() { return std::numeric_limits<result_type>::min(); }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  std::uint64_t draws() const { return draws_; }

  /// Engine state followed by the draw count, as text.
  std::string serialize() const;
  /// Inverse of serialize(). Throws std::invalid_argument on malformed text.
  static CountingRng deserialize(const std::string& text);

  bool operator==(const CountingRng& other) const {
    return engine_ == other.engine_ && draws_ == other.draws_;
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
};

/// Derives an independent child seed, e.g. one per training sample.
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace derain
