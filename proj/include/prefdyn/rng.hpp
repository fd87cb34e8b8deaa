// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>

namespace prefdyn {

/// Counter-based generator: output n is a stateless hash of (key, stream, n).
/// Streams with different ids are independent and any position is replayable.
class CounterRng {
public:
  using result_type = std::uint64_t;

  CounterRng(std::uint64_t seed, std::uint64_t stream)
      : key_(mix(seed ^ 0x243f6a8885a308d3ULL) ^ mix(stream + 0x13198a2e03707344ULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + kGamma * ++counter_); }

  /// Derive an independent child stream.
  CounterRng split(std::uint64_t child) const {
    CounterRng out(0, 0);
    out.key_ = mix(key_ ^ mix(child + 0xa4093822299f31d0ULL));
    return out;
  }

  std::uint64_t counter() const { return counter_; }

private:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  // SplitMix64 finalizer.
  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

namespace streams {
inline constexpr std::uint64_t kTraining = 0;
inline constexpr std::uint64_t kFresh = 1;
inline constexpr std::uint64_t kMultiToken = 2;
}  // namespace streams

}  // namespace prefdyn
