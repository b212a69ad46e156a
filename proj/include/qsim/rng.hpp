#pragma once

#include <array>
#include <cstdint>

#include "qsim/tensor.hpp"

namespace qsim {

/// Counter-based generator (Philox4x32-10). The key is the 64-bit seed and the
/// high half of the counter is the stream id, so distinct (seed, stream) pairs
/// never overlap and each pair always replays the same sequence.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int pos_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Philox4x32-10 block function, exposed for known-answer tests.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key);

Tensor rng_normal(RngStream& stream, const Shape& shape, float mean, float stddev);

// Stream ids derived from a single root seed.
inline constexpr std::uint64_t kStreamData = 0;
inline constexpr std::uint64_t kStreamInit = 1;
inline constexpr std::uint64_t kStreamTrain = 2;
inline constexpr std::uint64_t kStreamTrialBase = 3;

}  // namespace qsim
