#pragma once

#include <cstdint>

namespace pyrdet {

// Counter-based pseudorandom generator. Draw k of stream s under seed g is
//
//   mix(mix(g ^ mix(s * C0)) + (k + 1) * C1)
//
// where mix is the splitmix64 finalizer and C0/C1 are the constants below.
// Everything is 64-bit integer arithmetic, so any implementation of this
// recipe reproduces the same sequence regardless of platform or language.
// See README for the full description of how datasets and weights use it.
class CounterRng {
 public:
  static constexpr std::uint64_t kStreamConst = 0x2545F4914F6CDD1DULL;
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : base_(mix(seed ^ mix(stream * kStreamConst))) {}

  std::uint64_t next_u64() { return mix(base_ + (++count_) * kGamma); }

  // [0,1) with 53 / 24 significant bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  // Uniform in [0,n) via the multiply-shift reduction (x * n) >> 64.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  std::uint64_t draws() const { return count_; }

 private:
  std::uint64_t base_;
  std::uint64_t count_ = 0;
};

}  // namespace pyrdet
