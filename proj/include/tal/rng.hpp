#pragma once

#include <cmath>
#include <cstdint>

namespace tal {

// PCG32 (O'Neill's pcg32_random_r, the minimal variant). Chosen over
// std::mt19937 + <random> distributions because the standard leaves
// distribution algorithms implementation-defined; every draw here is fully
// specified, so a seed produces the same stream on every platform.
//
// Independent streams are selected with the `stream` argument; attack and
// harness code derives per-image streams from (seed, image index) so work
// can fan out to threads without changing any result.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : state_(0), inc_((stream << 1u) | 1u) {
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  std::uint64_t next_u64() {
    std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform on [0,1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float next_float() { return static_cast<float>(next_double()); }

  // Uniform integer on [lo, hi], both ends inclusive. Debiased by rejection.
  int next_int(int lo, int hi) {
    std::uint32_t range = static_cast<std::uint32_t>(hi - lo) + 1u;
    if (range == 0) return lo + static_cast<int>(next_u32());  // full 32-bit span
    std::uint32_t limit = (~range + 1u) % range;  // 2^32 mod range
    std::uint32_t r;
    do {
      r = next_u32();
    } while (r < limit);
    return lo + static_cast<int>(r % range);
  }

  // N(0, sigma^2) via Box-Muller. Two uniforms per call, cosine branch only,
  // so the stream advance per call is fixed.
  double next_normal(double sigma = 1.0) {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Uniform on [lo, hi).
  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
};

// splitmix64; used to mix (seed, index) pairs into per-image stream ids.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

}  // namespace tal
