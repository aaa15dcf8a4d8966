#pragma once

#include <cstdint>
#include <string_view>

namespace hieraudio {

// Deterministic 64-bit RNG (splitmix64 core). All randomness in the project
// flows through this type so results do not depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t next_below(uint64_t n) {
    // Rejection-free modulo bias is negligible for n << 2^64 but we do the
    // standard rejection loop anyway; it is deterministic.
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int next_int(int lo, int hi) {  // inclusive range [lo, hi]
    return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // Standard normal via Box-Muller; caches the second deviate.
  double next_normal();

 private:
  uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

// Stable seed derivation: mixes a parent seed with a tag and an index so
// substreams are independent and reproducible.
uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index = 0);

}  // namespace hieraudio
