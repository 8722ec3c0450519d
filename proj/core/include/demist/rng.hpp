#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>

namespace demist {

// Deterministic RNG used everywhere randomness is needed.
//
// The engine is std::mt19937_64 (bit-exact across platforms); the
// distribution transforms are implemented here because the standard
// library's distributions are implementation-defined. Derived streams
// (per sample, per epoch) come from split(), which mixes the parent
// seed with the stream tags so streams never alias.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (no cached spare, so state stays simple).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[uniform_int(i)]);
    }
  }

  // Engine state as text; deserialize restores it exactly.
  std::string serialize() const;
  static Rng deserialize(const std::string& text);

  // Derived seed for an independent sub-stream (splitmix64 over seed+tags).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag,
                              std::uint64_t a = 0, std::uint64_t b = 0);

  Rng split(std::uint64_t tag, std::uint64_t a = 0, std::uint64_t b = 0) const {
    return Rng(derive(seed_, tag, a, b));
  }

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 engine_;
};

// Stream tags for the training pipeline. Fixed constants: changing one
// changes every dataset and run produced with it.
namespace rng_tag {
inline constexpr std::uint64_t kScatter = 0x5343;     // per-sample haze params
inline constexpr std::uint64_t kShuffle = 0x53484662; // per-epoch permutation
inline constexpr std::uint64_t kAugment = 0x41554731; // per-sample dihedral
inline constexpr std::uint64_t kCrop = 0x43524f50;    // per-sample crop window
inline constexpr std::uint64_t kNegatives = 0x4e454753;
inline constexpr std::uint64_t kInit = 0x494e4954;    // parameter init
inline constexpr std::uint64_t kCorpus = 0x434f5250;  // toy corpus scenes
}  // namespace rng_tag

}  // namespace demist
