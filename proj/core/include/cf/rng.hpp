#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace cf {

namespace detail {
// splitmix64 output function: one round of avalanche mixing.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace detail

// splitmix64 generator. Chosen for exact cross-platform reproducibility:
// every draw is a fixed sequence of integer ops, and the floating-point
// conversions below are single IEEE operations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return detail::mix64(state_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1); safe as a log argument.
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 12) + 0.5) * 0x1.0p-52;
  }

  // Standard normal via Box-Muller, cosine branch only. Two uniforms per
  // draw, no cached spare, so the number of raw draws per normal is fixed.
  double normal() {
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Unbiased integer in [0, n), Lemire's multiply-with-rejection method.
  std::uint64_t below(std::uint64_t n) {
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      std::uint64_t threshold = (0 - n) % n;
      while (lo < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // In-place Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// Purpose keys for derived streams. Every stochastic consumer owns a
// stream keyed by (run seed, purpose, context words), so adding or
// removing draws in one code path never shifts another path's sequence.
enum class Stream : std::uint64_t {
  kPlanSteps = 1,   // number of AR steps per item
  kPlanCuts = 2,    // group boundary positions
  kPlanPerm = 3,    // token permutation
  kTimeDraw = 4,    // diffusion step indices
  kNoiseDraw = 5,   // forward-process noise
  kClassDrop = 6,   // classifier-free guidance label dropping
  kDataIndex = 7,   // minibatch example selection
  kParamInit = 8,   // parameter initialization
  kSampleInit = 9,  // reverse-process starting noise
  kSampleStep = 10, // reverse-process transition noise
  kDataset = 11,    // toy dataset synthesis
  kPermTest = 12,   // permutation-test shuffles
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0,
                              std::uint64_t d = 0) {
  using detail::mix64;
  std::uint64_t x = mix64(a + 0x9e3779b97f4a7c15ull);
  x = mix64(x ^ (b + 0xd1b54a32d192ed03ull));
  x = mix64(x ^ (c + 0x8cb92ba72f3d8dd7ull));
  x = mix64(x ^ (d + 0xa24baed4963ee407ull));
  return x;
}

inline Rng derive_rng(std::uint64_t run_seed, Stream stream, std::uint64_t a = 0,
                      std::uint64_t b = 0) {
  return Rng(mix_seed(run_seed, static_cast<std::uint64_t>(stream), a, b));
}

}  // namespace cf
