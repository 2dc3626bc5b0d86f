#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace hatnet {

// Seeded random source. The mt19937 word stream is pinned by the C++ standard;
// the <random> distribution classes are not, so every derived draw below is
// implemented locally to keep streams byte-identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint32_t seed) : seed_(seed), gen_(seed) {}

  std::uint32_t next_u32() { return static_cast<std::uint32_t>(gen_()); }

  // Unbiased integer in [0, bound). bound == 0 is a contract violation.
  std::uint32_t below(std::uint32_t bound) {
    // Rejection sampling over the largest multiple of bound.
    const std::uint32_t limit = 0xffffffffu - 0xffffffffu % bound;
    std::uint32_t x = next_u32();
    while (x >= limit) x = next_u32();
    return x % bound;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = next_u32();
    const std::uint64_t lo = next_u32();
    return static_cast<double>(((hi << 32) | lo) >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the spare draw is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  bool coin(double p = 0.5) { return uniform() < p; }

  int pick(int count) { return static_cast<int>(below(static_cast<std::uint32_t>(count))); }

  // Fisher-Yates; one draw per position, back to front.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(static_cast<std::uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent substream keyed on (this seed, stream). Does not advance *this.
  Rng fork(std::uint32_t stream) const {
    std::uint64_t z = (static_cast<std::uint64_t>(seed_) << 32) ^ stream;
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z = z ^ (z >> 31);
    return Rng(static_cast<std::uint32_t>(z ^ (z >> 32)));
  }

 private:
  std::uint32_t seed_ = 0;
  std::mt19937 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace hatnet
