#pragma once

// Deterministic random sources. std::mt19937_64 has a fully specified
// output sequence, but the standard distributions do not, so every
// transform from raw bits to a sample is written out here explicitly.
// Identical seeds therefore give identical streams on every platform.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace hycam {

// Mixes (seed, lane...) into a fresh 64-bit stream seed. splitmix64 finalizer.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0x9e3779b97f4a7c15ull,
                              std::uint64_t c = 0xbf58476d1ce4e5b9ull,
                              std::uint64_t d = 0x94d049bb133111ebull) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1) + 0xbf58476d1ce4e5b9ull * (c + 1) +
                    0x94d049bb133111ebull * (d + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }

  // Uniform in [0, 1): 53-bit mantissa, can return exactly 0.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1): offset by half an ulp step so log() is always finite.
  double uniform_open() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n) by rejection, bias-free.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t(0) - ~std::uint64_t(0) % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller on open-interval uniforms.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform_open();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Standard Gumbel(0,1): -ln(-ln(u)) with u in (0,1).
  double gumbel() { return -std::log(-std::log(uniform_open())); }

  template <typename T>
  void fill_normal(std::vector<T>& out, double mean, double stddev) {
    for (auto& v : out) v = static_cast<T>(normal(mean, stddev));
  }

  // Kaiming-uniform for a weight applied as x (rows=fan_in) -> out:
  // U(-b, b) with b = sqrt(6 / fan_in).
  template <typename T>
  void fill_kaiming_uniform(std::vector<T>& out, int fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : out) v = static_cast<T>(uniform_range(-bound, bound));
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace hycam
