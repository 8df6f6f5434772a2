#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace xmodal {

// All randomness in this project flows through Rng. std::mt19937_64 has a
// standard-mandated bit stream, and the distributions below are written out
// explicitly (the std:: distribution objects are implementation-defined),
// so a seed fully determines every sampled value.

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Child seed for a named stream, e.g. derive_seed(seed, "ssl.view", epoch, i).
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(base ^ fnv1a64(tag));
  h = splitmix64(h ^ (a * 0x9e3779b97f4a7c15ull + 1));
  h = splitmix64(h ^ (b * 0xbf58476d1ce4e5b9ull + 1));
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, two uniforms per draw, no cached spare.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // Uniform index in [0, n) via 128-bit multiply.
  std::uint64_t uniform_index(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

  // Fisher-Yates; std::shuffle is implementation-defined, this is not.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace xmodal
