#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "sacn/tensor.hpp"

namespace sacn {

// xoshiro256** seeded through splitmix64. Fixed algorithm, so a seed produces
// the same stream on every platform; all randomness in the project flows
// through this type. Subsystem streams are derived from one root seed by
// hashing the subsystem name (FNV-1a) into it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : state_) w = splitmix64(x);
  }

  static std::uint64_t derive_seed(std::uint64_t root, const std::string& name) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
    for (const char c : name) {
      h ^= static_cast<std::uint8_t>(c);
      h *= 1099511628211ull;
    }
    std::uint64_t x = root ^ h;
    return splitmix64(x);
  }

  static Rng derive(std::uint64_t root, const std::string& name) {
    return Rng(derive_seed(root, name));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, bound) by rejection (unbiased).
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % bound;
    }
  }

  // Standard normal via Box-Muller; one uniform pair per draw keeps the
  // generator state exactly four words (no cached spare to persist).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const std::size_t n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(first[i - 1], first[j]);
    }
  }

  Tensor<std::uint64_t> save_state() const {
    Tensor<std::uint64_t> t({4});
    for (int i = 0; i < 4; ++i) t[i] = state_[i];
    return t;
  }

  void restore_state(const Tensor<std::uint64_t>& t) {
    for (int i = 0; i < 4; ++i) state_[i] = t[i];
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t state_[4];
};

}  // namespace sacn
