#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "pointform/common.hpp"

namespace pf {

// splitmix64 finalizer; the whole generator is this pure function of
// (seed, counter), so streams can be forked and skipped freely
inline std::uint64_t mix(std::uint64_t seed, std::uint64_t counter) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (counter + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  // child stream for a named subsystem, optionally indexed per item
  Rng fork(std::string_view label, std::uint64_t index = 0) const {
    return Rng(mix(mix(seed_, fnv1a(label)), index));
  }

  std::uint64_t next_u64() { return mix(seed_, counter_++); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // < n, for modest n where modulo bias is immaterial
  std::size_t index(std::size_t n) {
    check(n > 0, "Rng::index: n must be positive");
    return std::size_t(next_u64() % n);
  }

  // Box-Muller, always consumes exactly two counters
  double gaussian() {
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = double(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = index(i);
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace pf
