#pragma once

#include <cstdint>
#include <random>

namespace gradflow {

// splitmix64; used to derive independent sub-seeds (e.g. per epoch) from a
// single run seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 1));
}

// Thin deterministic wrapper; the hand-rolled mappings below are frozen so
// runs reproduce bit-for-bit regardless of standard-library distribution
// internals.
struct Rng {
  std::mt19937_64 gen;

  explicit Rng(std::uint64_t seed) : gen(seed) {}

  std::uint64_t next() { return gen(); }

  // [0, 1) with 53 random bits.
  double unit() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  // [0, n); modulo mapping, frozen for reproducibility.
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(gen() % n); }
};

}  // namespace gradflow
