#include "ttc/rng.hpp"

#include <cmath>
#include <numbers>

namespace ttc {

namespace {

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x00000100000001B3ull;
  }
  return h;
}

}  // namespace

SplitRng::SplitRng(std::uint64_t seed) : key_(mix64(seed)) {}

SplitRng::SplitRng(std::uint64_t key, int) : key_(key) {}

SplitRng SplitRng::split(std::string_view label) const {
  return SplitRng(mix64(key_ ^ fnv1a64(label)), 0);
}

SplitRng SplitRng::split(std::uint64_t index) const {
  return SplitRng(mix64(key_ ^ mix64(index ^ 0xA5A5A5A5A5A5A5A5ull)), 0);
}

std::uint64_t SplitRng::next_u64() {
  return mix64(key_ + 0x9E3779B97F4A7C15ull * ++counter_);
}

double SplitRng::next_uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t SplitRng::next_below(std::uint64_t n) {
  if (n == 0) return 0;
  // rejection sampling for an unbiased draw
  std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double SplitRng::next_normal() {
  // open-interval uniform so log() is finite
  double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

double SplitRng::next_trunc_normal(double stddev, double lo, double hi) {
  double z;
  do {
    z = next_normal();
  } while (z < lo || z > hi);
  return z * stddev;
}

}  // namespace ttc
