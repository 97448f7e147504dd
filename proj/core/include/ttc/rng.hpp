#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace ttc {

/// Counter-based pseudo-random generator with named substreams.
///
/// Every draw is a pure function of (key, counter), so streams can be split
/// by label or index without sharing state: `rng.split("init").split(3)` is
/// the same stream no matter what was drawn from `rng` before. This keeps
/// data order, parameter init, and selector sampling reproducible from one
/// recorded seed.
class SplitRng {
 public:
  explicit SplitRng(std::uint64_t seed);

  /// Derive an independent substream named by a label.
  SplitRng split(std::string_view label) const;
  /// Derive an independent substream by index (e.g. per epoch, per sample).
  SplitRng split(std::uint64_t index) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double next_uniform();
  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n);
  /// Standard normal (Box-Muller).
  double next_normal();
  /// Normal(0, stddev) resampled until within [lo, hi] standard deviations.
  double next_trunc_normal(double stddev, double lo = -2.0, double hi = 2.0);

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  std::uint64_t key() const { return key_; }

 private:
  SplitRng(std::uint64_t key, int);  // raw-key constructor

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace ttc
