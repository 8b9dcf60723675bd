#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>

namespace nahtm {

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// Folds a sequence of integers into a single stream key.
std::uint64_t derive_key(std::initializer_list<std::uint64_t> parts);

// Counter-based generator: the i-th output depends only on (key, i), so
// streams keyed on (seed, epoch, batch) are reproducible on any platform.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller; caches the second variate.
  double normal();
  void fill_normal(std::span<double> out);

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace nahtm
