#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace vitfl {

/// Mixes a list of integers into a single 64-bit seed (SplitMix64 chain).
/// Used to derive independent streams such as (run seed, client, round).
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

/// Deterministic random stream. The engine is std::mt19937_64, whose output
/// sequence is fixed by the standard; the distributions are implemented here
/// so that draws do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Standard normal truncated to [-2, 2], scaled by stddev.
  double truncated_normal(double stddev);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vitfl
