#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace smc {

/// Deterministic random source. A root Rng is seeded with a 64-bit value;
/// independent substreams are derived by name so that unrelated consumers
/// (init, batch order, dropout, gate noise, data synthesis) cannot perturb
/// each other's draw sequences. Identical seed + identical call sequence
/// yields an identical value stream on every platform: the generator is
/// mt19937_64 (fully specified by the standard) and all distributions are
/// implemented here rather than taken from <random>.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  /// Derive an independent stream from a string tag (and optional index).
  Rng stream(std::string_view tag, std::uint64_t index = 0) const;

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 bits of precision.
  double next_double();

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n);

  /// Standard normal via Box-Muller (pairwise, with a cached spare).
  double next_gaussian();

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace smc
