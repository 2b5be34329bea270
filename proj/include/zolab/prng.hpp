#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

namespace zolab {

/// One SplitMix64 output for state x: mix(x + 0x9e3779b97f4a7c15).
/// Used for seeding and for substream key derivation.
std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Seed of the substream `key` under `seed`:
///   derive_seed(s, k) = splitmix64(s ^ splitmix64(k + 0x9e3779b97f4a7c15))
/// Depends only on (seed, key), never on how much of a stream was consumed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key) noexcept;

/// 64-bit FNV-1a of a label, for deriving substream keys from names.
std::uint64_t label_key(std::string_view label) noexcept;

/// Deterministic xoshiro256** generator.
///
/// The four state words are the first four outputs of a SplitMix64 sequence
/// started at the seed. Uniform doubles take the top 53 bits of one output:
/// uniform() = (next_u64() >> 11) * 2^-53, in [0, 1).
///
/// Gaussian samples use the polar (Marsaglia) form of Box-Muller: draw
/// u = 2*uniform() - 1 and then v = 2*uniform() - 1, reject while s = u^2 + v^2
/// is 0 or >= 1, and emit u*f followed by v*f with f = sqrt(-2 ln(s) / s).
/// The second value is cached and returned by the next call.
///
/// A Prng is single-owner. Use fork() to hand independent substreams to other
/// owners.
class Prng {
 public:
  explicit Prng(std::uint64_t seed) noexcept;

  std::uint64_t next_u64() noexcept;
  double uniform() noexcept;
  double gaussian() noexcept;

  /// Uniform integer in [0, n). Unbiased (Lemire multiply-shift with rejection).
  std::uint64_t uniform_index(std::uint64_t n);

  /// Independent substream keyed by `key`; equivalent to Prng(derive_seed(seed(), key)).
  Prng fork(std::uint64_t key) const noexcept;
  Prng fork(std::string_view label) const noexcept { return fork(label_key(label)); }

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
  std::optional<double> spare_;
};

}  // namespace zolab
