#pragma once

#include <cmath>
#include <cstdint>

namespace mcpo {

// SplitMix64 finalizer; bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t key, std::uint64_t value) {
  return mix64(key ^ mix64(value + 0x632be59bd9b4e019ULL));
}

/// Counter-based random stream. The output at position n depends only on
/// (key, n), so streams derived for distinct (prompt, rollout) pairs can be
/// consumed in any order or on any thread with identical results.
class RngStream {
 public:
  constexpr explicit RngStream(std::uint64_t key) : key_(mix64(key)) {}

  /// Child stream for a labelled sub-purpose (e.g. a step index or a
  /// rollout index). Independent of how much of the parent was consumed.
  constexpr RngStream derive(std::uint64_t label) const {
    RngStream child(0);
    child.key_ = hash_combine(key_, label);
    return child;
  }

  constexpr std::uint64_t next_u64() {
    return mix64(key_ ^ mix64(counter_++));
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  constexpr double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  constexpr std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  constexpr std::uint64_t key() const { return key_; }
  constexpr std::uint64_t position() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Box-Muller, one draw per call.
inline double standard_normal(RngStream& rng) {
  const double u1 = 1.0 - rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

/// Stable labels for derived streams.
namespace stream_label {
inline constexpr std::uint64_t tasks = 0x7461736b;
inline constexpr std::uint64_t init = 0x696e6974;
inline constexpr std::uint64_t batch = 0x62617463;
inline constexpr std::uint64_t rollout = 0x726f6c6c;
inline constexpr std::uint64_t probe = 0x70726f62;
}  // namespace stream_label

}  // namespace mcpo
