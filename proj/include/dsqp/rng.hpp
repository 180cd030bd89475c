#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <limits>

namespace dsqp {

/// Philox4x32-10 counter-based generator.
///
/// Every stream is identified by a 64-bit key. Substreams derive a fresh key
/// from the parent key and a tag, so each (chain, sweep, step) combination owns
/// an independent, reproducible sequence regardless of how many numbers other
/// steps consumed.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);
  Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  /// Independent stream keyed on (this stream's key, tag). Counter starts at zero.
  Rng substream(std::uint64_t tag) const;
  Rng substream(std::initializer_list<std::uint64_t> path) const;

  result_type operator()();

  /// Uniform on the open interval (0, 1).
  double uniform();
  /// Standard normal (Marsaglia polar method).
  double normal();

  std::uint64_t key() const { return key_; }

 private:
  void refill();

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; used for key derivation.
std::uint64_t mix64(std::uint64_t x);

/// Stable 64-bit tag for a probability level so that streams are keyed by
/// the quantile value rather than its position in a list.
std::uint64_t tau_tag(double tau);

}  // namespace dsqp
