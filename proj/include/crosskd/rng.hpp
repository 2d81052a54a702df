#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <string_view>

namespace crosskd {

/// Labelled random stream. The generator state is a pure function of
/// (seed, label), so equal pairs replay the same draws and distinct labels
/// give decorrelated streams. Satisfies UniformRandomBitGenerator.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t seed, std::string_view label);

  /// Child stream for one step/epoch/sample; the parent is not advanced.
  [[nodiscard]] RngStream fork(std::uint64_t index) const;

  result_type operator()() { ++draws_; return engine_(); }
  static constexpr result_type min() { return std::numeric_limits<result_type>::min(); }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }
  std::uint64_t draws() const { return draws_; }

 private:
  RngStream(std::uint64_t seed, std::string label, std::uint64_t key);

  std::uint64_t seed_;
  std::string label_;
  std::uint64_t key_;
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace crosskd
