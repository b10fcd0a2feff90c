#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "dtape/tensor.hpp"

namespace dtape {

/// Counter-based generator: the n-th draw of a stream is a pure function of
/// (key, n), and child streams are derived by hashing (key, index). A consumer
/// that owns its own child stream therefore sees the same numbers no matter
/// how other consumers interleave their draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ kSeedSalt)), seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept { return mix(key_ + kGolden * ++counter_); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) noexcept {
    // Multiply-shift; the bias is below 2^-64 * n and irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller (one output per two uniforms).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Poisson sample; exact inversion by multiplication, fine for means below ~500.
  std::uint64_t poisson(double mean) noexcept {
    if (mean <= 0.0) return 0;
    const double limit = std::exp(-mean);
    std::uint64_t k = 0;
    double prod = uniform();
    while (prod > limit) {
      ++k;
      prod *= uniform();
    }
    return k;
  }

  /// Independent stream for consumer `index`; does not advance this stream.
  Rng child(std::uint64_t index) const noexcept {
    Rng r;
    r.key_ = mix(key_ ^ mix(index + kChildSalt));
    r.seed_ = seed_;
    return r;
  }

  void fill_normal(Tensor& t, double stddev = 1.0) noexcept {
    for (double& v : t.data()) v = stddev * normal();
  }

  Tensor normal_like(const Shape& shape, double stddev = 1.0) {
    Tensor t(shape);
    fill_normal(t, stddev);
    return t;
  }

  Tensor uniform_like(const Shape& shape) {
    Tensor t(shape);
    for (double& v : t.data()) v = uniform();
    return t;
  }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
  static constexpr std::uint64_t kSeedSalt = 0xD1B54A32D192ED03ULL;
  static constexpr std::uint64_t kChildSalt = 0x8CB92BA72F3D8DD7ULL;

  // splitmix64 finalizer
  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  std::uint64_t seed_ = 0;
};

}  // namespace dtape
