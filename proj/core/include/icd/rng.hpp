#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace icd {

/// Deterministic splitmix64-based generator. The standard library's
/// distributions are implementation-defined, so every draw used by the
/// artifact (init, noise, shuffles, augmentation) goes through this class
/// to keep runs bit-reproducible for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  /// Independent stream derived from (seed, stream, salt). Used to give each
  /// consumer (dataset, model init, per-epoch shuffle, ...) its own sequence.
  static Rng derive(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt = 0) {
    std::uint64_t s = mix(seed + 0x9E3779B97F4A7C15ull * (stream + 1));
    s = mix(s ^ mix(salt + 0xD1B54A32D192ED03ull));
    return Rng(s);
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix(state_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  /// Fisher-Yates; identical output for identical seeds on every platform.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace icd
