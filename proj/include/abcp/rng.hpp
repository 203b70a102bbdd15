#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace abcp {

// Stateless mixing step (splitmix64 finalizer). Used to derive independent
// seed streams from a master seed: stream = mix64(master ^ tag).
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Deterministic splitmix64 generator. The whole generator state is one u64,
// so checkpoints can persist it and resume bit-identically. Distribution
// helpers are implemented here rather than via <random> because the standard
// distributions are not required to produce identical streams across
// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Index sampled from an explicit probability vector; consumes one uniform.
  int categorical(std::span<const double> probs) {
    double u = uniform();
    double acc = 0.0;
    for (int k = 0; k + 1 < static_cast<int>(probs.size()); ++k) {
      acc += probs[k];
      if (u < acc) return k;
    }
    return static_cast<int>(probs.size()) - 1;
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

}  // namespace abcp
