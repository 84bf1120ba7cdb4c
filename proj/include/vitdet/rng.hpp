#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitdet {

// Deterministic random source. The engine is std::mt19937_64, whose output
// stream is fully specified by the standard; every distribution below is
// derived from raw engine draws, so equal seeds give identical streams on
// any platform. std::uniform_real_distribution and friends are
// implementation-defined and must not be used here.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    // Smallest power-of-two mask covering n.
    uint64_t mask = un - 1;
    mask |= mask >> 1;
    mask |= mask >> 2;
    mask |= mask >> 4;
    mask |= mask >> 8;
    mask |= mask >> 16;
    mask |= mask >> 32;
    uint64_t draw;
    do {
      draw = engine_() & mask;
    } while (draw >= un);
    return static_cast<int64_t>(draw);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller. The spare value is discarded so the
  // serializable state is the engine alone.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal(0, stddev) with draws outside limit*stddev rejected and redrawn.
  double trunc_normal(double stddev, double limit = 2.0) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > limit);
    return z * stddev;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const int64_t j = uniform_int(static_cast<int64_t>(i));
      std::swap(v[i - 1], v[static_cast<size_t>(j)]);
    }
  }

  // Engine state as text, for exact-resume checkpoints.
  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  static Rng deserialize(const std::string& text) {
    Rng r;
    std::istringstream is(text);
    is >> r.engine_;
    if (is.fail()) throw std::invalid_argument("Rng::deserialize: malformed state");
    return r;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace vitdet
