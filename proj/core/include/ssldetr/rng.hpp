#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ssldetr/errors.hpp"

namespace ssldetr {

// Seedable random stream. Wraps std::mt19937_64 but derives all variates
// from raw bits itself, so results are identical across standard library
// implementations (std::*_distribution is not portable).
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) without modulo bias.
  uint64_t below(uint64_t n) {
    if (n == 0) {
      throw RangeError("Rng::below requires n > 0");
    }
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = engine_();
    while (x >= limit) {
      x = engine_();
    }
    return x % n;
  }

  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    if (hi < lo) {
      throw RangeError("Rng::uniform_int requires lo <= hi");
    }
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  // Standard normal via Box-Muller (deterministic, no cached spare).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  // First k entries of a uniform random permutation of [0, n).
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    std::vector<int64_t> pool(static_cast<size_t>(n));
    std::iota(pool.begin(), pool.end(), 0);
    for (int64_t i = 0; i < k; ++i) {
      const int64_t j = i + static_cast<int64_t>(below(static_cast<uint64_t>(n - i)));
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    return pool;
  }

  // Engine state round-trip, used for resumable training runs.
  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (is.fail()) {
      throw IoError("Rng::load_state: malformed engine state");
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Derives independent child seeds from a root seed, one per named stream
// (splitmix64 finalizer over root ^ stream index).
inline uint64_t derive_seed(uint64_t root, uint64_t stream) {
  uint64_t z = root + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace ssldetr
