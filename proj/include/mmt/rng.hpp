#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <utility>

#include "mmt/error.hpp"

namespace mmt {

// Stirs two seeds into one (splitmix64 finalizer). Used to derive per-epoch
// shuffle seeds from the run seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Single source of randomness for a run. Every draw (init, shuffling, task
// scheduling, dropout) goes through this wrapper so a run is reproducible
// from one seed and the engine state can be checkpointed as text. The
// distributions are implemented here rather than taken from <random> so the
// produced streams are pinned, not implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53-bit resolution.
  double u01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  // Unbiased draw from [0, n).
  std::size_t index(std::size_t n) {
    if (n == 0) throw ContractError("Rng::index: n must be positive");
    const std::uint64_t limit = (UINT64_MAX / n) * n;
    std::uint64_t r = engine_();
    while (r >= limit) r = engine_();
    return static_cast<std::size_t>(r % n);
  }

  // Fisher-Yates shuffle driven by index().
  template <class V>
  void shuffle(V& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  std::string state() const {
    std::ostringstream oss;
    oss << engine_;
    return oss.str();
  }

  void set_state(const std::string& s) {
    std::istringstream iss(s);
    iss >> engine_;
    if (!iss) throw DataError("Rng::set_state: malformed engine state");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mmt
