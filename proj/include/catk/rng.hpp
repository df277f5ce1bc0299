#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace catk {

// SplitMix64 finalizer; derives independent stream seeds from a base seed.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Thin wrapper over mt19937_64 with explicit value mappings. The standard
// distributions are implementation-defined, so they are not used anywhere a
// result has to be reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  // Uniform integer on [0, n).
  int below(int n);
  // Uniform integer on [lo, hi].
  int between(int lo, int hi) { return lo + below(hi - lo + 1); }
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[below(i + 1)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace catk
