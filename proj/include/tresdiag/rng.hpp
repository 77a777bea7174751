#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace tresdiag {

// Deterministic random stream.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. All derived draws (uniform, normal, integer ranges, shuffles) are
// implemented here rather than through <random> distributions, whose
// algorithms vary between standard libraries.
//
// Child streams are a pure function of (seed, key); they do not depend on
// how many values the parent has produced.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Standard normal via the Marsaglia polar method.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  // Unbiased integer in [0, n).
  std::size_t below(std::size_t n);

  Rng child(std::uint64_t index) const;
  Rng child(std::string_view name) const;

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive child seeds.
std::uint64_t mix64(std::uint64_t x);
// FNV-1a over the bytes of a name.
std::uint64_t hash_name(std::string_view name);

}  // namespace tresdiag
