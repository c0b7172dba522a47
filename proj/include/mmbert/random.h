#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mmbert {

// Seeded generator with platform-independent derived distributions. The
// standard <random> distributions are implementation-defined, so only the raw
// engine output is used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Combines a base seed with stream identifiers (epoch, sample index, ...)
  // into an independent seed via splitmix64.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                              std::uint64_t c = 0);

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(T& container) {
    for (std::size_t i = container.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(container[i - 1], container[j]);
    }
  }

  std::string serialize() const;
  void deserialize(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mmbert
