#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace refseg {

// splitmix64 finalizer; mixes a 64-bit state into a well-distributed value.
std::uint64_t mix64(std::uint64_t x);

// Derives a child seed from a master seed, a stream name and integer
// coordinates (iteration, item, ...). Every random decision in the project
// goes through a derived seed so that skipping one branch of a computation
// never shifts the draws of another.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream,
                          std::initializer_list<std::uint64_t> coords = {});

// Deterministic generator. Distributions are implemented here rather than
// with <random> distributions, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace refseg
