#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "ivpt/array.hpp"

namespace ivpt {

// splitmix64 finalizer; used to derive independent seeds from (seed, stream,
// counter) so every stochastic component is reproducible without shared
// engine state.
uint64_t splitmix64(uint64_t x);
uint64_t derive_seed(uint64_t base, std::string_view stream, uint64_t counter = 0);

// All draws are produced from explicit bit manipulation of mt19937_64 output
// (std::*_distribution is implementation-defined and would break the
// byte-identical reproducibility contract across toolchains).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  real uniform();                   // [0,1)
  real uniform(real lo, real hi);   // [lo,hi)
  real normal();                    // standard normal (Box-Muller)
  real normal(real mean, real stddev);
  int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive range
  uint64_t bits() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  real spare_ = 0;
};

Array randn(const Shape& shape, Rng& rng, real stddev = 1, real mean = 0);
// Normal draw clipped by resampling to within 2 standard deviations.
Array trunc_normal(const Shape& shape, Rng& rng, real stddev);
Array rand_uniform(const Shape& shape, Rng& rng, real lo = 0, real hi = 1);

}  // namespace ivpt
