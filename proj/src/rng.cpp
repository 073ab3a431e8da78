#include "ivpt/rng.hpp"

#include <cmath>

namespace ivpt {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t base, std::string_view stream, uint64_t counter) {
  // FNV-1a over the stream tag, mixed with base and counter.
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(base ^ splitmix64(h) ^ splitmix64(counter * 0x9e3779b97f4a7c15ULL + 1));
}

real Rng::uniform() {
  // 53 high bits -> double in [0,1)
  return real(eng_() >> 11) * 0x1.0p-53;
}

real Rng::uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

real Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  real u1 = uniform();
  while (u1 <= real(0)) u1 = uniform();
  const real u2 = uniform();
  const real r = std::sqrt(real(-2) * std::log(u1));
  const real theta = real(2) * real(M_PI) * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

real Rng::normal(real mean, real stddev) { return mean + stddev * normal(); }

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  // rejection sampling to avoid modulo bias
  const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t r = eng_();
  while (r >= limit) r = eng_();
  return lo + static_cast<int64_t>(r % span);
}

Array randn(const Shape& shape, Rng& rng, real stddev, real mean) {
  Array a(shape);
  for (int64_t i = 0; i < a.numel(); ++i) a[i] = rng.normal(mean, stddev);
  return a;
}

Array trunc_normal(const Shape& shape, Rng& rng, real stddev) {
  Array a(shape);
  for (int64_t i = 0; i < a.numel(); ++i) {
    real z = rng.normal();
    while (std::abs(z) > real(2)) z = rng.normal();
    a[i] = z * stddev;
  }
  return a;
}

Array rand_uniform(const Shape& shape, Rng& rng, real lo, real hi) {
  Array a(shape);
  for (int64_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

}  // namespace ivpt
