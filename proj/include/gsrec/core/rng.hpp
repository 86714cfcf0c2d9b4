#pragma once

// Seeded randomness with bit-reproducible streams. std::mt19937_64 itself is
// specified exactly by the standard, but the std distributions are not, so
// every derivation from raw bits to a sample is written out here.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace gsrec {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Unbiased integer in [0, n) via Lemire's multiply-and-reject.
  uint64_t uniform_index(uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be > 0");
    uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    uint64_t lo = static_cast<uint64_t>(m);
    if (lo < n) {
      uint64_t threshold = (0 - n) % n;
      while (lo < threshold) {
        x = next_u64();
        m = static_cast<__uint128_t>(x) * n;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; keeps the second deviate for the next call.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double gaussian(double mean, double stddev) {
    return mean + stddev * gaussian();
  }

  // Independent child stream; mixing the ids through splitmix64 keeps
  // children decorrelated even for adjacent ids.
  Rng derive(uint64_t id_a, uint64_t id_b = 0) {
    uint64_t s = base_seed_mix_ ^ (0x9e3779b97f4a7c15ull * (id_a + 1));
    s ^= 0xc2b2ae3d27d4eb4full * (id_b + 1);
    uint64_t st = s;
    uint64_t mixed = splitmix64(st);
    Rng child(mixed);
    child.base_seed_mix_ = splitmix64(st);
    return child;
  }

  void set_base_mix(uint64_t m) { base_seed_mix_ = m; }

  static Rng rooted(uint64_t seed) {
    uint64_t st = seed;
    uint64_t engine_seed = splitmix64(st);
    Rng r(engine_seed);
    r.base_seed_mix_ = splitmix64(st);
    return r;
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  uint64_t base_seed_mix_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Sample from a discrete distribution by inverse CDF over the given
// cumulative weights (last entry is the total mass).
inline size_t sample_cdf(Rng& rng, const std::vector<double>& cdf) {
  if (cdf.empty()) throw std::invalid_argument("sample_cdf: empty cdf");
  double u = rng.uniform() * cdf.back();
  size_t lo = 0, hi = cdf.size() - 1;
  while (lo < hi) {
    size_t mid = (lo + hi) / 2;
    if (cdf[mid] <= u) {
      lo = mid + 1;
    } else {
      hi = mid;
    }
  }
  return lo;
}

}  // namespace gsrec
