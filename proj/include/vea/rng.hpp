#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace vea {

/// Counter-based splittable PRNG. Every draw hashes (seed, stream_id, counter),
/// so a given (seed, stream_id) replays the same sequence on any platform and
/// derived sub-streams are statistically independent of their parent.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed, uint64_t stream_id = 0)
      : seed_(seed), stream_(stream_id) {}

  uint64_t seed() const { return seed_; }
  uint64_t stream_id() const { return stream_; }

  /// Child stream keyed by `child_id`; the parent stream is not advanced.
  Rng derive(uint64_t child_id) const {
    return Rng(seed_, mix(stream_ ^ mix(child_id + 0x9e3779b97f4a7c15ULL)));
  }

  uint64_t next_u64() {
    uint64_t h = mix(seed_ + 0x9e3779b97f4a7c15ULL);
    h = mix(h ^ mix(stream_ + 0xbf58476d1ce4e5b9ULL));
    return mix(h + 0x94d049bb133111ebULL * counter_++);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [lo, hi). Unbiased via masked rejection.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t range = static_cast<uint64_t>(hi - lo);
    if (range <= 1) return lo;
    uint64_t mask = ~0ULL >> __builtin_clzll(range - 1 | 1);
    uint64_t draw;
    do {
      draw = next_u64() & mask;
    } while (draw >= range);
    return lo + static_cast<int64_t>(draw);
  }

  /// Standard normal (Marsaglia polar, one sample per call).
  double normal() {
    for (;;) {
      double u = 2.0 * next_double() - 1.0;
      double v = 2.0 * next_double() - 1.0;
      double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) {
        return u * std::sqrt(-2.0 * std::log(s) / s);
      }
    }
  }

  /// Normal(0, std_dev) truncated to [-cutoff, cutoff] standard deviations.
  double trunc_normal(double std_dev, double cutoff = 2.0) {
    double z;
    do {
      z = normal();
    } while (std::fabs(z) > cutoff);
    return z * std_dev;
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<size_t>(uniform_int(0, i + 1))], v[static_cast<size_t>(i)]);
    }
  }

  /// k distinct indices drawn uniformly from [0, n) (partial Fisher-Yates).
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < k; ++i) {
      int64_t j = uniform_int(i, n);
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
  }

 private:
  static uint64_t mix(uint64_t x) {
    // splitmix64 finalizer
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

  uint64_t seed_;
  uint64_t stream_;
  uint64_t counter_ = 0;
};

}  // namespace vea
