#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace lakd {

// Seeded generator used everywhere randomness is needed. One Rng per
// independent stream; never share across workers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }

  // Inclusive bounds.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> d(lo, hi);
    return d(gen_);
  }

  bool bernoulli(double p) {
    std::bernoulli_distribution d(p);
    return d(gen_);
  }

  std::vector<double> normal_vec(std::size_t n, double stddev) {
    std::vector<double> out(n);
    std::normal_distribution<double> d(0.0, stddev);
    for (auto& v : out) v = d(gen_);
    return out;
  }

  std::mt19937_64& engine() { return gen_; }

  // Derives a decorrelated child seed (splitmix64 step over a mix).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace lakd
