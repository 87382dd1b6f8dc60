#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace abra {

// All randomness in the project flows from one u64 master seed through
// named substreams (data, init, noise, sampler, aug, ...) so that one
// component can be perturbed without shifting the draws of another.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::string_view name)
      : engine_(mix(master_seed, name)) {}

  std::mt19937_64& engine() { return engine_; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  std::uint64_t uniform_index(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(engine_);
  }

  bool bernoulli(double p) {
    std::bernoulli_distribution d(p);
    return d(engine_);
  }

 private:
  static std::uint64_t mix(std::uint64_t seed, std::string_view name) {
    // FNV-1a over the stream name, folded into the seed via splitmix64.
    std::uint64_t h = 14695981039346656037ull;
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (h | 1ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace abra
