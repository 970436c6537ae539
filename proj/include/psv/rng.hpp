#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace psv {

// Counter-based deterministic generator ("splitmix64-ctr"): the output at
// step i is the splitmix64 finalizer applied to seed + (i+1)*GOLDEN. There is
// no hidden state beyond (seed, counter), so identical seeds and call
// sequences produce identical streams on every platform. fork() derives an
// independent stream without disturbing the parent.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "splitmix64-ctr";

  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return finalize(seed_ + kGolden * counter_);
  }

  // Uniform in [0, 1), 53 significant bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n >= 1.
  std::uint64_t uniform_int(std::uint64_t n) {
    // Modulo bias is negligible for the n used here (n << 2^64).
    return next_u64() % n;
  }

  // Standard normal via Box-Muller; always consumes exactly two draws.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Independent child stream; the parent's counter is not consumed.
  Rng fork(std::uint64_t stream) const {
    return Rng(finalize(seed_ ^ finalize(stream + kGolden)));
  }

  Rng fork(std::string_view label) const { return fork(fnv1a(label)); }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

  static std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace psv
