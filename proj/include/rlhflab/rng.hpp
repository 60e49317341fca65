#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace rlhflab {

// Counter-based splittable random stream. Every draw is a pure function of
// (seed, stream_id, counter), so equal (seed, stream_id) pairs replay the
// same sequence on any platform, and split() children never depend on how
// many draws the parent has consumed.
class RandomStream {
 public:
  RandomStream() = default;
  explicit RandomStream(std::uint64_t seed, std::uint64_t stream_id = 0)
      : seed_(seed), stream_id_(stream_id) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  // Child stream labelled relative to this one; uses only (seed, stream_id,
  // label), never the counter.
  RandomStream split(std::uint64_t label) const {
    return RandomStream(seed_, mix(stream_id_ + kGolden * (label + 1)));
  }

  std::uint64_t next_u64() { return mix(key() + kGolden * ++counter_); }

  // uniform on [0, 1)
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // standard normal via Box-Muller; consumes exactly two draws
  double normal() {
    const double u1 =
        (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // uniform integer in [0, n), unbiased via rejection
  std::uint64_t below(std::uint64_t n) {
    assert(n > 0);
    const std::uint64_t limit = n * (~std::uint64_t{0} / n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // index draw proportional to non-negative weights; zero total falls back
  // to the last index
  std::size_t weighted_index(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double r = uniform01() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      cum += weights[i];
      if (r < cum) return i;
    }
    return weights.empty() ? 0 : weights.size() - 1;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
    }
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
  static constexpr double kTwoPi = 6.283185307179586476925287;

  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t key() const { return mix(seed_ + kGolden * mix(stream_id_ + 1)); }

  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace rlhflab
