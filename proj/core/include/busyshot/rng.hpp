#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>

namespace busyshot {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: the stream is a pure function of its key, so
/// draws for (seed, index) never depend on any other draw.
class KeyedRng {
 public:
  using result_type = std::uint64_t;

  KeyedRng(std::uint64_t seed, std::initializer_list<std::uint64_t> key) : key_(splitmix64(seed)) {
    for (std::uint64_t k : key) key_ = splitmix64(key_ ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return splitmix64(key_ + 0xd1b54a32d192ed03ULL * ++counter_); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t r;
    do {
      r = (*this)();
    } while (r >= limit);
    return r % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates with KeyedRng, independent of the standard library's shuffle.
template <typename It>
void keyed_shuffle(It first, It last, KeyedRng& rng) {
  const auto n = last - first;
  for (auto i = n - 1; i > 0; --i) {
    const auto j = static_cast<decltype(i)>(rng.below(static_cast<std::uint64_t>(i) + 1));
    using std::swap;
    swap(first[i], first[j]);
  }
}

inline double KeyedRng::normal() {
  double u = uniform();
  while (u <= 0.0) u = uniform();
  const double v = uniform();
  constexpr double two_pi = 6.283185307179586;
  return std::sqrt(-2.0 * std::log(u)) * std::cos(two_pi * v);
}

}  // namespace busyshot
