#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace colvne {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stream tags keep independent consumers of the same (seed, epoch, index)
// key from sharing draws.
enum class Stream : std::uint64_t {
  init = 1,
  shuffle = 2,
  augment = 3,
  generate = 4,
  split = 5,
  probe = 6,
  test = 7,
  gradcheck = 8,
};

// Counter-based generator: draw n is a hash of (key, n). Any key can be
// replayed independently of scheduling or thread count.
class KeyedRng {
 public:
  KeyedRng(std::uint64_t seed, Stream stream, std::initializer_list<std::uint64_t> lineage = {}) {
    std::uint64_t k = splitmix64(seed ^ 0x636f6c766e65ULL);
    k = splitmix64(k ^ static_cast<std::uint64_t>(stream));
    for (auto part : lineage) k = splitmix64(k ^ splitmix64(part + 0x5bd1e995ULL));
    key_ = k;
  }

  std::uint64_t next_u64() { return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // [0, n)
  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace colvne
