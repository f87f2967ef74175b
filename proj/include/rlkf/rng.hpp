#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "rlkf/error.hpp"

namespace rlkf {

// splitmix64: fully specified so streams reproduce across platforms and
// standard-library versions (std:: distributions are not pinned by the
// standard).
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  return splitmix64_next(s);
}

// Derives an independent stream seed from a root seed and arbitrary parts,
// e.g. stream_seed(seed, fnv1a64(question_id), sample_index).
template <typename... Parts>
std::uint64_t stream_seed(std::uint64_t root, Parts... parts) {
  std::uint64_t h = root;
  ((h = mix64(h, static_cast<std::uint64_t>(parts))), ...);
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // Uniform in [0, 1).
  double next_real() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [0, n), unbiased via rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("Rng::below: n must be positive");
    const std::uint64_t min = (0ull - n) % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r < min);
    return r % n;
  }

  bool bernoulli(double p) { return next_real() < p; }

  template <typename T>
  const T& pick(const std::vector<T>& items) {
    if (items.empty()) throw Error("Rng::pick: empty collection");
    return items[below(items.size())];
  }

 private:
  std::uint64_t state_;
};

}  // namespace rlkf
