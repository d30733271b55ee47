#pragma once

#include <cstdint>
#include <limits>

namespace subflow {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-keyed stream: the draws for (seed, iteration, index) do not depend
/// on how many other streams exist or in which order they are consumed.
class KeyedRng {
 public:
  using result_type = std::uint64_t;

  KeyedRng(std::uint64_t seed, std::uint64_t iteration, std::uint64_t index) {
    std::uint64_t h = seed;
    state_ = splitmix64(h);
    h ^= iteration * 0xd1b54a32d192ed03ULL;
    state_ ^= splitmix64(h);
    h ^= index * 0x8cb92ba72f3d8dd7ULL;
    state_ ^= splitmix64(h);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return splitmix64(state_); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

}  // namespace subflow
