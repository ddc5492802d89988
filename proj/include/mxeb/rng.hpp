#pragma once

// Seeding discipline
// ------------------
// Every random draw in the library comes from a SplitMix64 stream keyed by a
// 64-bit value. Keys are derived, never incremented, so any logical unit of
// work (a circuit, a run, a training epoch) can regenerate its stream without
// knowing how many draws other units made:
//
//   derive_seed(parent, tag, index)   child key for (tag, index) under parent
//
// Tags in use:
//   stream_tag::phi       circuit gate angles           (index 0)
//   stream_tag::sites     circuit measurement placement (index 0)
//   stream_tag::run       trajectory j of a batch       (index j)
//   stream_tag::init      RNN parameter initialization
//   stream_tag::split     train/validation permutation
//   stream_tag::epoch     batch shuffle + dropout for epoch e
//   stream_tag::sampler   RNN ancestral sampling

#include <cstdint>
#include <string_view>

namespace mxeb {

namespace stream_tag {
inline constexpr std::uint64_t phi = 0x7068690000000001ULL;
inline constexpr std::uint64_t sites = 0x7369746500000002ULL;
inline constexpr std::uint64_t run = 0x72756e0000000003ULL;
inline constexpr std::uint64_t init = 0x696e697400000004ULL;
inline constexpr std::uint64_t split = 0x73706c6900000005ULL;
inline constexpr std::uint64_t epoch = 0x65706f6300000006ULL;
inline constexpr std::uint64_t sampler = 0x73616d7000000007ULL;
inline constexpr std::uint64_t circuit = 0x6369726300000008ULL;
inline constexpr std::uint64_t dataset = 0x6461746100000009ULL;
}  // namespace stream_tag

inline constexpr std::uint64_t splitmix_finalize(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag,
                                           std::uint64_t index = 0) noexcept {
  std::uint64_t h = splitmix_finalize(parent + 0x9e3779b97f4a7c15ULL);
  h = splitmix_finalize(h ^ tag);
  return splitmix_finalize(h + index * 0x9e3779b97f4a7c15ULL + 1);
}

/// SplitMix64 generator. Satisfies UniformRandomBitGenerator so it can feed
/// std algorithms, but the helpers below are used wherever the result must be
/// identical across standard library implementations.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t key) noexcept : state_(key) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }

  result_type operator()() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    return splitmix_finalize(state_);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by Lemire's multiply-shift with rejection.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n == 0) return 0;
    for (;;) {
      const std::uint64_t x = (*this)();
      const unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
      const auto low = static_cast<std::uint64_t>(m);
      if (low >= n || low >= (-n) % n) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

 private:
  std::uint64_t state_;
};

/// Fisher-Yates shuffle driven by SplitMix64::below (portable, unlike std::shuffle).
template <typename RandomIt>
void shuffle(RandomIt first, RandomIt last, SplitMix64& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    using std::swap;
    swap(first[i - 1], first[j]);
  }
}

/// 64-bit FNV-1a; used for content hashes of text artifacts.
inline constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mxeb
