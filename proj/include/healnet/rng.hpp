#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>

namespace healnet {

/// SplitMix64 finaliser; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Order-sensitive combination of counters into one stream key.
constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t a) noexcept {
  return mix64(seed ^ mix64(a + 0x632BE59BD9B4E019ull));
}

template <class... Rest>
constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t a, Rest... rest) noexcept {
  return derive_key(derive_key(seed, a), static_cast<std::uint64_t>(rest)...);
}

/// Uniform in [0, 1) from a counter, 53-bit resolution.
constexpr double counter_uniform(std::uint64_t key, std::uint64_t counter) noexcept {
  return static_cast<double>(mix64(key ^ mix64(counter)) >> 11) * 0x1.0p-53;
}

using Rng = std::mt19937_64;

/// std distributions are not portable across standard libraries, so the
/// generators below are written out.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double standard_normal(Rng& rng) {
  // Marsaglia polar method; discards the second variate to stay stateless.
  for (;;) {
    const double u = 2.0 * uniform01(rng) - 1.0;
    const double v = 2.0 * uniform01(rng) - 1.0;
    const double s = u * u + v * v;
    if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
  }
}

/// Fisher-Yates with the portable uniform above.
template <class Vec>
void shuffle(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    using std::swap;
    swap(v[i - 1], v[j < i ? j : i - 1]);
  }
}

}  // namespace healnet
