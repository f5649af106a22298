#pragma once

#include <cstdint>
#include <cmath>

// Counter-based deterministic random streams.  Every draw is addressed by
// (seed, stream, counter, lane) so replaying a worker's i-th draw never
// depends on scheduling order.

namespace birch {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Stateless hash of a draw address to 64 uniform bits.
inline std::uint64_t rng_bits(std::uint64_t seed, std::uint64_t stream,
                              std::uint64_t counter, std::uint64_t lane = 0) {
  std::uint64_t x = detail::splitmix64(seed ^ 0x243f6a8885a308d3ULL);
  x = detail::splitmix64(x ^ detail::splitmix64(stream));
  x = detail::splitmix64(x ^ detail::splitmix64(counter ^ 0x13198a2e03707344ULL));
  return detail::splitmix64(x ^ detail::splitmix64(lane ^ 0xa4093822299f31d0ULL));
}

// Uniform in (0, 1); never returns exactly 0 so it is safe under log().
inline double rng_uniform(std::uint64_t seed, std::uint64_t stream,
                          std::uint64_t counter, std::uint64_t lane = 0) {
  const std::uint64_t bits = rng_bits(seed, stream, counter, lane);
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// Standard normal via Box-Muller; lanes 2m and 2m+1 share a pair of uniforms.
inline double rng_normal(std::uint64_t seed, std::uint64_t stream,
                         std::uint64_t counter, std::uint64_t lane = 0) {
  const std::uint64_t pair = lane / 2;
  const double u1 = rng_uniform(seed, stream, counter, 2 * pair);
  const double u2 = rng_uniform(seed, stream, counter, 2 * pair + 1);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 6.283185307179586476925286766559 * u2;
  return (lane % 2 == 0) ? r * std::cos(theta) : r * std::sin(theta);
}

// Uniform integer in [0, n).
inline std::uint64_t rng_below(std::uint64_t seed, std::uint64_t stream,
                               std::uint64_t counter, std::uint64_t n,
                               std::uint64_t lane = 0) {
  return rng_bits(seed, stream, counter, lane) % n;
}

}  // namespace birch
