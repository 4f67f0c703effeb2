#ifndef ENTLAB_RNG_HPP
#define ENTLAB_RNG_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace entlab {

// Philox4x32-10 counter-based generator. Every (key, counter) pair maps to an
// independent block, so particle streams do not depend on evaluation order.
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter block(Counter ctr, Key key) {
    for (int r = 0; r < 10; ++r) {
      ctr = round(ctr, key);
      key[0] += kW0;
      key[1] += kW1;
    }
    return ctr;
  }

  static Key key_from_seed(std::uint64_t seed) {
    return {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  }

 private:
  static constexpr std::uint32_t kM0 = 0xD2511F53u;
  static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kW0 = 0x9E3779B9u;
  static constexpr std::uint32_t kW1 = 0xBB67AE85u;

  static Counter round(const Counter& c, const Key& k) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }
};

// Stream domains keep noise, initial sampling and backward noise disjoint.
enum class Stream : std::uint32_t { forward_noise = 0, initial = 1, backward_noise = 2, terminal = 3, jitter = 4 };

// 53-bit uniform on the open interval (0, 1).
inline double uniform_open(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 21) ^ (lo >> 11);
  return (static_cast<double>(bits & ((1ull << 53) - 1)) + 0.5) * 0x1.0p-53;
}

// Standard normals for (particle, step); fills out[0..d).
inline void gaussian_block(std::uint64_t seed, Stream stream, std::uint64_t particle, std::uint32_t step, int d,
                           double* out) {
  const auto key = Philox4x32::key_from_seed(seed);
  for (int b = 0; 2 * b < d; ++b) {
    const Philox4x32::Counter ctr{static_cast<std::uint32_t>(particle), static_cast<std::uint32_t>(particle >> 32),
                                  step, (static_cast<std::uint32_t>(stream) << 8) | static_cast<std::uint32_t>(b)};
    const auto r = Philox4x32::block(ctr, key);
    const double u1 = uniform_open(r[0], r[1]);
    const double u2 = uniform_open(r[2], r[3]);
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    out[2 * b] = rad * std::cos(th);
    if (2 * b + 1 < d) out[2 * b + 1] = rad * std::sin(th);
  }
}

// Two uniforms for (particle, step).
inline std::array<double, 2> uniform_pair(std::uint64_t seed, Stream stream, std::uint64_t particle,
                                          std::uint32_t step) {
  const Philox4x32::Counter ctr{static_cast<std::uint32_t>(particle), static_cast<std::uint32_t>(particle >> 32),
                                step, static_cast<std::uint32_t>(stream) << 8};
  const auto r = Philox4x32::block(ctr, Philox4x32::key_from_seed(seed));
  return {uniform_open(r[0], r[1]), uniform_open(r[2], r[3])};
}

}  // namespace entlab

#endif  // ENTLAB_RNG_HPP
