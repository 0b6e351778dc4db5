#pragma once

// Portable counter-based random numbers.
//
// Every draw is a pure function of (key, counter), so a stream is fully
// described by its 64-bit key and position and reproduces bit-for-bit on
// any platform. Distributions are implemented here rather than taken from
// <random> because the standard distributions are not portable across
// library implementations.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace oplora {

/// Philox4x32-10 (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
class Philox4x32 {
 public:
  static constexpr std::string_view kName = "philox4x32-10";

  explicit Philox4x32(std::uint64_t key) noexcept
      : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)} {}

  std::uint64_t key() const noexcept {
    return static_cast<std::uint64_t>(key_[0]) | (static_cast<std::uint64_t>(key_[1]) << 32);
  }
  std::uint64_t position() const noexcept { return counter_; }

  /// Raw 32-bit output for (key, counter), no state change.
  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 2> key,
                                            std::array<std::uint32_t, 4> ctr) noexcept {
    constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
    constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
      ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
             static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
      key[0] += kW0;
      key[1] += kW1;
    }
    return ctr;
  }

  std::uint64_t next_u64() noexcept {
    if (buffered_ == 0) {
      const auto out = block(key_, {static_cast<std::uint32_t>(counter_),
                                    static_cast<std::uint32_t>(counter_ >> 32), 0u, 0u});
      ++counter_;
      buffer_[0] = static_cast<std::uint64_t>(out[0]) | (static_cast<std::uint64_t>(out[1]) << 32);
      buffer_[1] = static_cast<std::uint64_t>(out[2]) | (static_cast<std::uint64_t>(out[3]) << 32);
      buffered_ = 2;
    }
    return buffer_[2 - buffered_--];
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on (lo, hi); the open interval matters for bound checks on Kaiming draws.
  double uniform(double lo, double hi) noexcept {
    double u;
    do {
      u = uniform01();
    } while (u == 0.0);
    return lo + (hi - lo) * u;
  }

  /// Standard normal via Box-Muller (one output per pair; no cached spare, so
  /// the stream position depends only on the number of calls).
  double normal() noexcept {
    double u1;
    do {
      u1 = uniform01();
    } while (u1 == 0.0);
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::array<std::uint32_t, 2> key_;
  std::uint64_t counter_ = 0;
  std::array<std::uint64_t, 2> buffer_{};
  int buffered_ = 0;
};

/// splitmix64 finaliser.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// FNV-1a over bytes.
constexpr std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ull) noexcept {
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Key for an isolated per-run stream: depends only on the experiment seed,
/// the cell fingerprint and the run seed, never on sweep composition.
constexpr std::uint64_t derive_stream_key(std::uint64_t experiment_seed, std::string_view cell,
                                          std::uint64_t run_seed) noexcept {
  return mix64(mix64(experiment_seed) ^ fnv1a(cell) ^ mix64(run_seed + 0x632BE59BD9B4E019ull));
}

}  // namespace oplora
