// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace desplat {

/// Dense row-major image buffer, `channels` interleaved doubles per pixel.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, fill) {}

  double& at(int y, int x, int c = 0) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c = 0) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  size_t pixel_count() const { return static_cast<size_t>(width) * height; }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

/// Binary per-pixel mask, 1 = selected.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;

  Mask() = default;
  Mask(int w, int h, uint8_t fill = 0)
      : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

  uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  size_t count() const {
    size_t n = 0;
    for (uint8_t v : data) n += v != 0;
    return n;
  }
};

/// Deterministic RNG with hand-rolled distributions.
///
/// The standard <random> distributions are implementation-defined, so runs
/// would not reproduce across standard libraries. Everything random in the
/// library flows through this type: xoshiro256** core, explicit uniform /
/// normal / shuffle on top.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    // SplitMix64 expansion of the seed into the xoshiro state.
    uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      s = z ^ (z >> 31);
    }
    has_spare_ = false;
  }

  uint64_t next_u64() {
    auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  uint64_t bounded(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::bounded: n must be positive");
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Pick `n` distinct elements of `v` uniformly (partial Fisher-Yates);
  /// returns all of `v` when n >= v.size(). Order of the picks is the
  /// shuffle order, which is deterministic for a given state.
  template <typename T>
  std::vector<T> sample(std::vector<T> v, size_t n) {
    if (n >= v.size()) return v;
    for (size_t i = 0; i < n; ++i) {
      const size_t j = i + static_cast<size_t>(bounded(v.size() - i));
      std::swap(v[i], v[j]);
    }
    v.resize(n);
    return v;
  }

  /// Exact textual state: four state words plus the Box-Muller spare as its
  /// bit pattern, so a deserialize continues the stream bit for bit.
  std::string serialize() const {
    std::string out;
    for (int i = 0; i < 4; ++i) {
      out += std::to_string(state_[i]);
      if (i != 3) out += ' ';
    }
    if (has_spare_) {
      uint64_t bits;
      static_assert(sizeof(bits) == sizeof(spare_));
      std::memcpy(&bits, &spare_, sizeof(bits));
      out += " 1 " + std::to_string(bits);
    } else {
      out += " 0";
    }
    return out;
  }

  static Rng deserialize(const std::string& text) {
    Rng rng;
    char* end = nullptr;
    const char* p = text.c_str();
    for (auto& s : rng.state_) {
      s = std::strtoull(p, &end, 10);
      p = end;
    }
    rng.has_spare_ = std::strtol(p, &end, 10) != 0;
    p = end;
    if (rng.has_spare_) {
      const uint64_t bits = std::strtoull(p, &end, 10);
      std::memcpy(&rng.spare_, &bits, sizeof(bits));
    } else {
      rng.spare_ = 0.0;
    }
    return rng;
  }

 private:
  uint64_t state_[4] = {};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Run fn(begin, end) over [0, n) split across `threads` workers.
/// Work assignment depends only on (n, threads), never on scheduling, so
/// any per-chunk partial results can be reduced in a fixed order.
template <typename Fn>
void parallel_for(size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    if (n > 0) fn(size_t{0}, n);
    return;
  }
  const size_t workers = std::min<size_t>(threads, n);
  const size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    const size_t begin = w * chunk;
    const size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

inline bool is_finite(double v) { return std::isfinite(v); }

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace desplat
