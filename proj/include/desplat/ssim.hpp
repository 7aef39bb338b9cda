// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "desplat/common.hpp"

namespace desplat {

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) on
/// dynamic range 1 (K1=0.01, K2=0.03), evaluated as a per-pixel map.
///
/// Local moments are computed over *valid* pixels only and renormalized by
/// the in-window valid mass:  b(f) = conv(g, v.f) / conv(g, v).  One rule
/// covers both image borders (outside pixels carry no weight) and excluded
/// regions: the map at a valid pixel never reads an invalid pixel, so the
/// result is exactly invariant to values stored under v=0.

namespace ssim_detail {

constexpr int kRadius = 5;
constexpr double kC1 = 1e-4;  // (0.01 * 1)^2
constexpr double kC2 = 9e-4;  // (0.03 * 1)^2

inline const std::array<double, 11>& window_taps() {
  static const std::array<double, 11> taps = [] {
    std::array<double, 11> t{};
    double sum = 0.0;
    for (int i = 0; i < 11; ++i) {
      const double d = i - kRadius;
      t[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += t[i];
    }
    for (double& v : t) v /= sum;
    return t;
  }();
  return taps;
}

/// Separable 11-tap correlation with zero padding, single channel.
inline Image conv_window(const Image& src) {
  const auto& g = window_taps();
  const int w = src.width, h = src.height;
  Image tmp(w, h, 1), dst(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      const int lo = std::max(-kRadius, -x), hi = std::min(kRadius, w - 1 - x);
      for (int t = lo; t <= hi; ++t) acc += g[t + kRadius] * src.at(y, x + t);
      tmp.at(y, x) = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    const int lo = std::max(-kRadius, -y), hi = std::min(kRadius, h - 1 - y);
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int t = lo; t <= hi; ++t) acc += g[t + kRadius] * tmp.at(y + t, x);
      dst.at(y, x) = acc;
    }
  }
  return dst;
}

}  // namespace ssim_detail

/// Forward state: renormalized window moments per channel, plus the
/// channel-averaged SSIM map (zero at invalid pixels).
struct SsimCache {
  int width = 0, height = 0, channels = 0;
  Mask valid;
  Image norm;                                     ///< conv(g, v)
  std::vector<Image> m1, m2, m11, m22, m12;       ///< per channel moments
  Image map;                                      ///< H x W, averaged over channels
};

inline SsimCache ssim_map(const Image& x, const Image& y, const Mask& valid) {
  if (!x.same_shape(y) || x.width != valid.width || x.height != valid.height)
    throw std::invalid_argument("ssim_map: shape mismatch");
  using namespace ssim_detail;
  const int w = x.width, h = x.height, nc = x.channels;

  SsimCache cache;
  cache.width = w;
  cache.height = h;
  cache.channels = nc;
  cache.valid = valid;
  cache.map = Image(w, h, 1);

  Image v(w, h, 1);
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = valid.data[i] ? 1.0 : 0.0;
  cache.norm = conv_window(v);

  Image vx(w, h, 1), vy(w, h, 1), vxx(w, h, 1), vyy(w, h, 1), vxy(w, h, 1);
  for (int c = 0; c < nc; ++c) {
    for (int py = 0; py < h; ++py) {
      for (int px = 0; px < w; ++px) {
        const double m = v.at(py, px);
        const double xs = x.at(py, px, c), ys = y.at(py, px, c);
        vx.at(py, px) = m * xs;
        vy.at(py, px) = m * ys;
        vxx.at(py, px) = m * xs * xs;
        vyy.at(py, px) = m * ys * ys;
        vxy.at(py, px) = m * xs * ys;
      }
    }
    Image m1 = conv_window(vx), m2 = conv_window(vy);
    Image m11 = conv_window(vxx), m22 = conv_window(vyy), m12 = conv_window(vxy);
    for (size_t i = 0; i < m1.data.size(); ++i) {
      if (!valid.data[i]) {
        m1.data[i] = m2.data[i] = m11.data[i] = m22.data[i] = m12.data[i] = 0.0;
        continue;
      }
      const double inv = 1.0 / cache.norm.data[i];
      m1.data[i] *= inv;
      m2.data[i] *= inv;
      m11.data[i] *= inv;
      m22.data[i] *= inv;
      m12.data[i] *= inv;
      const double a = m1.data[i], b = m2.data[i];
      const double n1 = 2.0 * a * b + kC1;
      const double n2 = 2.0 * (m12.data[i] - a * b) + kC2;
      const double d1 = a * a + b * b + kC1;
      const double d2 = (m11.data[i] - a * a) + (m22.data[i] - b * b) + kC2;
      cache.map.data[i] += (n1 * n2) / (d1 * d2) / nc;
    }
    cache.m1.push_back(std::move(m1));
    cache.m2.push_back(std::move(m2));
    cache.m11.push_back(std::move(m11));
    cache.m22.push_back(std::move(m22));
    cache.m12.push_back(std::move(m12));
  }
  return cache;
}

/// Mean of the SSIM map over valid pixels (1.0 for an empty mask).
inline double ssim_mean(const SsimCache& cache) {
  double sum = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < cache.map.data.size(); ++i) {
    if (!cache.valid.data[i]) continue;
    sum += cache.map.data[i];
    ++n;
  }
  return n ? sum / n : 1.0;
}

/// Gradient of sum_p upstream(p) * map(p) w.r.t. x. The moments are linear
/// images of x under the renormalized window, so each partial pulls back
/// through one more correlation (the window is symmetric).
inline Image ssim_backward(const Image& x, const Image& y, const SsimCache& cache,
                           const Image& upstream) {
  using namespace ssim_detail;
  const int w = cache.width, h = cache.height, nc = cache.channels;
  if (upstream.width != w || upstream.height != h || upstream.channels != 1)
    throw std::invalid_argument("ssim_backward: upstream shape mismatch");

  Image grad(w, h, nc);
  Image a1(w, h, 1), a11(w, h, 1), a12(w, h, 1);
  for (int c = 0; c < nc; ++c) {
    const Image& m1 = cache.m1[c];
    const Image& m2 = cache.m2[c];
    const Image& m11 = cache.m11[c];
    const Image& m22 = cache.m22[c];
    const Image& m12 = cache.m12[c];
    for (size_t i = 0; i < a1.data.size(); ++i) {
      a1.data[i] = a11.data[i] = a12.data[i] = 0.0;
      if (!cache.valid.data[i]) continue;
      const double u = upstream.data[i] / nc;
      if (u == 0.0) continue;
      const double a = m1.data[i], b = m2.data[i];
      const double n1 = 2.0 * a * b + kC1;
      const double n2 = 2.0 * (m12.data[i] - a * b) + kC2;
      const double d1 = a * a + b * b + kC1;
      const double d2 = (m11.data[i] - a * a) + (m22.data[i] - b * b) + kC2;
      const double s = (n1 * n2) / (d1 * d2);
      const double ds_dm1 = 2.0 * b * (n2 - n1) / (d1 * d2) -
                            2.0 * a * s * (1.0 / d1 - 1.0 / d2);
      const double ds_dm11 = -s / d2;
      const double ds_dm12 = 2.0 * n1 / (d1 * d2);
      const double inv_norm = 1.0 / cache.norm.data[i];
      a1.data[i] = u * ds_dm1 * inv_norm;
      a11.data[i] = u * ds_dm11 * inv_norm;
      a12.data[i] = u * ds_dm12 * inv_norm;
    }
    const Image c1 = conv_window(a1);
    const Image c11 = conv_window(a11);
    const Image c12 = conv_window(a12);
    for (int py = 0; py < h; ++py) {
      for (int px = 0; px < w; ++px) {
        const size_t i = static_cast<size_t>(py) * w + px;
        if (!cache.valid.data[i]) continue;
        grad.at(py, px, c) = c1.data[i] + 2.0 * x.at(py, px, c) * c11.data[i] +
                             y.at(py, px, c) * c12.data[i];
      }
    }
  }
  return grad;
}

}  // namespace desplat
