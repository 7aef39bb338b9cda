// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "desplat/common.hpp"
#include "desplat/ssim.hpp"

namespace desplat {

using nlohmann::json;

/// PSNR in dB on [0,1] images, all channels pooled. Identical images hit the
/// +inf fixed point, reported as the 99 dB cap (as is any astronomically
/// small MSE).
inline double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
  double se = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

/// PSNR over mask=1 pixels only. Caller guarantees a non-empty mask.
inline double masked_psnr(const Image& a, const Image& b, const Mask& mask) {
  if (!a.same_shape(b) || a.width != mask.width || a.height != mask.height)
    throw std::invalid_argument("masked_psnr: shape mismatch");
  double se = 0.0;
  size_t n = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (!mask.at(y, x)) continue;
      for (int c = 0; c < a.channels; ++c) {
        const double d = a.at(y, x, c) - b.at(y, x, c);
        se += d * d;
        ++n;
      }
    }
  if (n == 0) throw std::invalid_argument("masked_psnr: empty mask");
  const double mse = se / static_cast<double>(n);
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

/// Mean SSIM over the full image (all pixels valid).
inline double ssim(const Image& a, const Image& b) {
  Mask all(a.width, a.height);
  all.data.assign(all.data.size(), 1);
  const SsimCache cache = ssim_map(a, b, all);
  return ssim_mean(cache);
}

/// SSIM is windowed, so a scattered pixel support is ill-defined; the masked
/// variant averages the full-image SSIM map over the mask's bounding box.
/// Caller guarantees a non-empty mask.
inline double masked_ssim(const Image& a, const Image& b, const Mask& mask) {
  if (a.width != mask.width || a.height != mask.height)
    throw std::invalid_argument("masked_ssim: shape mismatch");
  int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(y, x)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw std::invalid_argument("masked_ssim: empty mask");
  Mask all(a.width, a.height);
  all.data.assign(all.data.size(), 1);
  const SsimCache cache = ssim_map(a, b, all);
  double sum = 0.0;
  size_t n = 0;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      sum += cache.map.data[static_cast<size_t>(y) * a.width + x];
      ++n;
    }
  return sum / static_cast<double>(n);
}

struct ViewMetrics {
  int view_id = -1;
  double psnr = 0.0;
  double ssim = 0.0;
  bool has_masked = false;  ///< false when the view's mask is all-zero
  double masked_psnr = 0.0;
  double masked_ssim = 0.0;
};

struct MetricsReport {
  std::vector<ViewMetrics> views;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  bool has_masked = false;
  double mean_masked_psnr = 0.0;
  double mean_masked_ssim = 0.0;
};

inline ViewMetrics compute_view_metrics(int view_id, const Image& render,
                                        const Image& truth, const Mask& mask) {
  ViewMetrics m;
  m.view_id = view_id;
  m.psnr = psnr(render, truth);
  m.ssim = ssim(render, truth);
  if (mask.count() > 0) {
    m.has_masked = true;
    m.masked_psnr = masked_psnr(render, truth, mask);
    m.masked_ssim = masked_ssim(render, truth, mask);
  }
  return m;
}

/// Aggregate per-view metrics; masked means cover only views with a
/// non-empty mask and are absent when no view has one.
inline MetricsReport compute_metrics(const std::vector<ViewMetrics>& views) {
  MetricsReport r;
  r.views = views;
  if (views.empty()) return r;
  size_t masked_n = 0;
  for (const ViewMetrics& m : views) {
    r.mean_psnr += m.psnr;
    r.mean_ssim += m.ssim;
    if (m.has_masked) {
      r.mean_masked_psnr += m.masked_psnr;
      r.mean_masked_ssim += m.masked_ssim;
      ++masked_n;
    }
  }
  r.mean_psnr /= static_cast<double>(views.size());
  r.mean_ssim /= static_cast<double>(views.size());
  if (masked_n > 0) {
    r.has_masked = true;
    r.mean_masked_psnr /= static_cast<double>(masked_n);
    r.mean_masked_ssim /= static_cast<double>(masked_n);
  }
  return r;
}

inline json metrics_to_json(const MetricsReport& r) {
  json views = json::array();
  for (const ViewMetrics& m : r.views) {
    json v{{"view_id", m.view_id}, {"psnr", m.psnr}, {"ssim", m.ssim}};
    v["masked_psnr"] = m.has_masked ? json(m.masked_psnr) : json(nullptr);
    v["masked_ssim"] = m.has_masked ? json(m.masked_ssim) : json(nullptr);
    views.push_back(v);
  }
  json mean{{"psnr", r.mean_psnr}, {"ssim", r.mean_ssim}};
  mean["masked_psnr"] = r.has_masked ? json(r.mean_masked_psnr) : json(nullptr);
  mean["masked_ssim"] = r.has_masked ? json(r.mean_masked_ssim) : json(nullptr);
  return json{{"masked_ssim_support", "mask_bbox"},
              {"views", views},
              {"mean", mean}};
}

}  // namespace desplat
