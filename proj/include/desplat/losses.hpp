// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "desplat/common.hpp"
#include "desplat/ssim.hpp"

namespace desplat {

struct LossWeights {
  double lambda1 = 1.0;      ///< reference view, inside mask
  double lambda2 = 1.0;      ///< reference view, outside mask
  double lambda3 = 1.0;      ///< other views, outside mask
  double lambda_ssim = 0.2;  ///< structural share of the color term
  double lambda_depth = 0.5;
  double lambda_tv = 0.1;

  void validate() const {
    for (double v : {lambda1, lambda2, lambda3, lambda_ssim, lambda_depth, lambda_tv})
      if (!(v >= 0.0))
        throw std::invalid_argument("loss weights must be non-negative");
  }
};

struct AlignmentResult {
  double w = 1.0;             ///< scale
  double q = 0.0;             ///< shift
  int valid_pixel_count = 0;  ///< selected pixels fed into the fit
  bool degenerate = false;    ///< fallback path taken
};

/// Least-squares affine fit of rendered depth onto the monocular prior:
/// (w, q) = argmin sum_selected (w*rendered + q - mono)^2 via the 2x2 normal
/// equations. Callers build the selection (rendered coverage, finite prior,
/// view-dependent mask policy); w and q are treated as constants downstream,
/// so there is no gradient through this fit. Rank-deficient or undersized
/// systems fall back to w=1 with a mean shift.
inline AlignmentResult align_depth(const Image& rendered, const Image& mono,
                                   const Mask& selection) {
  if (rendered.width != mono.width || rendered.height != mono.height ||
      rendered.width != selection.width || rendered.height != selection.height)
    throw std::invalid_argument("align_depth: shape mismatch");

  double sxx = 0.0, sx = 0.0, sxy = 0.0, sy = 0.0;
  int n = 0;
  for (size_t i = 0; i < selection.data.size(); ++i) {
    if (!selection.data[i]) continue;
    const double d = rendered.data[i];
    const double m = mono.data[i];
    sxx += d * d;
    sx += d;
    sxy += d * m;
    sy += m;
    ++n;
  }

  AlignmentResult out;
  out.valid_pixel_count = n;
  const double det = sxx * n - sx * sx;
  if (n < 2 || !(det >= 1e-12 * n)) {
    out.degenerate = true;
    out.w = 1.0;
    out.q = n > 0 ? (sy - sx) / n : 0.0;
    return out;
  }
  out.w = (n * sxy - sx * sy) / det;
  out.q = (sxx * sy - sx * sxy) / det;
  return out;
}

/// Per-pixel supervision weights:
///   reference view (index 0):  lambda1 * M + lambda2 * (1 - M)
///   any other view:            lambda3 * (1 - M)
inline Image mask_weight(int view_index, const Mask& mask, const LossWeights& lw) {
  Image weights(mask.width, mask.height, 1);
  for (size_t i = 0; i < mask.data.size(); ++i) {
    const bool object = mask.data[i] != 0;
    weights.data[i] = view_index == 0
                          ? (object ? lw.lambda1 : lw.lambda2)
                          : (object ? 0.0 : lw.lambda3);
  }
  return weights;
}

/// Pixels that carry depth supervision: finite prior under rendered coverage.
inline Mask depth_validity(const Image& mono, const std::vector<double>& alpha_acc) {
  Mask valid(mono.width, mono.height);
  for (size_t i = 0; i < valid.data.size(); ++i)
    valid.data[i] = is_finite(mono.data[i]) && alpha_acc[i] > 0.0 ? 1 : 0;
  return valid;
}

/// Weighted L1 between aligned rendered depth and the prior, normalized by
/// the full pixel count; invalid pixels contribute zero. Optionally
/// accumulates d(loss)/d(rendered depth) into `grad` (w, q frozen).
inline double depth_l1_loss(const Image& rendered, const Image& mono,
                            const AlignmentResult& align, const Image& weights,
                            const Mask& validity, Image* grad = nullptr) {
  const double scale = 1.0 / (static_cast<double>(rendered.width) * rendered.height);
  if (grad && (grad->width != rendered.width || grad->height != rendered.height))
    *grad = Image(rendered.width, rendered.height, 1);
  double loss = 0.0;
  for (size_t i = 0; i < rendered.data.size(); ++i) {
    if (!validity.data[i] || weights.data[i] == 0.0) continue;
    const double r = align.w * rendered.data[i] + align.q - mono.data[i];
    loss += weights.data[i] * std::abs(r) * scale;
    if (grad && r != 0.0)
      grad->data[i] += weights.data[i] * (r > 0.0 ? 1.0 : -1.0) * align.w * scale;
  }
  return loss;
}

/// Total variation of the aligned-depth residual under forward differences.
/// A pixel contributes weights(p) * (|dx residual| + |dy residual|) when it
/// and both forward neighbors are valid; the mean is over contributing
/// pixels, which depends on the validity pattern alone, never on values.
inline double depth_tv_loss(const Image& rendered, const Image& mono,
                            const AlignmentResult& align, const Image& weights,
                            const Mask& validity, Image* grad = nullptr) {
  const int w = rendered.width, h = rendered.height;
  if (grad && (grad->width != w || grad->height != h)) *grad = Image(w, h, 1);

  size_t count = 0;
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x + 1 < w; ++x)
      if (validity.at(y, x) && validity.at(y, x + 1) && validity.at(y + 1, x))
        ++count;
  if (count == 0) return 0.0;

  auto residual = [&](int y, int x) {
    return align.w * rendered.at(y, x) + align.q - mono.at(y, x);
  };
  const double scale = 1.0 / static_cast<double>(count);
  double loss = 0.0;
  for (int y = 0; y + 1 < h; ++y) {
    for (int x = 0; x + 1 < w; ++x) {
      if (!(validity.at(y, x) && validity.at(y, x + 1) && validity.at(y + 1, x)))
        continue;
      const double weight = weights.at(y, x);
      if (weight == 0.0) continue;
      const double r0 = residual(y, x);
      const double dx = residual(y, x + 1) - r0;
      const double dy = residual(y + 1, x) - r0;
      loss += weight * (std::abs(dx) + std::abs(dy)) * scale;
      if (grad) {
        const double unit = weight * align.w * scale;
        if (dx != 0.0) {
          const double s = dx > 0.0 ? unit : -unit;
          grad->at(y, x + 1) += s;
          grad->at(y, x) -= s;
        }
        if (dy != 0.0) {
          const double s = dy > 0.0 ? unit : -unit;
          grad->at(y + 1, x) += s;
          grad->at(y, x) -= s;
        }
      }
    }
  }
  return loss;
}

/// Photometric term: per-pixel weights times a blend of channel-averaged L1
/// and structural dissimilarity, normalized by the full pixel count.
/// `support` marks pixels that exist for the structural windows; every
/// weighted pixel must be supported (windows never read excluded pixels, so
/// masked-out content cannot influence the loss). Optionally accumulates
/// d(loss)/d(rendered) into `grad` (H x W x 3).
inline double color_loss(const Image& rendered, const Image& target,
                         const Image& weights, const Mask& support,
                         const LossWeights& lw, Image* grad = nullptr) {
  if (!rendered.same_shape(target) || rendered.channels != 3)
    throw std::invalid_argument("color_loss: shape mismatch");
  const int w = rendered.width, h = rendered.height;
  const double scale = 1.0 / (static_cast<double>(w) * h);
  if (grad && (grad->width != w || grad->height != h || grad->channels != 3))
    *grad = Image(w, h, 3);

  const SsimCache ssim = ssim_map(rendered, target, support);

  double loss = 0.0;
  Image upstream(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double weight = weights.at(y, x);
      if (weight == 0.0) continue;
      if (!support.at(y, x))
        throw std::invalid_argument("color_loss: weighted pixel lacks support");
      double l1 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double d = rendered.at(y, x, c) - target.at(y, x, c);
        l1 += std::abs(d) / 3.0;
        if (grad && d != 0.0)
          grad->at(y, x, c) += weight * (1.0 - lw.lambda_ssim) *
                               (d > 0.0 ? 1.0 : -1.0) / 3.0 * scale;
      }
      const size_t i = static_cast<size_t>(y) * w + x;
      loss += weight *
              ((1.0 - lw.lambda_ssim) * l1 + lw.lambda_ssim * (1.0 - ssim.map.data[i])) *
              scale;
      upstream.data[i] = -lw.lambda_ssim * weight * scale;
    }
  }
  if (grad && lw.lambda_ssim != 0.0) {
    const Image sgrad = ssim_backward(rendered, target, ssim, upstream);
    for (size_t i = 0; i < grad->data.size(); ++i) grad->data[i] += sgrad.data[i];
  }
  return loss;
}

/// Per-step loss breakdown, one JSON line of the training log.
struct LossReport {
  int view_id = -1;
  double color = 0.0;
  double depth = 0.0;
  double tv = 0.0;
  double total = 0.0;
  AlignmentResult align;
};

/// total = lambda_depth * depth + lambda_tv * tv + color. Throws on any
/// non-finite component, naming the term and view.
inline double total_loss(double color, double depth, double tv,
                         const LossWeights& lw, int view_id,
                         LossReport* report = nullptr) {
  const auto check = [&](double v, const char* term) {
    if (!is_finite(v))
      throw std::runtime_error(std::string("non-finite ") + term + " loss on view " +
                               std::to_string(view_id));
  };
  check(color, "color");
  check(depth, "depth");
  check(tv, "tv");
  const double total = lw.lambda_depth * depth + lw.lambda_tv * tv + color;
  check(total, "total");
  if (report) {
    report->view_id = view_id;
    report->color = color;
    report->depth = depth;
    report->tv = tv;
    report->total = total;
  }
  return total;
}

}  // namespace desplat
