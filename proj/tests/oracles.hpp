// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used to cross-check the library.
// Everything here is written as plainly as possible (no tiling, no caches,
// no shared helpers with the code under test) so a bug would have to be
// made twice, differently, to slip through.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <tuple>
#include <vector>

#include "desplat/losses.hpp"
#include "desplat/regularizer.hpp"
#include "desplat/scene.hpp"
#include "desplat/splatter.hpp"
#include "desplat/ssim.hpp"

namespace oracle {

using namespace desplat;

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central difference of a scalar function with respect to one double slot.
inline double central_diff(const std::function<double()>& f, double* x,
                           double h = 1e-4) {
  const double orig = *x;
  *x = orig + h;
  const double fp = f();
  *x = orig - h;
  const double fm = f();
  *x = orig;
  return (fp - fm) / (2.0 * h);
}

/// Gradient agreement test: relative error against the larger magnitude,
/// with an absolute floor so jointly-tiny values count as a match.
inline bool grads_match(double analytic, double fd, double rel_tol = 1e-3,
                        double abs_tol = 1e-6) {
  const double diff = std::abs(analytic - fd);
  if (diff <= abs_tol) return true;
  return diff <= rel_tol * std::max(std::abs(analytic), std::abs(fd));
}

// ---------------------------------------------------------------------------
// Per-pixel full-sort renderer (no tiles, no support culling)
// ---------------------------------------------------------------------------

inline RenderOutput brute_force_render(const std::vector<NeuralGaussian>& gaussians,
                                       const Camera& cam,
                                       const RenderSettings& rs = {}) {
  const int w = cam.width, h = cam.height;
  RenderOutput out;
  out.width = w;
  out.height = h;
  out.color.assign(static_cast<size_t>(w) * h * 3, 0.0);
  out.depth.assign(static_cast<size_t>(w) * h, 0.0);
  out.alpha_acc.assign(static_cast<size_t>(w) * h, 0.0);
  out.contributors.assign(static_cast<size_t>(w) * h, 0);

  struct Splat2D {
    size_t index;
    Vec2 mean;
    Mat2 cov_inv;
    double depth;
    Vec3 color;
    double opacity;
  };
  std::vector<Splat2D> splats;
  for (size_t i = 0; i < gaussians.size(); ++i) {
    const NeuralGaussian& g = gaussians[i];
    if (g.opacity <= rs.alpha_skip) continue;
    const Mat3 cov3d = build_covariance(g.shape);
    const Projected2D p = project_gaussian(g.mean3d, cov3d, cam, rs.projection);
    if (!p.visible) continue;
    const double det = p.cov2d(0, 0) * p.cov2d(1, 1) - p.cov2d(0, 1) * p.cov2d(1, 0);
    Mat2 inv;
    inv << p.cov2d(1, 1), -p.cov2d(0, 1), -p.cov2d(1, 0), p.cov2d(0, 0);
    inv /= det;
    splats.push_back({i, p.mean2d, inv, p.depth, g.color, g.opacity});
  }
  // Global painter's order: nearest first, input order on ties.
  std::stable_sort(splats.begin(), splats.end(),
                   [](const Splat2D& a, const Splat2D& b) { return a.depth < b.depth; });

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec2 px(x + 0.5, y + 0.5);
      double transmittance = 1.0;
      Vec3 color = Vec3::Zero();
      double depth = 0.0;
      int contributors = 0;
      for (const Splat2D& s : splats) {
        if (transmittance < rs.transmittance_stop) break;
        const Vec2 d = px - s.mean;
        const double maha = d.dot(s.cov_inv * d);
        const double alpha = std::min(rs.alpha_clamp, s.opacity * std::exp(-0.5 * maha));
        if (alpha < rs.alpha_skip) continue;
        color += s.color * (alpha * transmittance);
        depth += s.depth * (alpha * transmittance);
        transmittance *= 1.0 - alpha;
        ++contributors;
      }
      const size_t p = static_cast<size_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) out.color[p * 3 + c] = color(c);
      out.depth[p] = depth;
      out.alpha_acc[p] = 1.0 - transmittance;
      out.contributors[p] = contributors;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Straight-line SSIM map (11x11 Gaussian window renormalized over the valid
// in-bounds mass, one nested loop per pixel -- no separable passes)
// ---------------------------------------------------------------------------

inline Image reference_ssim_map(const Image& x, const Image& y, const Mask& valid) {
  const int radius = 5;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  double taps[11];
  double tap_sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    taps[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    tap_sum += taps[i + radius];
  }
  for (double& t : taps) t /= tap_sum;

  // Renormalized window moment: sum of tap-weighted values over valid
  // in-bounds pixels, divided by the same tap mass.
  const auto window_mean = [&](const Image& img, int cy, int cx, int ch,
                               const Image* other) {
    double acc = 0.0, mass = 0.0;
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx) {
        const int yy = cy + dy, xx = cx + dx;
        if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) continue;
        if (!valid.at(yy, xx)) continue;
        const double tap = taps[dy + radius] * taps[dx + radius];
        double v = img.at(yy, xx, ch);
        if (other) v *= other->at(yy, xx, ch);
        acc += tap * v;
        mass += tap;
      }
    return mass > 0.0 ? acc / mass : 0.0;
  };

  Image map(x.width, x.height, 1);
  for (int yy = 0; yy < x.height; ++yy)
    for (int xx = 0; xx < x.width; ++xx) {
      if (!valid.at(yy, xx)) continue;
      double pix = 0.0;
      for (int ch = 0; ch < x.channels; ++ch) {
        const double m1 = window_mean(x, yy, xx, ch, nullptr);
        const double m2 = window_mean(y, yy, xx, ch, nullptr);
        const double m11 = window_mean(x, yy, xx, ch, &x);
        const double m22 = window_mean(y, yy, xx, ch, &y);
        const double m12 = window_mean(x, yy, xx, ch, &y);
        const double var_x = m11 - m1 * m1;
        const double var_y = m22 - m2 * m2;
        const double cov = m12 - m1 * m2;
        pix += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) /
               ((m1 * m1 + m2 * m2 + c1) * (var_x + var_y + c2));
      }
      map.at(yy, xx) = pix / x.channels;
    }
  return map;
}

/// Mean of the reference map with every pixel valid.
inline double reference_ssim(const Image& x, const Image& y) {
  Mask all(x.width, x.height, 1);
  const Image map = reference_ssim_map(x, y, all);
  double total = 0.0;
  for (double v : map.data) total += v;
  return total / (static_cast<double>(x.width) * x.height);
}

// ---------------------------------------------------------------------------
// Least-squares depth fit through a generic QR solve
// ---------------------------------------------------------------------------

inline bool reference_align(const Image& rendered, const Image& mono,
                            const Mask& selection, double* w, double* q) {
  std::vector<double> xs, ys;
  for (size_t i = 0; i < selection.data.size(); ++i) {
    if (!selection.data[i]) continue;
    xs.push_back(rendered.data[i]);
    ys.push_back(mono.data[i]);
  }
  if (xs.size() < 2) return false;
  Eigen::MatrixXd a(xs.size(), 2);
  Eigen::VectorXd b(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    a(static_cast<int>(i), 0) = xs[i];
    a(static_cast<int>(i), 1) = 1.0;
    b(static_cast<int>(i)) = ys[i];
  }
  const Eigen::Vector2d sol = a.colPivHouseholderQr().solve(b);
  *w = sol(0);
  *q = sol(1);
  return true;
}

// ---------------------------------------------------------------------------
// Anchor-grid replay (first-seen voxel order, mean position)
// ---------------------------------------------------------------------------

inline std::vector<Vec3> replay_voxel_anchors(const std::vector<Vec3>& points,
                                              double voxel) {
  std::vector<std::tuple<int64_t, int64_t, int64_t>> order;
  std::map<std::tuple<int64_t, int64_t, int64_t>, std::pair<Vec3, int>> cells;
  for (const Vec3& p : points) {
    const auto key = std::make_tuple(
        static_cast<int64_t>(std::floor(p(0) / voxel)),
        static_cast<int64_t>(std::floor(p(1) / voxel)),
        static_cast<int64_t>(std::floor(p(2) / voxel)));
    auto it = cells.find(key);
    if (it == cells.end()) {
      cells[key] = {p, 1};
      order.push_back(key);
    } else {
      it->second.first += p;
      it->second.second += 1;
    }
  }
  std::vector<Vec3> anchors;
  for (const auto& key : order) {
    const auto& [sum, count] = cells[key];
    anchors.push_back(sum / count);
  }
  return anchors;
}

// ---------------------------------------------------------------------------
// Densify/prune policy replay
// ---------------------------------------------------------------------------

struct DensifyExpectation {
  std::vector<Vec3> spawned_positions;  // in slot order, deduplicated
  std::vector<int> pruned_anchors;      // original indices
};

inline DensifyExpectation replay_densify(const SceneModel& scene,
                                         const DensifyStats& stats,
                                         const DensifyConfig& config) {
  DensifyExpectation e;
  const int k = scene.config.offsets_per_anchor;
  const double v = scene.voxel_size;
  std::map<std::tuple<int64_t, int64_t, int64_t>, bool> occupied;
  const auto key_of = [&](const Vec3& p) {
    return std::make_tuple(static_cast<int64_t>(std::floor(p(0) / v)),
                           static_cast<int64_t>(std::floor(p(1) / v)),
                           static_cast<int64_t>(std::floor(p(2) / v)));
  };
  for (const Vec3& p : scene.positions) occupied[key_of(p)] = true;
  for (size_t a = 0; a < scene.anchor_count(); ++a) {
    for (int j = 0; j < k; ++j) {
      const size_t slot = a * k + j;
      if (stats.grad_count[slot] == 0) continue;
      if (stats.grad_sum[slot] / stats.grad_count[slot] <= config.grad_threshold)
        continue;
      const Vec3 mean = scene.gaussian_mean(static_cast<int>(a), j);
      const auto key = key_of(mean);
      if (occupied[key]) continue;
      occupied[key] = true;
      e.spawned_positions.push_back(mean);
    }
  }
  std::vector<int> pruned;
  for (size_t a = 0; a < scene.anchor_count(); ++a)
    if (stats.opacity_count[a] > 0 &&
        stats.opacity_sum[a] / stats.opacity_count[a] < config.opacity_threshold)
      pruned.push_back(static_cast<int>(a));
  // Never empty the scene: keep the strongest would-be-pruned anchor if
  // pruning plus no spawns would remove everything.
  if (pruned.size() == scene.anchor_count() && e.spawned_positions.empty()) {
    size_t best = 0;
    double best_avg = -1.0;
    for (size_t a = 0; a < scene.anchor_count(); ++a) {
      const double avg = stats.opacity_sum[a] / stats.opacity_count[a];
      if (avg > best_avg) {
        best_avg = avg;
        best = a;
      }
    }
    pruned.erase(std::find(pruned.begin(), pruned.end(), static_cast<int>(best)));
  }
  e.pruned_anchors = pruned;
  return e;
}

// ---------------------------------------------------------------------------
// Scalar Adam reference
// ---------------------------------------------------------------------------

inline void reference_adam(double* param, double grad, double* m, double* v,
                           double lr, double b1, double b2, double eps, int t) {
  *m = b1 * *m + (1.0 - b1) * grad;
  *v = b2 * *v + (1.0 - b2) * grad * grad;
  const double mhat = *m / (1.0 - std::pow(b1, t));
  const double vhat = *v / (1.0 - std::pow(b2, t));
  *param -= lr * mhat / (std::sqrt(vhat) + eps);
}

}  // namespace oracle
