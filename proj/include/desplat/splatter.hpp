// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "desplat/common.hpp"
#include "desplat/geometry.hpp"
#include "desplat/scene.hpp"

namespace desplat {

struct RenderSettings {
  int tile_size = 16;
  double alpha_clamp = 0.99;          ///< per-sample alpha ceiling
  double alpha_skip = 1.0 / 255.0;    ///< samples below this are dropped
  double transmittance_stop = 1e-4;   ///< stop blending once this opaque
  int threads = 1;
  ProjectionSettings projection;
};

/// Rendered buffers, row-major. Color is composited over black; depth is the
/// alpha-blended camera-space z without alpha normalization, 0 where nothing
/// rendered.
struct RenderOutput {
  int width = 0, height = 0;
  std::vector<double> color;      ///< H*W*3
  std::vector<double> depth;      ///< H*W
  std::vector<double> alpha_acc;  ///< H*W, 1 - final transmittance
  std::vector<int> contributors;  ///< H*W, blended sample count (diagnostic)
};

/// Forward state saved for the backward pass.
struct SplatCache {
  std::vector<Projected2D> projected;  ///< per gaussian
  std::vector<Mat2> cov_inv;           ///< valid where visible
  std::vector<Mat3> cov3d;
  int tiles_x = 0, tiles_y = 0;
  std::vector<std::vector<int>> tile_lists;  ///< gaussian ids, blend order
};

namespace detail {

/// Largest eigenvalue of a symmetric 2x2.
inline double max_eigenvalue(const Mat2& m) {
  const double half_trace = 0.5 * (m(0, 0) + m(1, 1));
  const double half_diff = 0.5 * (m(0, 0) - m(1, 1));
  return half_trace + std::sqrt(half_diff * half_diff + m(0, 1) * m(0, 1));
}

/// Screen-space support radius: the distance beyond which the sample alpha
/// is guaranteed to fall under the skip threshold. opacity*exp(-maha^2/2)
/// >= skip requires maha^2 <= 2 ln(opacity/skip); a small pad absorbs
/// floating-point boundary noise.
inline double support_radius(double opacity, const Mat2& cov2d, double skip) {
  const double m2 = 2.0 * std::log(opacity / skip);
  if (!(m2 > 0.0)) return 0.0;
  return std::sqrt(max_eigenvalue(cov2d) * m2) + 1e-3;
}

struct PixelHit {
  int list_pos;
  double alpha;
  double transmittance;  ///< before this sample
};

}  // namespace detail

/// Project, tile, depth-sort, and alpha-blend the gaussians into color,
/// depth, and accumulated-opacity buffers. Per pixel the contributors are
/// visited front to back; blending follows
///   C = sum_k c_k a_k prod_{j<k} (1 - a_j),  D likewise with depth_cam.
/// Ties in depth break on input index, so the pass is deterministic.
inline RenderOutput render(const std::vector<NeuralGaussian>& gaussians,
                           const Camera& cam, const RenderSettings& rs = {},
                           SplatCache* cache = nullptr) {
  cam.validate();
  const int w = cam.width, h = cam.height;
  RenderOutput out;
  out.width = w;
  out.height = h;
  out.color.assign(static_cast<size_t>(w) * h * 3, 0.0);
  out.depth.assign(static_cast<size_t>(w) * h, 0.0);
  out.alpha_acc.assign(static_cast<size_t>(w) * h, 0.0);
  out.contributors.assign(static_cast<size_t>(w) * h, 0);

  const int ts = rs.tile_size;
  const int tiles_x = (w + ts - 1) / ts;
  const int tiles_y = (h + ts - 1) / ts;

  SplatCache local;
  SplatCache& sc = cache ? *cache : local;
  sc.projected.assign(gaussians.size(), Projected2D{});
  sc.cov_inv.assign(gaussians.size(), Mat2::Zero());
  sc.cov3d.assign(gaussians.size(), Mat3::Zero());
  sc.tiles_x = tiles_x;
  sc.tiles_y = tiles_y;
  sc.tile_lists.assign(static_cast<size_t>(tiles_x) * tiles_y, {});

  // Project and bin into tiles.
  std::vector<double> radius(gaussians.size(), 0.0);
  parallel_for(gaussians.size(), rs.threads, [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      if (!(gaussians[i].opacity > rs.alpha_skip)) continue;
      sc.cov3d[i] = build_covariance(gaussians[i].shape);
      Projected2D p =
          project_gaussian(gaussians[i].mean3d, sc.cov3d[i], cam, rs.projection);
      if (!p.visible) continue;
      sc.projected[i] = p;
      sc.cov_inv[i] = p.cov2d.inverse();
      radius[i] = detail::support_radius(gaussians[i].opacity, p.cov2d, rs.alpha_skip);
    }
  });
  for (size_t i = 0; i < gaussians.size(); ++i) {
    if (!sc.projected[i].visible || !(radius[i] > 0.0)) continue;
    const Vec2& mu = sc.projected[i].mean2d;
    const double r = radius[i];
    // Pixels whose center (x+0.5, y+0.5) can fall inside the support disc.
    const int x_lo = std::max(0, static_cast<int>(std::ceil(mu.x() - r - 0.5)));
    const int x_hi = std::min(w - 1, static_cast<int>(std::floor(mu.x() + r - 0.5)));
    const int y_lo = std::max(0, static_cast<int>(std::ceil(mu.y() - r - 0.5)));
    const int y_hi = std::min(h - 1, static_cast<int>(std::floor(mu.y() + r - 0.5)));
    if (x_lo > x_hi || y_lo > y_hi) continue;
    for (int ty = y_lo / ts; ty <= y_hi / ts; ++ty)
      for (int tx = x_lo / ts; tx <= x_hi / ts; ++tx)
        sc.tile_lists[static_cast<size_t>(ty) * tiles_x + tx].push_back(
            static_cast<int>(i));
  }

  // Blend order: depth ascending, input index as the tie-break. The lists
  // were filled in index order, so a stable depth sort realizes exactly that.
  parallel_for(sc.tile_lists.size(), rs.threads, [&](size_t begin, size_t end) {
    for (size_t t = begin; t < end; ++t)
      std::stable_sort(sc.tile_lists[t].begin(), sc.tile_lists[t].end(),
                       [&](int a, int b) {
                         return sc.projected[a].depth < sc.projected[b].depth;
                       });
  });

  parallel_for(sc.tile_lists.size(), rs.threads, [&](size_t begin, size_t end) {
    for (size_t t = begin; t < end; ++t) {
      const auto& list = sc.tile_lists[t];
      const int tx = static_cast<int>(t) % tiles_x;
      const int ty = static_cast<int>(t) / tiles_x;
      const int x1 = std::min(w, (tx + 1) * ts);
      const int y1 = std::min(h, (ty + 1) * ts);
      for (int y = ty * ts; y < y1; ++y) {
        for (int x = tx * ts; x < x1; ++x) {
          const size_t px = static_cast<size_t>(y) * w + x;
          const Vec2 center(x + 0.5, y + 0.5);
          double transmittance = 1.0;
          Vec3 color = Vec3::Zero();
          double depth = 0.0;
          int hits = 0;
          for (int id : list) {
            const Vec2 d = center - sc.projected[id].mean2d;
            const double maha = d.dot(sc.cov_inv[id] * d);
            const double alpha = std::min(
                rs.alpha_clamp, gaussians[id].opacity * std::exp(-0.5 * maha));
            if (alpha < rs.alpha_skip) continue;
            const double weight = alpha * transmittance;
            color += weight * gaussians[id].color;
            depth += weight * sc.projected[id].depth;
            ++hits;
            transmittance *= 1.0 - alpha;
            if (transmittance < rs.transmittance_stop) break;
          }
          for (int c = 0; c < 3; ++c) out.color[px * 3 + c] = color(c);
          out.depth[px] = depth;
          out.alpha_acc[px] = 1.0 - transmittance;
          out.contributors[px] = hits;
        }
      }
    }
  });
  return out;
}

/// Gradients produced by render_backward: per-gaussian attribute gradients
/// plus the raw screen-space positional gradient (densification statistic).
struct RenderGrads {
  GaussianGrads attr;
  std::vector<Vec2> dmean2d;

  explicit RenderGrads(size_t n = 0) : attr(n), dmean2d(n, Vec2::Zero()) {}
};

/// Reverse-mode pass. Replays each pixel's blend front to back (bitwise the
/// forward arithmetic), then walks it back to front with suffix sums, and
/// finally chains screen-space gradients through projection and covariance
/// onto every gaussian attribute. alpha_acc is treated as a control signal,
/// not a differentiable output. Tile results are reduced in fixed tile
/// order, so the gradients are deterministic for any thread count.
inline RenderGrads render_backward(const std::vector<NeuralGaussian>& gaussians,
                                   const Camera& cam, const SplatCache& sc,
                                   const std::vector<double>& dcolor,
                                   const std::vector<double>& ddepth,
                                   const RenderSettings& rs = {}) {
  const int w = cam.width, h = cam.height;
  const int ts = rs.tile_size;
  RenderGrads rg(gaussians.size());
  std::vector<Mat2> dcov2d(gaussians.size(), Mat2::Zero());
  std::vector<double> ddepth_cam(gaussians.size(), 0.0);

  struct TileGrads {
    std::vector<Vec2> dmean2d;
    std::vector<Mat2> dcov2d;
    std::vector<double> dopacity;
    std::vector<Vec3> dcolor;
    std::vector<double> ddepth;
  };
  std::vector<TileGrads> per_tile(sc.tile_lists.size());

  parallel_for(sc.tile_lists.size(), rs.threads, [&](size_t begin, size_t end) {
    std::vector<detail::PixelHit> hits;
    for (size_t t = begin; t < end; ++t) {
      const auto& list = sc.tile_lists[t];
      if (list.empty()) continue;
      TileGrads& tg = per_tile[t];
      tg.dmean2d.assign(list.size(), Vec2::Zero());
      tg.dcov2d.assign(list.size(), Mat2::Zero());
      tg.dopacity.assign(list.size(), 0.0);
      tg.dcolor.assign(list.size(), Vec3::Zero());
      tg.ddepth.assign(list.size(), 0.0);

      const int tx = static_cast<int>(t) % sc.tiles_x;
      const int ty = static_cast<int>(t) / sc.tiles_x;
      const int x1 = std::min(w, (tx + 1) * ts);
      const int y1 = std::min(h, (ty + 1) * ts);
      for (int y = ty * ts; y < y1; ++y) {
        for (int x = tx * ts; x < x1; ++x) {
          const size_t px = static_cast<size_t>(y) * w + x;
          const Vec3 gc(dcolor[px * 3], dcolor[px * 3 + 1], dcolor[px * 3 + 2]);
          const double gd = ddepth[px];
          if (gc.isZero(0.0) && gd == 0.0) continue;

          const Vec2 center(x + 0.5, y + 0.5);
          hits.clear();
          double transmittance = 1.0;
          for (int pos = 0; pos < static_cast<int>(list.size()); ++pos) {
            const int id = list[pos];
            const Vec2 d = center - sc.projected[id].mean2d;
            const double maha = d.dot(sc.cov_inv[id] * d);
            const double alpha = std::min(
                rs.alpha_clamp, gaussians[id].opacity * std::exp(-0.5 * maha));
            if (alpha < rs.alpha_skip) continue;
            hits.push_back({pos, alpha, transmittance});
            transmittance *= 1.0 - alpha;
            if (transmittance < rs.transmittance_stop) break;
          }

          // Back to front: suffix sums of the already-processed (deeper)
          // contributions give d(blend)/d(alpha_k) in closed form.
          Vec3 suffix_color = Vec3::Zero();
          double suffix_depth = 0.0;
          for (size_t i = hits.size(); i-- > 0;) {
            const auto& hit = hits[i];
            const int id = list[hit.list_pos];
            const double weight = hit.alpha * hit.transmittance;

            tg.dcolor[hit.list_pos] += weight * gc;
            tg.ddepth[hit.list_pos] += weight * gd;

            const double one_minus = 1.0 - hit.alpha;
            double dalpha =
                gc.dot(hit.transmittance * gaussians[id].color -
                       suffix_color / one_minus) +
                gd * (hit.transmittance * sc.projected[id].depth -
                      suffix_depth / one_minus);
            suffix_color += weight * gaussians[id].color;
            suffix_depth += weight * sc.projected[id].depth;

            // Through alpha = min(clamp, opacity * exp(-maha/2)); the
            // clamped branch is locally constant.
            if (hit.alpha >= rs.alpha_clamp) continue;
            tg.dopacity[hit.list_pos] += dalpha * hit.alpha / gaussians[id].opacity;
            const double dmaha = -0.5 * hit.alpha * dalpha;
            const Vec2 d = center - sc.projected[id].mean2d;
            const Vec2 u = sc.cov_inv[id] * d;
            tg.dmean2d[hit.list_pos] += -2.0 * dmaha * u;
            tg.dcov2d[hit.list_pos] += -dmaha * u * u.transpose();
          }
        }
      }
    }
  });

  // Fixed-order reduction of tile partials into the global arrays.
  for (size_t t = 0; t < sc.tile_lists.size(); ++t) {
    const auto& list = sc.tile_lists[t];
    const TileGrads& tg = per_tile[t];
    if (tg.dmean2d.empty()) continue;
    for (size_t p = 0; p < list.size(); ++p) {
      const int id = list[p];
      rg.dmean2d[id] += tg.dmean2d[p];
      dcov2d[id] += tg.dcov2d[p];
      rg.attr.dopacity[id] += tg.dopacity[p];
      rg.attr.dcolor[id] += tg.dcolor[p];
      ddepth_cam[id] += tg.ddepth[p];
    }
  }

  // Chain through projection and covariance per gaussian.
  parallel_for(gaussians.size(), rs.threads, [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      if (!sc.projected[i].visible) continue;
      const ProjectionGrads pg =
          project_backward(gaussians[i].mean3d, sc.cov3d[i], cam, rg.dmean2d[i],
                           dcov2d[i], ddepth_cam[i], rs.projection);
      rg.attr.dmean3d[i] = pg.dmean3d;
      const ShapeGrads shg = covariance_backward(gaussians[i].shape, pg.dcov3d);
      rg.attr.dlog_scale[i] = shg.dlog_scale;
      rg.attr.dquat[i] = shg.dquat;
    }
  });
  return rg;
}

}  // namespace desplat
