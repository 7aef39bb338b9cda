// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "desplat/common.hpp"
#include "desplat/geometry.hpp"

namespace desplat {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using OffsetMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3>;  // k x 3

struct SceneConfig {
  int feature_dim = 32;        ///< anchor feature width d
  int offsets_per_anchor = 5;  ///< gaussians per anchor k
  int hidden_dim = 32;         ///< decoder hidden width
  double voxel_size = 0.0;     ///< <= 0: median nearest-neighbor spacing
  double offset_init_range = 0.01;

  void validate() const {
    if (feature_dim <= 0 || offsets_per_anchor <= 0 || hidden_dim <= 0)
      throw std::invalid_argument("scene config: dimensions must be positive");
  }
};

// ---------------------------------------------------------------------------
// Two-layer perceptron with rectified hidden units.
// ---------------------------------------------------------------------------

struct MlpCache {
  VectorXd x;  ///< input
  VectorXd h;  ///< hidden activations (post-rectification)
};

struct Mlp {
  MatrixXd w1, w2;
  VectorXd b1, b2;

  static Mlp init(int in, int hidden, int out, Rng& rng) {
    Mlp m;
    m.w1.resize(hidden, in);
    m.b1 = VectorXd::Zero(hidden);
    m.w2.resize(out, hidden);
    m.b2 = VectorXd::Zero(out);
    const double bound1 = std::sqrt(1.0 / in);
    for (int r = 0; r < hidden; ++r)
      for (int c = 0; c < in; ++c) m.w1(r, c) = rng.uniform(-bound1, bound1);
    const double bound2 = std::sqrt(1.0 / hidden);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < hidden; ++c) m.w2(r, c) = rng.uniform(-bound2, bound2);
    return m;
  }

  VectorXd forward(const VectorXd& x, MlpCache* cache = nullptr) const {
    VectorXd h = (w1 * x + b1).cwiseMax(0.0);
    VectorXd out = w2 * h + b2;
    if (cache) {
      cache->x = x;
      cache->h = std::move(h);
    }
    return out;
  }
};

struct MlpGrads {
  MatrixXd dw1, dw2;
  VectorXd db1, db2;

  void init_like(const Mlp& m) {
    dw1 = MatrixXd::Zero(m.w1.rows(), m.w1.cols());
    dw2 = MatrixXd::Zero(m.w2.rows(), m.w2.cols());
    db1 = VectorXd::Zero(m.b1.size());
    db2 = VectorXd::Zero(m.b2.size());
  }
};

/// Accumulates weight gradients into `g` and returns the input gradient.
inline VectorXd mlp_backward(const Mlp& m, const MlpCache& cache,
                             const VectorXd& dout, MlpGrads& g) {
  g.dw2 += dout * cache.h.transpose();
  g.db2 += dout;
  VectorXd dh = m.w2.transpose() * dout;
  for (int i = 0; i < dh.size(); ++i)
    if (!(cache.h(i) > 0.0)) dh(i) = 0.0;
  g.dw1 += dh * cache.x.transpose();
  g.db1 += dh;
  return m.w1.transpose() * dh;
}

// ---------------------------------------------------------------------------
// Scene state
// ---------------------------------------------------------------------------

/// Anchor-based scene: each anchor carries a learnable feature embedding and
/// spawns k gaussians through shared decoders at render time.
struct SceneModel {
  SceneConfig config;
  double voxel_size = 1.0;  ///< resolved grid size used at init and densify

  std::vector<Vec3> positions;
  std::vector<VectorXd> features;           ///< d per anchor
  std::vector<Vec3> offset_log_scales;      ///< log-domain per anchor
  std::vector<OffsetMatrix> offsets;        ///< k x 3 per anchor

  Mlp opacity_decoder, color_decoder, shape_decoder;

  size_t anchor_count() const { return positions.size(); }

  /// World-space mean of gaussian j of anchor a.
  Vec3 gaussian_mean(size_t a, int j) const {
    const Vec3 scale = offset_log_scales[a].array().exp();
    return positions[a] + offsets[a].row(j).transpose().cwiseProduct(scale);
  }
};

namespace detail {

struct VoxelKey {
  int64_t x, y, z;
  bool operator==(const VoxelKey& o) const {
    return x == o.x && y == o.y && z == o.z;
  }
};

struct VoxelKeyHash {
  size_t operator()(const VoxelKey& k) const {
    uint64_t h = 1469598103934665603ULL;
    for (uint64_t v : {static_cast<uint64_t>(k.x), static_cast<uint64_t>(k.y),
                       static_cast<uint64_t>(k.z)}) {
      h ^= v;
      h *= 1099511628211ULL;
    }
    return static_cast<size_t>(h);
  }
};

inline VoxelKey voxel_of(const Vec3& p, double v) {
  return {static_cast<int64_t>(std::floor(p.x() / v)),
          static_cast<int64_t>(std::floor(p.y() / v)),
          static_cast<int64_t>(std::floor(p.z() / v))};
}

/// Median nearest-neighbor spacing, brute force. Fine for sparse SfM-scale
/// point counts; degenerate inputs (duplicates everywhere) fall back to 1.
inline double median_nn_spacing(const std::vector<Vec3>& pts) {
  if (pts.size() < 2) return 1.0;
  std::vector<double> nn(pts.size());
  for (size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < pts.size(); ++j)
      if (j != i) best = std::min(best, (pts[i] - pts[j]).norm());
    nn[i] = best;
  }
  std::sort(nn.begin(), nn.end());
  const double v = nn[(nn.size() - 1) / 2];
  return v > 0.0 ? v : 1.0;
}

}  // namespace detail

/// Voxelize a sparse point cloud into anchors: one anchor per occupied voxel
/// at the voxel-mean position, zero features, small random offsets,
/// offset_scale = log(voxel size). Anchor order follows first point touch,
/// so identical inputs and seed give an identical scene.
inline SceneModel init_from_points(const std::vector<Vec3>& points,
                                   const SceneConfig& config, Rng& rng) {
  config.validate();
  if (points.empty())
    throw std::invalid_argument("empty initialization set");
  for (const Vec3& p : points)
    if (!p.allFinite())
      throw std::invalid_argument("init_from_points: non-finite point");

  SceneModel scene;
  scene.config = config;
  scene.voxel_size =
      config.voxel_size > 0.0 ? config.voxel_size : detail::median_nn_spacing(points);

  std::unordered_map<detail::VoxelKey, size_t, detail::VoxelKeyHash> slot;
  std::vector<Vec3> sums;
  std::vector<int> counts;
  for (const Vec3& p : points) {
    const auto key = detail::voxel_of(p, scene.voxel_size);
    auto it = slot.find(key);
    if (it == slot.end()) {
      slot.emplace(key, sums.size());
      sums.push_back(p);
      counts.push_back(1);
    } else {
      sums[it->second] += p;
      counts[it->second] += 1;
    }
  }

  const int k = config.offsets_per_anchor;
  const double log_v = std::log(scene.voxel_size);
  for (size_t a = 0; a < sums.size(); ++a) {
    scene.positions.push_back(sums[a] / counts[a]);
    scene.features.push_back(VectorXd::Zero(config.feature_dim));
    scene.offset_log_scales.push_back(Vec3::Constant(log_v));
    OffsetMatrix off(k, 3);
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < 3; ++c)
        off(r, c) = rng.uniform(-config.offset_init_range, config.offset_init_range);
    scene.offsets.push_back(off);
  }

  const int in = config.feature_dim + 4;
  scene.opacity_decoder = Mlp::init(in, config.hidden_dim, k, rng);
  scene.color_decoder = Mlp::init(in, config.hidden_dim, 3 * k, rng);
  scene.shape_decoder = Mlp::init(in, config.hidden_dim, 7 * k, rng);
  return scene;
}

// ---------------------------------------------------------------------------
// Decoding anchors into renderable gaussians
// ---------------------------------------------------------------------------

/// A renderable gaussian decoded from an anchor.
struct NeuralGaussian {
  Vec3 mean3d = Vec3::Zero();
  double opacity = 0.0;       ///< in (0,1)
  GaussianShape shape;        ///< quat stored unit-length
  Vec3 color = Vec3::Zero();  ///< in (0,1) per channel
  int parent_anchor = -1;
  int offset_index = -1;
};

/// Replacement features for a subset of anchors (regularized decoding).
using FeatureOverlay = std::unordered_map<int, VectorXd>;

struct DecodeCache {
  std::vector<int> anchors;  ///< global indices of decoded (visible) anchors
  std::vector<VectorXd> inputs;
  std::vector<Vec3> dirs;
  std::vector<double> dists;
  std::vector<MlpCache> opacity_mc, color_mc, shape_mc;
  std::vector<VectorXd> quat_norms;  ///< per anchor: k pre-normalization norms
};

/// Decode every anchor in front of the near plane into k gaussians.
/// Decoders see [feature; unit direction anchor->camera; 1/distance].
/// Raw head outputs are squashed here: sigmoid opacity and color, log-scales
/// offset by the anchor's offset_scale, quaternion = raw + identity then
/// normalized (the identity baseline keeps the zero-weight decoder valid).
inline std::vector<NeuralGaussian> decode_anchors(
    const SceneModel& scene, const Camera& cam, const ProjectionSettings& ps = {},
    DecodeCache* cache = nullptr, const FeatureOverlay* overlay = nullptr) {
  const int k = scene.config.offsets_per_anchor;
  const Vec3 cam_center = cam.camera_center();
  std::vector<NeuralGaussian> out;
  if (cache) *cache = DecodeCache{};

  for (size_t a = 0; a < scene.anchor_count(); ++a) {
    const Vec3& pos = scene.positions[a];
    if (!(cam.to_camera(pos).z() > ps.near_plane)) continue;

    const Vec3 to_cam = cam_center - pos;
    const double dist = std::max(to_cam.norm(), 1e-12);
    const Vec3 dir = to_cam / dist;

    const VectorXd* feat = &scene.features[a];
    if (overlay) {
      auto it = overlay->find(static_cast<int>(a));
      if (it != overlay->end()) feat = &it->second;
    }
    VectorXd input(scene.config.feature_dim + 4);
    input << *feat, dir, 1.0 / dist;

    MlpCache omc, cmc, smc;
    const VectorXd opacity_raw = scene.opacity_decoder.forward(input, &omc);
    const VectorXd color_raw = scene.color_decoder.forward(input, &cmc);
    const VectorXd shape_raw = scene.shape_decoder.forward(input, &smc);

    const Vec3 off_scale = scene.offset_log_scales[a].array().exp();
    VectorXd norms(k);
    for (int j = 0; j < k; ++j) {
      NeuralGaussian g;
      g.parent_anchor = static_cast<int>(a);
      g.offset_index = j;
      g.mean3d = pos + scene.offsets[a].row(j).transpose().cwiseProduct(off_scale);
      g.opacity = 1.0 / (1.0 + std::exp(-opacity_raw(j)));
      for (int c = 0; c < 3; ++c)
        g.color(c) = 1.0 / (1.0 + std::exp(-color_raw(3 * j + c)));
      g.shape.log_scale =
          shape_raw.segment<3>(7 * j) + scene.offset_log_scales[a];
      Vec4 quat_raw = shape_raw.segment<4>(7 * j + 3);
      quat_raw(0) += 1.0;
      const double n = quat_raw.norm();
      norms(j) = n;
      g.shape.quat = quat_raw / n;
      out.push_back(std::move(g));
    }

    if (cache) {
      cache->anchors.push_back(static_cast<int>(a));
      cache->inputs.push_back(std::move(input));
      cache->dirs.push_back(dir);
      cache->dists.push_back(dist);
      cache->opacity_mc.push_back(std::move(omc));
      cache->color_mc.push_back(std::move(cmc));
      cache->shape_mc.push_back(std::move(smc));
      cache->quat_norms.push_back(std::move(norms));
    }
  }
  return out;
}

/// Per-gaussian gradients, aligned with decode_anchors output order.
/// dquat is taken w.r.t. the stored (unit) quaternion.
struct GaussianGrads {
  std::vector<Vec3> dmean3d;
  std::vector<double> dopacity;
  std::vector<Vec3> dcolor;
  std::vector<Vec3> dlog_scale;
  std::vector<Vec4> dquat;

  explicit GaussianGrads(size_t n = 0)
      : dmean3d(n, Vec3::Zero()),
        dopacity(n, 0.0),
        dcolor(n, Vec3::Zero()),
        dlog_scale(n, Vec3::Zero()),
        dquat(n, Vec4::Zero()) {}
};

struct SceneGrads {
  std::vector<Vec3> dpositions;
  std::vector<VectorXd> dfeatures;  ///< w.r.t. the features the decoders saw
  std::vector<Vec3> doffset_log_scales;
  std::vector<OffsetMatrix> doffsets;
  MlpGrads dopacity_decoder, dcolor_decoder, dshape_decoder;

  void init_like(const SceneModel& scene) {
    const size_t n = scene.anchor_count();
    dpositions.assign(n, Vec3::Zero());
    dfeatures.assign(n, VectorXd::Zero(scene.config.feature_dim));
    doffset_log_scales.assign(n, Vec3::Zero());
    doffsets.assign(n, OffsetMatrix::Zero(scene.config.offsets_per_anchor, 3));
    dopacity_decoder.init_like(scene.opacity_decoder);
    dcolor_decoder.init_like(scene.color_decoder);
    dshape_decoder.init_like(scene.shape_decoder);
  }
};

/// Pull per-gaussian gradients back onto anchor parameters and decoder
/// weights. Feature gradients are reported w.r.t. whatever feature vector the
/// decoder actually consumed; when an overlay was active the caller routes
/// those rows through its own producer.
inline SceneGrads decode_backward(const SceneModel& scene, const Camera& cam,
                                  const DecodeCache& cache,
                                  const std::vector<NeuralGaussian>& gaussians,
                                  const GaussianGrads& grads) {
  (void)cam;
  const int k = scene.config.offsets_per_anchor;
  const int d = scene.config.feature_dim;
  SceneGrads sg;
  sg.init_like(scene);

  for (size_t slot = 0; slot < cache.anchors.size(); ++slot) {
    const int a = cache.anchors[slot];
    const Vec3 off_scale = scene.offset_log_scales[a].array().exp();

    VectorXd d_opacity_raw = VectorXd::Zero(k);
    VectorXd d_color_raw = VectorXd::Zero(3 * k);
    VectorXd d_shape_raw = VectorXd::Zero(7 * k);

    for (int j = 0; j < k; ++j) {
      const size_t g = slot * k + j;
      const NeuralGaussian& ng = gaussians[g];

      // mean3d = position + offsets_j .* exp(offset_scale)
      const Vec3& dm = grads.dmean3d[g];
      sg.dpositions[a] += dm;
      const Vec3 off = scene.offsets[a].row(j).transpose();
      sg.doffsets[a].row(j) += dm.cwiseProduct(off_scale).transpose();
      sg.doffset_log_scales[a] += dm.cwiseProduct(off).cwiseProduct(off_scale);

      // sigmoid heads
      d_opacity_raw(j) = grads.dopacity[g] * ng.opacity * (1.0 - ng.opacity);
      for (int c = 0; c < 3; ++c)
        d_color_raw(3 * j + c) =
            grads.dcolor[g](c) * ng.color(c) * (1.0 - ng.color(c));

      // log-scale = raw + offset_scale
      d_shape_raw.segment<3>(7 * j) = grads.dlog_scale[g];
      sg.doffset_log_scales[a] += grads.dlog_scale[g];

      // quaternion: stored unit q = raw_q / |raw_q|
      const Vec4& q = ng.shape.quat;
      const Vec4& dq = grads.dquat[g];
      d_shape_raw.segment<4>(7 * j + 3) =
          (dq - q * q.dot(dq)) / cache.quat_norms[slot](j);
    }

    VectorXd dinput = VectorXd::Zero(d + 4);
    dinput += mlp_backward(scene.opacity_decoder, cache.opacity_mc[slot],
                           d_opacity_raw, sg.dopacity_decoder);
    dinput += mlp_backward(scene.color_decoder, cache.color_mc[slot],
                           d_color_raw, sg.dcolor_decoder);
    dinput += mlp_backward(scene.shape_decoder, cache.shape_mc[slot],
                           d_shape_raw, sg.dshape_decoder);

    sg.dfeatures[a] += dinput.head(d);

    // direction and reciprocal-distance inputs also depend on the anchor
    // position: dir = (c-p)/r, so ddir/dp = (dir dir^T - I)/r and
    // d(1/r)/dp = dir/r^2.
    const Vec3 ddir = dinput.segment<3>(d);
    const double drdist = dinput(d + 3);
    const Vec3& dir = cache.dirs[slot];
    const double r = cache.dists[slot];
    sg.dpositions[a] += (dir * dir.dot(ddir) - ddir) / r;
    sg.dpositions[a] += drdist * dir / (r * r);
  }
  return sg;
}

// ---------------------------------------------------------------------------
// Densification / pruning
// ---------------------------------------------------------------------------

struct DensifyConfig {
  double grad_threshold = 2e-4;    ///< τ_g on mean screen-space grad magnitude
  double opacity_threshold = 0.05; ///< τ_o on mean decoded opacity
};

/// Windowed statistics accumulated by the trainer between densify calls.
/// Gaussian slots are anchor-major: slot = anchor * k + offset.
struct DensifyStats {
  std::vector<double> grad_sum;    ///< per gaussian slot
  std::vector<int> grad_count;
  std::vector<double> opacity_sum; ///< per anchor
  std::vector<int> opacity_count;

  void reset(size_t anchors, int k) {
    grad_sum.assign(anchors * k, 0.0);
    grad_count.assign(anchors * k, 0);
    opacity_sum.assign(anchors, 0.0);
    opacity_count.assign(anchors, 0);
  }
};

/// Outcome of a densify/prune pass. `source[i]` gives, for each anchor of the
/// new scene, its index in the old scene, or -1 for a freshly spawned anchor;
/// the trainer remaps per-anchor optimizer state through it.
struct DensifyResult {
  std::vector<int> source;
  int spawned = 0;
  int pruned = 0;
};

/// Growth: gaussians whose windowed mean screen-space gradient exceeds τ_g
/// spawn a clone of their parent anchor at the gaussian's current mean,
/// deduplicated against occupied voxels. Decay: anchors whose windowed mean
/// decoded opacity falls below τ_o are dropped. Never drops the last anchor.
inline DensifyResult densify_and_prune(SceneModel& scene, const DensifyStats& stats,
                                       const DensifyConfig& config) {
  const int k = scene.config.offsets_per_anchor;
  const size_t n_old = scene.anchor_count();
  if (stats.grad_sum.size() != n_old * static_cast<size_t>(k) ||
      stats.opacity_sum.size() != n_old)
    throw std::invalid_argument("densify_and_prune: statistics shape mismatch");

  std::unordered_set<detail::VoxelKey, detail::VoxelKeyHash> occupied;
  for (const Vec3& p : scene.positions)
    occupied.insert(detail::voxel_of(p, scene.voxel_size));

  DensifyResult result;

  // Spawn, scanning gaussian slots in order for determinism.
  for (size_t a = 0; a < n_old; ++a) {
    for (int j = 0; j < k; ++j) {
      const size_t slot = a * k + j;
      if (stats.grad_count[slot] == 0) continue;
      if (stats.grad_sum[slot] / stats.grad_count[slot] <= config.grad_threshold)
        continue;
      const Vec3 mean = scene.gaussian_mean(a, j);
      const auto key = detail::voxel_of(mean, scene.voxel_size);
      if (!occupied.insert(key).second) continue;
      VectorXd feature = scene.features[a];
      const Vec3 off_scale = scene.offset_log_scales[a];
      OffsetMatrix off = scene.offsets[a];
      scene.positions.push_back(mean);
      scene.features.push_back(std::move(feature));
      scene.offset_log_scales.push_back(off_scale);
      scene.offsets.push_back(std::move(off));
      ++result.spawned;
    }
  }

  // Prune among the original anchors only; spawned anchors carry no stats yet.
  std::vector<bool> keep(scene.anchor_count(), true);
  size_t kept = scene.anchor_count();
  for (size_t a = 0; a < n_old; ++a) {
    if (stats.opacity_count[a] == 0) continue;
    if (stats.opacity_sum[a] / stats.opacity_count[a] < config.opacity_threshold) {
      keep[a] = false;
      --kept;
    }
  }
  if (kept == 0) {
    // Keep the strongest victim so the scene never empties.
    size_t best = 0;
    double best_avg = -1.0;
    for (size_t a = 0; a < n_old; ++a) {
      const double avg = stats.opacity_sum[a] / stats.opacity_count[a];
      if (avg > best_avg) {
        best_avg = avg;
        best = a;
      }
    }
    keep[best] = true;
  }

  SceneModel compact;
  compact.config = scene.config;
  compact.voxel_size = scene.voxel_size;
  compact.opacity_decoder = std::move(scene.opacity_decoder);
  compact.color_decoder = std::move(scene.color_decoder);
  compact.shape_decoder = std::move(scene.shape_decoder);
  for (size_t a = 0; a < scene.anchor_count(); ++a) {
    if (!keep[a]) {
      if (a < n_old) ++result.pruned;
      continue;
    }
    compact.positions.push_back(scene.positions[a]);
    compact.features.push_back(std::move(scene.features[a]));
    compact.offset_log_scales.push_back(scene.offset_log_scales[a]);
    compact.offsets.push_back(std::move(scene.offsets[a]));
    result.source.push_back(a < n_old ? static_cast<int>(a) : -1);
  }
  scene = std::move(compact);
  return result;
}

}  // namespace desplat
