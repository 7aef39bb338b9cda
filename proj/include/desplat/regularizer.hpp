// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "desplat/common.hpp"
#include "desplat/geometry.hpp"
#include "desplat/scene.hpp"
#include "desplat/splatter.hpp"

namespace desplat {

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

/// Anchors grouped by which side of the object mask they project onto.
struct PatchSample {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  ///< patch rectangle, [x0,x1) x [y0,y1)
  std::vector<int> inside;             ///< anchors landing on mask pixels
  std::vector<int> outside;            ///< anchors in the patch, off the mask
  bool valid = false;                  ///< both groups non-empty
  std::string skip_reason;             ///< set when !valid
};

/// Patch = mask bounding box dilated by 25% of its size per side, clipped to
/// the image. Anchors in front of the near plane are projected through the
/// camera; the landing pixel's mask value classifies them. Each group is
/// subsampled to at most n_max with the run's generator (kept in index
/// order so the grouping is reproducible).
inline PatchSample sample_patch(const Mask& mask, const SceneModel& scene,
                                const Camera& cam, double near_plane, int n_max,
                                Rng& rng) {
  PatchSample patch;
  int mx0 = mask.width, my0 = mask.height, mx1 = -1, my1 = -1;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      mx0 = std::min(mx0, x);
      my0 = std::min(my0, y);
      mx1 = std::max(mx1, x);
      my1 = std::max(my1, y);
    }
  }
  if (mx1 < 0) {
    patch.skip_reason = "empty mask";
    return patch;
  }
  const int dx = static_cast<int>(std::ceil(0.25 * (mx1 - mx0 + 1)));
  const int dy = static_cast<int>(std::ceil(0.25 * (my1 - my0 + 1)));
  patch.x0 = std::max(0, mx0 - dx);
  patch.y0 = std::max(0, my0 - dy);
  patch.x1 = std::min(mask.width, mx1 + 1 + dx);
  patch.y1 = std::min(mask.height, my1 + 1 + dy);

  for (size_t a = 0; a < scene.anchor_count(); ++a) {
    const Vec3 p = cam.to_camera(scene.positions[a]);
    if (!(p.z() > near_plane)) continue;
    const double inv_z = 1.0 / p.z();
    const int px = static_cast<int>(std::floor(cam.fx * p.x() * inv_z + cam.cx));
    const int py = static_cast<int>(std::floor(cam.fy * p.y() * inv_z + cam.cy));
    if (px < patch.x0 || px >= patch.x1 || py < patch.y0 || py >= patch.y1)
      continue;
    if (mask.at(py, px))
      patch.inside.push_back(static_cast<int>(a));
    else
      patch.outside.push_back(static_cast<int>(a));
  }

  if (patch.inside.empty() || patch.outside.empty()) {
    patch.skip_reason = patch.inside.empty() ? "no anchors inside the mask"
                                             : "no anchors outside the mask";
    patch.inside.clear();
    patch.outside.clear();
    return patch;
  }
  patch.inside = rng.sample(std::move(patch.inside), n_max);
  patch.outside = rng.sample(std::move(patch.outside), n_max);
  std::sort(patch.inside.begin(), patch.inside.end());
  std::sort(patch.outside.begin(), patch.outside.end());
  patch.valid = true;
  return patch;
}

// ---------------------------------------------------------------------------
// Bidirectional cross-attention
// ---------------------------------------------------------------------------

/// Single-head projection matrices, shared between both directions.
struct AttentionParams {
  MatrixXd wq, wk, wv;  ///< d x d

  static AttentionParams init(int d, Rng& rng) {
    AttentionParams p;
    const double bound = std::sqrt(1.0 / d);
    for (MatrixXd* m : {&p.wq, &p.wk, &p.wv}) {
      m->resize(d, d);
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) (*m)(r, c) = rng.uniform(-bound, bound);
    }
    return p;
  }

  void validate(int d) const {
    for (const MatrixXd* m : {&wq, &wk, &wv})
      if (m->rows() != d || m->cols() != d)
        throw std::invalid_argument("attention params must be d x d");
  }
};

struct AttentionCache {
  MatrixXd f_in, f_sur;      ///< token inputs
  MatrixXd p_in, p_sur;      ///< row-softmax attention weights
};

namespace detail {

inline MatrixXd row_softmax(const MatrixXd& logits) {
  MatrixXd p(logits.rows(), logits.cols());
  for (int r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace detail

/// One direction: softmax((q_tokens Wq)(k_tokens Wk)^T / sqrt(d)) (k_tokens Wv).
/// Tokens are rows.
inline MatrixXd cross_attention_one(const MatrixXd& q_tokens,
                                    const MatrixXd& kv_tokens,
                                    const AttentionParams& params,
                                    MatrixXd* weights_out = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q_tokens.cols()));
  const MatrixXd logits =
      (q_tokens * params.wq) * (kv_tokens * params.wk).transpose() * scale;
  const MatrixXd p = detail::row_softmax(logits);
  if (weights_out) *weights_out = p;
  return p * (kv_tokens * params.wv);
}

/// Both directions with the shared parameter set: the inside tokens attend
/// to the surrounding tokens and vice versa. Returns (f_in_hat, f_sur_hat).
inline std::pair<MatrixXd, MatrixXd> bidirectional_cross_attention(
    const MatrixXd& f_in, const MatrixXd& f_sur, const AttentionParams& params,
    AttentionCache* cache = nullptr) {
  if (f_in.rows() < 1 || f_sur.rows() < 1 || f_in.cols() != f_sur.cols())
    throw std::invalid_argument("cross attention: token shape mismatch");
  params.validate(static_cast<int>(f_in.cols()));

  MatrixXd p_in, p_sur;
  MatrixXd in_hat = cross_attention_one(f_in, f_sur, params, &p_in);
  MatrixXd sur_hat = cross_attention_one(f_sur, f_in, params, &p_sur);
  if (cache) {
    cache->f_in = f_in;
    cache->f_sur = f_sur;
    cache->p_in = std::move(p_in);
    cache->p_sur = std::move(p_sur);
  }
  return {std::move(in_hat), std::move(sur_hat)};
}

struct AttentionGrads {
  MatrixXd dwq, dwk, dwv;
  MatrixXd df_in, df_sur;
};

namespace detail {

/// Backward of out = P (kv Wv), P = softmax(q Wq (kv Wk)^T * scale).
inline void attention_backward_one(const MatrixXd& q_tokens,
                                   const MatrixXd& kv_tokens,
                                   const AttentionParams& params, const MatrixXd& p,
                                   const MatrixXd& dout, MatrixXd& dq_tokens,
                                   MatrixXd& dkv_tokens, AttentionGrads& g) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q_tokens.cols()));
  const MatrixXd v = kv_tokens * params.wv;

  const MatrixXd dp = dout * v.transpose();
  const MatrixXd dv = p.transpose() * dout;
  g.dwv += kv_tokens.transpose() * dv;
  dkv_tokens += dv * params.wv.transpose();

  // Row-wise softmax Jacobian: dlogits = p .* (dp - rowsum(dp .* p)).
  MatrixXd dlogits = dp.cwiseProduct(p);
  const Eigen::VectorXd row_dot = dlogits.rowwise().sum();
  dlogits.array() -= p.array().colwise() * row_dot.array();

  const MatrixXd qp = q_tokens * params.wq;
  const MatrixXd kp = kv_tokens * params.wk;
  const MatrixXd dqp = dlogits * kp * scale;
  const MatrixXd dkp = dlogits.transpose() * qp * scale;
  g.dwq += q_tokens.transpose() * dqp;
  g.dwk += kv_tokens.transpose() * dkp;
  dq_tokens += dqp * params.wq.transpose();
  dkv_tokens += dkp * params.wk.transpose();
}

}  // namespace detail

/// Reverse-mode pass for both directions; gradients for the shared
/// projections accumulate across the two uses.
inline AttentionGrads attention_backward(const AttentionParams& params,
                                         const AttentionCache& cache,
                                         const MatrixXd& din_hat,
                                         const MatrixXd& dsur_hat) {
  const int d = static_cast<int>(cache.f_in.cols());
  AttentionGrads g;
  g.dwq = MatrixXd::Zero(d, d);
  g.dwk = MatrixXd::Zero(d, d);
  g.dwv = MatrixXd::Zero(d, d);
  g.df_in = MatrixXd::Zero(cache.f_in.rows(), d);
  g.df_sur = MatrixXd::Zero(cache.f_sur.rows(), d);

  detail::attention_backward_one(cache.f_in, cache.f_sur, params, cache.p_in,
                                 din_hat, g.df_in, g.df_sur, g);
  detail::attention_backward_one(cache.f_sur, cache.f_in, params, cache.p_sur,
                                 dsur_hat, g.df_sur, g.df_in, g);
  return g;
}

// ---------------------------------------------------------------------------
// Regularized rendering
// ---------------------------------------------------------------------------

/// Forward state of one regularized render: the sampled groups, the
/// attention caches, and the overlay consumed by decode_anchors.
struct RegularizedForward {
  PatchSample patch;
  bool applied = false;       ///< attention substitution active
  AttentionCache attention;
  FeatureOverlay overlay;     ///< sampled anchor -> substituted feature
};

/// Build the feature overlay for a view: sample the patch, gather the two
/// token groups, run bidirectional attention, and map the outputs back onto
/// the sampled anchors. Scene state itself is never mutated; unsampled
/// anchors keep their features bit-identical.
inline RegularizedForward regularize_features(const SceneModel& scene,
                                              const Camera& cam, const Mask& mask,
                                              const AttentionParams& params,
                                              double near_plane, int n_max,
                                              Rng& rng) {
  RegularizedForward fwd;
  fwd.patch = sample_patch(mask, scene, cam, near_plane, n_max, rng);
  if (!fwd.patch.valid) return fwd;

  const int d = scene.config.feature_dim;
  MatrixXd f_in(fwd.patch.inside.size(), d);
  MatrixXd f_sur(fwd.patch.outside.size(), d);
  for (size_t r = 0; r < fwd.patch.inside.size(); ++r)
    f_in.row(r) = scene.features[fwd.patch.inside[r]].transpose();
  for (size_t r = 0; r < fwd.patch.outside.size(); ++r)
    f_sur.row(r) = scene.features[fwd.patch.outside[r]].transpose();

  auto [in_hat, sur_hat] =
      bidirectional_cross_attention(f_in, f_sur, params, &fwd.attention);
  for (size_t r = 0; r < fwd.patch.inside.size(); ++r)
    fwd.overlay[fwd.patch.inside[r]] = in_hat.row(r).transpose();
  for (size_t r = 0; r < fwd.patch.outside.size(); ++r)
    fwd.overlay[fwd.patch.outside[r]] = sur_hat.row(r).transpose();
  fwd.applied = true;
  return fwd;
}

/// Render a view with the sampled anchors' features replaced by the
/// attention outputs for the duration of the pass. Falls back to the plain
/// render when the patch is degenerate.
inline RenderOutput regularized_train_render(const SceneModel& scene,
                                             const Camera& cam, const Mask& mask,
                                             const AttentionParams& params,
                                             const RenderSettings& rs, int n_max,
                                             Rng& rng, RegularizedForward* fwd_out,
                                             DecodeCache* dc = nullptr,
                                             SplatCache* sc = nullptr,
                                             std::vector<NeuralGaussian>* g_out = nullptr) {
  RegularizedForward fwd = regularize_features(scene, cam, mask, params,
                                               rs.projection.near_plane, n_max, rng);
  std::vector<NeuralGaussian> gaussians = decode_anchors(
      scene, cam, rs.projection, dc, fwd.applied ? &fwd.overlay : nullptr);
  RenderOutput out = render(gaussians, cam, rs, sc);
  if (fwd_out) *fwd_out = std::move(fwd);
  if (g_out) *g_out = std::move(gaussians);
  return out;
}

}  // namespace desplat
