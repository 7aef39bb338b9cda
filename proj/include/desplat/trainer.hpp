// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "desplat/checkpoint.hpp"
#include "desplat/config.hpp"
#include "desplat/dataset.hpp"
#include "desplat/losses.hpp"
#include "desplat/regularizer.hpp"
#include "desplat/scene.hpp"
#include "desplat/splatter.hpp"

namespace desplat {

/// Position learning rate with exponential decay from lr.position at step 0
/// to lr.position_final at total_steps.
inline double position_lr(const TrainConfig& c, int step) {
  const double t =
      std::clamp(static_cast<double>(step) / static_cast<double>(c.total_steps), 0.0, 1.0);
  return c.lr.position * std::pow(c.lr.position_final / c.lr.position, t);
}

namespace detail {

/// One bias-corrected Adam update on any Eigen tensor; eps sits outside the
/// square root so tiny-but-structured gradients are not flattened.
template <typename T>
void adam_apply(T& param, const T& grad, T& m, T& v, double lr, double b1,
                double b2, double eps, int t) {
  m.array() = b1 * m.array() + (1.0 - b1) * grad.array();
  v.array() = b2 * v.array() + (1.0 - b2) * grad.array().square();
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

}  // namespace detail

/// Fresh state for a run: model initialized from the dataset's sparse points,
/// attention weights from the same generator, zeroed optimizer moments.
inline TrainState init_train_state(const SceneDataset& ds, const TrainConfig& config) {
  config.validate();
  TrainState st;
  st.config = config;
  st.rng = Rng(config.seed);
  st.scene = init_from_points(ds.init_points, config.scene, st.rng);
  st.attention = AttentionParams::init(config.scene.feature_dim, st.rng);
  st.moments.init(st.scene, st.attention);
  st.step = 0;
  st.cameras = ds.cameras;
  st.reference_view_id = ds.reference_view_id;
  return st;
}

struct StepOutcome {
  LossReport report;
  bool regularized = false;  ///< feature substitution was active this step
  size_t anchors = 0;        ///< anchor count after the update
};

/// One optimization step on one view. Consumes generator state in a fixed
/// order (patch sampling only), so runs are reproducible. Every learnable
/// tensor receives an Adam update every step, including steps where its
/// gradient is identically zero, keeping the moment timeline uniform.
inline StepOutcome train_step(TrainState& st, const SceneDataset& ds, int view_id,
                              DensifyStats* stats = nullptr) {
  const TrainConfig& config = st.config;
  const TrainingView& view = ds.view(view_id);
  const Camera& cam = ds.camera(view_id);
  const bool is_ref = view.is_reference;
  const int step = st.step + 1;  // the step being performed, 1-based
  const int k = config.scene.offsets_per_anchor;

  RenderSettings rs = config.render;
  rs.threads = config.threads;

  // --- forward -------------------------------------------------------------
  RegularizedForward reg;
  const bool want_reg = config.regularizer_enabled && step > config.regularizer_warmup &&
                        (is_ref || config.regularize_all_views);
  if (want_reg)
    reg = regularize_features(st.scene, cam, view.mask, st.attention,
                              rs.projection.near_plane, config.attention_max_tokens,
                              st.rng);

  DecodeCache dc;
  const std::vector<NeuralGaussian> gaussians = decode_anchors(
      st.scene, cam, rs.projection, &dc, reg.applied ? &reg.overlay : nullptr);

  SplatCache sc;
  const RenderOutput out = render(gaussians, cam, rs, &sc);
  const int w = out.width, h = out.height;

  // --- losses ----------------------------------------------------------------
  // Branch index 0 is the (inpainted) reference view; everything else uses the
  // outside-mask branch of the pixel weighting.
  const Image weights = mask_weight(is_ref ? 0 : 1, view.mask, config.loss);
  const Mask validity = depth_validity(view.mono_depth, out.alpha_acc);

  Image rendered_depth(w, h, 1);
  rendered_depth.data = out.depth;
  Image rendered_color(w, h, 3);
  rendered_color.data = out.color;

  Mask selection(w, h);
  for (int i = 0; i < w * h; ++i) {
    const bool solid = out.alpha_acc[i] > 0.5;
    const bool outside = is_ref || view.mask.data[i] == 0;
    selection.data[i] =
        solid && outside && is_finite(view.mono_depth.data[i]) ? 1 : 0;
  }
  const AlignmentResult align =
      align_depth(rendered_depth, view.mono_depth, selection);

  Mask tv_validity = validity;
  if (!is_ref)
    for (int i = 0; i < w * h; ++i)
      if (view.mask.data[i]) tv_validity.data[i] = 0;

  Mask support(w, h);
  for (int i = 0; i < w * h; ++i)
    support.data[i] = (is_ref || view.mask.data[i] == 0) ? 1 : 0;
  const Image& target = is_ref ? view.inpainted : view.image;

  Image g_depth(w, h, 1), g_tv(w, h, 1), g_color(w, h, 3);
  const double l_depth = depth_l1_loss(rendered_depth, view.mono_depth, align,
                                       weights, validity, &g_depth);
  const double l_tv = depth_tv_loss(rendered_depth, view.mono_depth, align, weights,
                                    tv_validity, &g_tv);
  const double l_color =
      color_loss(rendered_color, target, weights, support, config.loss, &g_color);

  StepOutcome outcome;
  total_loss(l_color, l_depth, l_tv, config.loss, view_id, &outcome.report);
  outcome.report.align = align;
  outcome.regularized = reg.applied;

  // --- backward --------------------------------------------------------------
  std::vector<double> ddepth(static_cast<size_t>(w) * h);
  for (size_t i = 0; i < ddepth.size(); ++i)
    ddepth[i] = config.loss.lambda_depth * g_depth.data[i] +
                config.loss.lambda_tv * g_tv.data[i];
  const RenderGrads rg = render_backward(gaussians, cam, sc, g_color.data, ddepth, rs);
  SceneGrads sg = decode_backward(st.scene, cam, dc, gaussians, rg.attr);

  AttentionGrads ag;
  const int d = config.scene.feature_dim;
  ag.dwq = MatrixXd::Zero(d, d);
  ag.dwk = MatrixXd::Zero(d, d);
  ag.dwv = MatrixXd::Zero(d, d);
  if (reg.applied) {
    // For sampled anchors the decoder consumed the attention output, so the
    // reported feature gradient belongs to that output; route it through the
    // attention block to reach the original features and the shared weights.
    const auto& pin = reg.patch.inside;
    const auto& psur = reg.patch.outside;
    MatrixXd din_hat = MatrixXd::Zero(static_cast<int>(pin.size()), d);
    MatrixXd dsur_hat = MatrixXd::Zero(static_cast<int>(psur.size()), d);
    for (size_t r = 0; r < pin.size(); ++r)
      din_hat.row(static_cast<int>(r)) = sg.dfeatures[pin[r]].transpose();
    for (size_t r = 0; r < psur.size(); ++r)
      dsur_hat.row(static_cast<int>(r)) = sg.dfeatures[psur[r]].transpose();
    ag = attention_backward(st.attention, reg.attention, din_hat, dsur_hat);
    for (size_t r = 0; r < pin.size(); ++r)
      sg.dfeatures[pin[r]] = ag.df_in.row(static_cast<int>(r)).transpose();
    for (size_t r = 0; r < psur.size(); ++r)
      sg.dfeatures[psur[r]] = ag.df_sur.row(static_cast<int>(r)).transpose();
  }

  // --- densification statistics ------------------------------------------------
  if (stats) {
    if (stats->grad_sum.size() != st.scene.anchor_count() * static_cast<size_t>(k))
      throw std::invalid_argument("train_step: densify stats shape mismatch");
    for (size_t g = 0; g < gaussians.size(); ++g) {
      if (!sc.projected[g].visible) continue;
      const int a = gaussians[g].parent_anchor;
      const size_t slot = static_cast<size_t>(a) * k + gaussians[g].offset_index;
      stats->grad_sum[slot] += rg.dmean2d[g].norm();
      stats->grad_count[slot] += 1;
      stats->opacity_sum[a] += gaussians[g].opacity;
      stats->opacity_count[a] += 1;
    }
  }

  // --- parameter updates ---------------------------------------------------
  const double b1 = config.adam_beta1, b2 = config.adam_beta2, eps = config.adam_eps;
  const double plr = position_lr(config, step);
  Moments& mo = st.moments;
  for (size_t a = 0; a < st.scene.anchor_count(); ++a) {
    detail::adam_apply(st.scene.positions[a], sg.dpositions[a], mo.pos_m[a],
                       mo.pos_v[a], plr, b1, b2, eps, step);
    detail::adam_apply(st.scene.features[a], sg.dfeatures[a], mo.feat_m[a],
                       mo.feat_v[a], config.lr.feature, b1, b2, eps, step);
    detail::adam_apply(st.scene.offset_log_scales[a], sg.doffset_log_scales[a],
                       mo.ols_m[a], mo.ols_v[a], config.lr.offset_scale, b1, b2, eps,
                       step);
    detail::adam_apply(st.scene.offsets[a], sg.doffsets[a], mo.off_m[a], mo.off_v[a],
                       config.lr.offsets, b1, b2, eps, step);
  }
  const auto update_mlp = [&](Mlp& m, const MlpGrads& g, MlpGrads& mm, MlpGrads& mv) {
    detail::adam_apply(m.w1, g.dw1, mm.dw1, mv.dw1, config.lr.decoders, b1, b2, eps,
                       step);
    detail::adam_apply(m.b1, g.db1, mm.db1, mv.db1, config.lr.decoders, b1, b2, eps,
                       step);
    detail::adam_apply(m.w2, g.dw2, mm.dw2, mv.dw2, config.lr.decoders, b1, b2, eps,
                       step);
    detail::adam_apply(m.b2, g.db2, mm.db2, mv.db2, config.lr.decoders, b1, b2, eps,
                       step);
  };
  update_mlp(st.scene.opacity_decoder, sg.dopacity_decoder, mo.opacity_m, mo.opacity_v);
  update_mlp(st.scene.color_decoder, sg.dcolor_decoder, mo.color_m, mo.color_v);
  update_mlp(st.scene.shape_decoder, sg.dshape_decoder, mo.shape_m, mo.shape_v);
  detail::adam_apply(st.attention.wq, ag.dwq, mo.wq_m, mo.wq_v, config.lr.attention,
                     b1, b2, eps, step);
  detail::adam_apply(st.attention.wk, ag.dwk, mo.wk_m, mo.wk_v, config.lr.attention,
                     b1, b2, eps, step);
  detail::adam_apply(st.attention.wv, ag.dwv, mo.wv_m, mo.wv_v, config.lr.attention,
                     b1, b2, eps, step);

  st.step = step;
  outcome.anchors = st.scene.anchor_count();
  return outcome;
}

struct TrainResult {
  int steps = 0;
  std::string checkpoint_dir;
  std::string log_path;
  LossReport last;
};

/// Full optimization loop: shuffled epochs over the train split, per-step
/// JSON-lines logging, periodic densification and checkpoints, and a final
/// checkpoint at <out_dir>/checkpoint.
inline TrainResult train(const SceneDataset& ds, const TrainConfig& config,
                         const std::string& out_dir) {
  config.validate();
  if (ds.train_ids.empty()) throw std::runtime_error("train: empty train split");
  fs::create_directories(out_dir);

  TrainState st = init_train_state(ds, config);
  DensifyStats stats;
  stats.reset(st.scene.anchor_count(), config.scene.offsets_per_anchor);

  TrainResult result;
  result.log_path = (fs::path(out_dir) / "train_log.jsonl").string();
  std::ofstream log(result.log_path);
  if (!log) throw std::runtime_error("cannot write " + result.log_path);

  std::vector<int> order = ds.train_ids;
  for (int s = 1; s <= config.total_steps; ++s) {
    if ((s - 1) % static_cast<int>(order.size()) == 0) st.rng.shuffle(order);
    const int view_id = order[(s - 1) % static_cast<int>(order.size())];

    StepOutcome oc;
    try {
      oc = train_step(st, ds, view_id, &stats);
    } catch (const std::exception& e) {
      throw std::runtime_error("step " + std::to_string(s) + ": " + e.what());
    }

    const json line{{"step", s},
                    {"view_id", view_id},
                    {"L_color", oc.report.color},
                    {"L_depth", oc.report.depth},
                    {"L_tv", oc.report.tv},
                    {"total", oc.report.total},
                    {"w", oc.report.align.w},
                    {"q", oc.report.align.q},
                    {"anchors", oc.anchors},
                    {"regularized", oc.regularized}};
    log << line.dump() << "\n";
    result.last = oc.report;

    if (config.densify_enabled && s >= config.densify_start && s <= config.densify_end &&
        s % config.densify_interval == 0) {
      const DensifyResult dr = densify_and_prune(st.scene, stats, config.densify);
      st.moments.remap_anchors(dr, st.scene);
      stats.reset(st.scene.anchor_count(), config.scene.offsets_per_anchor);
    }

    if (config.checkpoint_interval > 0 && s % config.checkpoint_interval == 0 &&
        s < config.total_steps)
      save_checkpoint(st, (fs::path(out_dir) / "checkpoints" /
                           ("step_" + std::to_string(s)))
                              .string());
  }
  log.flush();
  if (!log) throw std::runtime_error("short write to " + result.log_path);

  result.steps = config.total_steps;
  result.checkpoint_dir = (fs::path(out_dir) / "checkpoint").string();
  save_checkpoint(st, result.checkpoint_dir);
  return result;
}

/// Decode-and-render a camera from a trained state (no regularizer overlay;
/// substitution is a training-time device).
inline RenderOutput render_state(const TrainState& st, const Camera& cam) {
  RenderSettings rs = st.config.render;
  rs.threads = st.config.threads;
  const std::vector<NeuralGaussian> gaussians = decode_anchors(st.scene, cam, rs.projection);
  return render(gaussians, cam, rs);
}

}  // namespace desplat
