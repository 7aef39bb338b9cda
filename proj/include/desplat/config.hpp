// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>
#include <stdexcept>
#include <string>

#include "desplat/losses.hpp"
#include "desplat/scene.hpp"
#include "desplat/splatter.hpp"

namespace desplat {

using nlohmann::json;

struct LearningRates {
  double position = 1.6e-4;
  double position_final = 1.6e-6;  ///< exponential decay target at total_steps
  double feature = 2.5e-3;
  double offsets = 1e-2;
  double offset_scale = 7e-3;
  double decoders = 2e-3;
  double attention = 1e-3;
};

struct TrainConfig {
  int total_steps = 15000;
  uint64_t seed = 0;
  bool deterministic = false;
  int threads = 1;

  LearningRates lr;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-15;

  bool densify_enabled = true;
  int densify_interval = 500;
  int densify_start = 1500;
  int densify_end = 15000;
  DensifyConfig densify;

  bool regularizer_enabled = true;
  int regularizer_warmup = 3000;  ///< substitution starts after this step
  bool regularize_all_views = false;
  int attention_max_tokens = 1024;

  int checkpoint_interval = 5000;

  LossWeights loss;
  SceneConfig scene;
  RenderSettings render;

  void validate() const {
    if (total_steps < 1)
      throw std::invalid_argument("config: total_steps must be >= 1");
    for (double r : {lr.position, lr.position_final, lr.feature, lr.offsets,
                     lr.offset_scale, lr.decoders, lr.attention})
      if (!(r > 0.0))
        throw std::invalid_argument("config: learning rates must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) ||
        !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0))
      throw std::invalid_argument("config: invalid adam parameters");
    if (densify_interval < 1 || attention_max_tokens < 1 ||
        checkpoint_interval < 1 || threads < 1 || render.tile_size < 1)
      throw std::invalid_argument("config: intervals and sizes must be positive");
    loss.validate();
    scene.validate();
  }
};

namespace detail {

/// Reject unknown keys so config typos fail loudly instead of silently
/// falling back to defaults.
inline void expect_keys(const json& j, std::initializer_list<const char*> keys,
                        const std::string& where) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw std::invalid_argument("config: unknown key \"" + item.key() + "\" in " +
                                  where);
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline json to_json(const TrainConfig& c) {
  return json{
      {"total_steps", c.total_steps},
      {"seed", c.seed},
      {"deterministic", c.deterministic},
      {"threads", c.threads},
      {"learning_rates",
       {{"position", c.lr.position},
        {"position_final", c.lr.position_final},
        {"feature", c.lr.feature},
        {"offsets", c.lr.offsets},
        {"offset_scale", c.lr.offset_scale},
        {"decoders", c.lr.decoders},
        {"attention", c.lr.attention}}},
      {"adam", {{"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"eps", c.adam_eps}}},
      {"densify",
       {{"enabled", c.densify_enabled},
        {"interval", c.densify_interval},
        {"start", c.densify_start},
        {"end", c.densify_end},
        {"grad_threshold", c.densify.grad_threshold},
        {"opacity_threshold", c.densify.opacity_threshold}}},
      {"regularizer",
       {{"enabled", c.regularizer_enabled},
        {"warmup", c.regularizer_warmup},
        {"all_views", c.regularize_all_views},
        {"max_tokens", c.attention_max_tokens}}},
      {"checkpoint_interval", c.checkpoint_interval},
      {"loss",
       {{"lambda1", c.loss.lambda1},
        {"lambda2", c.loss.lambda2},
        {"lambda3", c.loss.lambda3},
        {"lambda_ssim", c.loss.lambda_ssim},
        {"lambda_depth", c.loss.lambda_depth},
        {"lambda_tv", c.loss.lambda_tv}}},
      {"scene",
       {{"feature_dim", c.scene.feature_dim},
        {"offsets_per_anchor", c.scene.offsets_per_anchor},
        {"hidden_dim", c.scene.hidden_dim},
        {"voxel_size", c.scene.voxel_size},
        {"offset_init_range", c.scene.offset_init_range}}},
      {"render",
       {{"tile_size", c.render.tile_size},
        {"alpha_clamp", c.render.alpha_clamp},
        {"alpha_skip", c.render.alpha_skip},
        {"transmittance_stop", c.render.transmittance_stop},
        {"near_plane", c.render.projection.near_plane},
        {"guard_band", c.render.projection.guard_band},
        {"blur_floor", c.render.projection.blur_floor}}}};
}

/// Parse a (possibly partial) config; absent keys keep their defaults.
inline TrainConfig config_from_json(const json& j) {
  using detail::expect_keys;
  using detail::maybe;
  TrainConfig c;
  expect_keys(j,
              {"total_steps", "seed", "deterministic", "threads", "learning_rates",
               "adam", "densify", "regularizer", "checkpoint_interval", "loss",
               "scene", "render"},
              "config");
  maybe(j, "total_steps", c.total_steps);
  maybe(j, "seed", c.seed);
  maybe(j, "deterministic", c.deterministic);
  maybe(j, "threads", c.threads);
  maybe(j, "checkpoint_interval", c.checkpoint_interval);
  if (j.contains("learning_rates")) {
    const json& l = j.at("learning_rates");
    expect_keys(l,
                {"position", "position_final", "feature", "offsets", "offset_scale",
                 "decoders", "attention"},
                "learning_rates");
    maybe(l, "position", c.lr.position);
    maybe(l, "position_final", c.lr.position_final);
    maybe(l, "feature", c.lr.feature);
    maybe(l, "offsets", c.lr.offsets);
    maybe(l, "offset_scale", c.lr.offset_scale);
    maybe(l, "decoders", c.lr.decoders);
    maybe(l, "attention", c.lr.attention);
  }
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    expect_keys(a, {"beta1", "beta2", "eps"}, "adam");
    maybe(a, "beta1", c.adam_beta1);
    maybe(a, "beta2", c.adam_beta2);
    maybe(a, "eps", c.adam_eps);
  }
  if (j.contains("densify")) {
    const json& d = j.at("densify");
    expect_keys(d, {"enabled", "interval", "start", "end", "grad_threshold",
                    "opacity_threshold"},
                "densify");
    maybe(d, "enabled", c.densify_enabled);
    maybe(d, "interval", c.densify_interval);
    maybe(d, "start", c.densify_start);
    maybe(d, "end", c.densify_end);
    maybe(d, "grad_threshold", c.densify.grad_threshold);
    maybe(d, "opacity_threshold", c.densify.opacity_threshold);
  }
  if (j.contains("regularizer")) {
    const json& r = j.at("regularizer");
    expect_keys(r, {"enabled", "warmup", "all_views", "max_tokens"}, "regularizer");
    maybe(r, "enabled", c.regularizer_enabled);
    maybe(r, "warmup", c.regularizer_warmup);
    maybe(r, "all_views", c.regularize_all_views);
    maybe(r, "max_tokens", c.attention_max_tokens);
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    expect_keys(l, {"lambda1", "lambda2", "lambda3", "lambda_ssim", "lambda_depth",
                    "lambda_tv"},
                "loss");
    maybe(l, "lambda1", c.loss.lambda1);
    maybe(l, "lambda2", c.loss.lambda2);
    maybe(l, "lambda3", c.loss.lambda3);
    maybe(l, "lambda_ssim", c.loss.lambda_ssim);
    maybe(l, "lambda_depth", c.loss.lambda_depth);
    maybe(l, "lambda_tv", c.loss.lambda_tv);
  }
  if (j.contains("scene")) {
    const json& s = j.at("scene");
    expect_keys(s, {"feature_dim", "offsets_per_anchor", "hidden_dim", "voxel_size",
                    "offset_init_range"},
                "scene");
    maybe(s, "feature_dim", c.scene.feature_dim);
    maybe(s, "offsets_per_anchor", c.scene.offsets_per_anchor);
    maybe(s, "hidden_dim", c.scene.hidden_dim);
    maybe(s, "voxel_size", c.scene.voxel_size);
    maybe(s, "offset_init_range", c.scene.offset_init_range);
  }
  if (j.contains("render")) {
    const json& r = j.at("render");
    expect_keys(r, {"tile_size", "alpha_clamp", "alpha_skip", "transmittance_stop",
                    "near_plane", "guard_band", "blur_floor"},
                "render");
    maybe(r, "tile_size", c.render.tile_size);
    maybe(r, "alpha_clamp", c.render.alpha_clamp);
    maybe(r, "alpha_skip", c.render.alpha_skip);
    maybe(r, "transmittance_stop", c.render.transmittance_stop);
    maybe(r, "near_plane", c.render.projection.near_plane);
    maybe(r, "guard_band", c.render.projection.guard_band);
    maybe(r, "blur_floor", c.render.projection.blur_floor);
  }
  c.validate();
  return c;
}

}  // namespace desplat
