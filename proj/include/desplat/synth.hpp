// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "desplat/common.hpp"
#include "desplat/dataset.hpp"
#include "desplat/geometry.hpp"
#include "desplat/scene.hpp"
#include "desplat/splatter.hpp"

namespace desplat {

struct SynthPreset {
  int n_train = 8;
  int n_test = 4;
  int width = 64;
  int height = 64;
};

inline SynthPreset synth_preset(const std::string& name) {
  if (name == "small") return {8, 4, 64, 64};
  if (name == "medium") return {16, 6, 128, 128};
  throw std::invalid_argument("unknown preset \"" + name + "\"");
}

/// Ground-truth splats: `background` is the object-free scene (textured
/// ground plane plus a backdrop wall); adding `object` gives the captured
/// scene with the removable cluster.
struct SynthScene {
  std::vector<NeuralGaussian> background;
  std::vector<NeuralGaussian> object;

  std::vector<NeuralGaussian> combined() const {
    std::vector<NeuralGaussian> all = background;
    all.insert(all.end(), object.begin(), object.end());
    return all;
  }
};

namespace detail {

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline NeuralGaussian splat(const Vec3& mean, const Vec3& scale, const Vec3& color,
                            double opacity) {
  NeuralGaussian g;
  g.mean3d = mean;
  g.shape.log_scale = scale.array().log();
  g.shape.quat = Vec4(1.0, 0.0, 0.0, 0.0);
  g.color = color;
  g.opacity = opacity;
  g.parent_anchor = -1;
  g.offset_index = -1;
  return g;
}

}  // namespace detail

/// Deterministic desk-scale content: geometry and colors are closed-form so
/// every seed trains against the same scene and only the depth corruption
/// and optimizer randomness vary.
inline SynthScene synth_gaussians() {
  SynthScene s;
  // Ground plane y=0, smooth multi-frequency texture.
  for (int i = 0; i < 13; ++i) {
    for (int j = 0; j < 13; ++j) {
      const double x = -3.0 + 0.5 * i;
      const double z = -3.0 + 0.5 * j;
      const Vec3 color(
          detail::clamp01(0.45 + 0.25 * std::sin(1.3 * x + 0.7 * z) +
                          0.10 * std::sin(3.1 * x)),
          detail::clamp01(0.45 + 0.25 * std::sin(1.1 * z - 0.5 * x) +
                          0.10 * std::cos(2.3 * z)),
          detail::clamp01(0.50 + 0.20 * std::sin(0.9 * (x + z))));
      s.background.push_back(
          detail::splat(Vec3(x, 0.0, z), Vec3(0.30, 0.04, 0.30), color, 0.95));
    }
  }
  // Backdrop wall z=-3.2 behind the stage.
  for (int i = 0; i < 17; ++i) {
    for (int j = 0; j < 8; ++j) {
      const double x = -4.0 + 0.5 * i;
      const double y = 0.0 + 0.5 * j;
      const Vec3 color(detail::clamp01(0.30 + 0.15 * std::sin(1.7 * x + 0.9 * y)),
                       detail::clamp01(0.35 + 0.20 * std::sin(1.2 * y - 0.4 * x)),
                       detail::clamp01(0.55 + 0.20 * std::cos(0.8 * x)));
      s.background.push_back(
          detail::splat(Vec3(x, y, -3.2), Vec3(0.30, 0.30, 0.04), color, 0.95));
    }
  }
  // Compact warm-colored cluster resting on the plane at the origin.
  const int n_obj = 30;
  for (int i = 0; i < n_obj; ++i) {
    const double phi = i * 2.399963229728653;  // golden angle
    const double r = 0.30 * std::sqrt((i + 0.5) / n_obj);
    const double y = 0.45 + 0.20 * std::cos(1.7 * i);
    const Vec3 mean(r * std::cos(phi), y, r * std::sin(phi));
    const double t = static_cast<double>(i) / (n_obj - 1);
    const Vec3 color(detail::clamp01(0.85 - 0.25 * t),
                     detail::clamp01(0.25 + 0.35 * t), 0.15);
    s.object.push_back(detail::splat(mean, Vec3(0.10, 0.10, 0.10), color, 0.92));
  }
  return s;
}

/// Right-handed look-at camera (x right, y down, z forward) on the viewing
/// arc, aimed at the cluster.
inline Camera synth_camera(int id, double azimuth_deg, double height, int width,
                           int height_px) {
  constexpr double kPi = 3.14159265358979323846;
  const double az = azimuth_deg * kPi / 180.0;
  const Vec3 pos(4.0 * std::sin(az), height, 4.0 * std::cos(az));
  const Vec3 target(0.0, 0.45, 0.0);
  const Vec3 world_up(0.0, 1.0, 0.0);

  const Vec3 zc = (target - pos).normalized();
  const Vec3 xc = zc.cross(world_up).normalized();
  const Vec3 yc = zc.cross(xc);

  Camera cam;
  cam.id = id;
  cam.width = width;
  cam.height = height_px;
  cam.fx = static_cast<double>(width);
  cam.fy = static_cast<double>(width);
  cam.cx = width / 2.0;
  cam.cy = height_px / 2.0;
  cam.world_to_camera = Mat4::Identity();
  Mat3 rot;
  rot.row(0) = xc.transpose();
  rot.row(1) = yc.transpose();
  rot.row(2) = zc.transpose();
  cam.world_to_camera.block<3, 3>(0, 0) = rot;
  cam.world_to_camera.block<3, 1>(0, 3) = -rot * pos;
  cam.validate();
  return cam;
}

/// Per-view generator internals exposed for verification: the affine depth
/// corruption and the clean blended depth it was applied to.
struct SynthDebug {
  std::vector<int> view_ids;
  std::vector<double> w, q;
  std::vector<Image> clean_depth;
};

/// Build the full dataset in memory. Training views capture the scene with
/// the object; the reference view also carries an object-free render standing
/// in for a 2D-inpainted image; test views are held-out object-free ground
/// truth. Masks are the object's own silhouette (alpha > 0.5). Each view's
/// depth prior is the relevant scene's blended depth under a random affine
/// map (w ~ U[0.5,2], q ~ U[-0.2,0.2]), NaN where coverage is weak. All
/// pixel data is pre-quantized so the in-memory dataset equals its on-disk
/// round trip.
inline SceneDataset synth_scene(const SynthPreset& preset, uint64_t seed,
                                SynthDebug* debug = nullptr) {
  const SynthScene gt = synth_gaussians();
  const std::vector<NeuralGaussian> scene_b = gt.combined();
  Rng rng(seed);
  RenderSettings rs;

  SceneDataset ds;
  const int n = preset.n_train, m = preset.n_test;
  for (int i = 0; i < n; ++i) {
    const double az = -50.0 + 100.0 * i / (n - 1);
    const double h = 1.3 + 0.6 * ((i * 5) % 8) / 7.0;
    ds.cameras.push_back(synth_camera(i, az, h, preset.width, preset.height));
    ds.train_ids.push_back(i);
  }
  for (int j = 0; j < m; ++j) {
    const double az = -45.0 + 90.0 * j / (m - 1);
    const double h = 1.45 + 0.5 * ((j * 3) % 5) / 4.0;
    ds.cameras.push_back(synth_camera(n + j, az, h, preset.width, preset.height));
    ds.test_ids.push_back(n + j);
  }
  ds.reference_view_id = 0;

  for (const Camera& cam : ds.cameras) {
    const bool is_test = !ds.is_train_id(cam.id);
    const bool is_ref = cam.id == ds.reference_view_id;

    TrainingView view;
    view.camera_id = cam.id;
    view.is_reference = is_ref;

    // Captured image: scene with the object for train views, object-free
    // ground truth for held-out test views.
    const RenderOutput full = render(scene_b, cam, rs);
    RenderOutput clean;
    if (is_test || is_ref) clean = render(gt.background, cam, rs);

    const RenderOutput& shown = is_test ? clean : full;
    view.image = Image(cam.width, cam.height, 3);
    view.image.data = shown.color;
    quantize_image_u8(view.image);
    if (is_ref) {
      view.inpainted = Image(cam.width, cam.height, 3);
      view.inpainted.data = clean.color;
      quantize_image_u8(view.inpainted);
    }

    // Object silhouette from the object-only render.
    const RenderOutput obj = render(gt.object, cam, rs);
    view.mask = Mask(cam.width, cam.height);
    for (size_t p = 0; p < view.mask.data.size(); ++p)
      view.mask.data[p] = obj.alpha_acc[p] > 0.5 ? 1 : 0;

    // Depth prior from the relevant scene: the object-free one for the
    // reference (its prior comes from the inpainted image) and for test
    // views, the captured one elsewhere.
    const RenderOutput& depth_src = (is_test || is_ref) ? clean : full;
    const double w = rng.uniform(0.5, 2.0);
    const double q = rng.uniform(-0.2, 0.2);
    view.mono_depth = Image(cam.width, cam.height, 1);
    for (size_t p = 0; p < view.mono_depth.data.size(); ++p)
      view.mono_depth.data[p] =
          depth_src.alpha_acc[p] > 0.5 ? w * depth_src.depth[p] + q : kNaN;
    quantize_depth_f32(view.mono_depth);

    if (debug) {
      debug->view_ids.push_back(cam.id);
      debug->w.push_back(w);
      debug->q.push_back(q);
      Image d(cam.width, cam.height, 1);
      d.data = depth_src.depth;
      debug->clean_depth.push_back(std::move(d));
    }
    ds.views.push_back(std::move(view));
  }

  // Stand-in for a sparse SfM reconstruction of the captured scene.
  for (const NeuralGaussian& g : scene_b) {
    ds.init_points.push_back(g.mean3d);
    ds.init_colors.push_back(g.color);
  }
  return ds;
}

}  // namespace desplat
