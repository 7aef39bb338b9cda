// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: `train`, `render`, `eval`, `synth`.
// Exit codes: 0 success, 1 runtime error (one-line message on stderr),
// 2 usage error (unknown flag/subcommand).

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "desplat/checkpoint.hpp"
#include "desplat/dataset.hpp"
#include "desplat/image_io.hpp"
#include "desplat/metrics.hpp"
#include "desplat/synth.hpp"
#include "desplat/trainer.hpp"

namespace {

namespace fs = std::filesystem;

int run_train(const std::string& scene_dir, const std::string& config_path,
              const std::string& out_dir, bool seed_set, uint64_t seed,
              bool deterministic) {
  const desplat::SceneDataset ds = desplat::load_dataset(scene_dir);
  desplat::TrainConfig config =
      desplat::config_from_json(desplat::detail::load_json_file(config_path));
  if (seed_set) config.seed = seed;
  if (deterministic) {
    config.deterministic = true;
    config.threads = 1;
  }
  const desplat::TrainResult result = desplat::train(ds, config, out_dir);
  std::cout << "trained " << result.steps << " steps, final total loss "
            << result.last.total << ", checkpoint at " << result.checkpoint_dir
            << "\n";
  return 0;
}

void write_view_renders(const desplat::TrainState& st, const desplat::Camera& cam,
                        const std::string& out_dir) {
  const desplat::RenderOutput out = desplat::render_state(st, cam);
  desplat::Image color(out.width, out.height, 3);
  color.data = out.color;
  desplat::write_png((fs::path(out_dir) / (std::to_string(cam.id) + "_color.png")).string(),
                     desplat::to_u8_image(color));

  // Depth PNG is a min-max normalized visualization; evaluation never reads it.
  double lo = out.depth.empty() ? 0.0 : out.depth[0], hi = lo;
  for (double v : out.depth) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<uint16_t> depth16(out.depth.size(), 0);
  if (hi > lo)
    for (size_t i = 0; i < out.depth.size(); ++i)
      depth16[i] = static_cast<uint16_t>(
          std::floor((out.depth[i] - lo) / (hi - lo) * 65535.0 + 0.5));
  desplat::write_png16((fs::path(out_dir) / (std::to_string(cam.id) + "_depth.png")).string(),
                       out.width, out.height, depth16);
}

int run_render(const std::string& checkpoint_dir, bool all, bool camera_set,
               int camera_id, const std::string& out_dir) {
  const desplat::TrainState st = desplat::load_checkpoint(checkpoint_dir);
  fs::create_directories(out_dir);
  if (all == camera_set)
    throw std::runtime_error("render: pass exactly one of --camera ID or --all");
  if (all) {
    for (const desplat::Camera& cam : st.cameras) write_view_renders(st, cam, out_dir);
    std::cout << "rendered " << st.cameras.size() << " views to " << out_dir << "\n";
    return 0;
  }
  for (const desplat::Camera& cam : st.cameras) {
    if (cam.id != camera_id) continue;
    write_view_renders(st, cam, out_dir);
    std::cout << "rendered view " << camera_id << " to " << out_dir << "\n";
    return 0;
  }
  throw std::runtime_error("unknown camera id " + std::to_string(camera_id));
}

int run_eval(const std::string& checkpoint_dir, const std::string& scene_dir,
             const std::string& out_path) {
  const desplat::TrainState st = desplat::load_checkpoint(checkpoint_dir);
  const desplat::SceneDataset ds = desplat::load_dataset(scene_dir);
  std::vector<desplat::ViewMetrics> views;
  for (int id : ds.test_ids) {
    const desplat::RenderOutput out = desplat::render_state(st, ds.camera(id));
    desplat::Image render(out.width, out.height, 3);
    render.data = out.color;
    const desplat::TrainingView& view = ds.view(id);
    views.push_back(desplat::compute_view_metrics(id, render, view.image, view.mask));
  }
  const desplat::MetricsReport report = desplat::compute_metrics(views);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << desplat::metrics_to_json(report).dump(2) << "\n";
  if (!out) throw std::runtime_error("short write to " + out_path);
  std::cout << "evaluated " << views.size() << " test views, report at " << out_path
            << "\n";
  return 0;
}

int run_synth(const std::string& out_dir, uint64_t seed, const std::string& preset) {
  const desplat::SceneDataset ds =
      desplat::synth_scene(desplat::synth_preset(preset), seed);
  desplat::save_dataset(ds, out_dir);
  std::cout << "wrote synthetic scene (" << ds.train_ids.size() << " train / "
            << ds.test_ids.size() << " test views) to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale object removal with anchored gaussian splatting"};
  app.require_subcommand(1);

  std::string scene_dir, config_path, out_dir, checkpoint_dir, preset = "small";
  uint64_t seed = 0;
  int camera_id = 0;
  bool deterministic = false, all = false;

  CLI::App* train_cmd = app.add_subcommand("train", "optimize a scene");
  train_cmd->add_option("--scene", scene_dir, "scene directory")->required();
  train_cmd->add_option("--config", config_path, "training config JSON")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  CLI::Option* seed_opt = train_cmd->add_option("--seed", seed, "override config seed");
  train_cmd->add_flag("--deterministic", deterministic,
                      "single-threaded bit-reproducible run");

  CLI::App* render_cmd = app.add_subcommand("render", "render a trained checkpoint");
  render_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")
      ->required();
  CLI::Option* camera_opt =
      render_cmd->add_option("--camera", camera_id, "camera id to render");
  render_cmd->add_flag("--all", all, "render every camera");
  render_cmd->add_option("--out", out_dir, "output directory")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "measure test-split quality");
  eval_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")
      ->required();
  eval_cmd->add_option("--scene", scene_dir, "scene directory")->required();
  eval_cmd->add_option("--out", out_dir, "metrics JSON path")->required();

  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a synthetic scene");
  synth_cmd->add_option("--out", out_dir, "output directory")->required();
  synth_cmd->add_option("--seed", seed, "generator seed")->required();
  synth_cmd->add_option("--preset", preset, "small|medium");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (train_cmd->parsed())
      return run_train(scene_dir, config_path, out_dir, seed_opt->count() > 0, seed,
                       deterministic);
    if (render_cmd->parsed())
      return run_render(checkpoint_dir, all, camera_opt->count() > 0, camera_id,
                        out_dir);
    if (eval_cmd->parsed()) return run_eval(checkpoint_dir, scene_dir, out_dir);
    if (synth_cmd->parsed()) return run_synth(out_dir, seed, preset);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
