// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "desplat/common.hpp"
#include "desplat/geometry.hpp"
#include "desplat/image_io.hpp"

namespace desplat {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Raw depth buffers: 16-byte header (magic "GSDM", u32 width, u32 height,
// u32 reserved, little-endian) followed by width*height float32, row-major.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& out, uint32_t v) {
  const uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                        static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& in, const std::string& path) {
  uint8_t b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("truncated header in " + path);
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

}  // namespace detail

/// Write a depth map; values are stored as float32 (the double payload is
/// expected to already be float32-representable so the trip is lossless).
inline void write_depth_raw(const std::string& path, const Image& depth) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write("GSDM", 4);
  detail::put_u32(out, static_cast<uint32_t>(depth.width));
  detail::put_u32(out, static_cast<uint32_t>(depth.height));
  detail::put_u32(out, 0);
  for (double v : depth.data) {
    const float f = static_cast<float>(v);
    static_assert(sizeof(float) == 4);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(out, bits);
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

inline Image read_depth_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "GSDM", 4) != 0)
    throw std::runtime_error("bad depth magic in " + path);
  const uint32_t w = detail::get_u32(in, path);
  const uint32_t h = detail::get_u32(in, path);
  detail::get_u32(in, path);  // reserved
  if (w == 0 || h == 0 || w > (1u << 20) || h > (1u << 20))
    throw std::runtime_error("implausible depth dimensions in " + path);
  Image depth(static_cast<int>(w), static_cast<int>(h), 1);
  for (double& v : depth.data) {
    const uint32_t bits = detail::get_u32(in, path);
    float f;
    std::memcpy(&f, &bits, 4);
    v = f;
  }
  return depth;
}

// ---------------------------------------------------------------------------
// ASCII PLY points: x,y,z with optional uchar r,g,b.
// ---------------------------------------------------------------------------

inline void write_ply(const std::string& path, const std::vector<Vec3>& points,
                      const std::vector<Vec3>& colors = {}) {
  if (!colors.empty() && colors.size() != points.size())
    throw std::invalid_argument("write_ply: color count mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "ply\nformat ascii 1.0\nelement vertex " << points.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
  if (!colors.empty())
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  char buf[128];
  for (size_t i = 0; i < points.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g", points[i].x(),
                  points[i].y(), points[i].z());
    out << buf;
    if (!colors.empty()) {
      for (int c = 0; c < 3; ++c)
        out << ' '
            << static_cast<int>(std::clamp(colors[i](c), 0.0, 1.0) * 255.0 + 0.5);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

/// Minimal ASCII PLY reader for x,y,z[,r,g,b] vertex clouds.
inline void read_ply(const std::string& path, std::vector<Vec3>& points,
                     std::vector<Vec3>& colors) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.substr(0, 3) != "ply")
    throw std::runtime_error("not a ply file: " + path);

  size_t count = 0;
  std::vector<std::string> props;
  bool ascii = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      ls >> word;
      ascii = word == "ascii";
    } else if (word == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex")
        throw std::runtime_error("unsupported ply element in " + path);
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }
  if (!ascii) throw std::runtime_error("binary ply not supported: " + path);

  int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
  for (size_t i = 0; i < props.size(); ++i) {
    const std::string& p = props[i];
    if (p == "x") ix = static_cast<int>(i);
    if (p == "y") iy = static_cast<int>(i);
    if (p == "z") iz = static_cast<int>(i);
    if (p == "red" || p == "r") ir = static_cast<int>(i);
    if (p == "green" || p == "g") ig = static_cast<int>(i);
    if (p == "blue" || p == "b") ib = static_cast<int>(i);
  }
  if (ix < 0 || iy < 0 || iz < 0)
    throw std::runtime_error("ply missing x/y/z in " + path);
  const bool has_color = ir >= 0 && ig >= 0 && ib >= 0;

  points.clear();
  colors.clear();
  std::vector<double> vals(props.size());
  for (size_t n = 0; n < count; ++n) {
    if (!std::getline(in, line))
      throw std::runtime_error("truncated ply vertex list in " + path);
    std::istringstream ls(line);
    for (double& v : vals)
      if (!(ls >> v)) throw std::runtime_error("bad ply vertex in " + path);
    points.emplace_back(vals[ix], vals[iy], vals[iz]);
    if (has_color)
      colors.emplace_back(vals[ir] / 255.0, vals[ig] / 255.0, vals[ib] / 255.0);
  }
}

// ---------------------------------------------------------------------------
// Cameras
// ---------------------------------------------------------------------------

inline json camera_to_json(const Camera& cam) {
  json rows = json::array();
  for (int r = 0; r < 4; ++r) {
    json row = json::array();
    for (int c = 0; c < 4; ++c) row.push_back(cam.world_to_camera(r, c));
    rows.push_back(row);
  }
  return json{{"id", cam.id},     {"width", cam.width}, {"height", cam.height},
              {"fx", cam.fx},     {"fy", cam.fy},       {"cx", cam.cx},
              {"cy", cam.cy},     {"world_to_camera", rows}};
}

inline Camera camera_from_json(const json& j, const std::string& where) {
  try {
    Camera cam;
    cam.id = j.at("id").get<int>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    const json& rows = j.at("world_to_camera");
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        cam.world_to_camera(r, c) = rows.at(r).at(c).get<double>();
    cam.validate();
    return cam;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed camera in " + where + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One posed training (or held-out) view with its supervision buffers.
struct TrainingView {
  int camera_id = -1;
  Image image;       ///< H x W x 3 in [0,1]
  Mask mask;         ///< 1 = object to remove
  Image mono_depth;  ///< H x W, non-metric; NaN = invalid
  bool is_reference = false;
  Image inpainted;   ///< present iff is_reference
};

struct SceneDataset {
  std::vector<Camera> cameras;
  std::vector<TrainingView> views;  ///< train split first, then test split
  std::vector<Vec3> init_points;
  std::vector<Vec3> init_colors;    ///< empty when the ply had no color
  int reference_view_id = -1;
  std::vector<int> train_ids;
  std::vector<int> test_ids;

  const Camera& camera(int id) const {
    for (const Camera& c : cameras)
      if (c.id == id) return c;
    throw std::runtime_error("unknown camera id " + std::to_string(id));
  }
  const TrainingView& view(int id) const {
    for (const TrainingView& v : views)
      if (v.camera_id == id) return v;
    throw std::runtime_error("unknown view id " + std::to_string(id));
  }
  bool is_train_id(int id) const {
    for (int t : train_ids)
      if (t == id) return true;
    return false;
  }
};

namespace detail {

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed json in " + path + ": " + e.what());
  }
}

inline Image load_rgb_unit(const std::string& path) {
  const ImageU8 img = read_png(path);
  if (img.channels != 3)
    throw std::runtime_error("expected RGB png: " + path);
  return to_unit_image(img);
}

inline Mask load_mask(const std::string& path) {
  const ImageU8 img = read_png(path);
  if (img.channels != 1)
    throw std::runtime_error("expected grayscale png: " + path);
  Mask mask(img.width, img.height);
  for (size_t i = 0; i < img.data.size(); ++i)
    mask.data[i] = img.data[i] >= 128 ? 1 : 0;
  return mask;
}

}  // namespace detail

/// Load and fully validate a dataset directory:
///   cameras.json, meta.json, points3d.ply, images/<id>.png, masks/<id>.png,
///   depths/<id>.raw, images_inpainted/<reference_id>.png
/// Every failure names the offending path or view.
inline SceneDataset load_dataset(const std::string& dir) {
  SceneDataset ds;
  const fs::path root(dir);

  const json cams = detail::load_json_file((root / "cameras.json").string());
  if (!cams.is_array() || cams.empty())
    throw std::runtime_error("cameras.json must be a non-empty array in " + dir);
  for (const json& j : cams)
    ds.cameras.push_back(camera_from_json(j, (root / "cameras.json").string()));

  const json meta = detail::load_json_file((root / "meta.json").string());
  try {
    ds.reference_view_id = meta.at("reference_view_id").get<int>();
    ds.train_ids = meta.at("train_ids").get<std::vector<int>>();
    ds.test_ids = meta.at("test_ids").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed meta.json in " + dir + ": " + e.what());
  }
  if (!ds.is_train_id(ds.reference_view_id))
    throw std::runtime_error("reference view " +
                             std::to_string(ds.reference_view_id) +
                             " is not in train_ids (" + dir + ")");

  read_ply((root / "points3d.ply").string(), ds.init_points, ds.init_colors);
  if (ds.init_points.empty())
    throw std::runtime_error("points3d.ply has no vertices in " + dir);

  auto load_view = [&](int id) {
    const Camera& cam = ds.camera(id);  // throws on unknown id
    TrainingView view;
    view.camera_id = id;
    const std::string name = std::to_string(id);

    const std::string image_path = (root / "images" / (name + ".png")).string();
    view.image = detail::load_rgb_unit(image_path);
    if (view.image.width != cam.width || view.image.height != cam.height)
      throw std::runtime_error("image size mismatch for view " + name + ": " +
                               image_path);

    const std::string mask_path = (root / "masks" / (name + ".png")).string();
    view.mask = detail::load_mask(mask_path);
    if (view.mask.width != cam.width || view.mask.height != cam.height)
      throw std::runtime_error("mask size mismatch for view " + name + ": " +
                               mask_path);

    const std::string depth_path = (root / "depths" / (name + ".raw")).string();
    view.mono_depth = read_depth_raw(depth_path);
    if (view.mono_depth.width != cam.width || view.mono_depth.height != cam.height)
      throw std::runtime_error("depth size mismatch for view " + name + ": " +
                               depth_path);

    if (id == ds.reference_view_id) {
      view.is_reference = true;
      const std::string inpainted_path =
          (root / "images_inpainted" / (name + ".png")).string();
      view.inpainted = detail::load_rgb_unit(inpainted_path);
      if (view.inpainted.width != cam.width || view.inpainted.height != cam.height)
        throw std::runtime_error("inpainted image size mismatch for view " + name +
                                 ": " + inpainted_path);
    }
    ds.views.push_back(std::move(view));
  };

  for (int id : ds.train_ids) load_view(id);
  for (int id : ds.test_ids) {
    if (ds.is_train_id(id))
      throw std::runtime_error("view " + std::to_string(id) +
                               " appears in both splits (" + dir + ")");
    load_view(id);
  }
  return ds;
}

/// Write a dataset in the directory layout load_dataset expects. Image
/// payloads must be 8-bit-quantized [0,1] values and depth payloads
/// float32-representable, so that a save/load trip is the identity.
inline void save_dataset(const SceneDataset& ds, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "images");
  fs::create_directories(root / "images_inpainted");
  fs::create_directories(root / "masks");
  fs::create_directories(root / "depths");

  json cams = json::array();
  for (const Camera& c : ds.cameras) cams.push_back(camera_to_json(c));
  std::ofstream cam_out(root / "cameras.json");
  cam_out << cams.dump(2) << "\n";
  if (!cam_out) throw std::runtime_error("cannot write cameras.json in " + dir);

  const json meta{{"reference_view_id", ds.reference_view_id},
                  {"train_ids", ds.train_ids},
                  {"test_ids", ds.test_ids}};
  std::ofstream meta_out(root / "meta.json");
  meta_out << meta.dump(2) << "\n";
  if (!meta_out) throw std::runtime_error("cannot write meta.json in " + dir);

  write_ply((root / "points3d.ply").string(), ds.init_points, ds.init_colors);

  for (const TrainingView& view : ds.views) {
    const std::string name = std::to_string(view.camera_id);
    write_png((root / "images" / (name + ".png")).string(), to_u8_image(view.image));
    ImageU8 mask(view.mask.width, view.mask.height, 1);
    for (size_t i = 0; i < mask.data.size(); ++i)
      mask.data[i] = view.mask.data[i] ? 255 : 0;
    write_png((root / "masks" / (name + ".png")).string(), mask);
    write_depth_raw((root / "depths" / (name + ".raw")).string(), view.mono_depth);
    if (view.is_reference)
      write_png((root / "images_inpainted" / (name + ".png")).string(),
                to_u8_image(view.inpainted));
  }
}

/// Cast each depth sample through float32 so later raw-file round trips are
/// bit-exact.
inline void quantize_depth_f32(Image& depth) {
  for (double& v : depth.data) v = static_cast<double>(static_cast<float>(v));
}

/// Snap each channel to the nearest 8-bit level so later PNG round trips are
/// byte-exact.
inline void quantize_image_u8(Image& image) {
  for (double& v : image.data)
    v = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5) / 255.0;
}

}  // namespace desplat
