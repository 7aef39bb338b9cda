// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "desplat/config.hpp"
#include "desplat/dataset.hpp"
#include "desplat/regularizer.hpp"
#include "desplat/scene.hpp"

namespace desplat {

// ---------------------------------------------------------------------------
// Raw tensor files: magic "GSDM", u32 rank, u32 dims[rank], float64
// little-endian payload in row-major order.
// ---------------------------------------------------------------------------

inline void write_tensor(const std::string& path, const std::vector<uint32_t>& dims,
                         const std::vector<double>& data) {
  size_t expect = 1;
  for (uint32_t d : dims) expect *= d;
  if (expect != data.size())
    throw std::invalid_argument("write_tensor: dims/payload mismatch for " + path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write("GSDM", 4);
  detail::put_u32(out, static_cast<uint32_t>(dims.size()));
  for (uint32_t d : dims) detail::put_u32(out, d);
  for (double v : data) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

struct Tensor {
  std::vector<uint32_t> dims;
  std::vector<double> data;

  size_t dim(size_t i) const {
    if (i >= dims.size()) throw std::runtime_error("tensor rank too small");
    return dims[i];
  }
};

inline Tensor read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "GSDM", 4) != 0)
    throw std::runtime_error("bad tensor magic in " + path);
  const uint32_t rank = detail::get_u32(in, path);
  if (rank > 8) throw std::runtime_error("implausible tensor rank in " + path);
  Tensor t;
  size_t count = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    t.dims.push_back(detail::get_u32(in, path));
    count *= t.dims.back();
  }
  if (count > (1ull << 32))
    throw std::runtime_error("implausible tensor size in " + path);
  t.data.resize(count);
  for (double& v : t.data) {
    uint8_t b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8))
      throw std::runtime_error("truncated tensor in " + path);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
    std::memcpy(&v, &bits, 8);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Optimizer state
// ---------------------------------------------------------------------------

/// First/second Adam moments mirroring every learnable tensor.
struct Moments {
  std::vector<Vec3> pos_m, pos_v;
  std::vector<VectorXd> feat_m, feat_v;
  std::vector<Vec3> ols_m, ols_v;
  std::vector<OffsetMatrix> off_m, off_v;
  MlpGrads opacity_m, opacity_v, color_m, color_v, shape_m, shape_v;
  MatrixXd wq_m, wq_v, wk_m, wk_v, wv_m, wv_v;

  void init(const SceneModel& scene, const AttentionParams& attention) {
    const size_t n = scene.anchor_count();
    const int d = scene.config.feature_dim;
    const int k = scene.config.offsets_per_anchor;
    pos_m.assign(n, Vec3::Zero());
    pos_v.assign(n, Vec3::Zero());
    feat_m.assign(n, VectorXd::Zero(d));
    feat_v.assign(n, VectorXd::Zero(d));
    ols_m.assign(n, Vec3::Zero());
    ols_v.assign(n, Vec3::Zero());
    off_m.assign(n, OffsetMatrix::Zero(k, 3));
    off_v.assign(n, OffsetMatrix::Zero(k, 3));
    opacity_m.init_like(scene.opacity_decoder);
    opacity_v.init_like(scene.opacity_decoder);
    color_m.init_like(scene.color_decoder);
    color_v.init_like(scene.color_decoder);
    shape_m.init_like(scene.shape_decoder);
    shape_v.init_like(scene.shape_decoder);
    wq_m = MatrixXd::Zero(attention.wq.rows(), attention.wq.cols());
    wq_v = wq_m;
    wk_m = wq_m;
    wk_v = wq_m;
    wv_m = wq_m;
    wv_v = wq_m;
  }

  /// Rebuild per-anchor moments after densification: kept anchors carry
  /// their state over, spawned anchors start fresh, pruned state is dropped.
  void remap_anchors(const DensifyResult& result, const SceneModel& scene) {
    const int d = scene.config.feature_dim;
    const int k = scene.config.offsets_per_anchor;
    std::vector<Vec3> npos_m, npos_v, nols_m, nols_v;
    std::vector<VectorXd> nfeat_m, nfeat_v;
    std::vector<OffsetMatrix> noff_m, noff_v;
    for (int src : result.source) {
      if (src >= 0) {
        npos_m.push_back(pos_m[src]);
        npos_v.push_back(pos_v[src]);
        nfeat_m.push_back(feat_m[src]);
        nfeat_v.push_back(feat_v[src]);
        nols_m.push_back(ols_m[src]);
        nols_v.push_back(ols_v[src]);
        noff_m.push_back(off_m[src]);
        noff_v.push_back(off_v[src]);
      } else {
        npos_m.push_back(Vec3::Zero());
        npos_v.push_back(Vec3::Zero());
        nfeat_m.push_back(VectorXd::Zero(d));
        nfeat_v.push_back(VectorXd::Zero(d));
        nols_m.push_back(Vec3::Zero());
        nols_v.push_back(Vec3::Zero());
        noff_m.push_back(OffsetMatrix::Zero(k, 3));
        noff_v.push_back(OffsetMatrix::Zero(k, 3));
      }
    }
    pos_m = std::move(npos_m);
    pos_v = std::move(npos_v);
    feat_m = std::move(nfeat_m);
    feat_v = std::move(nfeat_v);
    ols_m = std::move(nols_m);
    ols_v = std::move(nols_v);
    off_m = std::move(noff_m);
    off_v = std::move(noff_v);
  }
};

/// Complete resumable training state; also the unit a checkpoint stores.
struct TrainState {
  TrainConfig config;
  SceneModel scene;
  AttentionParams attention;
  Moments moments;
  int step = 0;
  Rng rng;
  std::vector<Camera> cameras;
  int reference_view_id = -1;
};

// ---------------------------------------------------------------------------
// Checkpoint directory: manifest.json + one tensor file per parameter group.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> pack_vec3s(const std::vector<Vec3>& v) {
  std::vector<double> out;
  out.reserve(v.size() * 3);
  for (const Vec3& p : v)
    for (int i = 0; i < 3; ++i) out.push_back(p(i));
  return out;
}

inline std::vector<double> pack_vectors(const std::vector<VectorXd>& v) {
  std::vector<double> out;
  for (const VectorXd& p : v)
    for (int i = 0; i < p.size(); ++i) out.push_back(p(i));
  return out;
}

inline std::vector<double> pack_offsets(const std::vector<OffsetMatrix>& v) {
  std::vector<double> out;
  for (const OffsetMatrix& m : v)
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < 3; ++c) out.push_back(m(r, c));
  return out;
}

inline std::vector<double> pack_matrix(const MatrixXd& m) {
  std::vector<double> out;
  out.reserve(m.size());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  return out;
}

inline void unpack_vec3s(const Tensor& t, std::vector<Vec3>& v) {
  v.assign(t.dim(0), Vec3::Zero());
  for (size_t i = 0; i < v.size(); ++i)
    for (int c = 0; c < 3; ++c) v[i](c) = t.data[i * 3 + c];
}

inline void unpack_vectors(const Tensor& t, std::vector<VectorXd>& v) {
  const size_t n = t.dim(0), d = t.dim(1);
  v.assign(n, VectorXd::Zero(d));
  for (size_t i = 0; i < n; ++i)
    for (size_t c = 0; c < d; ++c) v[i](c) = t.data[i * d + c];
}

inline void unpack_offsets(const Tensor& t, std::vector<OffsetMatrix>& v) {
  const size_t n = t.dim(0), k = t.dim(1);
  v.assign(n, OffsetMatrix::Zero(k, 3));
  for (size_t i = 0; i < n; ++i)
    for (size_t r = 0; r < k; ++r)
      for (int c = 0; c < 3; ++c) v[i](r, c) = t.data[(i * k + r) * 3 + c];
}

inline void unpack_matrix(const Tensor& t, MatrixXd& m) {
  m.resize(t.dim(0), t.dim(1));
  for (size_t r = 0; r < t.dim(0); ++r)
    for (size_t c = 0; c < t.dim(1); ++c) m(r, c) = t.data[r * t.dim(1) + c];
}

inline void unpack_vector(const Tensor& t, VectorXd& v) {
  v.resize(t.dim(0));
  for (size_t i = 0; i < t.dim(0); ++i) v(i) = t.data[i];
}

}  // namespace detail

inline void save_checkpoint(const TrainState& state, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root);
  const SceneModel& scene = state.scene;
  const uint32_t n = static_cast<uint32_t>(scene.anchor_count());
  const uint32_t d = static_cast<uint32_t>(scene.config.feature_dim);
  const uint32_t k = static_cast<uint32_t>(scene.config.offsets_per_anchor);

  const auto tensor = [&](const std::string& name, std::vector<uint32_t> dims,
                          std::vector<double> data) {
    write_tensor((root / (name + ".bin")).string(), dims, data);
  };

  using namespace detail;
  tensor("anchor_positions", {n, 3}, pack_vec3s(scene.positions));
  tensor("anchor_features", {n, d}, pack_vectors(scene.features));
  tensor("anchor_offset_log_scales", {n, 3}, pack_vec3s(scene.offset_log_scales));
  tensor("anchor_offsets", {n, k, 3}, pack_offsets(scene.offsets));

  const auto mlp = [&](const std::string& name, const Mlp& m) {
    tensor(name + "_w1", {static_cast<uint32_t>(m.w1.rows()),
                          static_cast<uint32_t>(m.w1.cols())},
           pack_matrix(m.w1));
    tensor(name + "_b1", {static_cast<uint32_t>(m.b1.size())}, pack_matrix(m.b1));
    tensor(name + "_w2", {static_cast<uint32_t>(m.w2.rows()),
                          static_cast<uint32_t>(m.w2.cols())},
           pack_matrix(m.w2));
    tensor(name + "_b2", {static_cast<uint32_t>(m.b2.size())}, pack_matrix(m.b2));
  };
  mlp("opacity_decoder", scene.opacity_decoder);
  mlp("color_decoder", scene.color_decoder);
  mlp("shape_decoder", scene.shape_decoder);
  tensor("attention_wq", {d, d}, pack_matrix(state.attention.wq));
  tensor("attention_wk", {d, d}, pack_matrix(state.attention.wk));
  tensor("attention_wv", {d, d}, pack_matrix(state.attention.wv));

  const Moments& mo = state.moments;
  tensor("anchor_positions_m", {n, 3}, pack_vec3s(mo.pos_m));
  tensor("anchor_positions_v", {n, 3}, pack_vec3s(mo.pos_v));
  tensor("anchor_features_m", {n, d}, pack_vectors(mo.feat_m));
  tensor("anchor_features_v", {n, d}, pack_vectors(mo.feat_v));
  tensor("anchor_offset_log_scales_m", {n, 3}, pack_vec3s(mo.ols_m));
  tensor("anchor_offset_log_scales_v", {n, 3}, pack_vec3s(mo.ols_v));
  tensor("anchor_offsets_m", {n, k, 3}, pack_offsets(mo.off_m));
  tensor("anchor_offsets_v", {n, k, 3}, pack_offsets(mo.off_v));
  const auto mlp_moments = [&](const std::string& name, const MlpGrads& g) {
    tensor(name + "_w1", {static_cast<uint32_t>(g.dw1.rows()),
                          static_cast<uint32_t>(g.dw1.cols())},
           pack_matrix(g.dw1));
    tensor(name + "_b1", {static_cast<uint32_t>(g.db1.size())}, pack_matrix(g.db1));
    tensor(name + "_w2", {static_cast<uint32_t>(g.dw2.rows()),
                          static_cast<uint32_t>(g.dw2.cols())},
           pack_matrix(g.dw2));
    tensor(name + "_b2", {static_cast<uint32_t>(g.db2.size())}, pack_matrix(g.db2));
  };
  mlp_moments("opacity_decoder_m", mo.opacity_m);
  mlp_moments("opacity_decoder_v", mo.opacity_v);
  mlp_moments("color_decoder_m", mo.color_m);
  mlp_moments("color_decoder_v", mo.color_v);
  mlp_moments("shape_decoder_m", mo.shape_m);
  mlp_moments("shape_decoder_v", mo.shape_v);
  tensor("attention_wq_m", {d, d}, pack_matrix(mo.wq_m));
  tensor("attention_wq_v", {d, d}, pack_matrix(mo.wq_v));
  tensor("attention_wk_m", {d, d}, pack_matrix(mo.wk_m));
  tensor("attention_wk_v", {d, d}, pack_matrix(mo.wk_v));
  tensor("attention_wv_m", {d, d}, pack_matrix(mo.wv_m));
  tensor("attention_wv_v", {d, d}, pack_matrix(mo.wv_v));

  json cameras = json::array();
  for (const Camera& c : state.cameras) cameras.push_back(camera_to_json(c));
  const json manifest{{"format", "desplat-checkpoint-v1"},
                      {"step", state.step},
                      {"rng_state", state.rng.serialize()},
                      {"reference_view_id", state.reference_view_id},
                      {"config", to_json(state.config)},
                      {"scene",
                       {{"anchor_count", n},
                        {"voxel_size", scene.voxel_size}}},
                      {"cameras", cameras}};
  std::ofstream out(root / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write manifest.json in " + dir);
}

inline TrainState load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  const json manifest = detail::load_json_file((root / "manifest.json").string());
  if (manifest.value("format", "") != "desplat-checkpoint-v1")
    throw std::runtime_error("unrecognized checkpoint format in " + dir);

  TrainState state;
  try {
    state.step = manifest.at("step").get<int>();
    state.rng = Rng::deserialize(manifest.at("rng_state").get<std::string>());
    state.reference_view_id = manifest.at("reference_view_id").get<int>();
    state.config = config_from_json(manifest.at("config"));
    for (const json& j : manifest.at("cameras"))
      state.cameras.push_back(camera_from_json(j, dir + "/manifest.json"));
    state.scene.voxel_size = manifest.at("scene").at("voxel_size").get<double>();
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest.json in " + dir + ": " + e.what());
  }
  state.scene.config = state.config.scene;

  const auto tensor = [&](const std::string& name) {
    return read_tensor((root / (name + ".bin")).string());
  };
  using namespace detail;
  unpack_vec3s(tensor("anchor_positions"), state.scene.positions);
  unpack_vectors(tensor("anchor_features"), state.scene.features);
  unpack_vec3s(tensor("anchor_offset_log_scales"), state.scene.offset_log_scales);
  unpack_offsets(tensor("anchor_offsets"), state.scene.offsets);
  const auto mlp = [&](const std::string& name, Mlp& m) {
    unpack_matrix(tensor(name + "_w1"), m.w1);
    unpack_vector(tensor(name + "_b1"), m.b1);
    unpack_matrix(tensor(name + "_w2"), m.w2);
    unpack_vector(tensor(name + "_b2"), m.b2);
  };
  mlp("opacity_decoder", state.scene.opacity_decoder);
  mlp("color_decoder", state.scene.color_decoder);
  mlp("shape_decoder", state.scene.shape_decoder);
  unpack_matrix(tensor("attention_wq"), state.attention.wq);
  unpack_matrix(tensor("attention_wk"), state.attention.wk);
  unpack_matrix(tensor("attention_wv"), state.attention.wv);

  Moments& mo = state.moments;
  unpack_vec3s(tensor("anchor_positions_m"), mo.pos_m);
  unpack_vec3s(tensor("anchor_positions_v"), mo.pos_v);
  unpack_vectors(tensor("anchor_features_m"), mo.feat_m);
  unpack_vectors(tensor("anchor_features_v"), mo.feat_v);
  unpack_vec3s(tensor("anchor_offset_log_scales_m"), mo.ols_m);
  unpack_vec3s(tensor("anchor_offset_log_scales_v"), mo.ols_v);
  unpack_offsets(tensor("anchor_offsets_m"), mo.off_m);
  unpack_offsets(tensor("anchor_offsets_v"), mo.off_v);
  const auto mlp_moments = [&](const std::string& name, MlpGrads& g) {
    unpack_matrix(tensor(name + "_w1"), g.dw1);
    unpack_vector(tensor(name + "_b1"), g.db1);
    unpack_matrix(tensor(name + "_w2"), g.dw2);
    unpack_vector(tensor(name + "_b2"), g.db2);
  };
  mlp_moments("opacity_decoder_m", mo.opacity_m);
  mlp_moments("opacity_decoder_v", mo.opacity_v);
  mlp_moments("color_decoder_m", mo.color_m);
  mlp_moments("color_decoder_v", mo.color_v);
  mlp_moments("shape_decoder_m", mo.shape_m);
  mlp_moments("shape_decoder_v", mo.shape_v);
  unpack_matrix(tensor("attention_wq_m"), mo.wq_m);
  unpack_matrix(tensor("attention_wq_v"), mo.wq_v);
  unpack_matrix(tensor("attention_wk_m"), mo.wk_m);
  unpack_matrix(tensor("attention_wk_v"), mo.wk_v);
  unpack_matrix(tensor("attention_wv_m"), mo.wv_m);
  unpack_matrix(tensor("attention_wv_v"), mo.wv_v);

  const size_t n = manifest.at("scene").at("anchor_count").get<size_t>();
  if (state.scene.anchor_count() != n)
    throw std::runtime_error("anchor count mismatch between manifest and tensors in " +
                             dir);
  return state;
}

}  // namespace desplat
