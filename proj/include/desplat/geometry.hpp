// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

#include "desplat/common.hpp"

namespace desplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Pinhole camera. `world_to_camera` maps world points into a frame whose
/// +z axis looks through the image; intrinsics are in pixels.
struct Camera {
  int id = 0;
  int width = 0;
  int height = 0;
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  Mat4 world_to_camera = Mat4::Identity();

  void validate() const {
    if (width <= 0 || height <= 0)
      throw std::invalid_argument("camera " + std::to_string(id) +
                                  ": image size must be positive");
    if (!(fx > 0.0) || !(fy > 0.0))
      throw std::invalid_argument("camera " + std::to_string(id) +
                                  ": focal lengths must be positive");
    const Mat3 r = rotation();
    if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
        r.determinant() < 0.0)
      throw std::invalid_argument("camera " + std::to_string(id) +
                                  ": world_to_camera rotation block is not a rotation");
    const Eigen::RowVector4d bottom = world_to_camera.row(3);
    if ((bottom - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-9)
      throw std::invalid_argument("camera " + std::to_string(id) +
                                  ": world_to_camera bottom row must be [0 0 0 1]");
  }

  Mat3 rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return world_to_camera.topRightCorner<3, 1>(); }
  Vec3 camera_center() const { return -rotation().transpose() * translation(); }
  Vec3 to_camera(const Vec3& p) const { return rotation() * p + translation(); }
};

/// Anisotropic gaussian shape: per-axis log scales plus an orientation
/// quaternion in (w, x, y, z) order. The quaternion need not be unit length;
/// consumers normalize.
struct GaussianShape {
  Vec3 log_scale = Vec3::Zero();
  Vec4 quat = Vec4(1, 0, 0, 0);
};

/// Rotation matrix of a *unit* quaternion (w, x, y, z).
inline Mat3 quat_to_rotation(const Vec4& q) {
  const double w = q(0), x = q(1), y = q(2), z = q(3);
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

/// World-space covariance R diag(exp(s))^2 R^T; symmetric positive
/// semi-definite by construction for any parameter values.
inline Mat3 build_covariance(const GaussianShape& shape) {
  const double norm = shape.quat.norm();
  if (!(norm > 0.0))
    throw std::invalid_argument("build_covariance: zero quaternion");
  const Mat3 r = quat_to_rotation(shape.quat / norm);
  const Vec3 s = shape.log_scale.array().exp();
  return r * s.cwiseAbs2().asDiagonal() * r.transpose();
}

struct ShapeGrads {
  Vec3 dlog_scale = Vec3::Zero();
  Vec4 dquat = Vec4::Zero();
};

/// Pull a gradient w.r.t. the covariance matrix back onto the shape
/// parameters. `dcov` may be an arbitrary (not necessarily symmetric) 3x3
/// adjoint; the symmetrization happens here.
inline ShapeGrads covariance_backward(const GaussianShape& shape, const Mat3& dcov) {
  const double norm = shape.quat.norm();
  if (!(norm > 0.0))
    throw std::invalid_argument("covariance_backward: zero quaternion");
  const Vec4 qn = shape.quat / norm;
  const double w = qn(0), x = qn(1), y = qn(2), z = qn(3);
  const Mat3 r = quat_to_rotation(qn);
  const Vec3 s = shape.log_scale.array().exp();

  // cov = M M^T with M = R diag(s); dM = (dcov + dcov^T) M.
  const Mat3 m = r * s.asDiagonal();
  const Mat3 dm = (dcov + dcov.transpose()) * m;
  const Mat3 dr = dm * s.asDiagonal();

  ShapeGrads g;
  // d s_i picks up the i-th column dot product; chain exp(log_scale).
  for (int i = 0; i < 3; ++i)
    g.dlog_scale(i) = r.col(i).dot(dm.col(i)) * s(i);

  // Rotation entries against the analytic per-component quaternion Jacobian.
  Mat3 drdw, drdx, drdy, drdz;
  drdw << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  drdx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  drdy << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  drdz << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  Vec4 dqn(dr.cwiseProduct(drdw).sum(), dr.cwiseProduct(drdx).sum(),
           dr.cwiseProduct(drdy).sum(), dr.cwiseProduct(drdz).sum());

  // Through the normalization: dq = (I - qn qn^T) dqn / |q|.
  g.dquat = (dqn - qn * qn.dot(dqn)) / norm;
  return g;
}

struct ProjectionSettings {
  double near_plane = 0.01;   ///< minimum camera-space depth
  double guard_band = 0.30;   ///< image border margin as a fraction of its size
  double blur_floor = 0.3;    ///< isotropic variance added in pixel^2
};

struct Projected2D {
  Vec2 mean2d = Vec2::Zero();  ///< pixel coordinates
  Mat2 cov2d = Mat2::Zero();   ///< screen-space covariance, pixel^2
  double depth = 0.0;          ///< camera-space z
  bool visible = false;
};

/// Perspective-project a world-space gaussian. The screen covariance is the
/// first-order (Jacobian) image of the world covariance plus an isotropic
/// blur floor that keeps every splat at least a fraction of a pixel wide.
/// Culled gaussians come back with visible=false and zeroed fields.
inline Projected2D project_gaussian(const Vec3& mean3d, const Mat3& cov3d,
                                    const Camera& cam,
                                    const ProjectionSettings& ps = {}) {
  Projected2D out;
  const Vec3 p = cam.to_camera(mean3d);
  if (!(p.z() > ps.near_plane)) return out;

  const double inv_z = 1.0 / p.z();
  const Vec2 uv(cam.fx * p.x() * inv_z + cam.cx, cam.fy * p.y() * inv_z + cam.cy);

  const double mx = ps.guard_band * cam.width;
  const double my = ps.guard_band * cam.height;
  if (uv.x() < -mx || uv.x() > cam.width + mx || uv.y() < -my ||
      uv.y() > cam.height + my)
    return out;

  Eigen::Matrix<double, 2, 3> j;
  j << cam.fx * inv_z, 0, -cam.fx * p.x() * inv_z * inv_z,
      0, cam.fy * inv_z, -cam.fy * p.y() * inv_z * inv_z;
  const Eigen::Matrix<double, 2, 3> t = j * cam.rotation();
  Mat2 cov2d = t * cov3d * t.transpose();
  cov2d(0, 0) += ps.blur_floor;
  cov2d(1, 1) += ps.blur_floor;
  if (!(cov2d.determinant() > 0.0)) return out;

  out.mean2d = uv;
  out.cov2d = cov2d;
  out.depth = p.z();
  out.visible = true;
  return out;
}

struct ProjectionGrads {
  Vec3 dmean3d = Vec3::Zero();
  Mat3 dcov3d = Mat3::Zero();
};

/// Adjoint of project_gaussian for a visible gaussian. `dcov2d` may be an
/// arbitrary 2x2 adjoint; `ddepth` is the gradient w.r.t. camera-space z.
inline ProjectionGrads project_backward(const Vec3& mean3d, const Mat3& cov3d,
                                        const Camera& cam, const Vec2& dmean2d,
                                        const Mat2& dcov2d, double ddepth,
                                        const ProjectionSettings& ps = {}) {
  (void)ps;
  ProjectionGrads g;
  const Mat3 w = cam.rotation();
  const Vec3 p = cam.to_camera(mean3d);
  const double inv_z = 1.0 / p.z();

  Eigen::Matrix<double, 2, 3> j;
  j << cam.fx * inv_z, 0, -cam.fx * p.x() * inv_z * inv_z,
      0, cam.fy * inv_z, -cam.fy * p.y() * inv_z * inv_z;
  const Eigen::Matrix<double, 2, 3> t = j * w;

  // cov2d = T cov3d T^T (+ const floor).
  g.dcov3d = t.transpose() * dcov2d * t;
  const Eigen::Matrix<double, 2, 3> dt =
      (dcov2d + dcov2d.transpose()) * t * cov3d;
  const Eigen::Matrix<double, 2, 3> dj = dt * w.transpose();

  // mean2d = (fx x/z + cx, fy y/z + cy): its Jacobian w.r.t. p is exactly J.
  Vec3 dp = j.transpose() * dmean2d;
  dp.z() += ddepth;

  // J's own dependence on p.
  const double inv_z2 = inv_z * inv_z;
  const double inv_z3 = inv_z2 * inv_z;
  dp.x() += dj(0, 2) * (-cam.fx * inv_z2);
  dp.y() += dj(1, 2) * (-cam.fy * inv_z2);
  dp.z() += dj(0, 0) * (-cam.fx * inv_z2) + dj(1, 1) * (-cam.fy * inv_z2) +
            dj(0, 2) * (2.0 * cam.fx * p.x() * inv_z3) +
            dj(1, 2) * (2.0 * cam.fy * p.y() * inv_z3);

  g.dmean3d = w.transpose() * dp;
  return g;
}

}  // namespace desplat
