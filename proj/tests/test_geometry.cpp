// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "desplat/common.hpp"
#include "desplat/geometry.hpp"
#include "oracles.hpp"

using namespace desplat;

namespace {

Camera test_camera() {
  Camera cam;
  cam.id = 0;
  cam.width = 64;
  cam.height = 48;
  cam.fx = 70.0;
  cam.fy = 65.0;
  cam.cx = 32.0;
  cam.cy = 24.0;
  cam.world_to_camera = Mat4::Identity();
  return cam;
}

Camera rotated_camera() {
  Camera cam = test_camera();
  // 30 degrees about y, then a translation.
  const double a = 0.5235987755982988;
  Mat3 rot;
  rot << std::cos(a), 0.0, std::sin(a), 0.0, 1.0, 0.0, -std::sin(a), 0.0, std::cos(a);
  cam.world_to_camera.block<3, 3>(0, 0) = rot;
  cam.world_to_camera.block<3, 1>(0, 3) = Vec3(0.2, -0.1, 0.4);
  return cam;
}

GaussianShape random_shape(Rng& rng) {
  GaussianShape s;
  for (int i = 0; i < 3; ++i) s.log_scale(i) = rng.uniform(-1.5, 0.5);
  for (int i = 0; i < 4; ++i) s.quat(i) = rng.uniform(-1.0, 1.0);
  if (s.quat.norm() < 0.1) s.quat(0) += 1.0;
  return s;
}

}  // namespace

TEST(Covariance, AxisAlignedScales) {
  GaussianShape s;
  s.log_scale = Vec3(std::log(2.0), 0.0, 0.0);
  s.quat = Vec4(1.0, 0.0, 0.0, 0.0);
  const Mat3 cov = build_covariance(s);
  Mat3 expected = Mat3::Zero();
  expected.diagonal() = Vec3(4.0, 1.0, 1.0);
  EXPECT_LT((cov - expected).norm(), 1e-12);
}

TEST(Covariance, QuaternionScaleInvariance) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    GaussianShape s = random_shape(rng);
    GaussianShape s2 = s;
    s2.quat *= 3.7;  // same rotation, different magnitude
    EXPECT_LT((build_covariance(s) - build_covariance(s2)).norm(), 1e-12);
  }
}

TEST(Covariance, SymmetricPositiveDefinite) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat3 cov = build_covariance(random_shape(rng));
    EXPECT_LT((cov - cov.transpose()).norm(), 1e-12);
    const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    EXPECT_GT(eig.eigenvalues().minCoeff(), 0.0);
  }
}

TEST(Covariance, ZeroQuaternionRejected) {
  GaussianShape s;
  s.log_scale = Vec3::Zero();
  s.quat = Vec4::Zero();
  EXPECT_THROW(build_covariance(s), std::invalid_argument);
}

TEST(Covariance, QuaternionNinetyDegreesAboutZ) {
  GaussianShape s;
  s.log_scale = Vec3(std::log(3.0), 0.0, 0.0);
  const double r = std::sqrt(0.5);
  s.quat = Vec4(r, 0.0, 0.0, r);  // +90 degrees about z maps x to y
  const Mat3 cov = build_covariance(s);
  EXPECT_NEAR(cov(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(cov(1, 1), 9.0, 1e-12);
  EXPECT_NEAR(cov(2, 2), 1.0, 1e-12);
}

TEST(Covariance, BackwardMatchesFiniteDifferences) {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    GaussianShape s = random_shape(rng);
    Mat3 upstream;
    for (int i = 0; i < 9; ++i) upstream(i / 3, i % 3) = rng.uniform(-1.0, 1.0);

    const ShapeGrads g = covariance_backward(s, upstream);
    const auto loss = [&]() {
      return (upstream.array() * build_covariance(s).array()).sum();
    };
    for (int i = 0; i < 3; ++i) {
      const double fd = oracle::central_diff(loss, &s.log_scale(i));
      EXPECT_TRUE(oracle::grads_match(g.dlog_scale(i), fd))
          << "log_scale " << i << ": " << g.dlog_scale(i) << " vs " << fd;
    }
    for (int i = 0; i < 4; ++i) {
      const double fd = oracle::central_diff(loss, &s.quat(i));
      EXPECT_TRUE(oracle::grads_match(g.dquat(i), fd))
          << "quat " << i << ": " << g.dquat(i) << " vs " << fd;
    }
  }
}

TEST(Camera, ValidateRejectsNonOrthonormal) {
  Camera cam = test_camera();
  cam.world_to_camera(0, 1) = 0.3;
  EXPECT_THROW(cam.validate(), std::invalid_argument);
}

TEST(Camera, ValidateRejectsBadIntrinsics) {
  Camera cam = test_camera();
  cam.fx = 0.0;
  EXPECT_THROW(cam.validate(), std::invalid_argument);
}

TEST(Camera, CenterInvertsTransform) {
  const Camera cam = rotated_camera();
  cam.validate();
  EXPECT_LT(cam.to_camera(cam.camera_center()).norm(), 1e-12);
}

TEST(Projection, OpticalAxisPoint) {
  const Camera cam = test_camera();
  Mat3 cov3d = Mat3::Identity() * 0.01;
  const Projected2D p = project_gaussian(Vec3(0.0, 0.0, 5.0), cov3d, cam, {});
  ASSERT_TRUE(p.visible);
  EXPECT_NEAR(p.mean2d(0), cam.cx, 1e-12);
  EXPECT_NEAR(p.mean2d(1), cam.cy, 1e-12);
  EXPECT_NEAR(p.depth, 5.0, 1e-12);
}

TEST(Projection, MatchesExplicitFormula) {
  const Camera cam = rotated_camera();
  Rng rng(31);
  const ProjectionSettings ps;
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 mean(rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4),
                    rng.uniform(2.0, 6.0));
    const Mat3 cov3d = build_covariance(random_shape(rng)) * 0.01;
    const Projected2D p = project_gaussian(mean, cov3d, cam, ps);
    if (!p.visible) continue;

    // Recompute from first principles.
    const Mat3 rot = cam.rotation();
    const Vec3 pc = cam.to_camera(mean);
    Eigen::Matrix<double, 2, 3> jac;
    jac << cam.fx / pc.z(), 0.0, -cam.fx * pc.x() / (pc.z() * pc.z()), 0.0,
        cam.fy / pc.z(), -cam.fy * pc.y() / (pc.z() * pc.z());
    const Eigen::Matrix<double, 2, 3> t = jac * rot;
    const Mat2 expected =
        t * cov3d * t.transpose() + Mat2::Identity() * ps.blur_floor;
    EXPECT_LT((p.cov2d - expected).norm(), 1e-12);
    EXPECT_NEAR(p.mean2d(0), cam.fx * pc.x() / pc.z() + cam.cx, 1e-12);
    EXPECT_NEAR(p.mean2d(1), cam.fy * pc.y() / pc.z() + cam.cy, 1e-12);
    EXPECT_NEAR(p.depth, pc.z(), 1e-12);
  }
}

TEST(Projection, BlurFloorBoundsScreenCovariance) {
  const Camera cam = test_camera();
  Mat3 tiny = Mat3::Identity() * 1e-12;
  const Projected2D p = project_gaussian(Vec3(0.1, 0.1, 4.0), tiny, cam, {});
  ASSERT_TRUE(p.visible);
  EXPECT_GE(p.cov2d(0, 0), 0.3 - 1e-12);
  EXPECT_GE(p.cov2d(1, 1), 0.3 - 1e-12);
}

TEST(Projection, NearPlaneCull) {
  const Camera cam = test_camera();
  const Mat3 cov3d = Mat3::Identity() * 0.01;
  EXPECT_FALSE(project_gaussian(Vec3(0.0, 0.0, 0.005), cov3d, cam, {}).visible);
  EXPECT_FALSE(project_gaussian(Vec3(0.0, 0.0, -3.0), cov3d, cam, {}).visible);
}

TEST(Projection, GuardBandCull) {
  const Camera cam = test_camera();
  const Mat3 cov3d = Mat3::Identity() * 0.0001;
  // Far outside the 30% guard band around the image.
  EXPECT_FALSE(project_gaussian(Vec3(50.0, 0.0, 2.0), cov3d, cam, {}).visible);
  // Just outside the image but inside the band stays visible.
  const Projected2D p = project_gaussian(Vec3(1.1, 0.0, 2.0), cov3d, cam, {});
  EXPECT_TRUE(p.visible);
}

TEST(Projection, BackwardMatchesFiniteDifferences) {
  const Camera cam = rotated_camera();
  Rng rng(43);
  const ProjectionSettings ps;
  for (int trial = 0; trial < 10; ++trial) {
    Vec3 mean(rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), rng.uniform(2.0, 6.0));
    Mat3 cov3d = build_covariance(random_shape(rng)) * 0.01;
    if (!project_gaussian(mean, cov3d, cam, ps).visible) continue;

    // Random linear functional of every projected quantity.
    Vec2 dmean2d(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
    Mat2 dcov2d;
    dcov2d << rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0);
    const double ddepth = rng.uniform(-1.0, 1.0);

    const ProjectionGrads g =
        project_backward(mean, cov3d, cam, dmean2d, dcov2d, ddepth, ps);
    const auto loss = [&]() {
      const Projected2D p = project_gaussian(mean, cov3d, cam, ps);
      return dmean2d.dot(p.mean2d) + (dcov2d.array() * p.cov2d.array()).sum() +
             ddepth * p.depth;
    };
    for (int i = 0; i < 3; ++i) {
      const double fd = oracle::central_diff(loss, &mean(i));
      EXPECT_TRUE(oracle::grads_match(g.dmean3d(i), fd))
          << "mean " << i << ": " << g.dmean3d(i) << " vs " << fd;
    }
    // Perturb symmetric covariance entries in symmetric pairs.
    for (int r = 0; r < 3; ++r) {
      for (int c = r; c < 3; ++c) {
        const auto sym_loss = [&]() { return loss(); };
        const double orig = cov3d(r, c);
        const double h = 1e-6;
        cov3d(r, c) = orig + h;
        cov3d(c, r) = orig + h;
        const double fp = sym_loss();
        cov3d(r, c) = orig - h;
        cov3d(c, r) = orig - h;
        const double fm = sym_loss();
        cov3d(r, c) = orig;
        cov3d(c, r) = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double analytic =
            r == c ? g.dcov3d(r, c) : g.dcov3d(r, c) + g.dcov3d(c, r);
        EXPECT_TRUE(oracle::grads_match(analytic, fd, 1e-3, 1e-5))
            << "cov(" << r << "," << c << "): " << analytic << " vs " << fd;
      }
    }
  }
}
