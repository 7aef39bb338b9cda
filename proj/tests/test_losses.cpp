// Copyright Contributors to the desplat Project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "desplat/losses.hpp"
#include "desplat/ssim.hpp"
#include "oracles.hpp"

using namespace desplat;

namespace {

Image random_field(Rng& rng, int w, int h, int c = 1, double lo = 0.2,
                   double hi = 0.8) {
  Image img(w, h, c);
  for (double& v : img.data) v = rng.uniform(lo, hi);
  return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// Depth alignment
// ---------------------------------------------------------------------------

TEST(Align, RecoversExactAffineMap) {
  Rng rng(11);
  const Image rendered = random_field(rng, 8, 8, 1, 1.0, 5.0);
  Image mono(8, 8, 1);
  for (size_t i = 0; i < mono.data.size(); ++i)
    mono.data[i] = 1.7 * rendered.data[i] - 0.05;
  const Mask all(8, 8, 1);
  const AlignmentResult r = align_depth(rendered, mono, all);
  EXPECT_FALSE(r.degenerate);
  EXPECT_EQ(r.valid_pixel_count, 64);
  EXPECT_NEAR(r.w, 1.7, 1e-12);
  EXPECT_NEAR(r.q, -0.05, 1e-12);
}

TEST(Align, MatchesQrOracleUnderNoise) {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const Image rendered = random_field(rng, 12, 9, 1, 0.5, 6.0);
    Image mono(12, 9, 1);
    for (size_t i = 0; i < mono.data.size(); ++i)
      mono.data[i] = 0.8 * rendered.data[i] + 0.3 + rng.uniform(-0.1, 0.1);
    Mask sel(12, 9);
    for (auto& v : sel.data) v = rng.uniform() < 0.7 ? 1 : 0;
    double w_ref = 0.0, q_ref = 0.0;
    ASSERT_TRUE(oracle::reference_align(rendered, mono, sel, &w_ref, &q_ref));
    const AlignmentResult r = align_depth(rendered, mono, sel);
    EXPECT_FALSE(r.degenerate);
    EXPECT_NEAR(r.w, w_ref, 1e-9);
    EXPECT_NEAR(r.q, q_ref, 1e-9);
  }
}

TEST(Align, ConstantDepthFallsBackToMeanShift) {
  Image rendered(6, 6, 1, 3.0);  // zero variance => singular normal equations
  Image mono(6, 6, 1);
  for (size_t i = 0; i < mono.data.size(); ++i) mono.data[i] = 4.0 + 0.01 * i;
  const AlignmentResult r = align_depth(rendered, mono, Mask(6, 6, 1));
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.w, 1.0);
  double mean_diff = 0.0;
  for (size_t i = 0; i < mono.data.size(); ++i)
    mean_diff += (mono.data[i] - rendered.data[i]) / mono.data.size();
  EXPECT_NEAR(r.q, mean_diff, 1e-12);
}

TEST(Align, UndersizedSelectionFallsBack) {
  Image rendered(4, 4, 1, 2.0);
  Image mono(4, 4, 1, 5.0);
  Mask one(4, 4);
  one.data[5] = 1;
  const AlignmentResult single = align_depth(rendered, mono, one);
  EXPECT_TRUE(single.degenerate);
  EXPECT_EQ(single.valid_pixel_count, 1);
  EXPECT_EQ(single.w, 1.0);
  EXPECT_NEAR(single.q, 3.0, 1e-12);

  const AlignmentResult empty = align_depth(rendered, mono, Mask(4, 4));
  EXPECT_TRUE(empty.degenerate);
  EXPECT_EQ(empty.valid_pixel_count, 0);
  EXPECT_EQ(empty.w, 1.0);
  EXPECT_EQ(empty.q, 0.0);
}

TEST(Align, ShapeMismatchThrows) {
  EXPECT_THROW(align_depth(Image(4, 4, 1), Image(5, 4, 1), Mask(4, 4)),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Supervision weights and validity
// ---------------------------------------------------------------------------

TEST(MaskWeight, ReferenceViewBlendsBothRegions) {
  Mask mask(3, 2);
  mask.data = {1, 0, 1, 0, 0, 1};
  LossWeights lw;
  lw.lambda1 = 2.0;
  lw.lambda2 = 0.5;
  const Image w = mask_weight(0, mask, lw);
  for (size_t i = 0; i < mask.data.size(); ++i)
    EXPECT_EQ(w.data[i], mask.data[i] ? 2.0 : 0.5);
}

TEST(MaskWeight, OtherViewsZeroTheObject) {
  Mask mask(3, 2);
  mask.data = {1, 0, 1, 0, 0, 1};
  LossWeights lw;
  lw.lambda3 = 0.75;
  const Image w = mask_weight(1, mask, lw);
  for (size_t i = 0; i < mask.data.size(); ++i)
    EXPECT_EQ(w.data[i], mask.data[i] ? 0.0 : 0.75);
}

TEST(DepthValidity, RequiresFinitePriorAndCoverage) {
  Image mono(2, 2, 1);
  mono.data = {1.0, kNaN, 2.0, 3.0};
  const std::vector<double> alpha = {0.5, 0.5, 0.0, 0.5};
  const Mask v = depth_validity(mono, alpha);
  EXPECT_EQ(v.data[0], 1);  // finite, covered
  EXPECT_EQ(v.data[1], 0);  // NaN prior
  EXPECT_EQ(v.data[2], 0);  // no coverage
  EXPECT_EQ(v.data[3], 1);
}

// ---------------------------------------------------------------------------
// Depth L1
// ---------------------------------------------------------------------------

TEST(DepthL1, PerfectAlignmentGivesZero) {
  Rng rng(17);
  const Image rendered = random_field(rng, 6, 6, 1, 1.0, 4.0);
  Image mono(6, 6, 1);
  AlignmentResult align;
  align.w = 1.3;
  align.q = -0.2;
  for (size_t i = 0; i < mono.data.size(); ++i)
    mono.data[i] = align.w * rendered.data[i] + align.q;
  Image grad(6, 6, 1);
  const double loss = depth_l1_loss(rendered, mono, align, Image(6, 6, 1, 1.0),
                                    Mask(6, 6, 1), &grad);
  EXPECT_EQ(loss, 0.0);
  for (double g : grad.data) EXPECT_EQ(g, 0.0);
}

TEST(DepthL1, HandComputedValueAndGradient) {
  Image rendered(2, 2, 1), mono(2, 2, 1);
  rendered.data = {1.0, 2.0, 3.0, 4.0};
  mono.data = {1.5, 2.0, 2.0, 4.0};
  AlignmentResult align;  // identity fit
  Image grad(2, 2, 1);
  const double loss = depth_l1_loss(rendered, mono, align, Image(2, 2, 1, 1.0),
                                    Mask(2, 2, 1), &grad);
  // residuals: -0.5, 0, 1, 0 -> (0.5 + 1) / 4
  EXPECT_NEAR(loss, 0.375, 1e-15);
  EXPECT_NEAR(grad.data[0], -0.25, 1e-15);
  EXPECT_EQ(grad.data[1], 0.0);
  EXPECT_NEAR(grad.data[2], 0.25, 1e-15);
  EXPECT_EQ(grad.data[3], 0.0);
}

TEST(DepthL1, InvalidPixelValuesCannotLeakIn) {
  Rng rng(19);
  const Image rendered = random_field(rng, 5, 5, 1, 1.0, 3.0);
  Image mono = random_field(rng, 5, 5, 1, 1.0, 3.0);
  Mask validity(5, 5, 1);
  validity.data[7] = 0;
  AlignmentResult align;
  const double base =
      depth_l1_loss(rendered, mono, align, Image(5, 5, 1, 1.0), validity);
  mono.data[7] = kNaN;  // stored under validity 0: must not matter
  const double poisoned =
      depth_l1_loss(rendered, mono, align, Image(5, 5, 1, 1.0), validity);
  EXPECT_EQ(base, poisoned);
}

TEST(DepthL1, GradientMatchesFiniteDifferences) {
  Rng rng(23);
  Image rendered = random_field(rng, 6, 5, 1, 1.0, 4.0);
  const Image mono = random_field(rng, 6, 5, 1, 1.0, 4.0);
  Image weights(6, 5, 1);
  for (double& v : weights.data) v = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.5, 2.0);
  Mask validity(6, 5, 1);
  validity.data[4] = 0;
  AlignmentResult align;
  align.w = 1.2;
  align.q = 0.1;

  Image grad(6, 5, 1);
  depth_l1_loss(rendered, mono, align, weights, validity, &grad);
  const auto loss = [&]() {
    return depth_l1_loss(rendered, mono, align, weights, validity);
  };
  for (size_t i = 0; i < rendered.data.size(); ++i) {
    const double fd = oracle::central_diff(loss, &rendered.data[i]);
    EXPECT_TRUE(oracle::grads_match(grad.data[i], fd)) << "pixel " << i;
  }
}

// ---------------------------------------------------------------------------
// Depth total variation
// ---------------------------------------------------------------------------

TEST(DepthTv, LinearRampCostsItsSlope) {
  const int w = 8, h = 8;
  const double slope = 0.37;
  Image rendered(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) rendered.at(y, x) = slope * x;
  const Image mono(w, h, 1);  // zero prior, identity fit
  const double loss = depth_tv_loss(rendered, mono, AlignmentResult{},
                                    Image(w, h, 1, 1.0), Mask(w, h, 1));
  // Every contributing pixel pays |dx| = slope and |dy| = 0; the mean over
  // contributors is the slope itself, independent of image size.
  EXPECT_NEAR(loss, slope, 1e-12);
}

TEST(DepthTv, NormalizerCountsValidityNotWeights) {
  const int w = 6, h = 6;
  const double slope = 0.5;
  Image rendered(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) rendered.at(y, x) = slope * x;
  const Image mono(w, h, 1);
  Image weights(w, h, 1, 1.0);
  size_t weighted = 0, contributing = 0;
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x + 1 < w; ++x) {
      ++contributing;
      if ((x + y) % 2 == 0) {
        weights.at(y, x) = 0.0;
      } else {
        ++weighted;
      }
    }
  const double loss = depth_tv_loss(rendered, mono, AlignmentResult{}, weights,
                                    Mask(w, h, 1));
  // Zero-weight pixels still count in the normalizer: the denominator is the
  // validity pattern's contributor count, not the weighted count.
  EXPECT_NEAR(loss, slope * weighted / static_cast<double>(contributing), 1e-12);
}

TEST(DepthTv, GradientMatchesFiniteDifferences) {
  Rng rng(29);
  Image rendered = random_field(rng, 7, 6, 1, 1.0, 4.0);
  const Image mono = random_field(rng, 7, 6, 1, 1.0, 4.0);
  Image weights(7, 6, 1);
  for (double& v : weights.data) v = rng.uniform() < 0.25 ? 0.0 : rng.uniform(0.5, 2.0);
  Mask validity(7, 6, 1);
  validity.data[10] = 0;
  validity.data[30] = 0;
  AlignmentResult align;
  align.w = 0.9;
  align.q = -0.3;

  Image grad(7, 6, 1);
  depth_tv_loss(rendered, mono, align, weights, validity, &grad);
  const auto loss = [&]() {
    return depth_tv_loss(rendered, mono, align, weights, validity);
  };
  for (size_t i = 0; i < rendered.data.size(); ++i) {
    const double fd = oracle::central_diff(loss, &rendered.data[i]);
    EXPECT_TRUE(oracle::grads_match(grad.data[i], fd))
        << "pixel " << i << ": " << grad.data[i] << " vs " << fd;
  }
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

TEST(Ssim, IdenticalImagesScoreExactlyOne) {
  Rng rng(31);
  const Image x = random_field(rng, 16, 12, 3);
  const SsimCache cache = ssim_map(x, x, Mask(16, 12, 1));
  for (double v : cache.map.data) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(ssim_mean(cache), 1.0);
}

TEST(Ssim, MatchesStraightLineOracle) {
  Rng rng(37);
  const Image x = random_field(rng, 20, 14, 3);
  const Image y = random_field(rng, 20, 14, 3);
  Mask valid(20, 14, 1);
  for (auto& v : valid.data) v = rng.uniform() < 0.85 ? 1 : 0;
  const SsimCache cache = ssim_map(x, y, valid);
  const Image ref = oracle::reference_ssim_map(x, y, valid);
  for (size_t i = 0; i < ref.data.size(); ++i)
    EXPECT_NEAR(cache.map.data[i], ref.data[i], 1e-9) << "pixel " << i;
}

TEST(Ssim, InvariantToValuesUnderInvalidPixels) {
  Rng rng(41);
  Image x = random_field(rng, 15, 15, 3);
  const Image y = random_field(rng, 15, 15, 3);
  Mask valid(15, 15, 1);
  for (int y0 = 4; y0 < 9; ++y0)
    for (int x0 = 6; x0 < 11; ++x0) valid.at(y0, x0) = 0;
  const SsimCache before = ssim_map(x, y, valid);
  for (int y0 = 4; y0 < 9; ++y0)
    for (int x0 = 6; x0 < 11; ++x0)
      for (int c = 0; c < 3; ++c) x.at(y0, x0, c) = 123.0 + c;
  const SsimCache after = ssim_map(x, y, valid);
  for (size_t i = 0; i < before.map.data.size(); ++i)
    EXPECT_EQ(before.map.data[i], after.map.data[i]);
}

TEST(Ssim, BackwardMatchesFiniteDifferences) {
  Rng rng(43);
  Image x = random_field(rng, 9, 8, 1);
  const Image y = random_field(rng, 9, 8, 1);
  Mask valid(9, 8, 1);
  valid.data[3] = 0;
  valid.data[40] = 0;
  Image upstream(9, 8, 1);
  for (double& v : upstream.data) v = rng.uniform(-1.0, 1.0);

  const SsimCache cache = ssim_map(x, y, valid);
  const Image grad = ssim_backward(x, y, cache, upstream);

  const auto objective = [&]() {
    const SsimCache c = ssim_map(x, y, valid);
    double acc = 0.0;
    for (size_t i = 0; i < c.map.data.size(); ++i)
      acc += upstream.data[i] * c.map.data[i];
    return acc;
  };
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double fd = oracle::central_diff(objective, &x.data[i]);
    EXPECT_TRUE(oracle::grads_match(grad.data[i], fd, 1e-3, 1e-7))
        << "pixel " << i << ": " << grad.data[i] << " vs " << fd;
  }
}

// ---------------------------------------------------------------------------
// Color loss
// ---------------------------------------------------------------------------

TEST(ColorLoss, IdenticalImagesCostNothing) {
  Rng rng(47);
  const Image img = random_field(rng, 12, 12, 3);
  LossWeights lw;
  const double loss =
      color_loss(img, img, Image(12, 12, 1, 1.0), Mask(12, 12, 1), lw);
  EXPECT_EQ(loss, 0.0);
}

TEST(ColorLoss, UniformImagesMatchClosedForm) {
  const double u = 0.7, t = 0.4;
  Image rendered(10, 10, 3, u), target(10, 10, 3, t);
  LossWeights lw;
  const double loss =
      color_loss(rendered, target, Image(10, 10, 1, 1.0), Mask(10, 10, 1), lw);
  // Renormalized windows make the moments exact even at borders, so the map
  // is constant: (2ut + C1) / (u^2 + t^2 + C1); variances cancel to C2/C2.
  const double ssim = (2.0 * u * t + 1e-4) / (u * u + t * t + 1e-4);
  const double expected =
      (1.0 - lw.lambda_ssim) * std::abs(u - t) + lw.lambda_ssim * (1.0 - ssim);
  EXPECT_NEAR(loss, expected, 1e-12);
}

TEST(ColorLoss, WeightedPixelWithoutSupportThrows) {
  Image rendered(8, 8, 3, 0.5), target(8, 8, 3, 0.5);
  Mask support(8, 8, 1);
  support.at(2, 2) = 0;  // weighted but excluded from the structural windows
  EXPECT_THROW(color_loss(rendered, target, Image(8, 8, 1, 1.0), support,
                          LossWeights{}),
               std::invalid_argument);
}

TEST(ColorLoss, UnsupportedContentCannotInfluence) {
  Rng rng(53);
  Image rendered = random_field(rng, 14, 14, 3);
  Image target = random_field(rng, 14, 14, 3);
  Image weights(14, 14, 1, 1.0);
  Mask support(14, 14, 1);
  for (int y = 5; y < 9; ++y)
    for (int x = 5; x < 9; ++x) {
      support.at(y, x) = 0;
      weights.at(y, x) = 0.0;
    }
  LossWeights lw;
  Image grad_before(14, 14, 3);
  const double before =
      color_loss(rendered, target, weights, support, lw, &grad_before);
  for (int y = 5; y < 9; ++y)
    for (int x = 5; x < 9; ++x)
      for (int c = 0; c < 3; ++c) {
        rendered.at(y, x, c) = 42.0;
        target.at(y, x, c) = -7.0;
      }
  Image grad_after(14, 14, 3);
  const double after =
      color_loss(rendered, target, weights, support, lw, &grad_after);
  EXPECT_EQ(before, after);
  for (size_t i = 0; i < grad_before.data.size(); ++i)
    EXPECT_EQ(grad_before.data[i], grad_after.data[i]);
}

TEST(ColorLoss, GradientMatchesFiniteDifferences) {
  Rng rng(59);
  Image rendered = random_field(rng, 9, 8, 3);
  Image target(9, 8, 3);
  for (size_t i = 0; i < target.data.size(); ++i) {
    // Keep the L1 residual away from its kink at zero.
    const double shift = rng.uniform(0.02, 0.15) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    target.data[i] = rendered.data[i] + shift;
  }
  Image weights(9, 8, 1);
  for (double& v : weights.data) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform(0.5, 1.5);
  const Mask support(9, 8, 1);
  LossWeights lw;

  Image grad(9, 8, 3);
  color_loss(rendered, target, weights, support, lw, &grad);
  const auto loss = [&]() {
    return color_loss(rendered, target, weights, support, lw);
  };
  for (size_t i = 0; i < rendered.data.size(); ++i) {
    const double fd = oracle::central_diff(loss, &rendered.data[i]);
    EXPECT_TRUE(oracle::grads_match(grad.data[i], fd, 1e-3, 1e-7))
        << "component " << i << ": " << grad.data[i] << " vs " << fd;
  }
}

// ---------------------------------------------------------------------------
// Total
// ---------------------------------------------------------------------------

TEST(TotalLoss, CombinesTermsWithConfiguredWeights) {
  LossWeights lw;
  lw.lambda_depth = 0.5;
  lw.lambda_tv = 0.1;
  LossReport report;
  const double total = total_loss(1.25, 0.5, 0.3, lw, 4, &report);
  EXPECT_NEAR(total, 0.5 * 0.5 + 0.1 * 0.3 + 1.25, 1e-15);
  EXPECT_EQ(report.view_id, 4);
  EXPECT_EQ(report.color, 1.25);
  EXPECT_EQ(report.depth, 0.5);
  EXPECT_EQ(report.tv, 0.3);
  EXPECT_EQ(report.total, total);
}

TEST(TotalLoss, NonFiniteTermNamesItselfAndTheView) {
  LossWeights lw;
  try {
    total_loss(kNaN, 0.0, 0.0, lw, 7);
    FAIL() << "expected throw";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("color"), std::string::npos);
    EXPECT_NE(msg.find("7"), std::string::npos);
  }
}
