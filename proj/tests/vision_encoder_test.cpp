// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "invllava/synth_data.hpp"
#include "invllava/vision_encoder.hpp"

using namespace invllava;

TEST(VisionEncoder, ZeroImageEncodesToZero) {
  VisionEncoder enc(kPatchRawDim, 32, 16, 7);
  PatchGrid img{16, kPatchRawDim, std::vector<double>(16 * kPatchRawDim, 0.0)};
  for (auto stage : {VisionStage::final, VisionStage::penultimate, VisionStage::both}) {
    Tensor v = enc.encode(img, stage);
    for (double x : v.values()) EXPECT_EQ(x, 0.0);
  }
}

TEST(VisionEncoder, HdModeDoublesWidth) {
  ModelConfig cfg;
  cfg.d_v = 32;
  Rng rng(1);
  PatchGrid img = testutil::random_image(16, rng);
  VisionEncoder plain = VisionEncoder::for_config(cfg, kPatchRawDim);
  EXPECT_EQ(plain.encode(img, vision_stage_for(cfg)).shape(), (Shape{32, 16}));

  cfg.d_v = 64;
  cfg.hd_mode = true;
  VisionEncoder hd = VisionEncoder::for_config(cfg, kPatchRawDim);
  EXPECT_EQ(hd.encoder_dim(), 32u);
  EXPECT_EQ(vision_stage_for(cfg), VisionStage::both);
  EXPECT_EQ(hd.encode(img, vision_stage_for(cfg)).shape(), (Shape{64, 16}));
}

TEST(VisionEncoder, MatchesExplicitLoops) {
  VisionEncoder enc(kPatchRawDim, 32, 16, 7);
  Rng rng(99);
  PatchGrid img = testutil::random_image(16, rng);
  for (auto stage : {VisionStage::final, VisionStage::penultimate, VisionStage::both}) {
    const refimpl::Mat want = refimpl::encode(enc, img, stage);
    const Tensor got = enc.encode(img, stage);
    EXPECT_LT(refimpl::max_abs_diff(want, got), 1e-14);
  }
  // Column 0 specifically: patch 0 through both stages.
  const refimpl::Mat want = refimpl::encode(enc, img, VisionStage::final);
  const Tensor got = enc.encode(img, VisionStage::final);
  for (std::size_t r = 0; r < 32; ++r) EXPECT_NEAR(got(r, 0), want[r][0], 1e-14);
}

TEST(VisionEncoder, SeedDeterminesWeights) {
  VisionEncoder a(kPatchRawDim, 8, 4, 7), b(kPatchRawDim, 8, 4, 7), c(kPatchRawDim, 8, 4, 8);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
}

TEST(VisionEncoder, WrongPatchCountRejected) {
  VisionEncoder enc(kPatchRawDim, 8, 4, 7);
  Rng rng(2);
  EXPECT_THROW(enc.encode(testutil::random_image(3, rng), VisionStage::final), DimensionError);
  PatchGrid bad{4, 5, std::vector<double>(20, 0.0)};
  EXPECT_THROW(enc.encode(bad, VisionStage::final), DimensionError);
}

TEST(VisionEncoder, NeverTrainable) {
  VisionEncoder enc(kPatchRawDim, 8, 4, 7);
  Rng rng(3);
  EXPECT_FALSE(enc.encode(testutil::random_image(4, rng), VisionStage::final).requires_grad());
}
