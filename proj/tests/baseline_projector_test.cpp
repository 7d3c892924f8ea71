// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "invllava/baseline_projector.hpp"
#include "invllava/trainer.hpp"

using namespace invllava;

namespace {

struct MicroBaseline {
  BaseLM base;
  VisionEncoder encoder;
  LlavaBaseline model;
  MicroBaseline(const ModelConfig& c, bool linear)
      : base(c), encoder(VisionEncoder::for_config(c, kPatchRawDim)), model(base, encoder, linear) {}
};

}  // namespace

TEST(Projector, ZeroInputZeroBiasGivesZero) {
  Rng rng(1);
  ProjectorWeights w = ProjectorWeights::init(4, 6, false, rng);
  w.w2 = gaussian({6, 6}, 1.0, rng);
  Tensor out = project_visual_to_text(Tensor::zeros({4, 3}), w);
  EXPECT_EQ(out.shape(), (Shape{6, 3}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Projector, LinearIdentityPassesFeaturesThrough) {
  Rng rng(2);
  ProjectorWeights w = ProjectorWeights::init(5, 5, true, rng);
  w.w1 = Tensor::identity(5);
  Tensor v = gaussian({5, 4}, 1.0, rng);
  Tensor out = project_visual_to_text(v, w);
  for (std::size_t i = 0; i < v.numel(); ++i) EXPECT_EQ(out[i], v[i]);
}

TEST(Projector, RandomSmallCaseAgainstLoops) {
  Rng rng(3);
  ProjectorWeights w = ProjectorWeights::init(2, 3, false, rng);
  w.w2 = gaussian({3, 3}, 1.0, rng);
  w.b1 = gaussian({3}, 1.0, rng);
  w.b2 = gaussian({3}, 1.0, rng);
  Tensor v = gaussian({2, 2}, 1.0, rng);
  Tensor out = project_visual_to_text(v, w);
  const double k = std::sqrt(2.0 / M_PI);
  for (std::size_t c = 0; c < 2; ++c) {
    double hidden[3];
    for (std::size_t r = 0; r < 3; ++r) {
      const double a = w.w1(r, 0) * v(0, c) + w.w1(r, 1) * v(1, c) + w.b1[r];
      hidden[r] = 0.5 * a * (1.0 + std::tanh(k * (a + 0.044715 * a * a * a)));
    }
    for (std::size_t r = 0; r < 3; ++r) {
      double o = w.b2[r];
      for (std::size_t t = 0; t < 3; ++t) o += w.w2(r, t) * hidden[t];
      EXPECT_NEAR(out(r, c), o, 1e-12);
    }
  }
}

TEST(Projector, ShapeMismatch) {
  Rng rng(4);
  ProjectorWeights w = ProjectorWeights::init(4, 6, false, rng);
  EXPECT_THROW(project_visual_to_text(Tensor::zeros({3, 2}), w), DimensionError);
}

TEST(Baseline, NoImageMatchesBaseModel) {
  ModelConfig cfg = testutil::micro_config();
  MicroBaseline m(cfg, false);
  const std::vector<TokenId> tokens{1, 9, 4};
  Tensor a = m.model.forward(nullptr, tokens);
  Tensor b = m.base.forward_text(tokens, 0);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Baseline, FreshProjectorContributesNothing) {
  ModelConfig cfg = testutil::micro_config();
  MicroBaseline m(cfg, false);
  Rng rng(5);
  PatchGrid img = testutil::random_image(cfg.n_patches, rng);
  const std::vector<TokenId> tokens{1, 9, 4, 2};
  Tensor a = m.model.forward(&img, tokens);
  Tensor b = m.base.forward_text(tokens, cfg.n_patches);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Baseline, MicroModelMatchesStraightLineOracle) {
  ModelConfig cfg = testutil::micro_config();
  for (bool linear : {false, true}) {
    MicroBaseline m(cfg, linear);
    testutil::perturb(m.model.trainable(), 0.3, linear ? 8 : 9);
    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
      PatchGrid img = testutil::random_image(cfg.n_patches, rng);
      const refimpl::Mat v = refimpl::encode(m.encoder, img, vision_stage_for(cfg));
      auto tokens = testutil::random_tokens(cfg.max_text_len, cfg.vocab_size, rng);
      Tensor got = m.model.forward(&img, tokens);
      EXPECT_LT(refimpl::max_abs_diff(refimpl::baseline_logits(m.model, v, tokens), got), 1e-10)
          << (linear ? "linear" : "mlp");
    }
  }
}

TEST(Baseline, LoraMirrorsInverseModel) {
  ModelConfig cfg = testutil::micro_config();
  BaseLM base(cfg);
  VisionEncoder enc = VisionEncoder::for_config(cfg, kPatchRawDim);
  InverseLlava inv(base, enc);
  LlavaBaseline bl(base, enc, false);
  ASSERT_EQ(inv.lora().size(), bl.lora().size());
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    EXPECT_EQ(inv.lora()[l].q.a.defined(), bl.lora()[l].q.a.defined());
    if (!bl.lora()[l].q.a.defined()) continue;
    const auto a = inv.lora()[l].q.a.values(), b = bl.lora()[l].q.a.values();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST(Baseline, ParameterPartition) {
  ModelConfig cfg;
  BaseLM base(cfg);
  VisionEncoder enc = VisionEncoder::for_config(cfg, kPatchRawDim);
  LlavaBaseline bl(base, enc, false);
  const ParameterCount pc = bl.count_parameters();
  const std::size_t projector = 64 * 32 + 64 + 64 * 64 + 64;
  const std::size_t lora = 3 * 2 * (4 * 64 + 64 * 4);
  EXPECT_EQ(pc.trainable, projector + lora);
  EXPECT_EQ(pc.frozen, base.parameter_count());
}

TEST(Baseline, MacEstimateMatchesInstrumentation) {
  ModelConfig cfg = testutil::micro_config();
  MicroBaseline m(cfg, false);
  Rng rng(7);
  PatchGrid img = testutil::random_image(cfg.n_patches, rng);
  const std::vector<TokenId> tokens{1, 2, 3, 4};
  NoGradGuard guard;
  reset_matmul_mac_count();
  m.model.forward(&img, tokens);
  EXPECT_EQ(matmul_mac_count(), m.model.mac_estimate(cfg.n_patches + tokens.size()).total);
}

TEST(SampleBudget, TableUnitCounts) {
  EXPECT_DOUBLE_EQ(sample_reduction_pct(665, 558 + 665), 45.6);
  EXPECT_DOUBLE_EQ(sample_reduction_pct(665, 665), 0.0);
}

TEST(SampleBudget, EmptyBudgetRejected) {
  EXPECT_THROW(sample_reduction_pct(0, 0), ContractError);
}
