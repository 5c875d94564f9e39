#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "crcnet/model.hpp"
#include "grad_check.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace crcnet;
using namespace crcnet::model;
using crcnet::testing::max_abs_diff;
using crcnet::testing::random_sample;
using crcnet::testing::random_tensor;

namespace {

ModelParams small_params(std::uint64_t seed = 1, std::size_t channels = 8) {
  ModelConfig cfg;
  cfg.channels = channels;
  return init_params(cfg, seed);
}

bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TEST(Encoder, StrideArithmetic) {
  const ModelParams p = small_params();
  std::mt19937_64 rng(1);
  EXPECT_EQ(siamese_encode(p, random_tensor({3, 48, 48}, rng, 0, 1)).shape(), (Shape{8, 6, 6}));
  EXPECT_EQ(siamese_encode(p, random_tensor({3, 32, 16}, rng, 0, 1)).shape(), (Shape{8, 4, 2}));
  EXPECT_THROW(siamese_encode(p, Tensor({3, 20, 16})), ShapeError);
  EXPECT_THROW(siamese_encode(p, Tensor({1, 16, 16})), ShapeError);
}

TEST(Encoder, WeightSharingAndMidLevelHook) {
  const ModelParams p = small_params(2);
  std::mt19937_64 rng(2);
  const Tensor img = random_tensor({3, 48, 48}, rng, 0, 1);
  const Tensor a = siamese_encode(p, img), b = siamese_encode(p, img.clone());
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
  EXPECT_GT(max_abs_diff(a, siamese_encode(p, img, false)), 1e-6);
}

TEST(Encoder, DepthTwoAddsStrideOneConvs) {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.stage_depth = 2;
  const ModelParams p = init_params(cfg, 3);
  std::size_t extra = 0;
  for (const auto& [name, t] : p.named()) extra += name.find("stage1b") != std::string::npos;
  EXPECT_EQ(extra, 2u);
  EXPECT_EQ(siamese_encode(p, Tensor({3, 48, 48}, 0.5)).shape(), (Shape{8, 6, 6}));
  cfg.stage_depth = 3;
  EXPECT_THROW(init_params(cfg, 3), std::invalid_argument);
}

TEST(CrossReference, IdenticalInputsGiveIdenticalOutputsAndSquaredGate) {
  const ModelParams p = small_params(3);
  std::mt19937_64 rng(3);
  const Tensor f = random_tensor({8, 6, 6}, rng, 0, 2);
  const auto out = cross_reference(p.cross_ref, f, f);
  EXPECT_EQ(max_abs_diff(out.g_support, out.g_query), 0.0);
  const Tensor branch = model::detail::channel_importance(p.cross_ref, f, GateActivation::sigmoid);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out.gate[i], branch[i] * branch[i], 1e-15);
}

TEST(CrossReference, SigmoidGateContracts) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ModelParams p = small_params(seed);
    std::mt19937_64 rng(seed);
    const Tensor fs = random_tensor({8, 3, 3}, rng, -2, 2), fq = random_tensor({8, 3, 3}, rng, -2, 2);
    const auto out = cross_reference(p.cross_ref, fs, fq);
    for (double g : out.gate.values()) {
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
    for (std::size_t i = 0; i < fs.size(); ++i) {
      EXPECT_LE(std::abs(out.g_support[i]), std::abs(fs[i]));
      EXPECT_LE(std::abs(out.g_query[i]), std::abs(fq[i]));
    }
  }
}

TEST(CrossReference, HandComputedTwoChannelCase) {
  CrossRefParams p;
  p.fc1_weight = Tensor({1, 2}, std::vector<double>{0.5, -0.25});
  p.fc1_bias = Tensor({1, 1}, std::vector<double>{0.1});
  p.fc2_weight = Tensor({2, 1}, std::vector<double>{2.0, -1.0});
  p.fc2_bias = Tensor({2, 1}, std::vector<double>{0.0, 0.3});
  const Tensor fs({2, 1, 2}, std::vector<double>{1.0, 3.0, 2.0, 4.0});
  const Tensor fq({2, 1, 2}, std::vector<double>{0.0, 2.0, -1.0, 1.0});
  // Support: means (2, 3); hidden relu(0.5*2 - 0.25*3 + 0.1) = 0.35; logits (0.7, -0.05).
  // Query: means (1, 0); hidden relu(0.5 + 0.1) = 0.6; logits (1.2, -0.3).
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const double g0 = sig(0.7) * sig(1.2), g1 = sig(-0.05) * sig(-0.3);
  const auto out = cross_reference(p, fs, fq);
  EXPECT_NEAR(out.gate[0], g0, 1e-12);
  EXPECT_NEAR(out.gate[1], g1, 1e-12);
  EXPECT_NEAR(out.g_support[1], 3.0 * g0, 1e-12);
  EXPECT_NEAR(out.g_query[2], -1.0 * g1, 1e-12);
  EXPECT_THROW(cross_reference(p, fs, Tensor({2, 2, 1})), ShapeError);
}

TEST(CrossReference, AlternativeActivations) {
  const ModelParams p = small_params(4);
  std::mt19937_64 rng(4);
  const Tensor f = random_tensor({8, 3, 3}, rng, 0, 1);
  const auto soft = cross_reference(p.cross_ref, f, f, GateActivation::softmax);
  double s = 0.0;
  for (double g : soft.gate.values()) s += std::sqrt(g);
  EXPECT_NEAR(s, 1.0, 1e-12);
  const auto rel = cross_reference(p.cross_ref, f, f, GateActivation::relu);
  for (double g : rel.gate.values()) EXPECT_GE(g, 0.0);
}

TEST(Subtask, ShapeAndZeroPropagation) {
  ModelParams p = small_params(5);
  EXPECT_EQ(subtask_decode(p.subtask, Tensor({8, 6, 6}, 0.3)).shape(), (Shape{2, 6, 6}));
  for (double& v : p.subtask.head.bias.data()) v = 0.0;
  const Tensor logits = subtask_decode(p.subtask, Tensor({8, 4, 4}));
  for (double v : logits.values()) EXPECT_EQ(v, 0.0);
  const Tensor probs = softmax_channels(logits);
  for (double v : probs.values()) EXPECT_EQ(v, 0.5);
}

TEST(ForegroundPool, FullMaskSinglePositionAndHalfPlane) {
  std::mt19937_64 rng(6);
  const Tensor f = random_tensor({4, 6, 6}, rng);
  const Tensor full = foreground_avg_pool(f, Tensor::ones({48, 48}));
  const Tensor gap = global_avg_pool(f);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(full[i], gap[i]);

  // A mask already at feature resolution picks out one position.
  Tensor one({6, 6});
  one.data()[2 * 6 + 4] = 1.0;
  const Tensor v = foreground_avg_pool(f, one);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(v[c], f[c * 36 + 2 * 6 + 4]);

  Tensor plane({1, 4, 4});
  Tensor left({4, 4});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      plane.data()[y * 4 + x] = x < 2 ? 1.0 : 3.0;
      left.data()[y * 4 + x] = x < 2 ? 1.0 : 0.0;
    }
  EXPECT_EQ(foreground_avg_pool(plane, left).item(), 1.0);
}

TEST(ForegroundPool, EmptyDownsampledMaskFallsBack) {
  std::mt19937_64 rng(7);
  const Tensor f = random_tensor({3, 6, 6}, rng);
  Tensor speck({48, 48});
  speck.data()[5 * 48 + 5] = 1.0;
  const Tensor v = foreground_avg_pool(f, speck), gap = global_avg_pool(f);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(v[i], gap[i]);
}

TEST(GlobalCondition, ShapeAndResidualIdentity) {
  ModelParams p = small_params(8, 4);
  std::mt19937_64 rng(8);
  const Tensor f = random_tensor({4, 3, 3}, rng, 0.0, 1.0);
  const Tensor v = random_tensor({4, 1, 1}, rng);
  EXPECT_EQ(global_condition(p.condition, f, v).shape(), (Shape{4, 3, 3}));
  for (double& w : p.condition.global2.weight.data()) w = 0.0;
  for (double& w : p.condition.global2.bias.data()) w = 0.0;
  for (double& w : p.condition.global_skip.weight.data()) w = 0.0;
  for (double& w : p.condition.global_skip.bias.data()) w = 0.0;
  for (std::size_t c = 0; c < 4; ++c) p.condition.global_skip.weight.data()[c * 4 + c] = 1.0;
  EXPECT_EQ(max_abs_diff(global_condition(p.condition, f, v), f), 0.0);
  EXPECT_THROW(global_condition(p.condition, f, Tensor({3, 1, 1})), ShapeError);
}

TEST(LocalCondition, RowsAreStochastic) {
  for (auto mode : {MaskingMode::multiplicative, MaskingMode::strict})
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const ModelParams p = small_params(seed);
      std::mt19937_64 rng(seed);
      const Tensor fq = random_tensor({8, 6, 6}, rng, 0, 1), fs = random_tensor({8, 6, 6}, rng, 0, 1);
      const auto att = local_attention(p.condition, fq, fs, crcnet::testing::random_blob_mask(48, 48, rng), mode);
      EXPECT_TRUE(att.masked);
      for (std::size_t i = 0; i < 36; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 36; ++j) s += att.attention[i * 36 + j];
        ASSERT_NEAR(s, 1.0, 1e-9);
      }
    }
}

TEST(LocalCondition, IdentityTransformsGiveSymmetricSimilarityAndConvexMix) {
  ModelParams p = small_params(9, 4);
  for (Conv* c : {&p.condition.theta, &p.condition.delta}) {
    for (double& w : c->weight.data()) w = 0.0;
    for (double& w : c->bias.data()) w = 0.0;
    for (std::size_t k = 0; k < 4; ++k) c->weight.data()[k * 4 + k] = 1.0;
  }
  std::mt19937_64 rng(9);
  const Tensor f = random_tensor({4, 3, 3}, rng, 0.0, 1.0);
  const auto att = local_attention(p.condition, f, f, Tensor::ones({3, 3}), MaskingMode::multiplicative);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(att.similarity[i * 9 + j], att.similarity[j * 9 + i], 1e-15);
  for (std::size_t c = 0; c < 4; ++c) {
    double lo = 1e9, hi = -1e9;
    for (std::size_t j = 0; j < 9; ++j) lo = std::min(lo, f[c * 9 + j]), hi = std::max(hi, f[c * 9 + j]);
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_GE(att.output[c * 9 + i], lo - 1e-12);
      EXPECT_LE(att.output[c * 9 + i], hi + 1e-12);
    }
  }
}

TEST(LocalCondition, StrictModeIgnoresBackgroundColumns) {
  const ModelParams p = small_params(10, 4);
  std::mt19937_64 rng(10);
  const Tensor fq = random_tensor({4, 2, 2}, rng), fs = random_tensor({4, 2, 2}, rng);
  const Tensor mask({2, 2}, std::vector<double>{0, 1, 0, 0});
  const auto att = local_attention(p.condition, fq, fs, mask, MaskingMode::strict);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(att.attention[i * 4 + 1], 1.0, 1e-12);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(att.output[c * 4 + i], fs[c * 4 + 1], 1e-12);
}

TEST(LocalCondition, MatchesDoubleLoopOracleOnTwoByTwoGrids) {
  for (auto mode : {MaskingMode::multiplicative, MaskingMode::strict})
    for (std::uint64_t seed = 0; seed < 50; ++seed)
      EXPECT_LE(crcnet::testing::attention_trial(seed, mode), 1e-10) << "seed " << seed;
}

TEST(LocalCondition, DegenerateMaskFallsBackToUnmasked) {
  const ModelParams p = small_params(11, 4);
  std::mt19937_64 rng(11);
  const Tensor fq = random_tensor({4, 2, 2}, rng), fs = random_tensor({4, 2, 2}, rng);
  const auto att = local_attention(p.condition, fq, fs, Tensor({16, 16}), MaskingMode::strict);
  EXPECT_FALSE(att.masked);
  for (double v : att.attention.values()) EXPECT_GT(v, 0.0);
}

TEST(FuseConditions, ChannelContract) {
  const Tensor g({4, 3, 3}, 1.0), l({4, 3, 3}, 2.0), r({4, 3, 3}, 3.0);
  EXPECT_EQ(fuse_conditions(g, l, r).shape(), (Shape{8, 3, 3}));
  EXPECT_EQ(max_abs_diff(fuse_conditions(g, Tensor(), r), g), 0.0);
  EXPECT_EQ(max_abs_diff(fuse_conditions(Tensor(), l, r), l), 0.0);
  EXPECT_EQ(max_abs_diff(fuse_conditions(Tensor(), Tensor(), r), r), 0.0);
  EXPECT_THROW(fuse_conditions(g, Tensor({4, 3, 2}), r), ShapeError);
}

TEST(Refine, StepRangeAndDeterminism) {
  const ModelParams p = small_params(12);
  std::mt19937_64 rng(12);
  const Tensor feats = random_tensor({16, 6, 6}, rng, 0, 1);
  const Tensor zero({1, 6, 6});
  const RefineStep s1 = mask_refine_step(p.refine, feats, zero);
  const RefineStep s2 = mask_refine_step(p.refine, feats, s1.cache);
  const RefineStep s2b = mask_refine_step(p.refine, feats, mask_refine_step(p.refine, feats, zero).cache);
  EXPECT_EQ(max_abs_diff(s2.logits, s2b.logits), 0.0);
  const Tensor sm = softmax_channels(s2.logits);
  for (std::size_t i = 0; i < 36; ++i) {
    EXPECT_GE(s2.cache[i], 0.0);
    EXPECT_LE(s2.cache[i], 1.0);
    EXPECT_NEAR(sm[i] + sm[36 + i], 1.0, 1e-12);
  }
  EXPECT_THROW(mask_refine_step(p.refine, feats, Tensor({1, 5, 6})), ShapeError);
}

TEST(Refine, OneIterationIsOneStepAndTenAreRecorded) {
  const ModelParams p = small_params(13);
  std::mt19937_64 rng(13);
  const Tensor feats = random_tensor({16, 6, 6}, rng, 0, 1);
  const auto one = mask_refine(p.refine, feats, 1);
  const auto step = mask_refine_step(p.refine, feats, Tensor({1, 6, 6}));
  EXPECT_EQ(max_abs_diff(one.logits, step.logits), 0.0);
  EXPECT_EQ(max_abs_diff(one.probability, step.cache), 0.0);
  EXPECT_EQ(p.config.refine_iterations, 10u);
  const auto ten = mask_refine(p.refine, feats, 10, {false, true});
  ASSERT_EQ(ten.per_iteration.size(), 10u);
  EXPECT_EQ(max_abs_diff(ten.per_iteration[0], step.cache), 0.0);
  EXPECT_EQ(max_abs_diff(ten.per_iteration[9], ten.probability), 0.0);
  EXPECT_THROW(mask_refine(p.refine, feats, 0), std::invalid_argument);
}

TEST(ForwardPair, ShapesAndFiniteness) {
  const ModelParams p = small_params(14);
  std::mt19937_64 rng(14);
  const auto s = random_sample(48, rng), q = random_sample(48, rng);
  const auto out = forward_pair(p, s, q.image);
  for (const Tensor* t : {&out.qm, &out.sm, &out.qm_sub, &out.sm_sub}) {
    EXPECT_EQ(t->shape(), (Shape{2, 6, 6}));
    EXPECT_TRUE(all_finite(*t));
  }
  EXPECT_EQ(out.query_probability.shape(), (Shape{1, 6, 6}));
  EXPECT_THROW(forward_pair(p, s, Tensor({3, 40, 48})), ShapeError);
}

TEST(ForwardPair, SamePairOnBothSidesGivesEqualBranches) {
  const ModelParams p = small_params(15);
  std::mt19937_64 rng(15);
  const auto s = random_sample(32, rng);
  const auto out = forward_pair(p, s, s.image);
  EXPECT_EQ(max_abs_diff(out.qm, out.sm), 0.0);
  EXPECT_EQ(max_abs_diff(out.qm_sub, out.sm_sub), 0.0);
}

TEST(ForwardPair, AblationSwitches) {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.use_cross_reference = false;
  cfg.use_local = false;
  const ModelParams p = init_params(cfg, 16);
  std::mt19937_64 rng(16);
  const auto s = random_sample(32, rng), q = random_sample(32, rng);
  const auto out = forward_pair(p, s, q.image);
  EXPECT_FALSE(out.qm_sub.defined());
  EXPECT_FALSE(out.sm_sub.defined());
  EXPECT_EQ(p.refine.input.weight.dim(1), 8u);
  ForwardOptions only;
  only.query_only = true;
  EXPECT_FALSE(forward_pair(p, s, q.image, only).sm.defined());
}

TEST(Invariants, RandomizedRangesAndFiniteness) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    ModelConfig cfg;
    cfg.channels = 8;
    cfg.refine_iterations = 3;
    const ModelParams p = init_params(cfg, seed);
    std::mt19937_64 rng(seed);
    const auto s = random_sample(16, rng), q = random_sample(16, rng);
    ForwardOptions fo;
    fo.record_iterations = true;
    const auto out = forward_pair(p, s, q.image, fo);
    for (const Tensor& m : out.query_iterations)
      for (double v : m.values()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    for (const Tensor* t : {&out.qm, &out.sm, &out.qm_sub, &out.sm_sub}) ASSERT_TRUE(all_finite(*t));
  }
}
