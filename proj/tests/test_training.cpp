#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "crcnet/checkpoint.hpp"
#include "crcnet/training.hpp"
#include "grad_check.hpp"
#include "support.hpp"

using namespace crcnet;
using namespace crcnet::training;
using crcnet::testing::random_sample;

namespace {

model::ModelConfig small_model() {
  model::ModelConfig m;
  m.channels = 8;
  m.stage1_channels = 8;
  m.stage2_channels = 8;
  m.stage3_channels = 8;
  m.refine_iterations = 3;
  return m;
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST(Bce, HandValues) {
  Tensor p({2}, std::vector<double>{0.9, 0.2});
  Tensor y({2}, std::vector<double>{1.0, 0.0});
  EXPECT_NEAR(bce_loss(p, y).item(), -0.5 * (std::log(0.9) + std::log(0.8)), 1e-15);
  EXPECT_NEAR(bce_loss(p, y).item(), 0.1643, 5e-5);

  Tensor half({3, 3});
  for (double& v : half.data()) v = 0.5;
  std::mt19937_64 rng(1);
  Tensor labels = crcnet::testing::random_blob_mask(3, 3, rng);
  EXPECT_NEAR(bce_loss(half, labels).item(), std::log(2.0), 1e-15);
}

TEST(Bce, ClampBoundsPerfectPredictions) {
  Tensor p({4}, std::vector<double>{1.0, 0.0, 1.0, 0.0});
  Tensor y({4}, std::vector<double>{1.0, 0.0, 1.0, 0.0});
  const double loss = bce_loss(p, y).item();
  EXPECT_GE(loss, 0.0);
  EXPECT_LE(loss, 2e-7);
  Tensor wrong({4}, std::vector<double>{0.0, 1.0, 0.0, 1.0});
  EXPECT_NEAR(bce_loss(wrong, y).item(), -std::log(kBceEpsilon), 1e-6);
  EXPECT_TRUE(std::isfinite(bce_loss(wrong, y).item()));
  EXPECT_THROW(bce_loss(p, Tensor({2, 2})), ShapeError);
}

TEST(TotalLoss, LambdaComposition) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = crcnet::testing::random_tensor({2, 4, 4}, rng, -2.0, 2.0);
    const Tensor gt = crcnet::testing::random_blob_mask(4, 4, rng);
    model::PairOutputs out;
    out.qm = out.sm = out.qm_sub = out.sm_sub = logits;
    const auto lb = total_loss(out, gt, gt, 0.1);
    const double t = lb.l_qm;
    EXPECT_EQ(lb.l_sm, t);
    EXPECT_EQ(lb.l_qm_sub, t);
    EXPECT_NEAR(lb.total_value, 2.2 * t, 1e-12);

    const auto l0 = total_loss(out, gt, gt, 0.0);
    EXPECT_NEAR(l0.total_value, l0.l_qm + l0.l_sm, 1e-15);

    const Tensor other = crcnet::testing::random_blob_mask(4, 4, rng);
    const auto a = total_loss(out, gt, other, 0.3), b = total_loss(out, gt, other, 0.7);
    EXPECT_NEAR(b.total_value - a.total_value, 0.4 * (a.l_qm_sub + a.l_sm_sub), 1e-12);
  }
  model::PairOutputs out;
  out.qm = out.sm = Tensor({2, 2, 2});
  EXPECT_THROW(total_loss(out, Tensor({2, 2}), Tensor({2, 2}), -0.1), std::invalid_argument);
  EXPECT_NEAR(total_loss(out, Tensor({2, 2}), Tensor({2, 2}), 0.1).total_value, 2.0 * std::log(2.0), 1e-12);
}

TEST(TotalLoss, TargetsFollowModelDownsampling) {
  std::mt19937_64 rng(4);
  const Tensor gt = crcnet::testing::random_blob_mask(32, 32, rng);
  const Tensor small = model::downsample_mask(gt, 4, 4);
  Tensor logits({2, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) logits.data()[16 + i] = small[i] > 0.5 ? 30.0 : -30.0;
  model::PairOutputs out;
  out.qm = out.sm = logits;
  EXPECT_LE(total_loss(out, gt, gt, 0.1).total_value, 1e-6);
}

TEST(Augment, ImageAndMaskMoveTogether) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    data::ImageSample s;
    s.mask = crcnet::testing::random_blob_mask(32, 32, rng);
    s.image = Tensor({3, 32, 32});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 1024; ++i) s.image.data()[c * 1024 + i] = s.mask[i];
    const auto a = augment(s, Augmentation{}, rng);
    ASSERT_EQ(a.mask.shape(), s.mask.shape());
    ASSERT_EQ(a.image.shape(), s.image.shape());
    ASSERT_GT(data::count_foreground(a.mask), 0u);
    for (std::size_t i = 0; i < 1024; ++i) ASSERT_EQ(a.image[i] >= 0.5 ? 1.0 : 0.0, a.mask[i]) << trial << " " << i;
  }
}

TEST(Augment, FlipOnlyPreservesForegroundCount) {
  std::mt19937_64 rng(6);
  Augmentation flip_only;
  flip_only.crop = flip_only.scale = false;
  int flipped = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const auto s = random_sample(16, rng);
    const auto a = augment(s, flip_only, rng);
    ASSERT_EQ(data::count_foreground(a.mask), data::count_foreground(s.mask));
    if (!same_values(a.mask, s.mask)) {
      ++flipped;
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) ASSERT_EQ(a.mask[y * 16 + x], s.mask[y * 16 + 15 - x]);
    }
  }
  EXPECT_GT(flipped, 5);
  EXPECT_LT(flipped, 35);

  Augmentation none = flip_only;
  none.flip = false;
  const auto s = random_sample(16, rng);
  EXPECT_TRUE(same_values(augment(s, none, rng).image, s.image));
}

TEST(Train, EqualSeedsGiveIdenticalCheckpoints) {
  const auto ds = data::generate_synthetic_dataset(8, 4, 32, 3);
  const auto folds = data::make_fold_splits(ds.categories(), 4);
  TrainConfig cfg;
  cfg.model = small_model();
  cfg.epochs = 2;
  cfg.episodes_per_epoch = 6;
  const auto a = train(ds, folds[0], cfg), b = train(ds, folds[0], cfg);
  EXPECT_EQ(serialize_checkpoint(a.params), serialize_checkpoint(b.params));
  ASSERT_EQ(a.log.size(), 2u);
  EXPECT_EQ(a.log[1].step, 12u);
  EXPECT_EQ(a.log[1].total, b.log[1].total);
  cfg.seed = 2;
  EXPECT_NE(serialize_checkpoint(train(ds, folds[0], cfg).params), serialize_checkpoint(a.params));
}

TEST(Train, StepDecay) {
  const auto ds = data::generate_synthetic_dataset(8, 4, 32, 3);
  const auto folds = data::make_fold_splits(ds.categories(), 4);
  TrainConfig plain;
  plain.model = small_model();
  plain.epochs = 2;
  plain.episodes_per_epoch = 4;
  const std::string base = serialize_checkpoint(train(ds, folds[0], plain).params);

  TrainConfig late = plain;
  late.lr_decay_epoch = 3;
  EXPECT_EQ(serialize_checkpoint(train(ds, folds[0], late).params), base);

  // Decaying before the first step is the same as starting at the lower rate.
  TrainConfig first = plain;
  first.lr_decay_epoch = 1;
  first.lr_decay_factor = 0.5;
  TrainConfig halved = plain;
  halved.learning_rate = plain.learning_rate * 0.5;
  EXPECT_EQ(serialize_checkpoint(train(ds, folds[0], first).params),
            serialize_checkpoint(train(ds, folds[0], halved).params));

  TrainConfig second = plain;
  second.lr_decay_epoch = 2;
  const auto decayed = train(ds, folds[0], second);
  EXPECT_NE(serialize_checkpoint(decayed.params), base);
  EXPECT_EQ(decayed.log.size(), 2u);

  second.lr_decay_factor = 0.0;
  EXPECT_THROW(train(ds, folds[0], second), std::invalid_argument);
  SgdOptimizer opt(0.1);
  opt.set_learning_rate(0.01);
  EXPECT_EQ(opt.learning_rate(), 0.01);
  EXPECT_THROW(opt.set_learning_rate(-1.0), std::invalid_argument);
}

TEST(Train, RejectsUnusableInputs) {
  const auto ds = data::generate_synthetic_dataset(8, 4, 32, 3);
  const auto folds = data::make_fold_splits(ds.categories(), 4);
  TrainConfig cfg;
  cfg.model = small_model();
  cfg.epochs = 0;
  EXPECT_THROW(train(ds, folds[0], cfg), std::invalid_argument);
  cfg.epochs = 1;
  data::FoldSplit empty{{}, {0}};
  EXPECT_THROW(train(ds, empty, cfg), std::runtime_error);
}

TEST(Train, LossHalvesOnFixedEpisodes) {
  const auto ds = data::generate_synthetic_dataset(8, 10, 32, 11);
  const auto folds = data::make_fold_splits(ds.categories(), 4);
  std::mt19937_64 rng(12);
  std::vector<data::Episode> episodes;
  for (int i = 0; i < 8; ++i) episodes.push_back(data::sample_episode(ds, folds[0], 1, rng, data::Phase::train));

  ModelParams params = model::init_params(small_model(), 13);
  SgdOptimizer opt(0.025, 0.9);
  const StepSettings ss{0.1, 3, false, true};
  auto subset_loss = [&] {
    NoGradScope no_grad;
    double sum = 0.0;
    for (const auto& ep : episodes) {
      model::ForwardOptions fo;
      fo.refine_iterations = 3;
      const auto out = model::forward_pair(params, ep.support[0], ep.query.image, fo);
      sum += total_loss(out, ep.query.mask, ep.support[0].mask, 0.1).total_value;
    }
    return sum / 8.0;
  };
  const double before = subset_loss();
  for (int step = 0; step < 200; ++step) {
    const auto& ep = episodes[static_cast<std::size_t>(step) % 8];
    train_step(params, opt, ep.support[0], ep.query, ss, rng);
  }
  const double after = subset_loss();
  EXPECT_LE(after, 0.5 * before) << before << " -> " << after;
}

TEST(Finetune, PairCounting) {
  EXPECT_EQ(finetune_pairs(5, false).size(), 20u);
  EXPECT_EQ(finetune_pairs(5, true).size(), 25u);
  for (auto [i, j] : finetune_pairs(4, false)) EXPECT_NE(i, j);
  EXPECT_TRUE(finetune_pairs(1, false).empty());
}

TEST(Finetune, EncoderFrozenAndSourceUntouched) {
  std::mt19937_64 rng(14);
  const ModelParams params = model::init_params(small_model(), 15);
  const std::string before = serialize_checkpoint(params);
  std::vector<data::ImageSample> support;
  for (int i = 0; i < 3; ++i) support.push_back(random_sample(16, rng));
  FinetuneConfig ft;
  ft.steps = 8;
  ft.learning_rate = 0.01;
  const ModelParams tuned = kshot_finetune(params, support, ft);
  EXPECT_EQ(serialize_checkpoint(params), before);

  const auto a = params.named(), b = tuned.named();
  bool head_moved = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first.rfind("encoder.", 0) == 0) {
      EXPECT_TRUE(same_values(a[i].second, b[i].second)) << a[i].first;
      EXPECT_FALSE(b[i].second.requires_grad()) << a[i].first;
    } else {
      head_moved = head_moved || !same_values(a[i].second, b[i].second);
    }
  }
  EXPECT_TRUE(head_moved);
  EXPECT_THROW(kshot_finetune(params, {support[0]}, ft), std::invalid_argument);
  EXPECT_EQ(serialize_checkpoint(kshot_finetune(params, support, ft)), serialize_checkpoint(tuned));
}

TEST(Fusion, AveragingContract) {
  std::mt19937_64 rng(16);
  const ModelParams params = model::init_params(small_model(), 17);
  for (int trial = 0; trial < 5; ++trial) {
    const auto s = random_sample(16, rng), t = random_sample(16, rng), q = random_sample(16, rng);
    const Tensor single = predict_probability(params, s, q.image);
    const auto one = kshot_fusion_predict(params, {s}, q.image);
    EXPECT_TRUE(same_values(one.probability, single));
    EXPECT_TRUE(same_values(one.mask, threshold_mask(single)));
    const auto dup = kshot_fusion_predict(params, {s, s, s}, q.image);
    EXPECT_LE(crcnet::testing::max_abs_diff(dup.probability, single), 1e-15);
    const auto mixed = kshot_fusion_predict(params, {s, t}, q.image);
    const Tensor other = predict_probability(params, t, q.image);
    for (std::size_t i = 0; i < single.size(); ++i) {
      ASSERT_GE(mixed.probability[i], 0.0);
      ASSERT_LE(mixed.probability[i], 1.0);
      ASSERT_NEAR(mixed.probability[i], 0.5 * (single[i] + other[i]), 1e-15);
    }
  }
  EXPECT_THROW(kshot_fusion_predict(params, {}, Tensor({3, 16, 16})), std::invalid_argument);
}

TEST(Multiscale, IdentityScaleAndRange) {
  std::mt19937_64 rng(18);
  const ModelParams params = model::init_params(small_model(), 19);
  const auto s = random_sample(48, rng), q = random_sample(48, rng);
  const auto one = multiscale_predict(params, s, q.image, {1.0});
  EXPECT_TRUE(same_values(one.probability, predict_probability(params, s, q.image)));
  const auto three = multiscale_predict(params, s, q.image);
  ASSERT_EQ(three.probability.shape(), (Shape{48, 48}));
  for (double v : three.probability.values()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  EXPECT_EQ(default_scales(), (std::vector<double>{0.75, 1.0, 1.25}));
}

TEST(Multiscale, ScaledSizes) {
  EXPECT_EQ(scaled_size(48, 0.75), 40u);
  EXPECT_EQ(scaled_size(48, 1.0), 48u);
  EXPECT_EQ(scaled_size(48, 1.25), 64u);
  EXPECT_EQ(scaled_size(40, 1.25), 48u);
  EXPECT_EQ(scaled_size(32, 0.75), 24u);
  EXPECT_THROW(scaled_size(8, 0.4), std::invalid_argument);
  EXPECT_THROW(scaled_size(48, 0.0), std::invalid_argument);
  EXPECT_THROW(scaled_size(48, -1.0), std::invalid_argument);
}
