#include <gtest/gtest.h>

#include <set>

#include "crcnet/eval.hpp"

using namespace crcnet;
using namespace crcnet::eval;

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

struct Fixture : ::testing::Test {
  data::Dataset ds = data::generate_synthetic_dataset(8, 6, 32, 21);
  std::vector<data::FoldSplit> folds = data::make_fold_splits(ds.categories(), 4);
  ModelParams params = model::init_params(small_model(), 22);

  EvalSettings settings(std::size_t episodes = 12) const {
    EvalSettings s;
    s.episodes = episodes;
    return s;
  }
};

std::vector<std::string> names(const std::string& axis) {
  std::vector<std::string> out;
  for (const auto& v : ablation_variants(axis)) out.push_back(v.name);
  return out;
}

}  // namespace

TEST_F(Fixture, MeanIsAverageOfFolds) {
  const auto table = cross_validation_eval(ds, folds, [&](std::size_t) { return params; }, settings());
  ASSERT_EQ(table.folds.size(), 4u);
  double m = 0.0, f = 0.0;
  for (const auto& r : table.folds) {
    m += r.miou;
    f += r.fbiou;
    EXPECT_EQ(r.episodes, 12u);
    EXPECT_GE(r.miou, 0.0);
    EXPECT_LE(r.miou, 1.0);
  }
  EXPECT_NEAR(table.mean_miou, m / 4.0, 1e-12);
  EXPECT_NEAR(table.mean_fbiou, f / 4.0, 1e-12);
  const auto subset = cross_validation_eval(ds, folds, [&](std::size_t) { return params; }, settings(), {2});
  ASSERT_EQ(subset.folds.size(), 1u);
  EXPECT_EQ(subset.folds[0].miou, table.folds[2].miou);
  EXPECT_THROW(cross_validation_eval(ds, folds, [&](std::size_t) { return params; }, settings(), {4}),
               std::out_of_range);
}

TEST_F(Fixture, EpisodesArePairedAcrossEvalSettings) {
  const auto a = evaluate_fold(params, ds, folds[1], 1, settings());
  const auto b = evaluate_fold(params, ds, folds[1], 1, settings());
  EXPECT_EQ(a.miou, b.miou);
  EXPECT_EQ(a.fbiou, b.fbiou);

  EvalSettings bbox = settings();
  bbox.annotation = Annotation::bbox;
  EvalSettings ms = settings();
  ms.scales = training::default_scales();
  for (const auto& other : {evaluate_fold(params, ds, folds[1], 1, bbox), evaluate_fold(params, ds, folds[1], 1, ms)}) {
    for (const auto& [c, k] : a.ledger.per_class()) {
      const auto& o = other.ledger.per_class().at(c);
      EXPECT_EQ(o.episodes, k.episodes);
      EXPECT_EQ(o.tp + o.fn, k.tp + k.fn);  // same queries, same ground truth
    }
  }
  EvalSettings reseeded = settings();
  reseeded.seed = 99;
  const auto c = evaluate_fold(params, ds, folds[1], 1, reseeded);
  std::uint64_t gt_a = 0, gt_c = 0;
  for (const auto& [cls, k] : a.ledger.per_class()) gt_a += k.tp + k.fn;
  for (const auto& [cls, k] : c.ledger.per_class()) gt_c += k.tp + k.fn;
  EXPECT_NE(gt_a, gt_c);
}

TEST_F(Fixture, EpisodesArePairedAcrossShots) {
  EvalSettings one = settings(), three = settings();
  three.k = 3;
  three.mode = KShotMode::fusion;
  const auto a = evaluate_fold(params, ds, folds[2], 2, one);
  const auto b = evaluate_fold(params, ds, folds[2], 2, three);
  for (const auto& [c, k] : a.ledger.per_class()) {
    const auto& o = b.ledger.per_class().at(c);
    EXPECT_EQ(o.episodes, k.episodes);
    EXPECT_EQ(o.tp + o.fn, k.tp + k.fn);
  }
}

TEST_F(Fixture, TestEpisodesUseOnlyTestCategories) {
  for (std::size_t f = 0; f < 4; ++f) {
    const auto r = evaluate_fold(params, ds, folds[f], f, settings(20));
    const std::set<int> allowed(folds[f].test_categories.begin(), folds[f].test_categories.end());
    for (const auto& [c, k] : r.ledger.per_class()) EXPECT_TRUE(allowed.count(c)) << c;
  }
}

TEST_F(Fixture, PerIterationRecording) {
  EvalSettings s = settings();
  s.record_iterations = true;
  const auto r = evaluate_fold(params, ds, folds[0], 0, s);
  ASSERT_EQ(r.iteration_miou.size(), 3u);
  EXPECT_EQ(r.iteration_miou.back(), r.miou);
  s.refine_iterations = 5;
  EXPECT_EQ(evaluate_fold(params, ds, folds[0], 0, s).iteration_miou.size(), 5u);
  s.scales = {0.75, 1.0};
  EXPECT_THROW(evaluate_fold(params, ds, folds[0], 0, s), std::invalid_argument);
}

TEST_F(Fixture, SettingsValidation) {
  EvalSettings s = settings();
  s.mode = KShotMode::finetune;
  EXPECT_THROW(evaluate_fold(params, ds, folds[0], 0, s), std::invalid_argument);
  s = settings();
  s.episodes = 0;
  EXPECT_THROW(evaluate_fold(params, ds, folds[0], 0, s), std::invalid_argument);
  s = settings();
  s.refine_iterations = 0;
  EXPECT_THROW(evaluate_fold(params, ds, folds[0], 0, s), std::invalid_argument);
  EXPECT_THROW(parse_kshot_mode("average"), std::invalid_argument);
  EXPECT_EQ(parse_kshot_mode("finetune_fusion"), KShotMode::finetune_fusion);
  EXPECT_THROW(parse_annotation("scribble"), std::invalid_argument);
}

TEST_F(Fixture, KShotModesRun) {
  EvalSettings s = settings(3);
  s.k = 2;
  s.finetune.steps = 2;
  for (auto m : {KShotMode::fusion, KShotMode::finetune, KShotMode::finetune_fusion}) {
    s.mode = m;
    const auto r = evaluate_fold(params, ds, folds[0], 0, s);
    EXPECT_GE(r.miou, 0.0);
    EXPECT_LE(r.miou, 1.0);
    EXPECT_EQ(r.episodes, 3u);
  }
}

TEST(Ablation, AxesAndVariants) {
  EXPECT_EQ(ablation_axes().size(), 9u);
  EXPECT_EQ(names("cross_reference"), (std::vector<std::string>{"conditional-only", "cross-reference-only", "both"}));
  EXPECT_EQ(names("activation"), (std::vector<std::string>{"relu", "sigmoid", "softmax"}));
  EXPECT_EQ(names("mask_refine"), (std::vector<std::string>{"1-iteration", "10-iterations"}));
  for (const auto& axis : ablation_axes()) EXPECT_GE(ablation_variants(axis).size(), 2u) << axis;
  try {
    ablation_variants("dropout");
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    for (const auto& axis : ablation_axes()) EXPECT_NE(msg.find(axis), std::string::npos) << axis;
  }
}

TEST(Ablation, VariantEditsTouchTheRightKnobs) {
  for (const auto& v : ablation_variants("cross_reference")) {
    TrainConfig tc;
    EvalSettings es;
    v.train_edit(tc);
    v.eval_edit(es);
    if (v.name == "conditional-only") {
      EXPECT_FALSE(tc.model.use_cross_reference);
    } else if (v.name == "cross-reference-only") {
      EXPECT_FALSE(tc.model.use_global || tc.model.use_local);
    } else {
      EXPECT_EQ(training_key(tc), training_key(TrainConfig{}));
    }
  }
  for (const auto& v : ablation_variants("kshot_mode")) {
    TrainConfig tc;
    EvalSettings es;
    v.train_edit(tc);
    v.eval_edit(es);
    EXPECT_EQ(training_key(tc), training_key(TrainConfig{}));
    EXPECT_GE(es.k, 2u);
    EXPECT_EQ(to_string(es.mode), v.name);
  }
}

TEST(Ablation, TrainingKeySeparatesWeightsOnly) {
  TrainConfig a;
  TrainConfig b = a;
  b.model.stage_depth = 2;
  EXPECT_NE(training_key(a), training_key(b));
  b = a;
  b.model.gate = model::GateActivation::relu;
  EXPECT_NE(training_key(a), training_key(b));
  b = a;
  b.seed = 2;
  EXPECT_NE(training_key(a), training_key(b));
  b = a;
  b.lr_decay_epoch = 5;
  EXPECT_NE(training_key(a), training_key(b));
  b = a;
  b.learning_rate = 0.0025 + 1e-12;
  EXPECT_NE(training_key(a), training_key(b));
}

TEST_F(Fixture, ModelCacheTrainsEachConfigurationOnce) {
  int calls = 0;
  ModelCache cache([&](const TrainConfig& cfg, std::size_t) {
    ++calls;
    return model::init_params(cfg.model, cfg.seed);
  });
  TrainConfig base;
  base.model = small_model();
  EvalSettings es = settings(4);
  const auto rows = ablation_run(ds, folds, base, es, "mask_refine", cache, {0, 1});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(calls, 2);
  const auto again = ablation_run(ds, folds, base, es, "multi_scale", cache, {0, 1});
  EXPECT_EQ(calls, 2);
  ablation_run(ds, folds, base, es, "conditional_global", cache, {0});
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(cache.size(), 3u);
  const auto repeat = ablation_run(ds, folds, base, es, "mask_refine", cache, {0, 1});
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(repeat[0].table.mean_miou, rows[0].table.mean_miou);
  EXPECT_EQ(repeat[1].table.mean_fbiou, rows[1].table.mean_fbiou);
}

TEST_F(Fixture, ConstantForegroundBaseline) {
  // A model that always answers "foreground" scores the mean foreground share.
  ModelParams always = params.clone();
  for (double& v : always.refine.head.bias.data()) v = 0.0;
  always.refine.head.bias.data()[1] = 1e3;
  const auto r = evaluate_fold(always, ds, folds[0], 0, settings(30));
  for (const auto& [c, k] : r.ledger.per_class()) {
    EXPECT_EQ(k.fn, 0u);
    EXPECT_NEAR(r.ledger.class_iou(c), static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp), 1e-15);
    EXPECT_LT(r.ledger.class_iou(c), 0.6);
  }
}
