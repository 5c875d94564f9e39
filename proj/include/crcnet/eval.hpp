#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crcnet/dataset.hpp"
#include "crcnet/metrics.hpp"
#include "crcnet/training.hpp"

namespace crcnet::eval {

using model::ModelParams;
using training::TrainConfig;

enum class KShotMode { single, fusion, finetune, finetune_fusion };
enum class Annotation { mask, bbox };

inline std::string to_string(KShotMode m) {
  switch (m) {
    case KShotMode::single: return "single";
    case KShotMode::fusion: return "fusion";
    case KShotMode::finetune: return "finetune";
    case KShotMode::finetune_fusion: return "finetune_fusion";
  }
  return "?";
}

inline KShotMode parse_kshot_mode(const std::string& s) {
  for (auto m : {KShotMode::single, KShotMode::fusion, KShotMode::finetune, KShotMode::finetune_fusion})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown k-shot mode '" + s + "' (valid: single, fusion, finetune, finetune_fusion)");
}

inline std::string to_string(Annotation a) { return a == Annotation::mask ? "mask" : "bbox"; }

inline Annotation parse_annotation(const std::string& s) {
  if (s == "mask") return Annotation::mask;
  if (s == "bbox") return Annotation::bbox;
  throw std::invalid_argument("unknown annotation '" + s + "' (valid: mask, bbox)");
}

struct EvalSettings {
  std::size_t k = 1;
  KShotMode mode = KShotMode::single;
  std::vector<double> scales{1.0};
  std::optional<std::size_t> refine_iterations;
  Annotation annotation = Annotation::mask;
  data::BoxMode box_mode = data::BoxMode::single;
  std::size_t episodes = 200;
  std::uint64_t seed = 1234;
  training::FinetuneConfig finetune;
  bool record_iterations = false;  // per-iteration mIoU; single mode at scale 1 only

  void validate() const {
    if (k < 1) throw std::invalid_argument("eval: k must be >= 1");
    if ((mode == KShotMode::finetune || mode == KShotMode::finetune_fusion) && k < 2) {
      throw std::invalid_argument("eval: finetune needs k >= 2");
    }
    if (episodes < 1) throw std::invalid_argument("eval: episodes must be >= 1");
    if (scales.empty()) throw std::invalid_argument("eval: no scales");
    if (refine_iterations && *refine_iterations == 0) throw std::invalid_argument("eval: refine iterations must be >= 1");
    if (record_iterations && (mode != KShotMode::single || scales != std::vector<double>{1.0})) {
      throw std::invalid_argument("eval: per-iteration recording needs single mode at scale 1");
    }
  }
};

struct FoldResult {
  std::size_t fold = 0;
  double miou = 0;
  double fbiou = 0;
  std::size_t episodes = 0;
  std::vector<double> iteration_miou;
  metrics::MetricsLedger ledger;
};

namespace detail {

inline std::uint64_t episode_stream(std::uint64_t seed, std::size_t fold) {
  return data::detail::splitmix64(seed ^ data::detail::splitmix64(0xE9A1ull + fold));
}

inline training::Prediction predict_support(const ModelParams& params, const data::ImageSample& support,
                                            const Tensor& query, const EvalSettings& s) {
  if (s.scales == std::vector<double>{1.0}) {
    Tensor p = training::predict_probability(params, support, query, s.refine_iterations);
    return {p, training::threshold_mask(p)};
  }
  return training::multiscale_predict(params, support, query, s.scales, s.refine_iterations);
}

inline training::Prediction predict_fused(const ModelParams& params, const std::vector<data::ImageSample>& supports,
                                          const Tensor& query, const EvalSettings& s) {
  Tensor acc({query.dim(1), query.dim(2)});
  for (const auto& sup : supports) {
    const auto p = predict_support(params, sup, query, s);
    auto a = acc.data();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += p.probability[i];
  }
  for (double& v : acc.data()) v /= static_cast<double>(supports.size());
  return {acc, training::threshold_mask(acc)};
}

}  // namespace detail

/// Evaluates seeded test episodes of one fold. The episode stream depends only
/// on (seed, fold, k), so settings that differ in anything else are paired.
inline FoldResult evaluate_fold(const ModelParams& params, const data::Dataset& ds, const data::FoldSplit& split,
                                std::size_t fold, const EvalSettings& s) {
  s.validate();
  const std::uint64_t stream = detail::episode_stream(s.seed, fold);
  FoldResult result;
  result.fold = fold;
  result.episodes = s.episodes;
  const std::size_t iterations = s.refine_iterations.value_or(params.config.refine_iterations);
  std::vector<metrics::MetricsLedger> per_iteration(s.record_iterations ? iterations : 0);

  for (std::size_t e = 0; e < s.episodes; ++e) {
    // Episode e draws from its own generator, whatever k and the mode.
    std::mt19937_64 rng(data::detail::splitmix64(stream ^ (0x5EEDull + e)));
    data::Episode ep = data::sample_episode(ds, split, s.k, rng, data::Phase::test);
    if (s.annotation == Annotation::bbox)
      for (auto& sup : ep.support) sup.mask = data::mask_to_bbox_mask(sup.mask, s.box_mode);

    training::Prediction pred;
    switch (s.mode) {
      case KShotMode::single:
        if (s.record_iterations) {
          const auto maps = training::predict_iterations(params, ep.support[0], ep.query.image, iterations);
          for (std::size_t t = 0; t < maps.size(); ++t)
            per_iteration[t].update(training::threshold_mask(maps[t]), ep.query.mask, ep.category);
          pred = {maps.back(), training::threshold_mask(maps.back())};
        } else {
          pred = detail::predict_support(params, ep.support[0], ep.query.image, s);
        }
        break;
      case KShotMode::fusion:
        pred = detail::predict_fused(params, ep.support, ep.query.image, s);
        break;
      case KShotMode::finetune:
      case KShotMode::finetune_fusion: {
        training::FinetuneConfig ft = s.finetune;
        ft.seed = data::detail::splitmix64(s.finetune.seed ^ stream ^ (e + 1));
        const ModelParams tuned = training::kshot_finetune(params, ep.support, ft);
        pred = s.mode == KShotMode::finetune ? detail::predict_support(tuned, ep.support[0], ep.query.image, s)
                                             : detail::predict_fused(tuned, ep.support, ep.query.image, s);
        break;
      }
    }
    result.ledger.update(pred.mask, ep.query.mask, ep.category);
  }
  result.miou = metrics::miou(result.ledger);
  result.fbiou = metrics::fbiou(result.ledger);
  for (const auto& l : per_iteration) result.iteration_miou.push_back(metrics::miou(l));
  return result;
}

struct CvTable {
  std::vector<FoldResult> folds;
  double mean_miou = 0;
  double mean_fbiou = 0;
  std::vector<double> mean_iteration_miou;
};

using ParamsProvider = std::function<ModelParams(std::size_t fold)>;

/// Evaluates each requested fold with parameters from `provider` (a loaded
/// checkpoint or a freshly trained model) and averages over folds.
inline CvTable cross_validation_eval(const data::Dataset& ds, const std::vector<data::FoldSplit>& folds,
                                     const ParamsProvider& provider, const EvalSettings& s,
                                     std::vector<std::size_t> fold_indices = {}) {
  if (fold_indices.empty())
    for (std::size_t f = 0; f < folds.size(); ++f) fold_indices.push_back(f);
  CvTable table;
  for (std::size_t f : fold_indices) {
    if (f >= folds.size()) throw std::out_of_range("cross_validation_eval: fold " + std::to_string(f) + " out of range");
    table.folds.push_back(evaluate_fold(provider(f), ds, folds[f], f, s));
  }
  const double n = static_cast<double>(table.folds.size());
  for (const auto& r : table.folds) {
    table.mean_miou += r.miou / n;
    table.mean_fbiou += r.fbiou / n;
    if (table.mean_iteration_miou.size() < r.iteration_miou.size()) table.mean_iteration_miou.resize(r.iteration_miou.size());
    for (std::size_t t = 0; t < r.iteration_miou.size(); ++t) table.mean_iteration_miou[t] += r.iteration_miou[t] / n;
  }
  return table;
}

/// Trains on each fold's training categories, then evaluates.
inline CvTable cross_validation_train_eval(const data::Dataset& ds, const std::vector<data::FoldSplit>& folds,
                                           const TrainConfig& cfg, const EvalSettings& s,
                                           std::vector<std::size_t> fold_indices = {}) {
  return cross_validation_eval(
      ds, folds, [&](std::size_t f) { return training::train(ds, folds[f], cfg).params; }, s, std::move(fold_indices));
}

struct Variant {
  std::string name;
  std::function<void(TrainConfig&)> train_edit;
  std::function<void(EvalSettings&)> eval_edit;
};

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"cross_reference", "conditional_global", "conditional_local",
                                             "multi_level",     "multi_scale",        "mask_refine",
                                             "activation",      "bbox_supervision",   "kshot_mode"};
  return axes;
}

inline std::string join(const std::vector<std::string>& items, const std::string& sep = ", ") {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

inline std::vector<Variant> ablation_variants(const std::string& axis) {
  auto model_edit = [](auto edit) { return [edit](TrainConfig& c) { edit(c.model); }; };
  auto no_train = [](TrainConfig&) {};
  auto no_eval = [](EvalSettings&) {};
  if (axis == "cross_reference") {
    return {{"conditional-only", model_edit([](model::ModelConfig& m) { m.use_cross_reference = false; }), no_eval},
            {"cross-reference-only", model_edit([](model::ModelConfig& m) { m.use_global = m.use_local = false; }),
             no_eval},
            {"both", no_train, no_eval}};
  }
  if (axis == "conditional_global") {
    return {{"without", model_edit([](model::ModelConfig& m) { m.use_global = false; }), no_eval},
            {"with", no_train, no_eval}};
  }
  if (axis == "conditional_local") {
    return {{"without", model_edit([](model::ModelConfig& m) { m.use_local = false; }), no_eval},
            {"with", no_train, no_eval}};
  }
  if (axis == "multi_level") {
    return {{"without", model_edit([](model::ModelConfig& m) { m.multi_level = false; }), no_eval},
            {"with", no_train, no_eval}};
  }
  if (axis == "multi_scale") {
    return {{"single-scale", no_train, [](EvalSettings& s) { s.scales = {1.0}; }},
            {"multi-scale", no_train, [](EvalSettings& s) { s.scales = training::default_scales(); }}};
  }
  if (axis == "mask_refine") {
    return {{"1-iteration", no_train, [](EvalSettings& s) { s.refine_iterations = 1; }},
            {"10-iterations", no_train, [](EvalSettings& s) { s.refine_iterations = 10; }}};
  }
  if (axis == "activation") {
    auto gate = [&](model::GateActivation g) {
      return model_edit([g](model::ModelConfig& m) { m.gate = g; });
    };
    return {{"relu", gate(model::GateActivation::relu), no_eval},
            {"sigmoid", gate(model::GateActivation::sigmoid), no_eval},
            {"softmax", gate(model::GateActivation::softmax), no_eval}};
  }
  if (axis == "bbox_supervision") {
    return {{"mask", no_train, [](EvalSettings& s) { s.annotation = Annotation::mask; }},
            {"bbox", no_train, [](EvalSettings& s) { s.annotation = Annotation::bbox; }}};
  }
  if (axis == "kshot_mode") {
    auto mode = [](KShotMode m) {
      return [m](EvalSettings& s) {
        s.mode = m;
        s.k = std::max<std::size_t>(s.k, 2);
      };
    };
    return {{"fusion", no_train, mode(KShotMode::fusion)},
            {"finetune", no_train, mode(KShotMode::finetune)},
            {"finetune_fusion", no_train, mode(KShotMode::finetune_fusion)}};
  }
  throw std::invalid_argument("unknown ablation axis '" + axis + "' (valid: " + join(ablation_axes()) + ")");
}

/// Stable text identity of everything that changes the trained weights.
inline std::string training_key(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const auto& m = c.model;
  os << c.learning_rate << ' ' << c.momentum << ' ' << c.lr_decay_epoch << ' ' << c.lr_decay_factor << ' ' << c.epochs << ' ' << c.episodes_per_epoch << ' ' << c.lambda_sub
     << ' ' << c.seed << ' ' << c.augmentation.crop << c.augmentation.scale << c.augmentation.flip << ' '
     << c.augmentation.min_scale << ' ' << c.augmentation.max_scale << ' ' << c.sample_refine_iterations
     << c.detach_refine_cache << ' ' << m.channels << ' ' << m.stage1_channels << ' ' << m.stage2_channels << ' '
     << m.stage3_channels << ' ' << m.stage_depth << ' ' << static_cast<int>(m.gate) << static_cast<int>(m.masking) << ' '
     << m.refine_iterations << ' ' << m.use_cross_reference << m.use_global << m.use_local << m.multi_level;
  return os.str();
}

/// Memoizes trained models per (training configuration, fold) so eval-time
/// variants and repeated ablations reuse one training run.
class ModelCache {
 public:
  using Trainer = std::function<ModelParams(const TrainConfig&, std::size_t fold)>;

  explicit ModelCache(Trainer trainer) : trainer_(std::move(trainer)) {}

  const ModelParams& get(const TrainConfig& cfg, std::size_t fold) {
    const std::string key = training_key(cfg) + " fold=" + std::to_string(fold);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, trainer_(cfg, fold)).first;
    return it->second;
  }
  std::size_t size() const { return cache_.size(); }

 private:
  Trainer trainer_;
  std::map<std::string, ModelParams> cache_;
};

inline ModelCache training_cache(const data::Dataset& ds, const std::vector<data::FoldSplit>& folds) {
  return ModelCache([&ds, &folds](const TrainConfig& cfg, std::size_t f) { return training::train(ds, folds[f], cfg).params; });
}

struct AblationRow {
  std::string variant;
  CvTable table;
};

/// Runs every variant of `axis` with all other settings fixed and the same
/// episode seeds.
inline std::vector<AblationRow> ablation_run(const data::Dataset& ds, const std::vector<data::FoldSplit>& folds,
                                             const TrainConfig& base_train, const EvalSettings& base_eval,
                                             const std::string& axis, ModelCache& models,
                                             const std::vector<std::size_t>& fold_indices = {}) {
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants(axis)) {
    TrainConfig tc = base_train;
    EvalSettings es = base_eval;
    v.train_edit(tc);
    v.eval_edit(es);
    auto provider = [&](std::size_t f) { return models.get(tc, f); };
    rows.push_back({v.name, cross_validation_eval(ds, folds, provider, es, fold_indices)});
  }
  return rows;
}

}  // namespace crcnet::eval
