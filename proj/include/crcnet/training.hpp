#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "crcnet/dataset.hpp"
#include "crcnet/metrics.hpp"
#include "crcnet/model.hpp"
#include "crcnet/optim.hpp"

namespace crcnet::training {

using data::ImageSample;
using model::ModelParams;

inline constexpr double kBceEpsilon = 1e-7;

/// Mean binary cross-entropy; probabilities are clamped to [eps, 1 - eps]
/// and clamped entries pass no gradient.
inline Tensor bce_loss(const Tensor& prob, const Tensor& target, double eps = kBceEpsilon) {
  if (prob.shape() != target.shape()) {
    throw ShapeError("bce_loss: prediction " + to_string(prob.shape()) + " vs target " + to_string(target.shape()));
  }
  Tape* tape = recording_tape(prob);
  auto p = prob.values();
  auto y = target.values();
  const double n = static_cast<double>(p.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(p[i], eps, 1.0 - eps);
    sum -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
  }
  Tensor out({1}, std::vector<double>{sum / n});
  if (tape) {
    out.set_requires_grad(true);
    tape->record([prob, target, out, eps, n] {
      if (!out.has_grad() || !prob.requires_grad()) return;
      const double g = out.grad()[0];
      auto p = prob.values();
      auto y = target.values();
      auto gp = prob.grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < eps || p[i] > 1.0 - eps) continue;
        gp[i] += g * (-(y[i] / p[i]) + (1.0 - y[i]) / (1.0 - p[i])) / n;
      }
    });
  }
  return out;
}

inline Tensor foreground_probability(const Tensor& logits) {
  return slice_channels(softmax_channels(logits), 1, 1);
}

struct LossBreakdown {
  Tensor total;
  double l_qm = 0, l_sm = 0, l_qm_sub = 0, l_sm_sub = 0;
  double total_value = 0;
};

/// L = (L_QM + L_SM) + lambda (L_QMsub + L_SMsub); ground truth is reduced to
/// logit resolution with the model's bilinear + 0.5 rule. Missing
/// co-occurrence heads contribute zero.
inline LossBreakdown total_loss(const model::PairOutputs& out, const Tensor& gt_query_mask,
                                const Tensor& gt_support_mask, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be non-negative");
  auto term = [](const Tensor& logits, const Tensor& mask) {
    const std::size_t h = logits.dim(1), w = logits.dim(2);
    Tensor target = reshape(model::downsample_mask(mask, h, w), {1, h, w});
    return bce_loss(foreground_probability(logits), target);
  };
  LossBreakdown lb;
  Tensor qm = term(out.qm, gt_query_mask);
  Tensor sm = term(out.sm, gt_support_mask);
  lb.l_qm = qm.item();
  lb.l_sm = sm.item();
  lb.total = add(qm, sm);
  if (out.qm_sub.defined() && out.sm_sub.defined()) {
    Tensor qs = term(out.qm_sub, gt_query_mask);
    Tensor ss = term(out.sm_sub, gt_support_mask);
    lb.l_qm_sub = qs.item();
    lb.l_sm_sub = ss.item();
    lb.total = add(lb.total, scale(add(qs, ss), lambda));
  }
  lb.total_value = lb.total.item();
  return lb;
}

struct Augmentation {
  bool crop = true;
  bool scale = true;
  bool flip = true;
  double min_scale = 0.75;
  double max_scale = 1.25;
};

namespace detail {

inline Tensor binarize(Tensor m) {
  for (double& v : m.data()) v = v >= 0.5 ? 1.0 : 0.0;
  return m;
}

// Copies `src` (C x n x n) into an out x out canvas at the given offset,
// cropping or zero-padding as needed.
inline Tensor place(const Tensor& src, std::size_t out, long off_y, long off_x) {
  const bool planar = src.rank() == 2;
  const std::size_t c = planar ? 1 : src.dim(0);
  const std::size_t n = src.dim(planar ? 0 : 1);
  Tensor dst(planar ? Shape{out, out} : Shape{c, out, out});
  auto s = src.values();
  auto d = dst.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < out; ++y) {
      const long sy = static_cast<long>(y) + off_y;
      if (sy < 0 || sy >= static_cast<long>(n)) continue;
      for (std::size_t x = 0; x < out; ++x) {
        const long sx = static_cast<long>(x) + off_x;
        if (sx < 0 || sx >= static_cast<long>(n)) continue;
        d[(k * out + y) * out + x] = s[(k * n + static_cast<std::size_t>(sy)) * n + static_cast<std::size_t>(sx)];
      }
    }
  return dst;
}

inline Tensor flip_horizontal(const Tensor& src) {
  Tensor dst(src.shape());
  const std::size_t w = src.shape().back();
  const std::size_t rows = src.size() / w;
  auto s = src.values();
  auto d = dst.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t x = 0; x < w; ++x) d[r * w + x] = s[r * w + (w - 1 - x)];
  return dst;
}

}  // namespace detail

/// Applies one random scale / crop / flip identically to an image and its
/// mask. Falls back to the input if the foreground would be cropped away.
inline ImageSample augment(const ImageSample& sample, const Augmentation& aug, std::mt19937_64& rng) {
  NoGradScope no_grad;
  const std::size_t size = sample.height();
  if (sample.width() != size) throw ShapeError("augment: expected square samples");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double s = aug.scale ? aug.min_scale + (aug.max_scale - aug.min_scale) * unit(rng) : 1.0;
    const std::size_t n = std::max<std::size_t>(8, static_cast<std::size_t>(std::lround(s * static_cast<double>(size))));
    Tensor image = n == size ? sample.image : bilinear_resize(sample.image, n, n);
    Tensor mask = n == size ? sample.mask : detail::binarize(bilinear_resize(sample.mask, n, n));
    const long slack = static_cast<long>(n) - static_cast<long>(size);
    long off = slack / 2;
    if (aug.crop && slack != 0) {
      const long lo = std::min(0L, slack), hi = std::max(0L, slack);
      const long oy = std::uniform_int_distribution<long>(lo, hi)(rng);
      const long ox = std::uniform_int_distribution<long>(lo, hi)(rng);
      image = detail::place(image, size, oy, ox);
      mask = detail::place(mask, size, oy, ox);
    } else if (slack != 0) {
      image = detail::place(image, size, off, off);
      mask = detail::place(mask, size, off, off);
    }
    if (aug.flip && unit(rng) < 0.5) {
      image = detail::flip_horizontal(image);
      mask = detail::flip_horizontal(mask);
    }
    if (data::count_foreground(mask) > 0) return {image, mask, sample.category};
  }
  return sample;
}

/// Upsamples a 1 x h x w probability map to H x W (corner-aligned bilinear).
inline Tensor upsample_probability(const Tensor& prob, std::size_t height, std::size_t width) {
  NoGradScope no_grad;
  Tensor plane = reshape(prob, {prob.dim(1), prob.dim(2)});
  return bilinear_resize(plane, height, width);
}

inline Tensor threshold_mask(const Tensor& prob, double t = 0.5) {
  Tensor m(prob.shape());
  auto p = prob.values();
  auto d = m.data();
  for (std::size_t i = 0; i < p.size(); ++i) d[i] = p[i] >= t ? 1.0 : 0.0;
  return m;
}

struct TrainConfig {
  double learning_rate = 0.0025;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t episodes_per_epoch = 200;
  // From epoch lr_decay_epoch on (1-based), the rate is learning_rate * lr_decay_factor. 0 disables.
  std::size_t lr_decay_epoch = 0;
  double lr_decay_factor = 0.1;
  double lambda_sub = 0.1;
  std::uint64_t seed = 1;
  Augmentation augmentation;
  model::ModelConfig model;
  // Refinement during training: draw the iteration count uniformly from
  // [1, model.refine_iterations] per step, and stop gradients at the cache.
  bool sample_refine_iterations = true;
  bool detach_refine_cache = true;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
    if (lambda_sub < 0.0) throw std::invalid_argument("train: lambda_sub must be >= 0");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (episodes_per_epoch < 1) throw std::invalid_argument("train: episodes_per_epoch must be >= 1");
    if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("train: lr_decay_factor must be > 0");
    model.validate();
  }
};

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double l_qm = 0, l_sm = 0, l_qm_sub = 0, l_sm_sub = 0, total = 0;
  double miou = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<TrainLogRow> log;
};

struct StepSettings {
  double lambda_sub = 0.1;
  std::size_t refine_iterations = 10;
  bool sample_refine_iterations = true;
  bool detach_refine_cache = true;
};

/// One optimization step on a (support, query) pair. Encoder features may be
/// supplied precomputed when the encoder is frozen.
inline std::pair<LossBreakdown, model::PairOutputs> train_step(ModelParams& params, SgdOptimizer& opt,
                                                               const ImageSample& support, const ImageSample& query,
                                                               const StepSettings& s, std::mt19937_64& rng,
                                                               const Tensor& f_support = {}, const Tensor& f_query = {}) {
  model::ForwardOptions fo;
  fo.detach_cache = s.detach_refine_cache;
  fo.refine_iterations = s.sample_refine_iterations
                             ? std::uniform_int_distribution<std::size_t>(1, s.refine_iterations)(rng)
                             : s.refine_iterations;
  params.zero_grad();
  Tape tape;
  LossBreakdown lb;
  model::PairOutputs out;
  {
    TapeScope recording(tape);
    const Tensor fs = f_support.defined() ? f_support : model::siamese_encode(params, support.image);
    const Tensor fq = f_query.defined() ? f_query : model::siamese_encode(params, query.image);
    out = model::forward_features(params, fs, support.mask, fq, fo);
    lb = total_loss(out, query.mask, support.mask, s.lambda_sub);
  }
  tape.backward(lb.total);
  opt.step(params.tensors());
  return {lb, out};
}

/// Episodic training on the split's training categories.
inline TrainResult train(const data::Dataset& ds, const data::FoldSplit& split, const TrainConfig& cfg,
                         const std::function<void(const TrainLogRow&)>& on_epoch = {}) {
  cfg.validate();
  bool enough = false;
  for (int c : split.train_categories) enough = enough || ds.indices_of(c).size() >= 2;
  if (!enough) throw std::runtime_error("train: no training category has two images");

  std::mt19937_64 rng(cfg.seed);
  TrainResult result{model::init_params(cfg.model, rng()), {}};
  SgdOptimizer opt(cfg.learning_rate, cfg.momentum);
  const StepSettings ss{cfg.lambda_sub, cfg.model.refine_iterations, cfg.sample_refine_iterations,
                        cfg.detach_refine_cache};
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.lr_decay_epoch > 0 && epoch == cfg.lr_decay_epoch)
      opt.set_learning_rate(cfg.learning_rate * cfg.lr_decay_factor);
    TrainLogRow row;
    metrics::MetricsLedger ledger;
    for (std::size_t e = 0; e < cfg.episodes_per_epoch; ++e) {
      const data::Episode ep = data::sample_episode(ds, split, 1, rng, data::Phase::train);
      ImageSample a = ep.support[0], b = ep.query;
      if (rng() & 1) std::swap(a, b);
      a = augment(a, cfg.augmentation, rng);
      b = augment(b, cfg.augmentation, rng);
      auto [lb, out] = train_step(result.params, opt, a, b, ss, rng);
      ++step;
      row.l_qm += lb.l_qm, row.l_sm += lb.l_sm, row.l_qm_sub += lb.l_qm_sub, row.l_sm_sub += lb.l_sm_sub;
      row.total += lb.total_value;
      const Tensor prob = upsample_probability(out.query_probability, b.height(), b.width());
      ledger.update(threshold_mask(prob), b.mask, ep.category);
    }
    const double n = static_cast<double>(cfg.episodes_per_epoch);
    row.epoch = epoch;
    row.step = step;
    row.l_qm /= n, row.l_sm /= n, row.l_qm_sub /= n, row.l_sm_sub /= n, row.total /= n;
    row.miou = metrics::miou(ledger);
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

/// Query foreground probability at full resolution for one support sample.
inline Tensor predict_probability(const ModelParams& params, const ImageSample& support, const Tensor& query_image,
                                  std::optional<std::size_t> refine_iterations = {}) {
  NoGradScope no_grad;
  model::ForwardOptions fo;
  fo.query_only = true;
  fo.refine_iterations = refine_iterations;
  const auto out = model::forward_pair(params, support, query_image, fo);
  return upsample_probability(out.query_probability, query_image.dim(1), query_image.dim(2));
}

/// Per-iteration full-resolution probability maps of one prediction.
inline std::vector<Tensor> predict_iterations(const ModelParams& params, const ImageSample& support,
                                              const Tensor& query_image, std::size_t iterations) {
  NoGradScope no_grad;
  model::ForwardOptions fo;
  fo.query_only = true;
  fo.refine_iterations = iterations;
  fo.record_iterations = true;
  const auto out = model::forward_pair(params, support, query_image, fo);
  std::vector<Tensor> maps;
  for (const auto& p : out.query_iterations)
    maps.push_back(upsample_probability(p, query_image.dim(1), query_image.dim(2)));
  return maps;
}

struct Prediction {
  Tensor probability;  // H x W
  Tensor mask;         // H x W binary
};

/// k-shot baseline: average the k one-shot probability maps, threshold at 0.5.
inline Prediction kshot_fusion_predict(const ModelParams& params, const std::vector<ImageSample>& support_set,
                                       const Tensor& query_image, std::optional<std::size_t> refine_iterations = {}) {
  if (support_set.empty()) throw std::invalid_argument("kshot_fusion_predict: empty support set");
  Tensor acc({query_image.dim(1), query_image.dim(2)});
  for (const auto& s : support_set) {
    const Tensor p = predict_probability(params, s, query_image, refine_iterations);
    auto a = acc.data();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += p[i];
  }
  for (double& v : acc.data()) v /= static_cast<double>(support_set.size());
  return {acc, threshold_mask(acc)};
}

inline std::size_t scaled_size(std::size_t size, double scale) {
  const long rounded = std::lround(static_cast<double>(size) * scale / 8.0) * 8;
  if (!(scale > 0.0) || rounded < 8) {
    throw std::invalid_argument("multiscale_predict: scale " + std::to_string(scale) + " gives a map below 8 pixels");
  }
  return static_cast<std::size_t>(rounded);
}

inline const std::vector<double>& default_scales() {
  static const std::vector<double> scales{0.75, 1.0, 1.25};
  return scales;
}

/// Resizes support and query to each scale (rounded to a multiple of 8),
/// predicts, resizes each probability map back and averages.
inline Prediction multiscale_predict(const ModelParams& params, const ImageSample& support, const Tensor& query_image,
                                     const std::vector<double>& scales = default_scales(),
                                     std::optional<std::size_t> refine_iterations = {}) {
  if (scales.empty()) throw std::invalid_argument("multiscale_predict: no scales");
  NoGradScope no_grad;
  const std::size_t h = query_image.dim(1), w = query_image.dim(2);
  Tensor acc({h, w});
  for (double s : scales) {
    const std::size_t sh = scaled_size(h, s), sw = scaled_size(w, s);
    Tensor prob;
    if (sh == h && sw == w) {
      prob = predict_probability(params, support, query_image, refine_iterations);
    } else {
      ImageSample scaled{bilinear_resize(support.image, sh, sw), detail::binarize(bilinear_resize(support.mask, sh, sw)),
                         support.category};
      if (data::count_foreground(scaled.mask) == 0) scaled.mask = threshold_mask(bilinear_resize(support.mask, sh, sw), 1e-9);
      prob = bilinear_resize(predict_probability(params, scaled, bilinear_resize(query_image, sh, sw), refine_iterations),
                             h, w);
    }
    auto a = acc.data();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += prob[i];
  }
  for (double& v : acc.data()) v /= static_cast<double>(scales.size());
  return {acc, threshold_mask(acc)};
}

struct FinetuneConfig {
  std::size_t steps = 100;
  double learning_rate = 0.00025;
  double momentum = 0.9;
  double lambda_sub = 0.1;
  bool include_self_pairs = false;
  bool sample_refine_iterations = true;
  bool detach_refine_cache = true;
  std::uint64_t seed = 17;
};

/// Ordered support pairs (support i conditions, support j is the target).
inline std::vector<std::pair<std::size_t, std::size_t>> finetune_pairs(std::size_t k, bool include_self) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (i != j || include_self) pairs.emplace_back(i, j);
  return pairs;
}

/// Test-time adaptation on the labeled support set with the encoder frozen.
/// Returns an adapted copy; `params` is untouched.
inline ModelParams kshot_finetune(const ModelParams& params, const std::vector<ImageSample>& support_set,
                                  const FinetuneConfig& cfg) {
  if (support_set.size() < 2) throw std::invalid_argument("kshot_finetune: needs k >= 2 support samples");
  ModelParams tuned = params.clone();
  tuned.set_trainable("", true);
  tuned.set_trainable("encoder.", false);

  std::vector<Tensor> features;
  {
    NoGradScope no_grad;
    for (const auto& s : support_set) features.push_back(model::siamese_encode(tuned, s.image));
  }
  const auto pairs = finetune_pairs(support_set.size(), cfg.include_self_pairs);
  std::mt19937_64 rng(cfg.seed);
  SgdOptimizer opt(cfg.learning_rate, cfg.momentum);
  const StepSettings ss{cfg.lambda_sub, tuned.config.refine_iterations, cfg.sample_refine_iterations,
                        cfg.detach_refine_cache};
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto [i, j] = pairs[std::uniform_int_distribution<std::size_t>(0, pairs.size() - 1)(rng)];
    train_step(tuned, opt, support_set[i], support_set[j], ss, rng, features[i], features[j]);
  }
  return tuned;
}

}  // namespace crcnet::training
