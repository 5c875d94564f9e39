#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crcnet/dataset.hpp"
#include "crcnet/model_params.hpp"
#include "crcnet/ops.hpp"

namespace crcnet::model {

inline Tensor apply_conv(const Conv& c, const Tensor& x, const Conv2dOptions& opt = {}) {
  Tensor y = conv2d(x, c.weight, opt);
  return c.bias.defined() ? add(y, c.bias) : y;
}

/// Bilinear resize of a full-resolution binary mask to h x w, thresholded at 0.5.
inline Tensor downsample_mask(const Tensor& mask, std::size_t h, std::size_t w) {
  NoGradScope no_grad;
  Tensor m = bilinear_resize(mask, h, w);
  for (double& v : m.data()) v = v >= 0.5 ? 1.0 : 0.0;
  return m;
}

/// Shared encoder: three stride-2 stages; stage-2 and stage-3 maps are fused
/// at 1/8 resolution and projected to C channels. With `multi_level` off the
/// mid-level slot is zero-filled, so both settings share one parameter set.
inline Tensor siamese_encode(const ModelParams& p, const Tensor& image, std::optional<bool> multi_level = {}) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("siamese_encode: expected 3 x H x W image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h % 8 != 0 || w % 8 != 0) {
    throw ShapeError("siamese_encode: spatial dims must be divisible by 8, got " + to_string(image.shape()));
  }
  auto stage = [](const Conv& first, const Conv& second, const Tensor& x) {
    Tensor y = relu(apply_conv(first, x, {2, 1, 1, 1}));
    return second.weight.defined() ? relu(apply_conv(second, y, {1, 1, 1, 1})) : y;
  };
  Tensor s1 = stage(p.encoder.stage1, p.encoder.stage1b, image);
  Tensor s2 = stage(p.encoder.stage2, p.encoder.stage2b, s1);
  Tensor s3 = stage(p.encoder.stage3, p.encoder.stage3b, s2);
  const bool use_mid = multi_level.value_or(p.config.multi_level);
  Tensor mid = use_mid ? bilinear_resize(s2, h / 8, w / 8) : Tensor::zeros({s2.dim(0), h / 8, w / 8});
  return relu(apply_conv(p.encoder.fuse, concat_channels(mid, s3)));
}

struct CrossReferenceOutput {
  Tensor g_support;
  Tensor g_query;
  Tensor gate;  // C x 1 x 1
};

namespace detail {

inline Tensor channel_importance(const CrossRefParams& p, const Tensor& f, GateActivation kind) {
  const std::size_t c = f.dim(0);
  Tensor v = reshape(global_avg_pool(f), {c, 1});
  Tensor hidden = relu(add(matmul(p.fc1_weight, v), p.fc1_bias));
  Tensor logits = add(matmul(p.fc2_weight, hidden), p.fc2_bias);
  Tensor act;
  switch (kind) {
    case GateActivation::sigmoid: act = sigmoid(logits); break;
    case GateActivation::relu: act = relu(logits); break;
    case GateActivation::softmax: act = softmax_rows(reshape(logits, {1, c})); break;
  }
  return reshape(act, {c, 1, 1});
}

}  // namespace detail

/// Channel gating by co-occurrence: both branches' importance vectors are
/// multiplied and the product re-weights both feature maps.
inline CrossReferenceOutput cross_reference(const CrossRefParams& p, const Tensor& f_support, const Tensor& f_query,
                                            GateActivation kind = GateActivation::sigmoid) {
  if (f_support.shape() != f_query.shape()) {
    throw ShapeError("cross_reference: feature shapes differ: " + to_string(f_support.shape()) + " vs " +
                     to_string(f_query.shape()));
  }
  Tensor gate = mul(detail::channel_importance(p, f_support, kind), detail::channel_importance(p, f_query, kind));
  return {mul(f_support, gate), mul(f_query, gate), gate};
}

/// Co-occurrence head: two 3x3 convs, ASPP with rates {1,2,4} summed, 1x1
/// two-channel head (channel 0 background, channel 1 foreground).
inline Tensor subtask_decode(const SubtaskParams& p, const Tensor& g) {
  Tensor x = relu(apply_conv(p.body1, g, {1, 1, 1, 1}));
  x = relu(apply_conv(p.body2, x, {1, 1, 1, 1}));
  Tensor a = add(add(apply_conv(p.aspp1, x, {1, 1, 1, 1}), apply_conv(p.aspp2, x, {1, 2, 2, 2})),
                 apply_conv(p.aspp4, x, {1, 4, 4, 4}));
  return apply_conv(p.head, relu(a));
}

/// Foreground-masked channel mean at feature resolution; plain global average
/// pooling when the downsampled mask is empty.
inline Tensor foreground_avg_pool(const Tensor& f, const Tensor& mask) {
  const Tensor m = downsample_mask(mask, f.dim(1), f.dim(2));
  if (data::count_foreground(m) == 0) return global_avg_pool(f);
  return spatial_weighted_mean(f, m.values());
}

/// Tiles the category vector over the map, concatenates, and applies a
/// residual conv block: relu(conv(conv([f, v])) + skip(f)).
inline Tensor global_condition(const ConditionParams& p, const Tensor& f, const Tensor& category_vector) {
  if (category_vector.rank() != 3 || category_vector.dim(0) != f.dim(0) || category_vector.dim(1) != 1 ||
      category_vector.dim(2) != 1) {
    throw ShapeError("global_condition: category vector must be C x 1 x 1");
  }
  Tensor tiled = bilinear_resize(category_vector, f.dim(1), f.dim(2));
  Tensor x = relu(apply_conv(p.global1, concat_channels(f, tiled), {1, 1, 1, 1}));
  x = apply_conv(p.global2, x, {1, 1, 1, 1});
  return relu(add(x, apply_conv(p.global_skip, f)));
}

inline constexpr double kMaskedLogit = -1e9;

struct LocalAttention {
  Tensor similarity;  // (h*w) x (h*w), after masking, before softmax
  Tensor attention;   // row-stochastic
  Tensor output;      // C x h x w
  bool masked = false;
};

/// Position-wise attention from query positions to support positions:
/// similarity = relu(theta(f_q))^T relu(delta(f_s)), filtered by the support
/// mask, row-softmaxed, then used to mix support feature columns.
inline LocalAttention local_attention(const ConditionParams& p, const Tensor& f_query, const Tensor& f_support,
                                      const Tensor& support_mask, MaskingMode mode) {
  if (f_query.shape() != f_support.shape()) throw ShapeError("local_condition: feature shapes differ");
  const std::size_t c = f_query.dim(0), h = f_query.dim(1), w = f_query.dim(2), n = h * w;
  Tensor tq = reshape(relu(apply_conv(p.theta, f_query)), {c, n});
  Tensor ts = reshape(relu(apply_conv(p.delta, f_support)), {c, n});
  Tensor sim = matmul(transpose(tq), ts);

  LocalAttention out;
  const Tensor m = downsample_mask(support_mask, h, w);
  if (data::count_foreground(m) > 0) {
    auto mv = m.values();
    Tensor filter({n, n});
    auto fv = filter.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) fv[i * n + j] = mv[j];
    sim = mul(sim, filter);
    if (mode == MaskingMode::strict) {
      Tensor fill({n, n});
      auto bv = fill.data();
      for (std::size_t i = 0; i < n * n; ++i) bv[i] = fv[i] > 0.5 ? 0.0 : kMaskedLogit;
      sim = add(sim, fill);
    }
    out.masked = true;
  }
  out.similarity = sim;
  out.attention = softmax_rows(sim);
  Tensor mixed = matmul(reshape(f_support, {c, n}), transpose(out.attention));
  out.output = reshape(mixed, {c, h, w});
  return out;
}

inline Tensor local_condition(const ConditionParams& p, const Tensor& f_query, const Tensor& f_support,
                              const Tensor& support_mask, MaskingMode mode = MaskingMode::multiplicative) {
  return local_attention(p, f_query, f_support, support_mask, mode).output;
}

/// Channel concatenation of the enabled condition branches (undefined tensors
/// mark a disabled branch); with both disabled the reinforced features pass through.
inline Tensor fuse_conditions(const Tensor& global_out, const Tensor& local_out, const Tensor& reinforced) {
  if (global_out.defined() && local_out.defined()) return concat_channels(global_out, local_out);
  if (global_out.defined()) return global_out;
  if (local_out.defined()) return local_out;
  return reinforced;
}

struct RefineStep {
  Tensor logits;  // 2 x h x w
  Tensor cache;   // 1 x h x w foreground probability
};

namespace detail {

// Large-kernel block: (7x1 -> 1x7) + (1x7 -> 7x1).
inline Tensor global_conv_block(const Conv& a1, const Conv& a2, const Conv& b1, const Conv& b2, const Tensor& x) {
  const Conv2dOptions tall{1, 3, 0, 1}, wide{1, 0, 3, 1};
  Tensor a = apply_conv(a2, apply_conv(a1, x, tall), wide);
  Tensor b = apply_conv(b2, apply_conv(b1, x, wide), tall);
  return add(a, b);
}

}  // namespace detail

/// Feature branch of the refinement module; independent of the cache, so it
/// is computed once per prediction and shared by every iteration.
inline Tensor refine_features(const RefineParams& p, const Tensor& features) {
  Tensor x = relu(apply_conv(p.input, features));
  return detail::global_conv_block(p.feat_a1, p.feat_a2, p.feat_b1, p.feat_b2, x);
}

inline RefineStep mask_refine_step_prepared(const RefineParams& p, const Tensor& feature_branch, const Tensor& cache) {
  if (cache.rank() != 3 || cache.dim(0) != 1 || cache.dim(1) != feature_branch.dim(1) ||
      cache.dim(2) != feature_branch.dim(2)) {
    throw ShapeError("mask_refine_step: cache must be 1 x h x w");
  }
  Tensor cached = detail::global_conv_block(p.cache_a1, p.cache_a2, p.cache_b1, p.cache_b2, cache);
  Tensor x = relu(apply_conv(p.combine1, concat_channels(feature_branch, cached), {1, 1, 1, 1}));
  x = relu(add(apply_conv(p.combine2, x, {1, 1, 1, 1}), feature_branch));
  Tensor logits = apply_conv(p.head, x);
  return {logits, slice_channels(softmax_channels(logits), 1, 1)};
}

/// One refinement iteration: fuses the features with the cached probability
/// map and returns logits plus the updated cache.
inline RefineStep mask_refine_step(const RefineParams& p, const Tensor& features, const Tensor& cache) {
  return mask_refine_step_prepared(p, refine_features(p, features), cache);
}

struct RefineOptions {
  bool detach_cache = false;      // stop gradients flowing through the cache
  bool record_iterations = false; // keep each iteration's probability map
};

struct RefineResult {
  Tensor logits;
  Tensor probability;
  std::vector<Tensor> per_iteration;
};

/// Runs the refinement step `iterations` times from a zero cache.
inline RefineResult mask_refine(const RefineParams& p, const Tensor& features, std::size_t iterations,
                                const RefineOptions& opt = {}) {
  if (iterations == 0) throw std::invalid_argument("mask_refine: iterations must be >= 1");
  const Tensor branch = refine_features(p, features);
  Tensor cache = Tensor::zeros({1, branch.dim(1), branch.dim(2)});
  RefineResult result;
  for (std::size_t t = 1; t <= iterations; ++t) {
    RefineStep step;
    if (opt.detach_cache && t < iterations) {
      NoGradScope no_grad;
      step = mask_refine_step_prepared(p, branch, cache);
    } else {
      step = mask_refine_step_prepared(p, branch, cache);
    }
    if (opt.record_iterations) result.per_iteration.push_back(step.cache.detach());
    cache = opt.detach_cache ? step.cache.detach() : step.cache;
    result.logits = step.logits;
    result.probability = step.cache;
  }
  return result;
}

struct ForwardOptions {
  std::optional<std::size_t> refine_iterations;  // defaults to config
  bool detach_cache = false;
  bool record_iterations = false;
  bool query_only = false;  // skip support-branch refinement and co-occurrence heads
};

struct PairOutputs {
  Tensor qm, sm;          // final logits, 2 x h x w
  Tensor qm_sub, sm_sub;  // co-occurrence head logits; undefined without cross-reference
  Tensor query_probability;
  std::vector<Tensor> query_iterations;
};

/// Forward pass on pre-encoded features (lets callers cache a frozen encoder).
inline PairOutputs forward_features(const ModelParams& p, const Tensor& f_support, const Tensor& support_mask,
                                    const Tensor& f_query, const ForwardOptions& opt = {}) {
  const ModelConfig& cfg = p.config;
  Tensor g_s = f_support, g_q = f_query;
  PairOutputs out;
  if (cfg.use_cross_reference) {
    auto cr = cross_reference(p.cross_ref, f_support, f_query, cfg.gate);
    g_s = cr.g_support;
    g_q = cr.g_query;
    if (!opt.query_only) {
      out.qm_sub = subtask_decode(p.subtask, g_q);
      out.sm_sub = subtask_decode(p.subtask, g_s);
    }
  }
  Tensor v;
  if (cfg.use_global) v = foreground_avg_pool(g_s, support_mask);
  auto condition = [&](const Tensor& target) {
    Tensor global_out, local_out;
    if (cfg.use_global) global_out = global_condition(p.condition, target, v);
    if (cfg.use_local) local_out = local_condition(p.condition, target, g_s, support_mask, cfg.masking);
    return fuse_conditions(global_out, local_out, target);
  };
  const std::size_t iterations = opt.refine_iterations.value_or(cfg.refine_iterations);
  const RefineOptions ropt{opt.detach_cache, opt.record_iterations};

  auto q = mask_refine(p.refine, condition(g_q), iterations, ropt);
  out.qm = q.logits;
  out.query_probability = q.probability;
  out.query_iterations = std::move(q.per_iteration);
  if (!opt.query_only) {
    out.sm = mask_refine(p.refine, condition(g_s), iterations, {opt.detach_cache, false}).logits;
  }
  return out;
}

/// Full pair forward: shared encoder, cross-reference, co-occurrence heads,
/// conditional module and recurrent refinement for both branches. The support
/// branch is conditioned on the support's own annotation.
inline PairOutputs forward_pair(const ModelParams& p, const data::ImageSample& support, const Tensor& query_image,
                                const ForwardOptions& opt = {}) {
  if (support.image.shape() != query_image.shape()) throw ShapeError("forward_pair: image sizes differ");
  const Tensor f_s = siamese_encode(p, support.image);
  const Tensor f_q = siamese_encode(p, query_image);
  return forward_features(p, f_s, support.mask, f_q, opt);
}

}  // namespace crcnet::model
