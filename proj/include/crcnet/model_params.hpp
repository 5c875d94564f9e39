#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crcnet/tensor.hpp"

namespace crcnet::model {

enum class GateActivation { sigmoid, relu, softmax };
enum class MaskingMode { multiplicative, strict };

/// Architecture hyperparameters. Parameter shapes depend on these, so a
/// checkpoint only loads into a matching configuration.
struct ModelConfig {
  std::size_t channels = 32;
  std::size_t stage1_channels = 16;
  std::size_t stage2_channels = 32;
  std::size_t stage3_channels = 32;
  std::size_t stage_depth = 1;  // 3x3 convs per encoder stage (first one strided)
  GateActivation gate = GateActivation::sigmoid;
  MaskingMode masking = MaskingMode::multiplicative;
  std::size_t refine_iterations = 10;
  bool use_cross_reference = true;
  bool use_global = true;
  bool use_local = true;
  bool multi_level = true;

  /// Channel count handed to the refinement module.
  std::size_t condition_channels() const {
    const std::size_t c = (use_global ? channels : 0) + (use_local ? channels : 0);
    return c == 0 ? channels : c;
  }
  std::size_t cache_channels() const { return channels / 2; }

  void validate() const {
    if (channels < 2 || channels % 2 != 0) throw std::invalid_argument("model: channels must be even and >= 2");
    if (stage1_channels == 0 || stage2_channels == 0 || stage3_channels == 0) {
      throw std::invalid_argument("model: encoder widths must be positive");
    }
    if (stage_depth < 1 || stage_depth > 2) throw std::invalid_argument("model: stage_depth must be 1 or 2");
    if (refine_iterations == 0) throw std::invalid_argument("model: refine_iterations must be >= 1");
  }
};

/// Convolution weight (C_out x C_in x kh x kw) and optional C_out x 1 x 1 bias.
struct Conv {
  Tensor weight;
  Tensor bias;
};

struct EncoderParams {
  Conv stage1, stage2, stage3;
  Conv stage1b, stage2b, stage3b;  // stride-1 second convs when stage_depth == 2
  Conv fuse;  // 1x1 projection of [mid-level, high-level] to C channels
};

struct CrossRefParams {
  Tensor fc1_weight, fc1_bias;  // C/2 x C, C/2 x 1
  Tensor fc2_weight, fc2_bias;  // C x C/2, C x 1
};

struct SubtaskParams {
  Conv body1, body2;
  Conv aspp1, aspp2, aspp4;
  Conv head;
};

struct ConditionParams {
  Conv global1, global2, global_skip;
  Conv theta, delta;
};

struct RefineParams {
  Conv input;
  Conv feat_a1, feat_a2, feat_b1, feat_b2;      // 7x1 -> 1x7 and 1x7 -> 7x1
  Conv cache_a1, cache_a2, cache_b1, cache_b2;  // same, on the cached probability
  Conv combine1, combine2;
  Conv head;
};

struct ModelParams {
  ModelConfig config;
  EncoderParams encoder;
  CrossRefParams cross_ref;
  SubtaskParams subtask;
  ConditionParams condition;
  RefineParams refine;

  /// Visits (name, tensor) in a fixed order; names are group-prefixed
  /// ("encoder.", "cross_ref.", "subtask.", "condition.", "refine.").
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for_each([&](const std::string&, const Tensor& t) { out.push_back(t); });
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for_each([&](const std::string& n, const Tensor& t) { out.emplace_back(n, t); });
    return out;
  }

  ModelParams clone() const {
    ModelParams copy = *this;
    copy.for_each([](const std::string&, Tensor& t) { t = t.clone(); });
    return copy;
  }

  void zero_grad() const {
    for_each([](const std::string&, const Tensor& t) {
      if (t.requires_grad()) t.zero_grad();
    });
  }

  /// Enables or disables gradients for every tensor whose name starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable) {
    for_each([&](const std::string& n, Tensor& t) {
      if (n.rfind(prefix, 0) == 0) t.set_requires_grad(trainable);
    });
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& p, F& f) {
    auto conv = [&](const std::string& name, auto& c) {
      if (!c.weight.defined()) return;
      f(name + ".weight", c.weight);
      if (c.bias.defined()) f(name + ".bias", c.bias);
    };
    conv("encoder.stage1", p.encoder.stage1);
    conv("encoder.stage2", p.encoder.stage2);
    conv("encoder.stage3", p.encoder.stage3);
    conv("encoder.stage1b", p.encoder.stage1b);
    conv("encoder.stage2b", p.encoder.stage2b);
    conv("encoder.stage3b", p.encoder.stage3b);
    conv("encoder.fuse", p.encoder.fuse);
    f("cross_ref.fc1.weight", p.cross_ref.fc1_weight);
    f("cross_ref.fc1.bias", p.cross_ref.fc1_bias);
    f("cross_ref.fc2.weight", p.cross_ref.fc2_weight);
    f("cross_ref.fc2.bias", p.cross_ref.fc2_bias);
    conv("subtask.body1", p.subtask.body1);
    conv("subtask.body2", p.subtask.body2);
    conv("subtask.aspp1", p.subtask.aspp1);
    conv("subtask.aspp2", p.subtask.aspp2);
    conv("subtask.aspp4", p.subtask.aspp4);
    conv("subtask.head", p.subtask.head);
    conv("condition.global1", p.condition.global1);
    conv("condition.global2", p.condition.global2);
    conv("condition.global_skip", p.condition.global_skip);
    conv("condition.theta", p.condition.theta);
    conv("condition.delta", p.condition.delta);
    conv("refine.input", p.refine.input);
    conv("refine.feat_a1", p.refine.feat_a1);
    conv("refine.feat_a2", p.refine.feat_a2);
    conv("refine.feat_b1", p.refine.feat_b1);
    conv("refine.feat_b2", p.refine.feat_b2);
    conv("refine.cache_a1", p.refine.cache_a1);
    conv("refine.cache_a2", p.refine.cache_a2);
    conv("refine.cache_b1", p.refine.cache_b1);
    conv("refine.cache_b2", p.refine.cache_b2);
    conv("refine.combine1", p.refine.combine1);
    conv("refine.combine2", p.refine.combine2);
    conv("refine.head", p.refine.head);
  }
};

namespace detail {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = dist(rng_);
    t.set_requires_grad(true);
    return t;
  }

  // He-normal weights; `gain` 1 for heads feeding a softmax, 2 before a ReLU.
  Conv conv(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, bool bias, double gain = 2.0) {
    Conv c;
    c.weight = normal({out, in, kh, kw}, std::sqrt(gain / static_cast<double>(in * kh * kw)));
    if (bias) c.bias = Tensor::zeros({out, 1, 1}).set_requires_grad(true);
    return c;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  detail::Initializer init(seed);
  const std::size_t c = cfg.channels, half = c / 2, cache = cfg.cache_channels();
  ModelParams p;
  p.config = cfg;
  p.encoder.stage1 = init.conv(cfg.stage1_channels, 3, 3, 3, true);
  p.encoder.stage2 = init.conv(cfg.stage2_channels, cfg.stage1_channels, 3, 3, true);
  p.encoder.stage3 = init.conv(cfg.stage3_channels, cfg.stage2_channels, 3, 3, true);
  if (cfg.stage_depth == 2) {
    p.encoder.stage1b = init.conv(cfg.stage1_channels, cfg.stage1_channels, 3, 3, true);
    p.encoder.stage2b = init.conv(cfg.stage2_channels, cfg.stage2_channels, 3, 3, true);
    p.encoder.stage3b = init.conv(cfg.stage3_channels, cfg.stage3_channels, 3, 3, true);
  }
  p.encoder.fuse = init.conv(c, cfg.stage2_channels + cfg.stage3_channels, 1, 1, true);

  p.cross_ref.fc1_weight = init.normal({half, c}, std::sqrt(2.0 / static_cast<double>(c)));
  p.cross_ref.fc1_bias = Tensor::zeros({half, 1}).set_requires_grad(true);
  p.cross_ref.fc2_weight = init.normal({c, half}, std::sqrt(1.0 / static_cast<double>(half)));
  p.cross_ref.fc2_bias = Tensor::zeros({c, 1}).set_requires_grad(true);

  p.subtask.body1 = init.conv(c, c, 3, 3, false);
  p.subtask.body2 = init.conv(c, c, 3, 3, false);
  p.subtask.aspp1 = init.conv(c, c, 3, 3, false, 2.0 / 3.0);
  p.subtask.aspp2 = init.conv(c, c, 3, 3, false, 2.0 / 3.0);
  p.subtask.aspp4 = init.conv(c, c, 3, 3, false, 2.0 / 3.0);
  p.subtask.head = init.conv(2, c, 1, 1, true, 1.0);

  p.condition.global1 = init.conv(c, 2 * c, 3, 3, true);
  p.condition.global2 = init.conv(c, c, 3, 3, true, 1.0);
  p.condition.global_skip = init.conv(c, c, 1, 1, true, 1.0);
  p.condition.theta = init.conv(c, c, 1, 1, true);
  p.condition.delta = init.conv(c, c, 1, 1, true);

  p.refine.input = init.conv(c, cfg.condition_channels(), 1, 1, true);
  p.refine.feat_a1 = init.conv(c, c, 7, 1, false, 1.0);
  p.refine.feat_a2 = init.conv(c, c, 1, 7, false, 0.5);
  p.refine.feat_b1 = init.conv(c, c, 1, 7, false, 1.0);
  p.refine.feat_b2 = init.conv(c, c, 7, 1, false, 0.5);
  p.refine.cache_a1 = init.conv(cache, 1, 7, 1, false, 1.0);
  p.refine.cache_a2 = init.conv(cache, cache, 1, 7, false, 0.5);
  p.refine.cache_b1 = init.conv(cache, 1, 1, 7, false, 1.0);
  p.refine.cache_b2 = init.conv(cache, cache, 7, 1, false, 0.5);
  p.refine.combine1 = init.conv(c, c + cache, 3, 3, true);
  p.refine.combine2 = init.conv(c, c, 3, 3, true, 1.0);
  p.refine.head = init.conv(2, c, 1, 1, true, 1.0);
  return p;
}

}  // namespace crcnet::model
