#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "crcnet/tensor.hpp"

namespace crcnet::data {

/// One (image, mask) pair. image: 3 x H x W in [0,1]; mask: H x W in {0,1}.
struct ImageSample {
  Tensor image;
  Tensor mask;
  int category = 0;

  std::size_t height() const { return mask.dim(0); }
  std::size_t width() const { return mask.dim(1); }
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  std::vector<ImageSample> samples;

  std::vector<int> categories() const {
    std::vector<int> ids;
    for (const auto& s : samples) ids.push_back(s.category);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }

  std::vector<std::size_t> indices_of(int category) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].category == category) idx.push_back(i);
    return idx;
  }
};

inline constexpr std::array<std::string_view, 12> kShapeFamilies = {
    "disk",  "ring",    "square", "triangle",     "cross",    "bar",
    "l_shape", "diamond", "star", "checker_blob", "crescent", "t_shape"};

inline std::size_t count_foreground(const Tensor& mask) {
  std::size_t n = 0;
  for (double v : mask.values()) n += v > 0.5 ? 1 : 0;
  return n;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline bool inside_polygon(double u, double v, const std::vector<std::array<double, 2>>& poly) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > v) != (b[1] > v) && u < (b[0] - a[0]) * (v - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
  }
  return in;
}

inline const std::vector<std::array<double, 2>>& star_polygon() {
  static const std::vector<std::array<double, 2>> poly = [] {
    std::vector<std::array<double, 2>> p;
    for (int i = 0; i < 10; ++i) {
      const double radius = i % 2 == 0 ? 1.0 : 0.45;
      const double angle = -std::numbers::pi / 2 + i * std::numbers::pi / 5;
      p.push_back({radius * std::cos(angle), radius * std::sin(angle)});
    }
    return p;
  }();
  return poly;
}

inline bool in_range(double x, double lo, double hi) { return x >= lo && x <= hi; }

/// Membership test in the unit frame of a shape family (extent roughly [-1,1]^2).
inline bool shape_contains(std::size_t family, double u, double v) {
  const double r2 = u * u + v * v;
  switch (family) {
    case 0: return r2 <= 1.0;
    case 1: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case 2: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 3: return v <= 0.5 && std::sqrt(3.0) * u - v <= 1.0 && -std::sqrt(3.0) * u - v <= 1.0;
    case 4:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 5: return std::abs(u) <= 1.0 && std::abs(v) <= 0.25;
    case 6:
      return (in_range(u, -0.8, -0.3) && in_range(v, -0.9, 0.9)) ||
             (in_range(u, -0.8, 0.8) && in_range(v, 0.4, 0.9));
    case 7: return std::abs(u) + std::abs(v) / 0.55 <= 1.0;
    case 8: return inside_polygon(u, v, star_polygon());
    case 9: {
      if (!in_range(u, -0.9, 0.9) || !in_range(v, -0.9, 0.9)) return false;
      const int i = std::min(2, static_cast<int>((u + 0.9) / 0.6));
      const int j = std::min(2, static_cast<int>((v + 0.9) / 0.6));
      return (i + j) % 2 == 0;
    }
    case 10: return r2 <= 1.0 && (u - 0.45) * (u - 0.45) + v * v > 0.75 * 0.75;
    case 11:
      return (std::abs(u) <= 0.9 && in_range(v, -0.9, -0.5)) || (std::abs(u) <= 0.22 && in_range(v, -0.9, 0.9));
    default: throw std::invalid_argument("unknown shape family");
  }
}

struct Placement {
  std::size_t family;
  double cx, cy, radius, angle;
  std::array<double, 3> color;
};

inline std::vector<std::uint8_t> rasterize(const Placement& p, std::size_t h, std::size_t w) {
  std::vector<std::uint8_t> m(h * w, 0);
  const double c = std::cos(p.angle), s = std::sin(p.angle);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - p.cx) / p.radius;
      const double dy = (static_cast<double>(y) + 0.5 - p.cy) / p.radius;
      const double u = c * dx + s * dy;
      const double v = -s * dx + c * dy;
      if (shape_contains(p.family, u, v)) m[y * w + x] = 1;
    }
  }
  return m;
}

inline Placement random_placement(std::size_t family, std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = static_cast<double>(size);
  Placement p;
  p.family = family;
  p.radius = s * (0.16 + 0.14 * unit(rng));
  const double margin = 0.8 * p.radius;
  p.cx = margin + (s - 2 * margin) * unit(rng);
  p.cy = margin + (s - 2 * margin) * unit(rng);
  p.angle = 2 * std::numbers::pi * unit(rng);
  for (double& ch : p.color) ch = 0.35 + 0.65 * unit(rng);
  return p;
}

inline double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

inline ImageSample render_sample(int category, std::size_t num_categories, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.04);
  const std::size_t plane = size * size;
  const double min_frac = 0.02, max_frac = 0.6;

  for (;;) {
    const Placement target = random_placement(static_cast<std::size_t>(category), size, rng);
    const auto target_mask = rasterize(target, size, size);
    std::size_t area = 0;
    for (auto b : target_mask) area += b;
    const double frac = static_cast<double>(area) / static_cast<double>(plane);
    if (frac < min_frac || frac > max_frac) continue;

    std::vector<Placement> distractors;
    std::vector<std::vector<std::uint8_t>> distractor_masks;
    const int n_distract = static_cast<int>(rng() % 3);
    for (int d = 0; d < n_distract; ++d) {
      std::size_t family = rng() % (num_categories - 1);
      if (family >= static_cast<std::size_t>(category)) ++family;
      for (int attempt = 0; attempt < 20; ++attempt) {
        Placement p = random_placement(family, size, rng);
        auto m = rasterize(p, size, size);
        std::size_t overlap = 0;
        for (std::size_t i = 0; i < plane; ++i) overlap += m[i] & target_mask[i];
        if (overlap * 10 < area) {
          distractors.push_back(p);
          distractor_masks.push_back(std::move(m));
          break;
        }
      }
    }

    std::array<double, 3> background;
    for (double& b : background) b = 0.3 * unit(rng);
    std::vector<double> pixels(3 * plane);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < plane; ++i) pixels[ch * plane + i] = background[ch];
    auto paint = [&](const Placement& p, const std::vector<std::uint8_t>& m) {
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < plane; ++i)
          if (m[i]) pixels[ch * plane + i] = p.color[ch];
    };
    for (std::size_t d = 0; d < distractors.size(); ++d) paint(distractors[d], distractor_masks[d]);
    paint(target, target_mask);
    for (double& px : pixels) px = quantize(px + noise(rng));

    std::vector<double> mask(plane);
    for (std::size_t i = 0; i < plane; ++i) mask[i] = target_mask[i];
    return ImageSample{Tensor({3, size, size}, std::move(pixels)), Tensor({size, size}, std::move(mask)), category};
  }
}

}  // namespace detail

/// Procedural shape dataset: category c draws shape family c. Each image holds
/// one target instance, 0-2 distractors of other families and pixel noise.
/// Pixel values are quantized to multiples of 1/255.
inline Dataset generate_synthetic_dataset(std::size_t num_categories, std::size_t images_per_category,
                                          std::size_t image_size, std::uint64_t seed) {
  if (num_categories < 8) throw std::invalid_argument("generate_synthetic_dataset: need at least 8 categories");
  if (num_categories > kShapeFamilies.size()) {
    throw std::invalid_argument("generate_synthetic_dataset: at most " + std::to_string(kShapeFamilies.size()) +
                                " categories available");
  }
  if (image_size < 32 || image_size > 128) {
    throw std::invalid_argument("generate_synthetic_dataset: image size must lie in [32, 128]");
  }
  if (images_per_category == 0) throw std::invalid_argument("generate_synthetic_dataset: need images per category");
  Dataset ds;
  ds.height = ds.width = image_size;
  ds.seed = seed;
  ds.samples.reserve(num_categories * images_per_category);
  for (std::size_t c = 0; c < num_categories; ++c) {
    for (std::size_t i = 0; i < images_per_category; ++i) {
      const std::uint64_t index = c * images_per_category + i;
      const std::uint64_t sample_seed = detail::splitmix64(seed ^ detail::splitmix64(index + 1));
      ds.samples.push_back(detail::render_sample(static_cast<int>(c), num_categories, image_size, sample_seed));
    }
  }
  return ds;
}

struct FoldSplit {
  std::vector<int> train_categories;
  std::vector<int> test_categories;
};

/// Fold i tests on the i-th contiguous block of sorted ids and trains on the rest.
/// Remainders go to the earliest folds.
inline std::vector<FoldSplit> make_fold_splits(std::vector<int> category_ids, std::size_t num_folds) {
  std::sort(category_ids.begin(), category_ids.end());
  category_ids.erase(std::unique(category_ids.begin(), category_ids.end()), category_ids.end());
  if (num_folds == 0 || num_folds > category_ids.size()) {
    throw std::invalid_argument("make_fold_splits: " + std::to_string(num_folds) + " folds for " +
                                std::to_string(category_ids.size()) + " categories");
  }
  const std::size_t base = category_ids.size() / num_folds, extra = category_ids.size() % num_folds;
  std::vector<FoldSplit> folds;
  std::size_t begin = 0;
  for (std::size_t f = 0; f < num_folds; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    FoldSplit split;
    for (std::size_t i = 0; i < category_ids.size(); ++i) {
      (i >= begin && i < begin + len ? split.test_categories : split.train_categories).push_back(category_ids[i]);
    }
    folds.push_back(std::move(split));
    begin += len;
  }
  return folds;
}

enum class Phase { train, test };

/// k support samples plus one query, all of category c.
struct Episode {
  std::vector<ImageSample> support;
  ImageSample query;
  int category = 0;
  std::vector<std::size_t> sample_indices;  // into the source dataset; support first, query last
};

/// Samples c uniformly from the phase's categories holding at least k+1
/// images, then k+1 distinct images of c. The query is drawn first and the
/// supports in order, so with equal rng state and equally eligible categories
/// a k-shot support set is a prefix of any larger one for the same query.
inline Episode sample_episode(const Dataset& ds, const FoldSplit& split, std::size_t k, std::mt19937_64& rng,
                              Phase phase) {
  if (k < 1) throw std::invalid_argument("sample_episode: k must be at least 1");
  const auto& allowed = phase == Phase::train ? split.train_categories : split.test_categories;
  std::vector<int> eligible;
  std::vector<std::vector<std::size_t>> pools;
  for (int c : allowed) {
    auto idx = ds.indices_of(c);
    if (idx.size() >= k + 1) {
      eligible.push_back(c);
      pools.push_back(std::move(idx));
    }
  }
  if (eligible.empty()) {
    throw std::runtime_error("sample_episode: no category has " + std::to_string(k + 1) + " images");
  }
  const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng);
  auto& pool = pools[pick];
  for (std::size_t i = 0; i < k + 1; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, pool.size() - 1)(rng);
    std::swap(pool[i], pool[j]);
  }
  Episode ep;
  ep.category = eligible[pick];
  for (std::size_t i = 1; i <= k; ++i) {
    ep.support.push_back(ds.samples[pool[i]]);
    ep.sample_indices.push_back(pool[i]);
  }
  ep.query = ds.samples[pool[0]];
  ep.sample_indices.push_back(pool[0]);
  return ep;
}

enum class BoxMode { single, per_component };

/// Filled axis-aligned box(es) around the foreground. `single` draws one tight
/// box; `per_component` one box per 8-connected component.
inline Tensor mask_to_bbox_mask(const Tensor& mask, BoxMode mode = BoxMode::single) {
  if (mask.rank() != 2) throw ShapeError("mask_to_bbox_mask: expected H x W mask");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  auto m = mask.values();
  if (count_foreground(mask) == 0) throw std::invalid_argument("mask_to_bbox_mask: empty mask");
  std::vector<double> out(h * w, 0.0);
  auto fill = [&](std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
    for (std::size_t y = y0; y <= y1; ++y)
      for (std::size_t x = x0; x <= x1; ++x) out[y * w + x] = 1.0;
  };
  if (mode == BoxMode::single) {
    std::size_t y0 = h, y1 = 0, x0 = w, x1 = 0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (m[y * w + x] > 0.5) {
          y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
        }
    fill(y0, y1, x0, x1);
    return Tensor({h, w}, std::move(out));
  }
  std::vector<std::uint8_t> seen(h * w, 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (m[start] <= 0.5 || seen[start]) continue;
    std::size_t y0 = h, y1 = 0, x0 = w, x1 = 0;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / w, x = p % w;
      y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
          if (m[q] > 0.5 && !seen[q]) {
            seen[q] = 1;
            stack.push_back(q);
          }
        }
      }
    }
    fill(y0, y1, x0, x1);
  }
  return Tensor({h, w}, std::move(out));
}

}  // namespace crcnet::data
