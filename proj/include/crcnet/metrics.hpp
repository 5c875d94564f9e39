#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "crcnet/tensor.hpp"

namespace crcnet::metrics {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  std::uint64_t episodes = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp, fp += o.fp, fn += o.fn, episodes += o.episodes;
    return *this;
  }
};

/// Intersection over union; the empty-vs-empty case counts as perfect.
inline double iou(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  const std::uint64_t denom = tp + fp + fn;
  return denom == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(denom);
}

inline double iou(const ConfusionCounts& c) { return iou(c.tp, c.fp, c.fn); }

/// Pooled per-class foreground counts plus category-agnostic fg/bg counts.
class MetricsLedger {
 public:
  /// Masks are H x W with foreground > 0.5.
  void update(const Tensor& pred, const Tensor& gt, int class_id) {
    if (pred.shape() != gt.shape()) {
      throw ShapeError("confusion_update: prediction " + to_string(pred.shape()) + " vs ground truth " +
                       to_string(gt.shape()));
    }
    auto p = pred.values();
    auto g = gt.values();
    ConfusionCounts c;
    std::uint64_t tn = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const bool pf = p[i] > 0.5, gf = g[i] > 0.5;
      if (pf && gf) ++c.tp;
      else if (pf) ++c.fp;
      else if (gf) ++c.fn;
      else ++tn;
    }
    c.episodes = 1;
    per_class_[class_id] += c;
    foreground_ += c;
    background_ += ConfusionCounts{tn, c.fn, c.fp, 1};
  }

  void merge(const MetricsLedger& other) {
    for (const auto& [id, c] : other.per_class_) per_class_[id] += c;
    foreground_ += other.foreground_;
    background_ += other.background_;
  }

  const std::map<int, ConfusionCounts>& per_class() const { return per_class_; }
  const ConfusionCounts& foreground() const { return foreground_; }
  const ConfusionCounts& background() const { return background_; }
  bool empty() const { return foreground_.episodes == 0; }

  double class_iou(int class_id) const {
    auto it = per_class_.find(class_id);
    if (it == per_class_.end() || it->second.episodes == 0) {
      throw std::invalid_argument("miou: class " + std::to_string(class_id) + " has no evaluated episodes");
    }
    return iou(it->second);
  }

 private:
  std::map<int, ConfusionCounts> per_class_;
  ConfusionCounts foreground_;
  ConfusionCounts background_;
};

inline void confusion_update(MetricsLedger& ledger, const Tensor& pred, const Tensor& gt, int class_id) {
  ledger.update(pred, gt, class_id);
}

/// Unweighted mean of per-class IoU over `classes`.
inline double miou(const MetricsLedger& ledger, const std::vector<int>& classes) {
  if (classes.empty()) throw std::invalid_argument("miou: empty class set");
  double sum = 0.0;
  for (int c : classes) sum += ledger.class_iou(c);
  return sum / static_cast<double>(classes.size());
}

/// Mean over every class present in the ledger.
inline double miou(const MetricsLedger& ledger) {
  std::vector<int> classes;
  for (const auto& [id, c] : ledger.per_class()) classes.push_back(id);
  return miou(ledger, classes);
}

inline double fbiou(const MetricsLedger& ledger) {
  if (ledger.empty()) throw std::invalid_argument("fbiou: empty ledger");
  return 0.5 * (iou(ledger.foreground()) + iou(ledger.background()));
}

}  // namespace crcnet::metrics
