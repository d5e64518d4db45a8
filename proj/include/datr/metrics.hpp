#pragma once

#include <string>
#include <vector>

#include "datr/uda.hpp"

// Confusion-matrix segmentation metrics. The mean IoU averages only over
// classes that appear in the ground truth, since small splits may miss
// classes entirely; ignored pixels contribute nothing.
namespace datr::metrics {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int k) : k_(k), counts_(static_cast<std::size_t>(k) * k, 0) {}

  void add(const std::vector<int>& pred, const std::vector<int>& gt) {
    if (pred.size() != gt.size())
      throw std::invalid_argument("confusion: prediction and ground truth sizes differ");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (gt[i] == uda::kIgnore) continue;
      if (gt[i] < 0 || gt[i] >= k_ || pred[i] < 0 || pred[i] >= k_)
        throw std::invalid_argument("confusion: label outside [0, K)");
      ++counts_[static_cast<std::size_t>(gt[i]) * k_ + pred[i]];
    }
  }

  int classes() const { return k_; }
  long long at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * k_ + pred]; }

  struct Report {
    std::vector<double> iou;        // per class; 0 for absent classes
    std::vector<bool> present;      // class appears in the ground truth
    double miou = 0;                // mean over present classes
  };

  Report report() const {
    Report rep;
    rep.iou.resize(k_, 0.0);
    rep.present.resize(k_, false);
    double sum = 0;
    int present = 0;
    for (int c = 0; c < k_; ++c) {
      long long tp = at(c, c), fn = 0, fp = 0;
      for (int o = 0; o < k_; ++o)
        if (o != c) {
          fn += at(c, o);
          fp += at(o, c);
        }
      rep.present[c] = (tp + fn) > 0;
      if (!rep.present[c]) continue;
      rep.iou[c] = (tp + fp + fn) ? static_cast<double>(tp) / (tp + fp + fn) : 0.0;
      sum += rep.iou[c];
      ++present;
    }
    rep.miou = present ? sum / present : 0.0;
    return rep;
  }

 private:
  int k_;
  std::vector<long long> counts_;
};

inline double miou(const std::vector<int>& pred, const std::vector<int>& gt, int k) {
  ConfusionMatrix cm(k);
  cm.add(pred, gt);
  return cm.report().miou;
}

}  // namespace datr::metrics
