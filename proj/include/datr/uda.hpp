#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "datr/numkit.hpp"

// Training objectives for the adaptation loop: supervised segmentation loss
// on the source domain, self-training on target pseudo-labels, and
// class-wise feature aggregation, which keeps one feature prototype per
// class and domain in a memory bank, mixes it epoch-wise into each batch's
// centers and pulls the two domains together with an MSE loss.
namespace datr::uda {

namespace nk = datr::numkit;

inline constexpr int kIgnore = 255;

// Mean NLL over non-ignored pixels; probabilities in, clamped log inside.
template <typename T>
nk::Tensor<T> seg_loss(const nk::Tensor<T>& probs, const std::vector<int>& labels,
                       bool* all_ignored = nullptr) {
  return nk::cross_entropy_mean(probs, labels, kIgnore, all_ignored);
}

struct PseudoLabelMap {
  int h = 0, w = 0;
  std::vector<int> labels;        // argmax, or kIgnore below threshold
  std::vector<double> confidence;  // max probability per pixel
};

// Per-pixel argmax of a probability map; pixels whose best probability is
// below `threshold` become kIgnore. threshold 0 keeps every pixel.
template <typename T>
PseudoLabelMap make_pseudo_labels(const nk::Tensor<T>& probs, double threshold = 0.0) {
  const long n = probs.rows();
  const int k = probs.last_dim();
  PseudoLabelMap pl;
  if (probs.rank() == 3) {
    pl.h = probs.size(0);
    pl.w = probs.size(1);
  } else {
    pl.h = static_cast<int>(n);
    pl.w = 1;
  }
  pl.labels.resize(n);
  pl.confidence.resize(n);
  for (long r = 0; r < n; ++r) {
    const T* row = probs.val().data() + r * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    pl.confidence[r] = static_cast<double>(row[best]);
    pl.labels[r] = pl.confidence[r] < threshold ? kIgnore : best;
  }
  return pl;
}

template <typename T>
nk::Tensor<T> ss_loss(const nk::Tensor<T>& probs, const PseudoLabelMap& pl,
                      bool* all_ignored = nullptr) {
  return nk::cross_entropy_mean(probs, pl.labels, kIgnore, all_ignored);
}

template <typename T>
struct ClassCenters {
  nk::Tensor<T> centers;  // {K, D}, zero rows for absent classes
  std::vector<long> counts;
  std::vector<unsigned char> valid;
};

// Per-class mean of decoder features under a label map aligned to the
// feature resolution. Gradients flow back into `feat`.
template <typename T>
ClassCenters<T> class_centers(const nk::Tensor<T>& feat, const std::vector<int>& labels, int k) {
  ClassCenters<T> out;
  out.centers = nk::masked_mean_rows(feat, labels, k, &out.counts, kIgnore);
  out.valid.resize(k);
  for (int i = 0; i < k; ++i) out.valid[i] = out.counts[i] > 0;
  return out;
}

// Nearest-neighbor downsample of a full-resolution label map to h2 x w2.
inline std::vector<int> downsample_labels(const std::vector<int>& labels, int h, int w, int h2,
                                          int w2) {
  std::vector<int> out(static_cast<std::size_t>(h2) * w2);
  for (int i = 0; i < h2; ++i)
    for (int j = 0; j < w2; ++j) {
      int si = static_cast<int>((i + 0.5) * h / h2);
      int sj = static_cast<int>((j + 0.5) * w / w2);
      si = std::min(si, h - 1);
      sj = std::min(sj, w - 1);
      out[static_cast<std::size_t>(i) * w2 + j] = labels[static_cast<std::size_t>(si) * w + sj];
    }
  return out;
}

template <typename T>
struct ClassCenterBank {
  int k = 0, dim = 0;
  std::vector<T> source, target;  // K x D prototypes
  std::vector<unsigned char> valid_source, valid_target;
  int epoch = 1;

  static ClassCenterBank make(int k, int dim) {
    ClassCenterBank b;
    b.k = k;
    b.dim = dim;
    b.source.assign(static_cast<std::size_t>(k) * dim, T(0));
    b.target.assign(static_cast<std::size_t>(k) * dim, T(0));
    b.valid_source.assign(k, 0);
    b.valid_target.assign(k, 0);
    return b;
  }
};

namespace detail {

// stored <- (1 - 1/e) stored + (1/e) current per valid current row; a row
// whose stored side was never seen adopts the current value outright.
template <typename T>
void mix_into(std::vector<T>& stored, std::vector<unsigned char>& stored_valid,
              const std::vector<T>& current, const std::vector<unsigned char>& current_valid,
              int k, int dim, int e) {
  const T in = T(1) / static_cast<T>(e);
  const T keep = T(1) - in;
  for (int i = 0; i < k; ++i) {
    if (!current_valid[i]) continue;
    T* dst = stored.data() + static_cast<std::size_t>(i) * dim;
    const T* src = current.data() + static_cast<std::size_t>(i) * dim;
    if (!stored_valid[i]) {
      std::copy_n(src, dim, dst);
      stored_valid[i] = 1;
    } else {
      for (int d = 0; d < dim; ++d) dst[d] = keep * dst[d] + in * src[d];
    }
  }
}

}  // namespace detail

// Eq.-style iterative center mixing with coefficients (1-1/e, 1/e). At e=1
// the stored value is replaced by the current batch center.
template <typename T>
ClassCenterBank<T> bank_update(ClassCenterBank<T> bank, const std::vector<T>& new_source,
                               const std::vector<unsigned char>& valid_source,
                               const std::vector<T>& new_target,
                               const std::vector<unsigned char>& valid_target, int e) {
  if (e < 1) throw std::invalid_argument("bank_update: epoch index must be >= 1");
  if (static_cast<int>(valid_source.size()) != bank.k ||
      static_cast<int>(valid_target.size()) != bank.k)
    throw std::invalid_argument("bank_update: validity flags must have K entries");
  detail::mix_into(bank.source, bank.valid_source, new_source, valid_source, bank.k, bank.dim, e);
  detail::mix_into(bank.target, bank.valid_target, new_target, valid_target, bank.k, bank.dim, e);
  bank.epoch = e;
  return bank;
}

// Differentiable mixed center for the current batch: rows with a current
// center get (1-1/e) stored + (1/e) current (stored treated as constant and
// as the current value when previously unseen); rows without one fall back
// to the stored constant.
template <typename T>
nk::Tensor<T> mixed_centers_expr(const nk::Tensor<T>& current,
                                 const std::vector<unsigned char>& current_valid,
                                 const std::vector<T>& stored,
                                 const std::vector<unsigned char>& stored_valid, int e) {
  if (e < 1) throw std::invalid_argument("mixed_centers_expr: epoch index must be >= 1");
  const int k = current.size(0), dim = current.size(1);
  std::vector<T> coef(k, T(0));
  std::vector<T> offset(static_cast<std::size_t>(k) * dim, T(0));
  const T in = T(1) / static_cast<T>(e);
  for (int i = 0; i < k; ++i) {
    if (current_valid[i]) {
      if (stored_valid[i]) {
        coef[i] = in;
        for (int d = 0; d < dim; ++d)
          offset[static_cast<std::size_t>(i) * dim + d] =
              (T(1) - in) * stored[static_cast<std::size_t>(i) * dim + d];
      } else {
        coef[i] = T(1);
      }
    } else if (stored_valid[i]) {
      for (int d = 0; d < dim; ++d)
        offset[static_cast<std::size_t>(i) * dim + d] =
            stored[static_cast<std::size_t>(i) * dim + d];
    }
  }
  return nk::add(nk::row_scale(current, coef),
                 nk::Tensor<T>::from({k, dim}, std::move(offset)));
}

// MSE between mixed source and target centers over classes valid in both
// domains: (1/num) sum_i mean_d (Cs_i - Ct_i)^2; zero when num == 0.
template <typename T>
nk::Tensor<T> cfa_loss_expr(const nk::Tensor<T>& centers_s, const nk::Tensor<T>& centers_t,
                            const std::vector<unsigned char>& valid_both) {
  const int dim = centers_s.size(1);
  std::vector<int> rows;
  for (int i = 0; i < static_cast<int>(valid_both.size()); ++i)
    if (valid_both[i]) rows.push_back(i);
  if (rows.empty()) return nk::Tensor<T>::scalar(T(0));
  auto ds = nk::gather_rows(centers_s, rows);
  auto dt = nk::gather_rows(centers_t, rows);
  auto diff = nk::sub(ds, dt);
  return nk::scale(nk::sum_all(nk::mul(diff, diff)),
                   T(1) / static_cast<T>(rows.size() * dim));
}

// Bank-level CFA loss (no gradients): reads the stored prototypes.
template <typename T>
T cfa_loss(const ClassCenterBank<T>& bank) {
  double acc = 0;
  long num = 0;
  for (int i = 0; i < bank.k; ++i) {
    if (!bank.valid_source[i] || !bank.valid_target[i]) continue;
    double mse = 0;
    for (int d = 0; d < bank.dim; ++d) {
      const double diff = static_cast<double>(bank.source[i * bank.dim + d]) -
                          static_cast<double>(bank.target[i * bank.dim + d]);
      mse += diff * diff;
    }
    acc += mse / bank.dim;
    ++num;
  }
  return num ? static_cast<T>(acc / num) : T(0);
}

// Sum of squared source-target prototype distances over doubly-valid
// classes; the adaptation loop logs this each epoch.
template <typename T>
double center_distance(const ClassCenterBank<T>& bank) {
  double acc = 0;
  for (int i = 0; i < bank.k; ++i) {
    if (!bank.valid_source[i] || !bank.valid_target[i]) continue;
    for (int d = 0; d < bank.dim; ++d) {
      const double diff = static_cast<double>(bank.source[i * bank.dim + d]) -
                          static_cast<double>(bank.target[i * bank.dim + d]);
      acc += diff * diff;
    }
  }
  return acc;
}

// Polynomial decay with power 0.9 from base_lr to zero across total_steps.
inline double poly_lr(long step, long total_steps, double base_lr) {
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("poly_lr: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
  return base_lr * std::pow(1.0 - static_cast<double>(step) / total_steps, 0.9);
}

}  // namespace datr::uda
