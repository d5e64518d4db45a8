#pragma once

#include <cmath>
#include <vector>

#include "datr/numkit/tensor.hpp"

namespace datr::numkit {

// Decoupled weight decay Adam with bias correction. Moment buffers are
// keyed by registration order, which must match the checkpoint tensor
// table for exact resume.
template <typename T>
class AdamW {
 public:
  T beta1 = static_cast<T>(0.9);
  T beta2 = static_cast<T>(0.999);
  T eps = static_cast<T>(1e-8);
  T weight_decay = static_cast<T>(1e-4);

  explicit AdamW(std::vector<Tensor<T>> params) : params_(std::move(params)) {
    slots_.reserve(params_.size());
    for (const auto& p : params_) slots_.push_back({std::vector<T>(p.numel(), T(0)),
                                                    std::vector<T>(p.numel(), T(0))});
  }

  void step(T lr) {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      auto& w = p.val();
      const auto& g = p.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = beta1 * m[j] + (T(1) - beta1) * g[j];
        v[j] = beta2 * v[j] + (T(1) - beta2) * g[j] * g[j];
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        w[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[j]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }

  const std::vector<Tensor<T>>& params() const { return params_; }

  // Moment buffers exposed for checkpointing.
  std::vector<T>& moment1(std::size_t i) { return slots_[i].m; }
  std::vector<T>& moment2(std::size_t i) { return slots_[i].v; }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<Tensor<T>> params_;
  std::vector<Slot> slots_;
  long t_ = 0;
};

// Single-tensor step with external state, matching the optimizer above.
template <typename T>
void adamw_step(Tensor<T>& param, const std::vector<T>& grad, std::vector<T>& m, std::vector<T>& v,
                long t, T lr, T beta1 = static_cast<T>(0.9), T beta2 = static_cast<T>(0.999),
                T eps = static_cast<T>(1e-8), T weight_decay = static_cast<T>(1e-4)) {
  const T bc1 = T(1) - std::pow(beta1, static_cast<T>(t));
  const T bc2 = T(1) - std::pow(beta2, static_cast<T>(t));
  auto& w = param.val();
  for (std::size_t j = 0; j < w.size(); ++j) {
    m[j] = beta1 * m[j] + (T(1) - beta1) * grad[j];
    v[j] = beta2 * v[j] + (T(1) - beta2) * grad[j] * grad[j];
    w[j] -= lr * ((m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps) + weight_decay * w[j]);
  }
}

}  // namespace datr::numkit
