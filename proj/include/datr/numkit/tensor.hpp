#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace datr::numkit {

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
  std::vector<int> shape;
  std::vector<T> val;
  std::vector<T> grad;  // allocated on demand, same length as val
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backfn;  // pulls this->grad into parents

  long numel() const { return static_cast<long>(val.size()); }
  bool is_leaf() const { return parents.empty() && !backfn; }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), T(0));
  }
};

// Scoped switch that disables graph construction (inference / oracles).
inline int& nograd_depth() {
  thread_local int depth = 0;
  return depth;
}
inline bool grad_enabled() { return nograd_depth() == 0; }

struct NoGradGuard {
  NoGradGuard() { ++nograd_depth(); }
  ~NoGradGuard() { --nograd_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Value-semantics handle onto a node of the reverse-mode graph. Copying a
// Tensor shares the node; data mutation is reserved for leaf parameters.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(std::vector<int> shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->val.assign(count(n->shape), v);
    n->requires_grad = requires_grad && grad_enabled();
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    if (count(shape) != static_cast<long>(data.size()))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->requires_grad = requires_grad && grad_enabled();
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int size(int axis) const { return n_->shape.at(static_cast<std::size_t>(axis)); }
  long numel() const { return n_ ? n_->numel() : 0; }
  int last_dim() const { return n_->shape.empty() ? 1 : n_->shape.back(); }
  long rows() const { return last_dim() ? numel() / last_dim() : 0; }

  std::vector<T>& val() { return n_->val; }
  const std::vector<T>& val() const { return n_->val; }
  std::vector<T>& grad() { return n_->grad; }
  const std::vector<T>& grad() const { return n_->grad; }
  bool has_grad() const { return n_ && !n_->grad.empty(); }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return n_->val[0];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool v) {
    if (!n_->is_leaf()) throw std::logic_error("requires_grad is settable on leaf tensors only");
    n_->requires_grad = v;
  }

  Tensor detach() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = n_->shape;
    n->val = n_->val;
    return Tensor(std::move(n));
  }

  void zero_grad() { n_->grad.assign(n_->val.size(), T(0)); }

  // Reverse-mode sweep from a scalar. Interior grads are reset per call;
  // leaf grads accumulate until zero_grad so loss terms may be swept
  // separately.
  void backward() {
    if (numel() != 1) throw std::logic_error("backward() requires a scalar loss");
    std::vector<Node<T>*> order;
    topo_sort(n_.get(), order);
    for (Node<T>* node : order) {
      if (!node->requires_grad) continue;
      if (node->is_leaf())
        node->ensure_grad();
      else
        node->grad.assign(node->val.size(), T(0));
    }
    if (!n_->requires_grad) return;
    n_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backfn && node->requires_grad) node->backfn(*node);
    }
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

  static Tensor make_op(std::vector<int> shape, std::vector<T> val,
                        std::vector<std::shared_ptr<Node<T>>> parents,
                        std::function<void(Node<T>&)> backfn) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->val = std::move(val);
#ifndef NDEBUG
    for (T v : n->val)
      if (!std::isfinite(static_cast<double>(v)))
        throw std::runtime_error("non-finite value produced by forward op");
#endif
    if (grad_enabled()) {
      bool need = false;
      for (const auto& p : parents) need = need || (p && p->requires_grad);
      if (need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backfn = std::move(backfn);
      }
    }
    return Tensor(std::move(n));
  }

 private:
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static long count(const std::vector<int>& shape) {
    long c = 1;
    for (int d : shape) {
      if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
      c *= d;
    }
    return c;
  }

  static void topo_sort(Node<T>* root, std::vector<Node<T>*>& order) {
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx++].get();
        if (p && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<T>> n_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace datr::numkit
