#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "qfs/common.hpp"
#include "qfs/random.hpp"

namespace qfs {

namespace detail {

inline uint64_t next_node_seq() {
  static thread_local uint64_t counter = 0;
  return ++counter;
}

inline bool& autograd_flag() {
  static thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated on demand, same extent as values
  bool requires_grad = false;
  bool leaf = true;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates into parents' grads given this node's grad.
  std::function<void(const Node&)> backward;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

}  // namespace detail

// Disables autograd recording within a scope (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::autograd_flag()) { detail::autograd_flag() = false; }
  ~NoGradGuard() { detail::autograd_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::autograd_flag(); }

// Dense row-major tensor with reverse-mode differentiation records.
// T is the element type (float or double). A Tensor is a cheap handle to a
// shared node; values are written only while building the node or by the
// optimizer (leaves). No implicit broadcasting except scalar-vs-tensor.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    check(shape_numel(shape) == static_cast<int64_t>(values.size()),
          "tensor values count " + std::to_string(values.size()) +
              " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<detail::Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    t.node_->seq = detail::next_node_seq();
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)), T(0));
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)), value);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return from(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->values.size()); }
  int64_t dim(size_t i) const { return node_->shape.at(i); }
  size_t rank() const { return node_->shape.size(); }

  const std::vector<T>& values() const { return node_->values; }
  std::vector<T>& mutable_values() { return node_->values; }
  const T* data() const { return node_->values.data(); }
  T* data() { return node_->values.data(); }

  T item() const {
    check(numel() == 1, "item() requires a single-element tensor, got shape " + shape_str(shape()));
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  Tensor& set_requires_grad(bool rg) {
    check(node_->leaf, "requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  const std::vector<T>& grad() const {
    check(has_grad(), "tensor has no gradient");
    return node_->grad;
  }
  std::vector<T>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // A leaf copy sharing no graph history (gradient flow stops here).
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::Node<T>>();
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    t.node_->seq = detail::next_node_seq();
    return t;
  }

  // Reverse-mode pass from a scalar. Populates grad on every node with
  // requires_grad reachable through the recorded graph. Deterministic:
  // nodes run in descending creation order, a valid reverse topological
  // order because parents are always created before children.
  void backward() const {
    check(numel() == 1,
          "backward() requires a scalar loss, got shape " + shape_str(shape()));
    using NodeT = detail::Node<T>;
    std::vector<NodeT*> reach;
    std::unordered_set<NodeT*> seen;
    std::vector<NodeT*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
      NodeT* n = stack.back();
      stack.pop_back();
      reach.push_back(n);
      for (auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(reach.begin(), reach.end(),
              [](const NodeT* a, const NodeT* b) { return a->seq > b->seq; });
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (NodeT* n : reach) {
      if (n->backward && n->grad.size() == n->values.size()) n->backward(*n);
    }
  }

  // --- op-construction helpers (used by ops.hpp) ---

  static Tensor make_op(Shape shape, std::vector<T> values,
                        std::vector<Tensor> parents,
                        std::function<void(const detail::Node<T>&)> backward_fn) {
    Tensor t = from(std::move(shape), std::move(values));
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& p : parents) {
        if (p.node_->requires_grad) {
          needs = true;
          break;
        }
      }
    }
    if (needs) {
      t.node_->requires_grad = true;
      t.node_->leaf = false;
      t.node_->parents.reserve(parents.size());
      for (auto& p : parents) t.node_->parents.push_back(p.node_);
      t.node_->backward = std::move(backward_fn);
    }
    return t;
  }

  std::shared_ptr<detail::Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

}  // namespace qfs
