#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "stda/tensor.hpp"

namespace stda {

// Process-wide switch for graph recording. Disabled graph recording makes ops
// return plain values, which is what inference and evaluation want.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && value.numel() > 0) grad = Tensor<T>(value.shape());
    return grad;
  }
  Tensor<T>& parent_grad(size_t i) { return parents[i]->grad_buffer(); }
  bool parent_needs_grad(size_t i) const { return parents[i]->requires_grad; }
};

/// Handle to a value in the differentiation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int axis) const { return node_->value.dim(axis); }
  int64_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // Gradient accumulated by the last backward(); zero-filled if never touched.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T(0));
  }
  bool has_grad() const { return !node_->grad.empty(); }

  // Seeds d(self)/d(self) = 1 and propagates. Self must be a scalar.
  void backward();

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  // Cuts the graph: same value, no history.
  Var detach() const { return Var(node_->value, false); }

  bool same_node(const Var& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Wraps an op result. Records parents and the backward closure only when
/// recording is enabled and at least one parent needs a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
  Var<T> out(std::move(value), false);
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = out.node();
  node.requires_grad = true;
  node.parents.reserve(parents.size());
  for (const auto& p : parents) node.parents.push_back(p.node_ptr());
  node.backward_fn = std::move(backward_fn);
  return out;
}

}  // namespace stda
