#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "dinoyolo/tensor.h"

namespace dinoyolo {

template <typename T>
struct Node {
  Tensor<T> value;
  std::optional<Tensor<T>> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents that require grad.
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer of a node, zero-allocated on first use.
  Tensor<T>& grad_buffer();
};

/// Handle onto a node in the dynamic computation graph. Copies share the node.
template <typename T>
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor<T> value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  /// Direct access for optimizers and checkpoint loading; bypasses the graph.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_ && node_->grad.has_value(); }
  const Tensor<T>& grad() const;
  void zero_grad();
  void drop_grad();

  /// Reverse-mode sweep from this scalar; gradients accumulate into every
  /// reachable node that requires grad.
  void backward() const;
  /// Reverse-mode sweep seeded with an explicit output gradient (any shape).
  void backward_with(const Tensor<T>& seed) const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Result of an op. Records parents and backward only when grad mode is on
  /// and some input requires grad.
  static Variable make_result(Tensor<T> value, std::vector<Variable> inputs,
                              std::function<void(Node<T>&)> backward_fn);

 private:
  std::shared_ptr<Node<T>> node_;
};

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Compares reverse-mode gradients against central differences.
///
/// The op output is reduced to a scalar through a fixed pseudo-random
/// projection, so non-scalar ops are checked along a generic direction.
/// Every element of every input that requires grad is perturbed by +-eps.
/// The error per element is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3);
/// the floor keeps near-zero gradients from turning rounding noise into
/// spurious failures. Returns the worst error seen.
double grad_check(const std::function<Variable<double>(std::span<const Variable<double>>)>& op,
                  std::vector<Variable<double>> inputs, double eps = 1e-6, uint64_t projection_seed = 7);

extern template class Variable<float>;
extern template class Variable<double>;

}  // namespace dinoyolo
