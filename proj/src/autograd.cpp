#include "dinoyolo/autograd.h"

#include <cmath>
#include <random>
#include <unordered_set>

namespace dinoyolo {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (!grad) grad.emplace(value.shape());
  return *grad;
}

template <typename T>
Variable<T>::Variable(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
const Tensor<T>& Variable<T>::grad() const {
  if (!has_grad()) throw std::logic_error("variable has no gradient buffer");
  return *node_->grad;
}

template <typename T>
void Variable<T>::zero_grad() {
  if (node_ && node_->grad) node_->grad->fill(T(0));
}

template <typename T>
void Variable<T>::drop_grad() {
  if (node_) node_->grad.reset();
}

template <typename T>
Variable<T> Variable<T>::make_result(Tensor<T> value, std::vector<Variable> inputs,
                                     std::function<void(Node<T>&)> backward_fn) {
  Variable out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(inputs.size());
  for (auto& in : inputs) out.node_->parents.push_back(in.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
void Variable<T>::backward() const {
  if (!node_) throw std::logic_error("backward on undefined variable");
  if (node_->value.numel() != 1) {
    throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(node_->value.shape()));
  }
  backward_with(Tensor<T>(node_->value.shape(), T(1)));
}

template <typename T>
void Variable<T>::backward_with(const Tensor<T>& seed) const {
  if (!node_) throw std::logic_error("backward on undefined variable");
  if (seed.shape() != node_->value.shape()) {
    throw ShapeError("backward seed shape " + shape_str(seed.shape()) + " does not match output " +
                     shape_str(node_->value.shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; reversed it is a topological order from the root.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (n->backward_fn) n->grad.reset();
  }
  Tensor<T>& root = node_->grad_buffer();
  for (int64_t i = 0; i < seed.numel(); ++i) root[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward_fn || !n->grad) continue;
    n->backward_fn(*n);
    n->grad.reset();
  }
}

double grad_check(const std::function<Variable<double>(std::span<const Variable<double>>)>& op,
                  std::vector<Variable<double>> inputs, double eps, uint64_t projection_seed) {
  Variable<double> out = op(inputs);
  std::mt19937_64 rng(projection_seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor<double> proj(out.shape());
  for (int64_t i = 0; i < proj.numel(); ++i) proj[i] = dist(rng);

  auto projected = [&]() {
    NoGradGuard guard;
    Variable<double> y = op(inputs);
    double s = 0.0;
    for (int64_t i = 0; i < proj.numel(); ++i) s += y.value()[i] * proj[i];
    return s;
  };

  for (auto& in : inputs) in.drop_grad();
  out.backward_with(proj);

  double worst = 0.0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    Tensor<double> analytic = in.has_grad() ? in.grad() : Tensor<double>(in.shape());
    Tensor<double>& x = in.mutable_value();
    for (int64_t i = 0; i < x.numel(); ++i) {
      const double saved = x[i];
      x[i] = saved + eps;
      const double plus = projected();
      x[i] = saved - eps;
      const double minus = projected();
      x[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

template struct Node<float>;
template struct Node<double>;
template class Variable<float>;
template class Variable<double>;

}  // namespace dinoyolo
