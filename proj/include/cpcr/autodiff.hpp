#ifndef CPCR_AUTODIFF_HPP
#define CPCR_AUTODIFF_HPP

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cpcr/tensor.hpp"

// Reverse-mode autodiff on Tensor4 values. Each op records its parents and
// a closure that scatters the node's gradient into them; backward() walks
// nodes in reverse creation order, which is a valid topological order since
// parents are always created before their consumers.

namespace cpcr {

template <class S>
struct Node {
  Tensor4<S> value;
  Tensor4<S> grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backprop;
};

namespace detail {
inline std::uint64_t next_node_id() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}
inline int& nograd_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

// Scoped guard: ops built while active produce constant leaves (no graph).
struct NoGrad {
  NoGrad() { ++detail::nograd_depth(); }
  ~NoGrad() { --detail::nograd_depth(); }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

inline bool grad_enabled() { return detail::nograd_depth() == 0; }

template <class S>
Tensor4<S>& ensure_grad(Node<S>& n) {
  if (!n.has_grad) {
    n.grad = Tensor4<S>(n.value.shape());
    n.grad.set_zero();
    n.has_grad = true;
  }
  return n.grad;
}

template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor4<S> value, bool requires_grad) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad && grad_enabled();
    n->id = detail::next_node_id();
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor4<S>& value() const { return node_->value; }
  const Shape4& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::shared_ptr<Node<S>> node() const { return node_; }

  // Gradient accumulated by the last backward(); zero tensor if untouched.
  const Tensor4<S>& grad() const { return ensure_grad(*node_); }
  void clear_grad() {
    node_->has_grad = false;
    node_->grad = Tensor4<S>();
  }

  Var detach() const { return leaf(node_->value, false); }

  // Root must be scalar. Gradients accumulate into every reachable node
  // with requires_grad set; leaves keep theirs until clear_grad().
  void backward() const {
    if (node_->value.size() != 1)
      throw ShapeError("backward: root must be a scalar, got " +
                       node_->value.shape().str());
    if (!node_->requires_grad) return;
    std::vector<Node<S>*> order;
    std::vector<Node<S>*> stack{node_.get()};
    std::unordered_set<Node<S>*> seen{node_.get()};
    while (!stack.empty()) {
      Node<S>* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (auto& p : n->parents)
        if (p->requires_grad && seen.insert(p.get()).second)
          stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });
    ensure_grad(*node_)[0] += S(1);
    for (Node<S>* n : order)
      if (n->backprop) n->backprop(*n);
  }

 private:
  std::shared_ptr<Node<S>> node_;
};

// Builds an op node; fn(self) reads self.grad and accumulates into
// self.parents. Collapses to a constant leaf when no gradient can flow.
template <class S, class F>
Var<S> make_op(Tensor4<S> value, std::vector<Var<S>> parents, F&& fn) {
  bool need = grad_enabled();
  if (need) {
    need = false;
    for (const auto& p : parents) need = need || p.requires_grad();
  }
  if (!need) return Var<S>::leaf(std::move(value), false);
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->id = detail::next_node_id();
  n->parents.reserve(parents.size());
  for (auto& p : parents) n->parents.push_back(p.node());
  n->backprop = std::forward<F>(fn);
  return Var<S>(std::move(n));
}

using VarF = Var<float>;
using VarD = Var<double>;

}  // namespace cpcr

#endif  // CPCR_AUTODIFF_HPP
