#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace vitdet {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

inline void check_shape_positive(const Shape& shape) {
  for (int64_t d : shape) {
    if (d <= 0) {
      throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
    }
  }
}

namespace detail {

inline thread_local int no_grad_depth = 0;

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents' grad buffers.
  std::function<void(TensorNode&)> backprop;

  std::vector<S>& grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), S(0));
    return grad;
  }
};

}  // namespace detail

// RAII guard: while alive, ops do not record the computation graph.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Dense row-major n-d array with reverse-mode gradient tracking. A Tensor is
// a shared handle to its storage node, torch-style: copies alias the same
// values and grad. Values are written only at construction and by the
// optimizer (leaf parameters); everything else treats them as immutable.
template <typename S>
class Tensor {
 public:
  using Node = detail::TensorNode<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S(0), requires_grad);
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    check_shape_positive(shape);
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->values.assign(static_cast<size_t>(numel(shape)), value);
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<S> values, bool requires_grad = false) {
    check_shape_positive(shape);
    if (numel(shape) != static_cast<int64_t>(values.size())) {
      throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    return from_values({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int64_t i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(node_->values.size()); }

  std::vector<S>& values() { return node_->values; }
  const std::vector<S>& values() const { return node_->values; }
  S* data() { return node_->values.data(); }
  const S* data() const { return node_->values.data(); }

  S item() const {
    if (size() != 1) throw std::invalid_argument("item() requires a one-element tensor");
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  const std::vector<S>& grad() const {
    if (node_->grad.empty()) {
      throw std::logic_error("grad accessed before any backward pass reached this tensor");
    }
    return node_->grad;
  }

  std::vector<S>& grad_buffer() { return node_->grad_buffer(); }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  // Reverse-mode pass from a scalar. Gradients accumulate additively across
  // repeated calls; zero_grad() resets them.
  void backward() {
    if (size() != 1) throw std::invalid_argument("backward() requires a scalar tensor");
    if (!node_->requires_grad) {
      throw std::invalid_argument("backward() on a tensor that does not require grad");
    }
    node_->grad_buffer()[0] += S(1);

    // Post-order DFS over grad-requiring parents, then replay in reverse.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [cur, next_parent] = stack.back();
      if (next_parent < cur->parents.size()) {
        Node* p = cur->parents[next_parent++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(cur);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop(**it);
    }
  }

  std::shared_ptr<Node> node_ptr() const { return node_; }
  Node* node() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

// Attaches a backprop closure to `out`, recording `parents` as its graph
// edges. No-op when grad tracking is off or no parent requires grad.
template <typename S, typename Fn>
void attach_backward(Tensor<S>& out, std::initializer_list<Tensor<S>> parents, Fn&& fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return;
  auto* node = out.node();
  node->requires_grad = true;
  node->parents.reserve(parents.size());
  for (const auto& p : parents) node->parents.push_back(p.node_ptr());
  node->backprop = std::forward<Fn>(fn);
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace vitdet
