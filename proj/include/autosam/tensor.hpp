#pragma once

// Dense tensors with a reverse-mode differentiation graph.
//
// A Tensor is a cheap handle to shared storage. Operations in ops.hpp build
// graph nodes on their outputs whenever grad mode is on and at least one input
// requires a gradient; backward() walks that graph once in reverse
// topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace autosam {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Global switch for graph recording. Thread-local so frozen inference on one
// thread does not disable recording on another.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set_enabled(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Receives the output gradient and accumulates into the inputs.
  std::function<void(std::span<const T>)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  // Gradient buffer to accumulate into, or nullptr for tensors that must
  // never receive one.
  T* grad_buffer() {
    if (!requires_grad) return nullptr;
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : impl_(std::make_shared<TensorImpl<T>>()) {
    check_extents(shape);
    impl_->data.assign(autosam::numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    check_extents(shape);
    if (autosam::numel(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (impl_->node && !on) {
      throw std::logic_error("cannot clear requires_grad on a non-leaf tensor");
    }
    impl_->requires_grad = on;
    if (!on) impl_->grad.clear();
    return *this;
  }

  bool is_leaf() const { return !impl_->node; }
  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  static void check_extents(const Shape& shape) {
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive: " + to_string(shape));
    }
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::initializer_list<Tensor<T>> inputs, Backward&& backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::forward<Backward>(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      Backward&& backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::forward<Backward>(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

}  // namespace detail

// Accumulates d(loss)/d(leaf) into every leaf reachable from `loss` that has
// requires_grad set. Leaf gradients accumulate across calls; interior
// gradients are recomputed each call.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      TensorImpl<T>* child = t->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  for (TensorImpl<T>* t : order) {
    if (t->node) t->grad.assign(t->data.size(), T(0));
  }
  loss.impl()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* t = *it;
    if (t->node) t->node->backward(std::span<const T>(t->grad));
  }
}

}  // namespace autosam
