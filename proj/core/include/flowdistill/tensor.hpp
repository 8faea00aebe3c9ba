#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "flowdistill/rng.hpp"

namespace flowdistill {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Reverse-mode autodiff node. Child nodes hold shared ownership of their
// parents, so a loss tensor keeps its whole computation graph alive until the
// handle is dropped.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Tensors built while grad mode is disabled record no graph; used for frozen
// tutor passes and detached comparisons.
inline thread_local int g_no_grad_depth = 0;

struct NoGradGuard {
  NoGradGuard() { ++g_no_grad_depth; }
  ~NoGradGuard() { --g_no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return g_no_grad_depth == 0; }

// Dense N-dimensional array with value-semantic handle and shared storage.
// Image-like data uses (N, C, H, W) extent order.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    for (int e : shape)
      check(e > 0, "tensor: extent must be positive, got shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data.assign(numel(node_->shape), fill);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    check(numel(shape) == values.size(),
          "tensor: data length " + std::to_string(values.size()) +
              " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    Tensor t(std::move(shape));
    for (T& v : t.node_->data) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    for (T& v : t.node_->data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  // Tensors are handles to shared storage, so const-ness of the handle does
  // not freeze the buffers (same contract as a smart pointer).
  std::span<T> data() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() const { return node_->grad_buffer(); }

  void zero_grad() const {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // NCHW element access; for tests and cold paths, kernels use raw spans.
  T& at(int n, int c, int y, int x) const {
    const Shape& s = node_->shape;
    return node_->data[((static_cast<std::size_t>(n) * s[1] + c) * s[2] + y) * s[3] + x];
  }

  T item() const {
    check(size() == 1, "item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->data[0];
  }

  // Copy without graph history; never requires grad.
  Tensor detach() const {
    Tensor out(node_->shape);
    out.node_->data = node_->data;
    return out;
  }

  bool all_finite() const {
    for (T v : node_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Reverse pass from a scalar. Accumulates d(this)/dp into the grad of every
  // reachable tensor that requires grad; repeated calls keep accumulating
  // until grads are cleared.
  void backward() const {
    check(size() == 1,
          "backward: loss must be scalar, got shape " + shape_str(shape()));
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* parent = node->parents[next++].get();
        if (seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    // order is parents-before-children; walk it in reverse.
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
  }

  std::shared_ptr<Node<T>>& node() { return node_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Builds an op result: records parents and the pull-back only when grad
  // mode is on and some input needs gradient.
  static Tensor make_result(Shape shape, std::vector<T> values,
                            std::vector<Tensor> inputs,
                            std::function<void(Node<T>&)> backward_fn) {
    Tensor out(std::move(shape), std::move(values));
    bool needs = false;
    if (grad_enabled())
      for (const Tensor& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(inputs.size());
      for (Tensor& in : inputs) out.node_->parents.push_back(in.node_);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Per-pixel 2D sampling offsets in normalized [-1,1] coordinates: shape
// (N,2,H,W), channel 0 horizontal, channel 1 vertical.
template <typename T>
using FlowField = Tensor<T>;

template <typename T>
void check_flow_field(const Tensor<T>& f, const char* what = "flow") {
  check(f.ndim() == 4 && f.dim(1) == 2,
        std::string(what) + ": expected a (N,2,H,W) flow field, got " +
            shape_str(f.shape()));
}

}  // namespace flowdistill
