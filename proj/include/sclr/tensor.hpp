#pragma once

// Dense tensors (rank 0..2) with an implicit reverse-mode tape. Every
// operation that sees a grad-requiring input records a backward closure on
// the output node; Tensor::backward() replays the closures in reverse
// creation order, which is a valid topological order because outputs are
// always created after their inputs.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

namespace sclr {

using Shape = std::vector<long>;

inline long numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

// Bytes handed out for tensor value buffers since the last reset. Used by
// tests to bound the working set of the closed-form Jacobian path.
inline std::atomic<std::uint64_t>& tensor_alloc_bytes() {
  static std::atomic<std::uint64_t> bytes{0};
  return bytes;
}

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using MapM = Eigen::Map<Mat<S>>;
template <typename S>
using CMapM = Eigen::Map<const Mat<S>>;
template <typename S>
using MapV = Eigen::Map<Vec<S>>;
template <typename S>
using CMapV = Eigen::Map<const Vec<S>>;

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until a gradient flows into this node
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backprop;

  long rows() const {
    if (shape.empty()) return 1;
    return shape.size() == 1 ? 1 : shape[0];
  }
  long cols() const {
    if (shape.empty()) return 1;
    return shape.size() == 1 ? shape[0] : shape[1];
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), {}, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<S> data,
                     bool requires_grad = false) {
    require(long(data.size()) == numel(shape),
            "tensor data length does not match shape " + shape_str(shape));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(S v) { return from({}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  long size() const { return long(n_->value.size()); }
  long rows() const { return n_->rows(); }
  long cols() const { return n_->cols(); }
  long rank() const { return long(n_->shape.size()); }
  bool requires_grad() const { return n_->requires_grad; }

  S* data() { return n_->value.data(); }
  const S* data() const { return n_->value.data(); }
  std::vector<S>& values() { return n_->value; }
  const std::vector<S>& values() const { return n_->value; }

  S item() const {
    require(size() == 1, "item() on non-scalar tensor");
    return n_->value[0];
  }

  MapM<S> mat() { return MapM<S>(data(), rows(), cols()); }
  CMapM<S> mat() const { return CMapM<S>(data(), rows(), cols()); }
  MapV<S> vec() { return MapV<S>(data(), size()); }
  CMapV<S> vec() const { return CMapV<S>(data(), size()); }

  const std::vector<S>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  MapV<S> grad_vec() {
    n_->ensure_grad();
    return MapV<S>(n_->grad.data(), size());
  }
  MapM<S> grad_mat() {
    n_->ensure_grad();
    return MapM<S>(n_->grad.data(), rows(), cols());
  }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  // Reverse pass from a scalar output. Accumulates into the grads of every
  // reachable node that requires a gradient.
  void backward() const {
    require(size() == 1, "backward() requires a scalar output");
    require(n_->requires_grad, "backward() on a constant");
    std::vector<Node<S>*> order;
    collect(order);
    std::sort(order.begin(), order.end(),
              [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });
    n_->ensure_grad();
    n_->grad[0] += S(1);
    for (Node<S>* node : order) {
      if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
  }

  std::shared_ptr<Node<S>> node() const { return n_; }

  // Raw constructor for ops. `parents` must all have smaller ids.
  static Tensor make(Shape shape, bool requires_grad,
                     std::vector<std::shared_ptr<Node<S>>> parents,
                     std::function<void(Node<S>&)> backprop) {
    Tensor t(std::move(shape), {}, requires_grad);
    t.n_->parents = std::move(parents);
    if (requires_grad) t.n_->backprop = std::move(backprop);
    return t;
  }

 private:
  Tensor(Shape shape, std::vector<S> data, bool requires_grad) {
    n_ = std::make_shared<Node<S>>();
    n_->shape = std::move(shape);
    const long n = numel(n_->shape);
    if (data.empty()) {
      n_->value.assign(std::size_t(n), S(0));
    } else {
      n_->value = std::move(data);
    }
    tensor_alloc_bytes() += std::uint64_t(n) * sizeof(S);
    n_->requires_grad = requires_grad;
    n_->id = next_node_id();
  }

  void collect(std::vector<Node<S>*>& order) const {
    std::unordered_set<Node<S>*> seen;
    std::vector<Node<S>*> stack{n_.get()};
    while (!stack.empty()) {
      Node<S>* cur = stack.back();
      stack.pop_back();
      if (!seen.insert(cur).second) continue;
      order.push_back(cur);
      for (const auto& p : cur->parents) {
        if (p->requires_grad) stack.push_back(p.get());
      }
    }
  }

  std::shared_ptr<Node<S>> n_;
};

template <typename S>
inline void check_finite(const Tensor<S>& t, const char* what) {
  for (S v : t.values()) {
    if (!std::isfinite(double(v))) fail(std::string(what) + ": non-finite value");
  }
}

}  // namespace sclr
