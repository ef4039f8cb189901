#pragma once

// Dense f64 tensors with a define-by-run differentiation graph.
//
// A Tensor is a shared handle. Operations producing a tensor from inputs that
// require gradients record a node holding the inputs and a backward rule. The
// backward rules are themselves written with differentiable operations, so
// gradients can be taken through gradients (create_graph mode).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lfm {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string op, const std::string& what)
      : std::runtime_error(what), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

class Tensor;

namespace detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
  std::uint64_t id = 0;
};

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  explicit NoGradGuard(bool enable_grad) : prev_(detail::grad_mode()) {
    detail::grad_mode() = enable_grad;
  }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() : Tensor(Shape{1}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> values) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape.empty()) shape = {1};
    if (shape_numel(shape) != values.size())
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->id = detail::next_tensor_id();
  }

  static Tensor full(Shape shape, double value) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }
  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> v;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(v));
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  std::span<const double> values() const& { return impl_->data; }
  std::vector<double> values() && { return impl_->data; }
  const std::vector<double>& data() const& { return impl_->data; }
  std::vector<double> data() && { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  /// Writable view, only for leaves that are not part of a recorded graph.
  std::span<double> mutable_values() {
    if (!is_leaf()) throw AutodiffError("mutable_values() on a non-leaf tensor");
    return impl_->data;
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true) {
    if (!is_leaf()) throw AutodiffError("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = flag;
    return *this;
  }
  bool is_leaf() const { return impl_->node == nullptr; }
  std::uint64_t id() const { return impl_->id; }
  std::string_view op_name() const { return impl_->node ? std::string_view(impl_->node->op) : "leaf"; }

  /// New leaf holding a copy of the values; no graph history, no grad flag.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  friend Tensor make_result(std::string_view, Shape, std::vector<double>, std::vector<Tensor>,
                            detail::BackwardFn);
  friend class Tape;
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Builds an op output and records it when gradients are enabled and any input
/// requires them. Also the extension point for custom operations.
inline Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, detail::BackwardFn backward) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteError(std::string(op), "non-finite value produced by '" + std::string(op) +
                                                "' at flat index " + std::to_string(i));
    }
  }
  Tensor out(std::move(shape), std::move(values));
  if (detail::grad_mode()) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      out.impl_->requires_grad = true;
      out.impl_->node = std::make_shared<detail::Node>(
          detail::Node{std::string(op), std::move(inputs), std::move(backward)});
    }
  }
  return out;
}

}  // namespace lfm
