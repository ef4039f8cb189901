#pragma once

#include <lfm/ops.hpp>

#include <map>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <variant>

namespace lfm {

struct TapeEntry {
  std::uint64_t id;
  std::string op;
  std::vector<std::uint64_t> inputs;
};

/// Topologically ordered view of the graph that produced a tensor. Inputs of
/// every entry appear before it; leaves are not listed.
class Tape {
 public:
  static Tape record(const Tensor& output) {
    Tape tape;
    if (!output.requires_grad()) return tape;
    std::unordered_set<const detail::TensorImpl*> seen;
    // Iterative post-order DFS; graphs from unrolled updates get deep.
    std::vector<std::pair<const Tensor*, std::size_t>> stack;
    stack.emplace_back(&output, 0);
    seen.insert(output.impl());
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      const auto* node = t->impl()->node.get();
      if (node && next < node->inputs.size()) {
        const Tensor& in = node->inputs[next++];
        if (in.requires_grad() && !in.is_leaf() && seen.insert(in.impl()).second)
          stack.emplace_back(&in, 0);
        continue;
      }
      if (node) tape.order_.push_back(*t);
      stack.pop_back();
    }
    return tape;
  }

  std::size_t size() const { return order_.size(); }
  bool empty() const { return order_.empty(); }
  bool contains(const Tensor& t) const {
    return std::any_of(order_.begin(), order_.end(),
                       [&](const Tensor& x) { return x.same_storage(t); });
  }

  std::vector<TapeEntry> entries() const {
    std::vector<TapeEntry> out;
    out.reserve(order_.size());
    for (const auto& t : order_) {
      TapeEntry e{t.id(), std::string(t.op_name()), {}};
      for (const auto& in : t.impl()->node->inputs) e.inputs.push_back(in.id());
      out.push_back(std::move(e));
    }
    return out;
  }

  const std::vector<Tensor>& nodes() const { return order_; }

 private:
  std::vector<Tensor> order_;
};

struct GradOptions {
  /// Record the backward computation so the returned gradients are themselves
  /// differentiable.
  bool create_graph = false;
  /// Upstream gradient for non-scalar outputs; defaults to ones for scalars.
  std::optional<Tensor> seed;
};

namespace detail {

inline std::unordered_map<const TensorImpl*, Tensor> run_backward(const Tape& tape,
                                                                   const Tensor& output,
                                                                   const GradOptions& opts) {
  std::unordered_map<const TensorImpl*, Tensor> grads;
  NoGradGuard mode(opts.create_graph);
  Tensor seed = opts.seed ? *opts.seed : Tensor::ones(output.shape());
  if (seed.shape() != output.shape()) throw ShapeError("backward seed shape mismatch");
  grads.emplace(output.impl(), seed);
  const auto& order = tape.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto found = grads.find(it->impl());
    if (found == grads.end()) continue;
    const Node& node = *it->impl()->node;
    Tensor g = found->second;
    std::vector<Tensor> in_grads = node.backward(g);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const Tensor& in = node.inputs[i];
      if (!in.requires_grad()) continue;
      if (in_grads[i].shape() != in.shape())
        throw AutodiffError("backward of '" + node.op + "' produced gradient " +
                            shape_str(in_grads[i].shape()) + " for input " +
                            shape_str(in.shape()));
      auto [slot, inserted] = grads.try_emplace(in.impl(), in_grads[i]);
      if (!inserted) slot->second = add(slot->second, in_grads[i]);
    }
  }
  return grads;
}

inline void require_on_tape(const Tensor& output, bool allow_nonscalar) {
  if (!allow_nonscalar && output.numel() != 1)
    throw AutodiffError("backward requires a scalar output, got shape " +
                        shape_str(output.shape()));
  if (!output.requires_grad())
    throw AutodiffError("output is not on a tape (no input requires gradient)");
}

}  // namespace detail

/// Gradients of `output` with respect to each tensor in `wrt` (leaves or
/// intermediates). Tensors the output does not depend on get zeros.
inline std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt,
                                const GradOptions& opts = {}) {
  detail::require_on_tape(output, opts.seed.has_value());
  Tape tape = Tape::record(output);
  auto grads = detail::run_backward(tape, output, opts);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = grads.find(w.impl());
    out.push_back(it != grads.end() ? it->second : Tensor::zeros(w.shape()));
  }
  return out;
}

inline Tensor grad(const Tensor& output, const Tensor& wrt, const GradOptions& opts = {}) {
  return grad(output, std::span<const Tensor>(&wrt, 1), opts).front();
}

/// Gradients for every leaf reached from an output, keyed by tensor id.
class GradientMap {
 public:
  /// Gradient for `leaf`; zeros of matching shape when the leaf was not reached.
  Tensor at(const Tensor& leaf) const {
    auto it = grads_.find(leaf.id());
    return it != grads_.end() ? it->second : Tensor::zeros(leaf.shape());
  }
  bool reached(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend GradientMap backward(const Tape&, const Tensor&);
  std::map<std::uint64_t, Tensor> grads_;
};

inline GradientMap backward(const Tape& tape, const Tensor& output) {
  detail::require_on_tape(output, false);
  if (!output.is_leaf() && !tape.contains(output))
    throw AutodiffError("output is not on the given tape");
  auto grads = detail::run_backward(tape, output, {});
  GradientMap map;
  for (const auto& t : tape.nodes())
    for (const auto& in : t.impl()->node->inputs)
      if (in.is_leaf() && in.requires_grad()) {
        auto it = grads.find(in.impl());
        if (it != grads.end()) map.grads_.emplace(in.id(), it->second);
      }
  return map;
}

inline GradientMap backward(const Tensor& output) { return backward(Tape::record(output), output); }

// ---------------------------------------------------------------------------
// Generic dispatch
// ---------------------------------------------------------------------------

enum class OpKind {
  Add, Sub, Mul, Div, Neg, Relu, Sigmoid, Exp, Log, Sqrt, Sum, Mean, SumAxis, Softmax,
  Matmul, Transpose, Conv2d, AvgPool3x3, CrossEntropy, Concat, Reshape, Slice,
};

struct OpAttrs {
  std::size_t axis = 0;
  bool keepdim = false;
  Shape shape;
  std::size_t start = 0, length = 0;
  std::vector<int> labels;
};

/// Applies a primitive by kind. Arity and attributes are validated here; the
/// primitive validates shapes.
inline Tensor apply(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& attrs = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n)
      throw std::invalid_argument("op expects " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
  };
  auto check_axis = [&](const Tensor& t) {
    if (attrs.axis >= t.rank())
      throw std::invalid_argument("axis " + std::to_string(attrs.axis) +
                                  " outside rank " + std::to_string(t.rank()));
  };
  switch (kind) {
    case OpKind::Add: arity(2); return add(in[0], in[1]);
    case OpKind::Sub: arity(2); return sub(in[0], in[1]);
    case OpKind::Mul: arity(2); return mul(in[0], in[1]);
    case OpKind::Div: arity(2); return div(in[0], in[1]);
    case OpKind::Neg: arity(1); return neg(in[0]);
    case OpKind::Relu: arity(1); return relu(in[0]);
    case OpKind::Sigmoid: arity(1); return sigmoid(in[0]);
    case OpKind::Exp: arity(1); return exp(in[0]);
    case OpKind::Log: arity(1); return log(in[0]);
    case OpKind::Sqrt: arity(1); return sqrt(in[0]);
    case OpKind::Sum: arity(1); return sum(in[0]);
    case OpKind::Mean: arity(1); return mean(in[0]);
    case OpKind::SumAxis: arity(1); check_axis(in[0]); return sum_axis(in[0], attrs.axis, attrs.keepdim);
    case OpKind::Softmax: arity(1); check_axis(in[0]); return softmax(in[0], attrs.axis);
    case OpKind::Matmul: arity(2); return matmul(in[0], in[1]);
    case OpKind::Transpose: arity(1); return transpose(in[0]);
    case OpKind::Conv2d: arity(2); return conv2d(in[0], in[1]);
    case OpKind::AvgPool3x3: arity(1); return avg_pool3x3(in[0]);
    case OpKind::CrossEntropy: arity(1); return cross_entropy(in[0], attrs.labels);
    case OpKind::Concat: check_axis(in.at(0)); return concat(in, attrs.axis);
    case OpKind::Reshape: arity(1); return reshape(in[0], attrs.shape);
    case OpKind::Slice: arity(1); check_axis(in[0]); return slice(in[0], attrs.axis, attrs.start, attrs.length);
  }
  throw std::invalid_argument("unknown op kind");
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFn& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check step must be positive");
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  Tensor y = f(leaf);
  if (y.numel() != 1) throw AutodiffError("grad_check needs a scalar function");
  Tensor analytic = y.requires_grad() ? grad(y, leaf) : Tensor::zeros(x.shape());

  NoGradGuard no_grad;
  Tensor probe = x.detach();
  auto pv = probe.mutable_values();
  double worst = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    double orig = pv[i];
    pv[i] = orig + step;
    double up = pv[i];
    double fp = f(probe).item();
    pv[i] = orig - step;
    double down = pv[i];
    double fm = f(probe).item();
    pv[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NonFiniteError("grad_check", "non-finite function value at probe coordinate " +
                                             std::to_string(i));
    double numeric = (fp - fm) / (up - down);
    double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace lfm
