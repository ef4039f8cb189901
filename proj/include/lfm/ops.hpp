#pragma once

// Differentiable primitives. Every backward rule is composed from the
// primitives in this file, which keeps the set closed under differentiation.

#include <lfm/tensor.hpp>

namespace lfm {

// Forward declarations: backward rules refer to each other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor sum_to(const Tensor& x, const Shape& shape);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor embed(const Tensor& x, std::size_t axis, std::size_t start, std::size_t full_length);
Tensor conv2d(const Tensor& x, const Tensor& w);
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, std::size_t kernel);
Tensor avg_pool3x3(const Tensor& x);

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` laid over `out` (right-aligned), zero on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::size_t i = in.size() - 1 - k;
    std::size_t o = out.size() - 1 - k;
    if (in[i] != 1) strides[o] = stride;
    stride *= in[i];
  }
  return strides;
}

// Maps every flat index of `out` to the flat index of a broadcast input.
inline std::vector<std::size_t> broadcast_index_map(const Shape& in, const Shape& out) {
  auto strides = broadcast_strides(in, out);
  std::size_t n = shape_numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t off = 0;
  for (std::size_t f = 0; f < n; ++f) {
    map[f] = off;
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < out[d]) break;
      off -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

template <class F>
Tensor elementwise_binary(std::string_view op, const Tensor& a, const Tensor& b, F f,
                          BackwardFn backward) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return make_result(op, a.shape(), std::move(out), {a, b}, std::move(backward));
  }
  Shape s = broadcast_shape(a.shape(), b.shape());
  auto ia = broadcast_index_map(a.shape(), s);
  auto ib = broadcast_index_map(b.shape(), s);
  std::vector<double> out(shape_numel(s));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[ia[i]], b[ib[i]]);
  return make_result(op, std::move(s), std::move(out), {a, b}, std::move(backward));
}

template <class F>
std::vector<double> map_values(const Tensor& x, F f) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return out;
}

// (outer, axis, inner) decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline void require_rank(const Tensor& x, std::size_t rank, std::string_view op) {
  if (x.rank() != rank)
    throw ShapeError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (NumPy broadcasting)
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::elementwise_binary("add", a, b, [](double x, double y) { return x + y; },
                                    [a, b](const Tensor& g) {
                                      return std::vector<Tensor>{sum_to(g, a.shape()),
                                                                 sum_to(g, b.shape())};
                                    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::elementwise_binary("sub", a, b, [](double x, double y) { return x - y; },
                                    [a, b](const Tensor& g) {
                                      return std::vector<Tensor>{sum_to(g, a.shape()),
                                                                 sum_to(neg(g), b.shape())};
                                    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::elementwise_binary("mul", a, b, [](double x, double y) { return x * y; },
                                    [a, b](const Tensor& g) {
                                      return std::vector<Tensor>{sum_to(mul(g, b), a.shape()),
                                                                 sum_to(mul(g, a), b.shape())};
                                    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::elementwise_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [a, b](const Tensor& g) {
        return std::vector<Tensor>{sum_to(div(g, b), a.shape()),
                                   sum_to(neg(div(mul(g, a), mul(b, b))), b.shape())};
      });
}

inline Tensor neg(const Tensor& x) {
  return make_result("neg", x.shape(), detail::map_values(x, [](double v) { return -v; }), {x},
                     [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

inline Tensor scale(const Tensor& x, double c) {
  return make_result("scale", x.shape(), detail::map_values(x, [c](double v) { return c * v; }),
                     {x}, [c](const Tensor& g) { return std::vector<Tensor>{scale(g, c)}; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return make_result("add_scalar", x.shape(),
                     detail::map_values(x, [c](double v) { return v + c; }), {x},
                     [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

inline Tensor relu(const Tensor& x) {
  return make_result("relu", x.shape(),
                     detail::map_values(x, [](double v) { return v > 0.0 ? v : 0.0; }), {x},
                     [x](const Tensor& g) {
                       Tensor mask(x.shape(), detail::map_values(
                                                  x, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
                       return std::vector<Tensor>{mul(g, mask)};
                     });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return make_result("sigmoid", x.shape(), detail::map_values(x, sigmoid_value), {x},
                     [x](const Tensor& g) {
                       Tensor y = sigmoid(x);
                       return std::vector<Tensor>{mul(g, mul(y, add_scalar(neg(y), 1.0)))};
                     });
}

inline Tensor exp(const Tensor& x) {
  return make_result("exp", x.shape(), detail::map_values(x, [](double v) { return std::exp(v); }),
                     {x}, [x](const Tensor& g) { return std::vector<Tensor>{mul(g, exp(x))}; });
}

inline Tensor log(const Tensor& x) {
  return make_result("log", x.shape(), detail::map_values(x, [](double v) { return std::log(v); }),
                     {x}, [x](const Tensor& g) { return std::vector<Tensor>{div(g, x)}; });
}

inline Tensor sqrt(const Tensor& x) {
  return make_result("sqrt", x.shape(),
                     detail::map_values(x, [](double v) { return std::sqrt(v); }), {x},
                     [x](const Tensor& g) {
                       return std::vector<Tensor>{div(g, scale(sqrt(x), 2.0))};
                     });
}

// ---------------------------------------------------------------------------
// Broadcasting and reductions
// ---------------------------------------------------------------------------

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (detail::broadcast_shape(x.shape(), shape) != shape)
    throw ShapeError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto map = detail::broadcast_index_map(x.shape(), shape);
  std::vector<double> out(map.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[map[i]];
  return make_result("broadcast_to", shape, std::move(out), {x},
                     [x](const Tensor& g) { return std::vector<Tensor>{sum_to(g, x.shape())}; });
}

inline Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (detail::broadcast_shape(shape, x.shape()) != x.shape())
    throw ShapeError("cannot reduce " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto map = detail::broadcast_index_map(shape, x.shape());
  std::vector<double> out(shape_numel(shape), 0.0);
  for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] += x[i];
  return make_result("sum_to", shape, std::move(out), {x}, [x](const Tensor& g) {
    return std::vector<Tensor>{broadcast_to(g, x.shape())};
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result("sum", Shape{1}, {s}, {x}, [x](const Tensor& g) {
    return std::vector<Tensor>{broadcast_to(g, x.shape())};
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  auto sp = detail::split_axis(x.shape(), axis);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t a = 0; a < sp.len; ++a)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += x[(o * sp.len + a) * sp.inner + i];
  Shape kept = x.shape();
  kept[axis] = 1;
  Shape s = kept;
  if (!keepdim) {
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
    if (s.empty()) s = {1};
  }
  return make_result("sum_axis", std::move(s), std::move(out), {x}, [x, kept](const Tensor& g) {
    return std::vector<Tensor>{broadcast_to(reshape(g, kept), x.shape())};
  });
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  if (shape == x.shape()) return x;
  return make_result("reshape", std::move(shape), x.data(), {x}, [x](const Tensor& g) {
    return std::vector<Tensor>{reshape(g, x.shape())};
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank(x, 2, "transpose");
  std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make_result("transpose", Shape{c, r}, std::move(out), {x},
                     [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  auto sp = detail::split_axis(x.shape(), axis);
  if (length == 0 || start + length > sp.len)
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis of length " + std::to_string(sp.len));
  std::vector<double> out(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner),
                length * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  Shape s = x.shape();
  s[axis] = length;
  std::size_t full = sp.len;
  return make_result("slice", std::move(s), std::move(out), {x},
                     [axis, start, full](const Tensor& g) {
                       return std::vector<Tensor>{embed(g, axis, start, full)};
                     });
}

/// Places `x` at [start, start + len) along `axis` of a zero tensor whose axis
/// length is `full_length`. Adjoint of slice.
inline Tensor embed(const Tensor& x, std::size_t axis, std::size_t start, std::size_t full_length) {
  auto sp = detail::split_axis(x.shape(), axis);
  if (start + sp.len > full_length) throw ShapeError("embed target too short");
  std::vector<double> out(sp.outer * full_length * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(o * sp.len * sp.inner),
                sp.len * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>((o * full_length + start) * sp.inner));
  Shape s = x.shape();
  s[axis] = full_length;
  std::size_t len = sp.len;
  return make_result("embed", std::move(s), std::move(out), {x}, [axis, start, len](const Tensor& g) {
    return std::vector<Tensor>{slice(g, axis, start, len)};
  });
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  Shape s = xs.front().shape();
  if (axis >= s.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& t : xs) {
    Shape a = t.shape(), b = s;
    if (a.size() != b.size()) throw ShapeError("concat rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat shape mismatch: " + shape_str(t.shape()) + " vs " +
                                 shape_str(xs.front().shape()));
    total += t.dim(axis);
  }
  s[axis] = total;
  auto sp = detail::split_axis(s, axis);
  std::vector<double> out(shape_numel(s));
  std::size_t offset = 0;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& t : xs) {
    std::size_t len = t.dim(axis);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner),
                  len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * sp.inner));
    ranges.emplace_back(offset, len);
    offset += len;
  }
  return make_result("concat", std::move(s), std::move(out), xs, [axis, ranges](const Tensor& g) {
    std::vector<Tensor> grads;
    grads.reserve(ranges.size());
    for (auto [start, len] : ranges) grads.push_back(slice(g, axis, start, len));
    return grads;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto& A = a.data();
  const auto& B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double av = A[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
    }
  return make_result("matmul", Shape{m, n}, std::move(out), {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

// ---------------------------------------------------------------------------
// Softmax and fused cross-entropy
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  auto sp = detail::split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t a) { return (o * sp.len + a) * sp.inner + i; };
      double mx = x[at(0)];
      for (std::size_t a = 1; a < sp.len; ++a) mx = std::max(mx, x[at(a)]);
      double z = 0.0;
      for (std::size_t a = 0; a < sp.len; ++a) z += (out[at(a)] = std::exp(x[at(a)] - mx));
      for (std::size_t a = 0; a < sp.len; ++a) out[at(a)] /= z;
    }
  return make_result("softmax", x.shape(), std::move(out), {x}, [x, axis](const Tensor& g) {
    Tensor y = softmax(x, axis);
    Tensor s = sum_axis(mul(g, y), axis, true);
    return std::vector<Tensor>{mul(y, sub(g, s))};
  });
}

/// Per-row cross-entropy of (B, C) logits against integer labels; returns (B).
/// Uses max-subtracted log-sum-exp.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(B) + " rows");
  std::vector<double> onehot(B * C, 0.0);
  std::vector<double> out(B);
  for (std::size_t n = 0; n < B; ++n) {
    int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " at row " +
                              std::to_string(n) + " outside [0, " + std::to_string(C) + ")");
    double mx = logits[n * C];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits[n * C + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(logits[n * C + c] - mx);
    out[n] = mx + std::log(z) - logits[n * C + static_cast<std::size_t>(y)];
    onehot[n * C + static_cast<std::size_t>(y)] = 1.0;
  }
  Tensor target(Shape{B, C}, std::move(onehot));
  return make_result("cross_entropy", Shape{B}, std::move(out), {logits},
                     [logits, target, B](const Tensor& g) {
                       Tensor p = softmax(logits, 1);
                       return std::vector<Tensor>{mul(sub(p, target), reshape(g, Shape{B, 1}))};
                     });
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero "same" padding, odd square kernels)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  std::size_t N, C, O, H, W, K;
  std::ptrdiff_t pad;
};

// Calls f(x_index, w_index, y_index) for every multiply-accumulate of a
// same-padded stride-1 correlation.
template <class F>
void conv_loop(const ConvDims& d, F f) {
  const auto H = static_cast<std::ptrdiff_t>(d.H), W = static_cast<std::ptrdiff_t>(d.W);
  for (std::size_t n = 0; n < d.N; ++n)
    for (std::size_t o = 0; o < d.O; ++o)
      for (std::size_t c = 0; c < d.C; ++c)
        for (std::size_t p = 0; p < d.K; ++p)
          for (std::size_t q = 0; q < d.K; ++q) {
            std::size_t wi = ((o * d.C + c) * d.K + p) * d.K + q;
            std::ptrdiff_t dp = static_cast<std::ptrdiff_t>(p) - d.pad;
            std::ptrdiff_t dq = static_cast<std::ptrdiff_t>(q) - d.pad;
            std::ptrdiff_t i0 = std::max<std::ptrdiff_t>(0, -dp), i1 = std::min(H, H - dp);
            std::ptrdiff_t j0 = std::max<std::ptrdiff_t>(0, -dq), j1 = std::min(W, W - dq);
            std::size_t xbase = (n * d.C + c) * d.H * d.W;
            std::size_t ybase = (n * d.O + o) * d.H * d.W;
            for (std::ptrdiff_t i = i0; i < i1; ++i)
              for (std::ptrdiff_t j = j0; j < j1; ++j)
                f(xbase + static_cast<std::size_t>((i + dp) * W + (j + dq)), wi,
                  ybase + static_cast<std::size_t>(i * W + j));
          }
}

inline std::size_t check_kernel(const Tensor& w, std::string_view op) {
  require_rank(w, 4, op);
  std::size_t K = w.dim(2);
  if (w.dim(3) != K || K % 2 == 0)
    throw ShapeError(std::string(op) + ": kernel must be odd and square, got " +
                     shape_str(w.shape()));
  return K;
}

}  // namespace detail

/// x (N,C,H,W), w (O,C,K,K) -> (N,O,H,W).
inline Tensor conv2d(const Tensor& x, const Tensor& w) {
  detail::require_rank(x, 4, "conv2d");
  std::size_t K = detail::check_kernel(w, "conv2d");
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                     shape_str(w.shape()));
  detail::ConvDims d{x.dim(0), x.dim(1), w.dim(0), x.dim(2), x.dim(3), K,
                     static_cast<std::ptrdiff_t>(K / 2)};
  std::vector<double> out(d.N * d.O * d.H * d.W, 0.0);
  const auto& X = x.data();
  const auto& Wt = w.data();
  detail::conv_loop(d, [&](std::size_t xi, std::size_t wi, std::size_t yi) {
    out[yi] += Wt[wi] * X[xi];
  });
  return make_result("conv2d", Shape{d.N, d.O, d.H, d.W}, std::move(out), {x, w},
                     [x, w, K](const Tensor& g) {
                       return std::vector<Tensor>{conv2d_input_grad(g, w),
                                                  conv2d_weight_grad(x, g, K)};
                     });
}

/// Adjoint of conv2d with respect to its input: grad_out (N,O,H,W), w (O,C,K,K) -> (N,C,H,W).
inline Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w) {
  detail::require_rank(grad_out, 4, "conv2d_input_grad");
  std::size_t K = detail::check_kernel(w, "conv2d_input_grad");
  if (w.dim(0) != grad_out.dim(1)) throw ShapeError("conv2d_input_grad channel mismatch");
  detail::ConvDims d{grad_out.dim(0), w.dim(1), w.dim(0), grad_out.dim(2), grad_out.dim(3), K,
                     static_cast<std::ptrdiff_t>(K / 2)};
  std::vector<double> out(d.N * d.C * d.H * d.W, 0.0);
  const auto& G = grad_out.data();
  const auto& Wt = w.data();
  detail::conv_loop(d, [&](std::size_t xi, std::size_t wi, std::size_t yi) {
    out[xi] += Wt[wi] * G[yi];
  });
  return make_result("conv2d_input_grad", Shape{d.N, d.C, d.H, d.W}, std::move(out),
                     {grad_out, w}, [grad_out, w, K](const Tensor& g) {
                       return std::vector<Tensor>{conv2d(g, w), conv2d_weight_grad(g, grad_out, K)};
                     });
}

/// Adjoint of conv2d with respect to its kernel: x (N,C,H,W), grad_out (N,O,H,W) -> (O,C,K,K).
inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, std::size_t kernel) {
  detail::require_rank(x, 4, "conv2d_weight_grad");
  detail::require_rank(grad_out, 4, "conv2d_weight_grad");
  if (kernel % 2 == 0) throw ShapeError("conv2d_weight_grad: kernel must be odd");
  if (x.dim(0) != grad_out.dim(0) || x.dim(2) != grad_out.dim(2) || x.dim(3) != grad_out.dim(3))
    throw ShapeError("conv2d_weight_grad: input " + shape_str(x.shape()) + " vs grad " +
                     shape_str(grad_out.shape()));
  detail::ConvDims d{x.dim(0), x.dim(1), grad_out.dim(1), x.dim(2), x.dim(3), kernel,
                     static_cast<std::ptrdiff_t>(kernel / 2)};
  std::vector<double> out(d.O * d.C * kernel * kernel, 0.0);
  const auto& X = x.data();
  const auto& G = grad_out.data();
  detail::conv_loop(d, [&](std::size_t xi, std::size_t wi, std::size_t yi) {
    out[wi] += G[yi] * X[xi];
  });
  return make_result("conv2d_weight_grad", Shape{d.O, d.C, kernel, kernel}, std::move(out),
                     {x, grad_out}, [x, grad_out](const Tensor& g) {
                       return std::vector<Tensor>{conv2d_input_grad(grad_out, g), conv2d(x, g)};
                     });
}

/// 3x3 average pooling, stride 1, zero padding counted in the divisor. The
/// operator is self-adjoint.
inline Tensor avg_pool3x3(const Tensor& x) {
  detail::require_rank(x, 4, "avg_pool3x3");
  std::size_t planes = x.dim(0) * x.dim(1);
  auto H = static_cast<std::ptrdiff_t>(x.dim(2)), W = static_cast<std::ptrdiff_t>(x.dim(3));
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    std::size_t base = pl * static_cast<std::size_t>(H * W);
    for (std::ptrdiff_t i = 0; i < H; ++i)
      for (std::ptrdiff_t j = 0; j < W; ++j) {
        double s = 0.0;
        for (std::ptrdiff_t di = -1; di <= 1; ++di)
          for (std::ptrdiff_t dj = -1; dj <= 1; ++dj) {
            std::ptrdiff_t a = i + di, b = j + dj;
            if (a >= 0 && a < H && b >= 0 && b < W) s += x[base + static_cast<std::size_t>(a * W + b)];
          }
        out[base + static_cast<std::size_t>(i * W + j)] = s / 9.0;
      }
  }
  return make_result("avg_pool3x3", x.shape(), std::move(out), {x},
                     [](const Tensor& g) { return std::vector<Tensor>{avg_pool3x3(g)}; });
}

// ---------------------------------------------------------------------------
// Convenience
// ---------------------------------------------------------------------------

inline Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("dot: size mismatch");
  return sum(mul(reshape(a, Shape{a.numel()}), reshape(b, Shape{b.numel()})));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }

}  // namespace lfm
