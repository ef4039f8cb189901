#include <lfm/autodiff.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

#include <random>

using namespace lfm;
using lfm::testing::random_tensor;

namespace {

// Reference triple loop.
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
  return out;
}

// Reference same-padded correlation by direct definition.
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w) {
  std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0);
  std::vector<double> out(N * O * H * W, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (int p = -1; p <= 1; ++p)
              for (int q = -1; q <= 1; ++q) {
                long a = static_cast<long>(i) + p, b = static_cast<long>(j) + q;
                if (a < 0 || b < 0 || a >= static_cast<long>(H) || b >= static_cast<long>(W)) continue;
                s += w[((o * C + c) * 3 + static_cast<std::size_t>(p + 1)) * 3 + static_cast<std::size_t>(q + 1)] *
                     x[((n * C + c) * H + static_cast<std::size_t>(a)) * W + static_cast<std::size_t>(b)];
              }
          out[((n * O + o) * H + i) * W + j] = s;
        }
  return out;
}

}  // namespace

// ============================================================================
// Forward values
// ============================================================================

TEST(Ops, MatmulExample) {
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(c.data(), (std::vector<double>{19, 22, 43, 50}));
  EXPECT_EQ(c.data(), matmul_oracle(a, b));
}

TEST(Ops, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 4}, rng);
    auto got = matmul(a, b).data();
    auto want = matmul_oracle(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Ops, ConvMatchesDirectDefinition) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({2, 3, 5, 4}, rng), w = random_tensor({2, 3, 3, 3}, rng);
  auto got = conv2d(x, w).data();
  auto want = conv_oracle(x, w);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Ops, ReluAndSoftmaxExamples) {
  EXPECT_EQ(relu(Tensor::vector({-1, 0, 2})).data(), (std::vector<double>{0, 0, 2}));
  auto p = softmax(Tensor::vector({0, 0, 0, 0}), 0).data();
  for (double v : p) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Ops, SoftmaxIsAProbabilityVectorAlongAxis) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    Tensor x = random_tensor({3, 4, 5}, rng, -30, 30);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tensor s = sum_axis(softmax(x, axis), axis);
      for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-12);
      for (double v : softmax(x, axis).values()) EXPECT_GE(v, 0.0);
    }
  }
}

TEST(Ops, CrossEntropyEqualsNegLogSoftmax) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    Tensor logits = random_tensor({6, 5}, rng, -10, 10);
    std::vector<int> labels{0, 1, 2, 3, 4, 2};
    Tensor ce = cross_entropy(logits, labels);
    Tensor p = softmax(logits, 1);
    for (std::size_t n = 0; n < 6; ++n)
      EXPECT_NEAR(ce[n], -std::log(p[n * 5 + static_cast<std::size_t>(labels[n])]), 1e-12);
  }
}

TEST(Ops, AvgPoolIsSelfAdjoint) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({1, 2, 4, 5}, rng), y = random_tensor({1, 2, 4, 5}, rng);
  EXPECT_NEAR(dot(avg_pool3x3(x), y).item(), dot(x, avg_pool3x3(y)).item(), 1e-12);
}

// ============================================================================
// Errors
// ============================================================================

TEST(Ops, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3})), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2}, {1.0, 2.0}), ShapeError);
}

TEST(Ops, InvalidAttributeThrows) {
  EXPECT_THROW(apply(OpKind::Softmax, {Tensor::zeros({2, 3})}, {.axis = 2}), std::invalid_argument);
  EXPECT_THROW(apply(OpKind::Add, {Tensor::zeros({2})}), std::invalid_argument);
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), std::vector<int>{3}), std::out_of_range);
}

TEST(Ops, NonFiniteOutputNamesProducingOp) {
  try {
    log(Tensor::vector({1.0, -1.0}));
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.op(), "log");
    EXPECT_NE(std::string(e.what()).find("flat index 1"), std::string::npos);
  }
}

TEST(Ops, ApplyDispatchesLikeDirectCalls) {
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(apply(OpKind::Matmul, {a, a}).data(), matmul(a, a).data());
  EXPECT_EQ(apply(OpKind::Softmax, {a}, {.axis = 1}).data(), softmax(a, 1).data());
  EXPECT_EQ(apply(OpKind::Reshape, {a}, {.shape = {4}}).shape(), (Shape{4}));
}

// ============================================================================
// Backward
// ============================================================================

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::vector({1, 2, 3}).set_requires_grad();
  EXPECT_EQ(grad(sum(x), x).data(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, DotGivesOtherOperand) {
  Tensor x = Tensor::vector({0.5, -1}).set_requires_grad();
  Tensor y = Tensor::vector({2, 5});
  EXPECT_EQ(grad(dot(x, y), x).data(), (std::vector<double>{2, 5}));
}

TEST(Backward, FanOutAccumulates) {
  Tensor x = Tensor::vector({3}).set_requires_grad();
  EXPECT_DOUBLE_EQ(grad(sum(add(x, x)), x).item(), 2.0);
}

TEST(Backward, UnreachedLeafGetsZeros) {
  Tensor x = Tensor::vector({1, 2}).set_requires_grad();
  Tensor y = Tensor::zeros({2, 2}).set_requires_grad();
  auto g = grad(sum(x), std::vector<Tensor>{x, y});
  EXPECT_EQ(g[1].shape(), (Shape{2, 2}));
  for (double v : g[1].values()) EXPECT_EQ(v, 0.0);
  GradientMap map = backward(sum(x));
  EXPECT_FALSE(map.reached(y));
  EXPECT_EQ(map.at(y).shape(), y.shape());
}

TEST(Backward, RequiresScalarOutputOnTape) {
  Tensor x = Tensor::vector({1, 2}).set_requires_grad();
  EXPECT_THROW(backward(mul(x, x)), AutodiffError);
  EXPECT_THROW(backward(sum(Tensor::vector({1, 2}))), AutodiffError);
  Tensor other = sum(mul(x, x));
  EXPECT_THROW(backward(Tape::record(sum(x)), other), AutodiffError);
}

TEST(Backward, TapeIsTopologicalAndVisitsOnce) {
  Tensor x = Tensor::vector({1, 2}).set_requires_grad();
  Tensor h = sigmoid(x);
  Tensor out = sum(add(mul(h, h), h));
  Tape tape = Tape::record(out);
  auto entries = tape.entries();
  std::set<std::uint64_t> seen;
  for (const auto& e : entries) {
    EXPECT_TRUE(seen.insert(e.id).second) << "node listed twice";
    for (auto in : e.inputs)
      if (in != x.id()) EXPECT_TRUE(seen.count(in)) << e.op << " precedes its input";
  }
  EXPECT_EQ(entries.size(), 4u);  // sigmoid, mul, add, sum
  EXPECT_EQ(entries.back().id, out.id());
}

TEST(Backward, RandomTwoLayerNetworkMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  Tensor input = random_tensor({5, 4}, rng);
  Tensor w2 = random_tensor({6, 3}, rng);
  std::vector<int> labels{0, 2, 1, 1, 0};
  auto f = [&](const Tensor& w1) {
    return mean(cross_entropy(matmul(relu(matmul(input, w1)), w2), labels));
  };
  EXPECT_LT(grad_check(f, random_tensor({4, 6}, rng), 1e-6), 1e-5);
}

// Each primitive inside sum(weights * op(x)) against central differences on
// 100 random instances.
TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  struct Case {
    const char* name;
    Shape shape;
    std::function<Tensor(const Tensor&)> op;
    double lo = -1, hi = 1;
  };
  Tensor m34 = random_tensor({3, 4}, rng), m43 = random_tensor({4, 3}, rng);
  Tensor k = random_tensor({2, 2, 3, 3}, rng), img = random_tensor({2, 2, 4, 4}, rng);
  Tensor row = random_tensor({1, 4}, rng);
  std::vector<int> labels{1, 0, 3};
  std::vector<Case> cases{
      {"add", {3, 4}, [&](const Tensor& x) { return add(x, m34); }},
      {"add_broadcast", {3, 4}, [&](const Tensor& x) { return add(x, row); }},
      {"sub_broadcast", {1, 4}, [&](const Tensor& x) { return sub(m34, x); }},
      {"mul", {3, 4}, [&](const Tensor& x) { return mul(x, x); }},
      {"div", {3, 4}, [&](const Tensor& x) { return div(m34, x); }, 0.5, 2.0},
      {"relu", {3, 4}, [](const Tensor& x) { return relu(x); }},
      {"sigmoid", {3, 4}, [](const Tensor& x) { return sigmoid(x); }},
      {"exp", {3, 4}, [](const Tensor& x) { return exp(x); }},
      {"log", {3, 4}, [](const Tensor& x) { return log(x); }, 0.5, 2.0},
      {"sqrt", {3, 4}, [](const Tensor& x) { return sqrt(x); }, 0.5, 2.0},
      {"softmax0", {3, 4}, [](const Tensor& x) { return softmax(x, 0); }},
      {"softmax1", {3, 4}, [](const Tensor& x) { return softmax(x, 1); }},
      {"sum_axis", {3, 4}, [](const Tensor& x) { return sum_axis(x, 1); }},
      {"mean", {3, 4}, [](const Tensor& x) { return mean(x); }},
      {"matmul_left", {3, 4}, [&](const Tensor& x) { return matmul(x, m43); }},
      {"matmul_right", {4, 3}, [&](const Tensor& x) { return matmul(m34, x); }},
      {"transpose", {3, 4}, [](const Tensor& x) { return transpose(x); }},
      {"reshape", {3, 4}, [](const Tensor& x) { return reshape(x, {2, 6}); }},
      {"slice", {3, 4}, [](const Tensor& x) { return slice(x, 1, 1, 2); }},
      {"concat", {3, 4}, [&](const Tensor& x) { return concat({x, m34, x}, 0); }},
      {"cross_entropy", {3, 4}, [&](const Tensor& x) { return cross_entropy(x, labels); }},
      {"conv_input", {2, 2, 4, 4}, [&](const Tensor& x) { return conv2d(x, k); }},
      {"conv_kernel", {2, 2, 3, 3}, [&](const Tensor& x) { return conv2d(img, x); }},
      {"avg_pool", {2, 2, 4, 4}, [](const Tensor& x) { return avg_pool3x3(x); }},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      Tensor x = random_tensor(c.shape, rng, c.lo, c.hi);
      Tensor probe = c.op(x).detach();
      Tensor weights = random_tensor(probe.shape(), rng);
      auto f = [&](const Tensor& in) { return sum(mul(c.op(in), weights)); };
      worst = std::max(worst, grad_check(f, x, 1e-6));
    }
    EXPECT_LT(worst, 1e-5) << c.name;
  }
}

// ============================================================================
// Higher order
// ============================================================================

TEST(Backward, SecondDerivativeThroughCreateGraph) {
  // d^2/dx^2 sum(sigmoid(x)) = s(1-s)(1-2s)
  Tensor x = Tensor::vector({-1.0, 0.3, 2.0}).set_requires_grad();
  Tensor g = grad(sum(sigmoid(x)), x, {.create_graph = true});
  Tensor h = grad(sum(g), x);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = sigmoid_value(x[i]);
    EXPECT_NEAR(h[i], s * (1 - s) * (1 - 2 * s), 1e-12);
  }
}

TEST(Backward, HessianVectorProductsMatchFiniteDifferencesOfGradients) {
  std::mt19937_64 rng(8);
  Tensor img = random_tensor({2, 2, 4, 4}, rng);
  Tensor head = random_tensor({2, 3}, rng);
  std::vector<int> labels{2, 0};
  auto loss = [&](const Tensor& k) {
    Tensor h = relu(conv2d(img, k));
    Tensor pooled = mean_axis(reshape(h, {2, 2, 16}), 2);
    return mean(cross_entropy(matmul(pooled, head), labels));
  };
  Tensor k0 = random_tensor({2, 2, 3, 3}, rng);
  Tensor v = random_tensor({2, 2, 3, 3}, rng);
  // Hv via double backward, checked through grad_check on f(k) = <grad loss(k), v>.
  auto gv = [&](const Tensor& k) {
    Tensor g = grad(loss(k), k, {.create_graph = true});
    return dot(g, v);
  };
  Tensor leaf = k0.detach().set_requires_grad();
  Tensor hv = grad(gv(leaf), leaf);
  double worst = 0.0;
  auto kv = k0.detach();
  for (std::size_t i = 0; i < kv.numel(); ++i) {
    auto probe = [&](double d) {
      Tensor p = k0.detach();
      p.mutable_values()[i] += d;
      p.set_requires_grad();
      return dot(grad(loss(p), p), v).item();
    };
    double fd = (probe(1e-5) - probe(-1e-5)) / 2e-5;
    worst = std::max(worst, std::abs(fd - hv[i]) / std::max(1.0, std::abs(hv[i])));
  }
  EXPECT_LT(worst, 1e-6);
}

// ============================================================================
// grad_check
// ============================================================================

TEST(GradCheck, ExactForLinearFunctions) {
  std::mt19937_64 rng(9);
  auto f = [](const Tensor& x) { return sum(scale(x, 3.0)); };
  EXPECT_LT(grad_check(f, random_tensor({7}, rng), 1e-4), 1e-10);
}

TEST(GradCheck, FlagsCorruptedBackwardRule) {
  // Product whose backward rule forgets the other operand's contribution.
  auto bad_mul = [](const Tensor& a, const Tensor& b) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
    return make_result("bad_mul", a.shape(), std::move(v), {a, b}, [a](const Tensor& g) {
      return std::vector<Tensor>{g, mul(g, a)};
    });
  };
  std::mt19937_64 rng(10);
  auto f = [&](const Tensor& x) { return sum(bad_mul(x, x)); };
  EXPECT_GT(grad_check(f, random_tensor({5}, rng, 1, 2), 1e-6), 1e-2);
}

TEST(GradCheck, StepSweepHasInteriorMinimum) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({6}, rng, 1.0, 3.0);
  auto f = [](const Tensor& v) { return sum(exp(mul(v, v))); };
  double e4 = grad_check(f, x, 1e-4), e6 = grad_check(f, x, 1e-6), e8 = grad_check(f, x, 1e-8);
  // Truncation error dominates at 1e-4, round-off at 1e-8.
  EXPECT_LT(e6, e4);
  EXPECT_LT(e6, e8);
}

TEST(GradCheck, RejectsBadStepAndNonFiniteProbes) {
  auto f = [](const Tensor& x) { return sum(log(x)); };
  EXPECT_THROW(grad_check(f, Tensor::vector({1.0}), 0.0), std::invalid_argument);
  EXPECT_THROW(grad_check(f, Tensor::vector({1e-9}), 1e-6), NonFiniteError);
}
