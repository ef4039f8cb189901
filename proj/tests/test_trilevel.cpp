#include <lfm/diagnostics.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace lfm;
using lfm::testing::max_abs_diff;
using lfm::testing::random_tensor;

namespace {

ModelConfig feature_model(std::size_t classes = 3) {
  ModelConfig m;
  m.input_shape = {4};
  m.classes = classes;
  m.channels = 4;
  m.embed_dim = 4;
  m.encoder_channels = 4;
  m.op_set = OpSet::vector_default();
  return m;
}

Batch random_batch(const ModelConfig& m, std::size_t n, std::mt19937_64& rng) {
  Batch b{random_tensor(m.batch_shape(n), rng), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) b.labels[i] = static_cast<int>(i % m.classes);
  return b;
}

// Zero inputs with one example per class: with zero head bias every gradient vanishes.
Batch balanced_zero_batch(const ModelConfig& m) {
  Batch b{Tensor::zeros(m.batch_shape(m.classes)), std::vector<int>(m.classes)};
  std::iota(b.labels.begin(), b.labels.end(), 0);
  return b;
}

SearchConfig small_config(std::size_t bv = 4) {
  SearchConfig c;
  c.batch_train = 6;
  c.batch_val = bv;
  c.seed = 5;
  return c;
}

SearchState random_state(const ModelConfig& m, const SearchConfig& cfg, std::uint64_t seed) {
  SearchConfig c = cfg;
  c.seed = seed;
  SearchState s = init_search_state(m, c);
  s.arch = ArchitectureParams::random(m.cell, m.op_set, seed + 100, 0.5);
  std::mt19937_64 rng(seed + 200);
  s.r = random_tensor({cfg.batch_val}, rng);
  return s;
}

bool states_equal(const SearchState& a, const SearchState& b) {
  return a.arch.logits.data() == b.arch.logits.data() && a.w1.params.values_equal(b.w1.params) &&
         a.w2.params.values_equal(b.w2.params) && a.v.params.values_equal(b.v.params) &&
         a.r.data() == b.r.data();
}

double param_diff(const ParamSet& a, const ParamSet& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, max_abs_diff(a.entries()[i].second, b.entries()[i].second));
  return m;
}

}  // namespace

// ============================================================================
// Stage I
// ============================================================================

TEST(Stage1, ZeroRateKeepsWeights) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.lr.w1 = 0.0;
  std::mt19937_64 rng(1);
  auto s = random_state(m, cfg, 1);
  EXPECT_TRUE(stage1_update(m, s, random_batch(m, 6, rng), cfg).values_equal(s.w1.params));
}

TEST(Stage1, StationaryPointKeepsWeights) {
  auto m = feature_model();
  auto cfg = small_config();
  auto s = random_state(m, cfg, 2);
  EXPECT_LT(param_diff(stage1_update(m, s, balanced_zero_batch(m), cfg), s.w1.params), 1e-15);
}

TEST(Stage1, LogisticModelMatchesHandUnrolledStep) {
  // One feature, one channel, identity-only cell: logits_c = x*s*h_c + b_c.
  ModelConfig m;
  m.input_shape = {1};
  m.classes = 2;
  m.channels = 1;
  m.cell = CellSpec{1};
  m.op_set = OpSet{{CandidateOp::Identity}};
  SearchConfig cfg = small_config(1);
  cfg.lr.w1 = 0.3;
  SearchState st = init_search_state(m, cfg);
  ParamSet w;
  w.add("stem.w", Tensor::matrix({{0.7}}));
  w.add("head.w", Tensor::matrix({{0.4, -1.1}}));
  w.add("head.b", Tensor::vector({0.2, -0.05}));
  st.w1.params = w;
  double x = 1.5;
  int y = 1;
  Batch b{Tensor::matrix({{x}}), {y}};
  auto next = stage1_update(m, st, b, cfg);

  double s = 0.7, h0 = 0.4, h1 = -1.1, b0 = 0.2, b1 = -0.05, hid = x * s;
  double z0 = hid * h0 + b0, z1 = hid * h1 + b1;
  double p1 = 1.0 / (1.0 + std::exp(z0 - z1)), p0 = 1.0 - p1;
  double d0 = p0 - (y == 0), d1 = p1 - (y == 1);
  double eta = 0.3;
  EXPECT_NEAR(next.at("stem.w")[0], s - eta * x * (h0 * d0 + h1 * d1), 1e-14);
  EXPECT_NEAR(next.at("head.w")[0], h0 - eta * hid * d0, 1e-14);
  EXPECT_NEAR(next.at("head.w")[1], h1 - eta * hid * d1, 1e-14);
  EXPECT_NEAR(next.at("head.b")[0], b0 - eta * d0, 1e-14);
  EXPECT_NEAR(next.at("head.b")[1], b1 - eta * d1, 1e-14);
}

// ============================================================================
// Stage II
// ============================================================================

TEST(Stage2, ZeroRateKeepsWeights) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.lr.w2 = 0.0;
  std::mt19937_64 rng(3);
  auto s = random_state(m, cfg, 3);
  auto r = stage2_update(m, s, s.w1.params, random_batch(m, 6, rng), random_batch(m, 4, rng), cfg);
  EXPECT_TRUE(r.w2_next.values_equal(s.w2.params));
}

TEST(Stage2, UniformWeightsReduceToPlainDescent) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.ablation = {true, true, true};
  cfg.lr.w2 = 0.2;
  std::mt19937_64 rng(4);
  auto s = init_search_state(m, cfg);  // r = 0, so a = 1/2 everywhere
  Batch tr = random_batch(m, 6, rng), va = random_batch(m, 4, rng);
  auto r = stage2_update(m, s, s.w1.params, tr, va, cfg);
  for (double a : r.bundle.a.values()) EXPECT_EQ(a, 0.5);

  ParamSet w = s.w2.params.clone(true);
  auto g = grad(batch_loss(m, s.arch, w, tr), w.tensors());
  ParamSet plain = s.w2.params.step(-0.1, g);
  EXPECT_LT(param_diff(r.w2_next, plain), 1e-15);
}

TEST(Stage2, ZeroWeightDropsExample) {
  auto m = feature_model();
  auto cfg = small_config();
  std::mt19937_64 rng(5);
  auto s = random_state(m, cfg, 5);
  Batch two = random_batch(m, 2, rng);
  Batch first{slice(two.inputs, 0, 0, 1), {two.labels[0]}};
  for (auto red : {Reduction::Sum, Reduction::Mean}) {
    ParamSet w = s.w2.params.clone(true);
    auto gw = grad(weighted_loss(m, s.arch, w, two, Tensor::vector({1, 0}), red), w.tensors());
    ParamSet w1 = s.w2.params.clone(true);
    auto g1 = grad(batch_loss(m, s.arch, w1, first), w1.tensors());
    double scale_ = red == Reduction::Mean ? 0.5 : 1.0;
    for (std::size_t k = 0; k < gw.size(); ++k)
      for (std::size_t i = 0; i < gw[k].numel(); ++i) EXPECT_NEAR(gw[k][i], scale_ * g1[k][i], 1e-15);
  }
}

TEST(Stage2, SumReductionScalesMeanByBatchSize) {
  auto m = feature_model();
  std::mt19937_64 rng(6);
  auto cfg = small_config();
  auto s = random_state(m, cfg, 6);
  Batch b = random_batch(m, 6, rng);
  Tensor a = random_tensor({6}, rng, 0, 1);
  double mean_l = weighted_loss(m, s.arch, s.w2.params, b, a, Reduction::Mean).item();
  double sum_l = weighted_loss(m, s.arch, s.w2.params, b, a, Reduction::Sum).item();
  EXPECT_NEAR(sum_l, 6.0 * mean_l, 1e-12);
}

// ============================================================================
// Stage III
// ============================================================================

TEST(Stage3, ZeroRatesKeepEncoderCoefficientsAndArchitecture) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.lr.encoder = cfg.lr.coeff = cfg.lr.arch = 0.0;
  std::mt19937_64 rng(7);
  auto s = random_state(m, cfg, 7);
  Batch tr = random_batch(m, 6, rng), va = random_batch(m, 4, rng);
  auto w1n = stage1_update(m, s, tr, cfg);
  auto s2 = stage2_update(m, s, w1n, tr, va, cfg);
  EXPECT_TRUE(update_encoder(m, s, w1n, s2.w2_next, s2.bundle, tr, va, cfg).values_equal(s.v.params));
  EXPECT_EQ(update_coefficients(m, s, w1n, s2.w2_next, s2.bundle, tr, va, cfg).data(), s.r.data());
  EXPECT_EQ(update_architecture(m, s, w1n, s2.w2_next, s2.bundle, tr, va, cfg).logits.data(),
            s.arch.logits.data());
}

TEST(Stage3, ZeroOuterGradientKeepsEncoderAndWarns) {
  auto m = feature_model();
  auto cfg = small_config(3);
  cfg.lr.w2 = 0.0;  // W2' = W2, whose head bias is zero
  std::mt19937_64 rng(8);
  auto s = random_state(m, cfg, 8);
  Batch tr = random_batch(m, 6, rng), va = balanced_zero_batch(m);
  auto w1n = stage1_update(m, s, tr, cfg);
  auto s2 = stage2_update(m, s, w1n, tr, va, cfg);
  EXPECT_LT(param_diff(update_encoder(m, s, w1n, s2.w2_next, s2.bundle, tr, va, cfg), s.v.params), 1e-15);
  cfg.lr.w2 = 0.1;
  s.w2.params = s2.w2_next;
  auto s3 = stage3_gradients(m, s, w1n, s.w2.params, s2.bundle, tr, va, cfg);
  // g is zero up to rounding; an exactly-zero direction must be skipped with a warning
  SurrogateGradients sur = s3.sur;
  OuterContext ctx = s3.ctx;
  for (auto& g : ctx.val_grad_w2) g = Tensor::zeros(g.shape());
  auto ag = architecture_gradient(make_problem(m, cfg, tr, va), s, s2.bundle.a, ctx, sur, cfg);
  ASSERT_FALSE(ag.warnings.empty());
  EXPECT_NE(ag.warnings.back().find("W2 term"), std::string::npos);
  for (double v : ag.fd2.values()) EXPECT_EQ(v, 0.0);
}

TEST(Stage3, NoLabelOverlapFreezesCoefficients) {
  auto m = feature_model();
  auto cfg = small_config();
  std::mt19937_64 rng(9);
  auto s = random_state(m, cfg, 9);
  Batch tr = random_batch(m, 6, rng), va = random_batch(m, 4, rng);
  std::fill(tr.labels.begin(), tr.labels.end(), 0);
  std::fill(va.labels.begin(), va.labels.end(), 2);
  auto w1n = stage1_update(m, s, tr, cfg);
  auto s2 = stage2_update(m, s, w1n, tr, va, cfg);
  for (double z : s2.bundle.Z.values()) ASSERT_EQ(z, 0.0);
  EXPECT_EQ(update_coefficients(m, s, w1n, s2.w2_next, s2.bundle, tr, va, cfg).data(), s.r.data());
}

TEST(Stage3, FirstOrderIsPlainDirectDescent) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.order = Order::First;
  cfg.lr.arch = 0.37;
  std::mt19937_64 rng(10);
  auto s = random_state(m, cfg, 10);
  Batch tr = random_batch(m, 6, rng), va = random_batch(m, 4, rng);
  auto w1n = stage1_update(m, s, tr, cfg);
  auto s2 = stage2_update(m, s, w1n, tr, va, cfg);
  Tensor A = s.arch.logits.detach().set_requires_grad();
  Tensor g = grad(batch_loss(m, ArchitectureParams{A}, s2.w2_next, va), A);
  Tensor expect = sub(s.arch.logits, scale(g, 0.37));
  EXPECT_EQ(update_architecture(m, s, w1n, s2.w2_next, s2.bundle, tr, va, cfg).logits.data(),
            expect.data());
}

// ============================================================================
// Oracle
// ============================================================================

TEST(Oracle, ArchitectureBypassGivesZeroArchGradient) {
  auto m = feature_model();
  m.op_set = OpSet{{CandidateOp::Identity}};
  auto cfg = small_config();
  std::mt19937_64 rng(11);
  auto s = random_state(m, cfg, 11);
  auto h = exact_hypergradient_oracle(m, s, random_batch(m, 6, rng), random_batch(m, 4, rng), cfg);
  for (double v : h.arch.values()) EXPECT_EQ(v, 0.0);
}

TEST(Oracle, ZeroSecondRateSeversReweighting) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.lr.w2 = 0.0;
  std::mt19937_64 rng(12);
  auto s = random_state(m, cfg, 12);
  auto h = exact_hypergradient_oracle(m, s, random_batch(m, 6, rng), random_batch(m, 4, rng), cfg);
  for (const auto& t : h.encoder)
    for (double v : t.values()) EXPECT_EQ(v, 0.0);
  for (double v : h.coeff.values()) EXPECT_EQ(v, 0.0);
}

namespace {

// Two-parameter quadratic learners with scalar A, V, r:
//   L_tr  = |w1 - A p|^2 / 2
//   u     = |w1' - A q|^2 / 2,   a = sigmoid(V u r)
//   S     = a |w2 - A p|^2 / 2
//   L_val = |w2' - A q|^2 / 2
struct Quadratic {
  double p[2] = {0.8, -0.3}, q[2] = {0.5, 1.2};

  UnrolledProblem problem() const {
    Tensor P = Tensor::vector({p[0], p[1]}), Q = Tensor::vector({q[0], q[1]});
    auto half_sq = [](const Tensor& d) { return scale(sum(mul(d, d)), 0.5); };
    UnrolledProblem pr;
    pr.train_loss = [=](const Tensor& A, const ParamSet& w) { return half_sq(sub(w.at("w"), mul(A, P))); };
    pr.reweight = [=](const Tensor& A, const ParamSet& w1n, const ParamSet& v, const Tensor& r) {
      ReweightBundle b;
      b.u = reshape(half_sq(sub(w1n.at("w"), mul(A, Q))), Shape{1});
      b.r = r;
      b.a = sigmoid(mul(mul(v.at("v"), b.u), r));
      return b;
    };
    pr.stage2_loss = [=](const Tensor& A, const ParamSet& w, const Tensor& a) {
      return sum(mul(a, half_sq(sub(w.at("w"), mul(A, P)))));
    };
    pr.val_loss = [=](const Tensor& A, const ParamSet& w) { return half_sq(sub(w.at("w"), mul(A, Q))); };
    return pr;
  }

  struct Closed {
    double dA, dV, dr;
  };

  // Pencil-and-paper chain rule.
  Closed closed_form(double A, const double w1[2], const double w2[2], double V, double r,
                     double e1, double e2) const {
    double w1n[2], d1[2], u = 0.0;
    for (int k = 0; k < 2; ++k) {
      w1n[k] = w1[k] - e1 * (w1[k] - A * p[k]);
      d1[k] = w1n[k] - A * q[k];
      u += 0.5 * d1[k] * d1[k];
    }
    double a = 1.0 / (1.0 + std::exp(-V * u * r)), sp = a * (1 - a);
    double du_dA = 0.0;
    for (int k = 0; k < 2; ++k) du_dA += d1[k] * (e1 * p[k] - q[k]);
    double da_dA = sp * V * r * du_dA;
    double res[2], w2n[2], e[2];
    for (int k = 0; k < 2; ++k) {
      res[k] = w2[k] - A * p[k];
      w2n[k] = w2[k] - e2 * a * res[k];
      e[k] = w2n[k] - A * q[k];
    }
    Closed c{0, 0, 0};
    for (int k = 0; k < 2; ++k) {
      double dw2n_dA = e2 * a * p[k] - e2 * res[k] * da_dA;
      c.dA += e[k] * (dw2n_dA - q[k]);
      double dw2n_da = -e2 * res[k];
      c.dV += e[k] * dw2n_da * sp * u * r;
      c.dr += e[k] * dw2n_da * sp * u * V;
    }
    return c;
  }
};

SearchState quadratic_state(double A, const double w1[2], const double w2[2], double V, double r) {
  SearchState s;
  s.arch = {Tensor::vector({A})};
  s.w1.params.add("w", Tensor::vector({w1[0], w1[1]}));
  s.w2.params.add("w", Tensor::vector({w2[0], w2[1]}));
  s.v.params.add("v", Tensor::vector({V}));
  s.r = Tensor::vector({r});
  return s;
}

}  // namespace

TEST(Oracle, QuadraticMatchesClosedForm) {
  Quadratic qd;
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  for (int t = 0; t < 20; ++t) {
    double A = u(rng), V = u(rng), r = u(rng), w1[2] = {u(rng), u(rng)}, w2[2] = {u(rng), u(rng)};
    SearchConfig cfg;
    cfg.lr.w1 = 0.3;
    cfg.lr.w2 = 0.45;
    auto s = quadratic_state(A, w1, w2, V, r);
    auto h = exact_hypergradient_oracle(qd.problem(), s, cfg);
    auto c = qd.closed_form(A, w1, w2, V, r, 0.3, 0.45);
    EXPECT_NEAR(h.arch[0], c.dA, 1e-10);
    EXPECT_NEAR(h.encoder[0][0], c.dV, 1e-10);
    EXPECT_NEAR(h.coeff[0], c.dr, 1e-10);

    // FD terms are exact up to rounding when the A-gradient is linear in the weights.
    auto cmp = compare_with_oracle(qd.problem(), s, cfg);
    EXPECT_NEAR(cmp.estimate.arch_grad.total[0], c.dA, 1e-8);
    EXPECT_NEAR(cmp.estimate.encoder_grad[0][0], c.dV, 1e-12);
    EXPECT_NEAR(cmp.estimate.coeff_grad[0], c.dr, 1e-12);
  }
}

TEST(Oracle, EstimateAgreesOnTinyInstance) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = compare_with_oracle(make_oracle_instance(seed));
    EXPECT_GE(c.arch_cosine, 0.95) << seed;
    EXPECT_GE(c.encoder_cosine, 0.999) << seed;
    EXPECT_GE(c.coeff_cosine, 0.999) << seed;
  }
}

TEST(Oracle, TinyInstanceDistinguishesTerms) {
  // The direct term alone must not already agree with the oracle, otherwise
  // the comparison above would be vacuous.
  double worst = 1.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = compare_with_oracle(make_oracle_instance(seed));
    worst = std::min(worst, cosine_similarity(c.estimate.arch_grad.direct.values(), c.oracle.arch.values()));
  }
  EXPECT_LT(worst, 0.9);
}

TEST(FiniteDifference, HalvingEpsChangesTermsLittle) {
  auto inst = make_oracle_instance(3);
  auto p = make_problem(inst.model, inst.cfg, inst.train, inst.val);
  for (double c : {1e-2, 1e-3}) {
    SearchConfig a = inst.cfg, b = inst.cfg;
    a.eps_scale = c;
    b.eps_scale = c / 2;
    auto w1n = stage1_update(p, inst.state, a);
    auto s2 = stage2_update(p, inst.state, w1n, a);
    auto ga = stage3_gradients(p, inst.state, w1n, s2.w2_next, s2.bundle.a, a).arch_grad;
    auto gb = stage3_gradients(p, inst.state, w1n, s2.w2_next, s2.bundle.a, b).arch_grad;
    for (auto term : {&ArchGradient::fd1, &ArchGradient::fd2}) {
      const Tensor& x = ga.*term;
      const Tensor& y = gb.*term;
      double rel = std::sqrt(dot(sub(x, y), sub(x, y)).item() / dot(x, x).item());
      EXPECT_LT(rel, 0.05) << "eps scale " << c;
    }
  }
}

TEST(FiniteDifference, ConvergesToHessianVectorProduct) {
  auto inst = make_oracle_instance(4);
  auto& m = inst.model;
  auto p = make_problem(m, inst.cfg, inst.train, inst.val);
  auto w1n = stage1_update(p, inst.state, inst.cfg);
  auto s2 = stage2_update(p, inst.state, w1n, inst.cfg);
  auto s3 = stage3_gradients(p, inst.state, w1n, s2.w2_next, s2.bundle.a, inst.cfg);
  // d/dA <dS/dW2, g> by double backward
  Tensor A = inst.state.arch.logits.detach().set_requires_grad();
  ParamSet w = inst.state.w2.params.clone(true);
  auto gs = grad(p.stage2_loss(A, w, s2.bundle.a), w.tensors(), {.create_graph = true});
  std::optional<Tensor> q;
  for (std::size_t k = 0; k < gs.size(); ++k) {
    Tensor t = dot(gs[k], s3.ctx.val_grad_w2[k]);
    q = q ? add(*q, t) : t;
  }
  Tensor hvp = grad(*q, A);
  const Tensor& fd = s3.arch_grad.fd2;
  EXPECT_LT(std::sqrt(dot(sub(fd, hvp), sub(fd, hvp)).item() / dot(hvp, hvp).item()), 1e-4);
}

// ============================================================================
// Full step
// ============================================================================

TEST(Step, ZeroRatesLeaveStateBitwise) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.lr = {0, 0, 0, 0, 0};
  std::mt19937_64 rng(14);
  auto s = random_state(m, cfg, 14);
  auto r = lfm_step(m, s, random_batch(m, 6, rng), random_batch(m, 4, rng), cfg);
  EXPECT_TRUE(states_equal(r.state, s));
}

TEST(Step, ShapesStableOverTenSteps) {
  auto m = feature_model();
  auto cfg = small_config();
  std::mt19937_64 rng(15);
  auto s = random_state(m, cfg, 15);
  auto sig1 = s.w1.params.shape_signature(), sigv = s.v.params.shape_signature();
  for (int t = 0; t < 10; ++t) s = lfm_step(m, s, random_batch(m, 6, rng), random_batch(m, 4, rng), cfg).state;
  EXPECT_EQ(s.w1.params.shape_signature(), sig1);
  EXPECT_EQ(s.w2.params.shape_signature(), sig1);
  EXPECT_EQ(s.v.params.shape_signature(), sigv);
  EXPECT_EQ(s.arch.logits.shape(), (Shape{3, 3}));
  EXPECT_EQ(s.r.shape(), (Shape{4}));
  EXPECT_EQ(s.step, 10u);
}

TEST(Step, StageOneLossDecreasesOnLogisticToy) {
  auto m = feature_model(2);
  m.op_set = OpSet{{CandidateOp::Identity}};
  auto cfg = small_config();
  cfg.lr.w1 = 0.05;
  std::mt19937_64 rng(16);
  auto s = random_state(m, cfg, 16);
  Batch tr = random_batch(m, 6, rng);
  double before = batch_loss(m, s.arch, s.w1.params, tr).item();
  auto r = lfm_step(m, s, tr, random_batch(m, 4, rng), cfg);
  EXPECT_LT(batch_loss(m, s.arch, r.state.w1.params, tr).item(), before);
}

TEST(Step, LearnersNeverShareStorage) {
  auto m = feature_model();
  auto cfg = small_config();
  std::mt19937_64 rng(17);
  auto s = random_state(m, cfg, 17);
  for (int t = 0; t < 3; ++t) {
    s = lfm_step(m, s, random_batch(m, 6, rng), random_batch(m, 4, rng), cfg).state;
    for (const auto& [n1, t1] : s.w1.params.entries())
      for (const auto& [n2, t2] : s.w2.params.entries()) EXPECT_FALSE(t1.same_storage(t2)) << n1 << " " << n2;
  }
  cfg.single_set = true;
  s = lfm_step(m, s, random_batch(m, 6, rng), random_batch(m, 4, rng), cfg).state;
  EXPECT_TRUE(s.w1.params.values_equal(s.w2.params));
  for (std::size_t i = 0; i < s.w1.params.size(); ++i)
    EXPECT_FALSE(s.w1.params.entries()[i].second.same_storage(s.w2.params.entries()[i].second));
}

TEST(Step, InitialWeightsAreNeutralAndClampKeepsUpperHalf) {
  auto m = feature_model();
  auto cfg = small_config();
  std::mt19937_64 rng(18);
  auto s = init_search_state(m, cfg);
  auto r = lfm_step(m, s, random_batch(m, 6, rng), random_batch(m, 4, rng), cfg);
  for (double a : r.diag.example_weights) EXPECT_EQ(a, 0.5);
  cfg.clamp_r_nonnegative = true;
  cfg.lr.coeff = 50.0;
  s = random_state(m, cfg, 18);
  for (auto& x : s.r.mutable_values()) x = std::abs(x);
  for (int t = 0; t < 10; ++t) {
    r = lfm_step(m, s, random_batch(m, 6, rng), random_batch(m, 4, rng), cfg);
    for (double a : r.diag.example_weights) {
      EXPECT_GE(a, 0.5);
      EXPECT_LT(a, 1.0);
    }
    for (double x : r.state.r.values()) EXPECT_GE(x, 0.0);
    s = r.state;
  }
}

TEST(Step, AblatedFactorsIgnoreTheirInputs) {
  auto m = feature_model();
  auto cfg = small_config();
  std::mt19937_64 rng(19);
  auto s = random_state(m, cfg, 19);
  Batch tr = random_batch(m, 6, rng), va = random_batch(m, 4, rng);
  va.labels = {0, 1, 2, 2};
  ReweightProbe perm{{3, 2, 0, 1}, 0.0, 0.0, 1};
  ReweightProbe emb{{}, 0.5, 0.0, 2};
  ReweightProbe logit{{}, 0.0, 0.5, 3};
  struct Case {
    AblationFlags flags;
    ReweightProbe* probe;
  } cases[] = {{{false, true, false}, &perm}, {{true, false, false}, &emb}, {{false, false, true}, &logit}};
  for (auto& c : cases) {
    SearchConfig ab = cfg;
    ab.ablation = c.flags;
    EXPECT_TRUE(states_equal(lfm_step(m, s, tr, va, ab).state, lfm_step(m, s, tr, va, ab, c.probe).state));
    // the same perturbation is visible without the ablation
    EXPECT_FALSE(states_equal(lfm_step(m, s, tr, va, cfg).state, lfm_step(m, s, tr, va, cfg, c.probe).state));
  }
}

TEST(Step, UniformReductionMatchesUnrolledDarts) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.order = Order::First;
  cfg.ablation = {true, true, true};
  cfg.lr.coeff = 0.0;
  std::mt19937_64 rng(20);
  auto s = init_search_state(m, cfg);
  Batch tr = random_batch(m, 6, rng), va = random_batch(m, 4, rng);
  auto r = lfm_step(m, s, tr, va, cfg);

  // W1 is irrelevant once every factor is ablated; W2 takes a half-weighted step.
  ParamSet w = s.w2.params.clone(true);
  Tensor half = Tensor::full(Shape{6}, 0.5);
  Tensor S = scale(sum(mul(half, cross_entropy(learner_forward(m, s.arch, w, tr.inputs), tr.labels))), 1.0 / 6.0);
  ParamSet w2n = w.step(-cfg.lr.w2, grad(S, w.tensors()));
  Tensor A = s.arch.logits.detach().set_requires_grad();
  Tensor g = grad(mean(cross_entropy(learner_forward(m, ArchitectureParams{A}, w2n, va.inputs), va.labels)), A);
  Tensor expect = sub(s.arch.logits, scale(g, cfg.lr.arch));
  EXPECT_EQ(r.state.arch.logits.data(), expect.data());
  EXPECT_EQ(r.state.r.data(), s.r.data());
}

// ============================================================================
// Search driver
// ============================================================================

namespace {
Splits feature_splits(std::uint64_t seed) {
  SyntheticOptions opt;
  opt.image_size = 0;
  opt.features = 4;
  auto ds = make_synthetic(96, 3, {0.2}, seed, opt);
  return split_dataset(ds, kDefaultSplit, seed);
}
}  // namespace

TEST(Search, DeterministicForFixedSeed) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.epochs = 3;
  auto sp = feature_splits(1);
  auto a = run_search(m, cfg, sp.train, sp.val);
  auto b = run_search(m, cfg, sp.train, sp.val);
  EXPECT_EQ(a.arch.serialize(), b.arch.serialize());
  EXPECT_TRUE(states_equal(a.state, b.state));
  ASSERT_EQ(a.epochs.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.epochs[e].w2_val_loss, b.epochs[e].w2_val_loss);
    EXPECT_EQ(a.epochs[e].a_stats.variance, b.epochs[e].a_stats.variance);
  }
}

TEST(Search, ZeroEpochsDiscretizesInitialArchitecture) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.epochs = 0;
  auto sp = feature_splits(2);
  auto res = run_search(m, cfg, sp.train, sp.val);
  EXPECT_TRUE(res.epochs.empty());
  EXPECT_EQ(res.arch, derive_architecture(init_search_state(m, cfg).arch, m.op_set, m.cell, 1));
}

TEST(Search, EveryVariableMoves) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.epochs = 3;
  auto sp = feature_splits(3);
  auto init = init_search_state(m, cfg);
  auto res = run_search(m, cfg, sp.train, sp.val);
  EXPECT_GT(max_abs_diff(res.state.arch.logits, init.arch.logits), 0.0);
  EXPECT_GT(param_diff(res.state.w1.params, init.w1.params), 0.0);
  EXPECT_GT(param_diff(res.state.w2.params, init.w2.params), 0.0);
  EXPECT_GT(param_diff(res.state.v.params, init.v.params), 0.0);
  EXPECT_GT(max_abs_diff(res.state.r, init.r), 0.0);
}

TEST(Search, DivergenceReportsStep) {
  auto m = feature_model();
  auto cfg = small_config();
  cfg.lr.w1 = 1e300;
  cfg.epochs = 2;
  auto sp = feature_splits(4);
  try {
    run_search(m, cfg, sp.train, sp.val);
    FAIL() << "expected divergence";
  } catch (const SearchDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("step " + std::to_string(e.step())), std::string::npos);
  }
}

TEST(Search, RejectsInvalidConfig) {
  auto m = feature_model();
  auto cfg = small_config();
  auto sp = feature_splits(5);
  cfg.lr.arch = -1;
  EXPECT_THROW(run_search(m, cfg, sp.train, sp.val), std::invalid_argument);
  cfg = small_config();
  cfg.batch_val = 0;
  EXPECT_THROW(run_search(m, cfg, sp.train, sp.val), std::invalid_argument);
}
