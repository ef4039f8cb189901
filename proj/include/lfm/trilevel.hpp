#pragma once

// Tri-level search: one-step unrolled updates of the two learners, the
// re-weighting pipeline in between, and hypergradient updates of the
// architecture, the encoder and the coefficient vector.
//
// Per step, with g = dL_val/dW2' and the second-stage loss
// S(a, A, W2) = reduce_i a_i * l_i(A, W2):
//
//   W1' = W1 - lr_w1 * dL_tr/dW1
//   a   = a(V, r, W1', A)
//   W2' = W2 - lr_w2 * dS/dW2
//   c_i = d/da_i <dS/dW2, g>        (exact, one double-backward)
//   s   = sum_i c_i a_i             (surrogate: ds/dV, ds/dr, ds/dW1' give the
//                                    reweighting part of the hypergradient)
//   dL/dV = -lr_w2 * ds/dV,   dL/dr = -lr_w2 * ds/dr
//   dL/dA = dL_val/dA - lr_w2 * ds/dA|_u
//           - lr_w2 * (-lr_w1 * FD1 + FD2)
//   FD1 = [d_A L_tr(A, W1+) - d_A L_tr(A, W1-)] / (2 eps1),  W1+- = W1 +- eps1 * ds/dW1'
//   FD2 = [d_A S(a, A, W2+) - d_A S(a, A, W2-)] / (2 eps2),  W2+- = W2 +- eps2 * g
//   eps = eps_scale / ||direction||

#include <lfm/data.hpp>
#include <lfm/models.hpp>
#include <lfm/reweight.hpp>

#include <chrono>

namespace lfm {

enum class Order { First, Second };
enum class Reduction { Mean, Sum };

struct LearningRates {
  double w1 = 0.1;
  double w2 = 0.1;
  double arch = 0.05;
  double encoder = 0.01;
  double coeff = 0.5;
};

struct SearchConfig {
  LearningRates lr;
  double eps_scale = 0.01;
  Order order = Order::Second;
  std::size_t batch_train = 32;
  std::size_t batch_val = 8;
  std::size_t epochs = 10;
  AblationFlags ablation;
  SimilarityMetric metric = SimilarityMetric::Dot;
  std::size_t k = 1;
  std::uint64_t seed = 0;
  Reduction stage2_reduction = Reduction::Mean;
  /// Include the architecture's direct influence on u (through the first
  /// learner's forward pass) in the second-order architecture gradient.
  bool u_direct_term = true;
  /// Train one weight set in both stages instead of two.
  bool single_set = false;
  /// Keep r >= 0 after every update.
  bool clamp_r_nonnegative = false;

  void validate() const {
    for (double v : {lr.w1, lr.w2, lr.arch, lr.encoder, lr.coeff})
      if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("learning rates must be >= 0");
    if (order == Order::Second && !(eps_scale > 0.0))
      throw std::invalid_argument("eps_scale must be positive in second-order mode");
    if (batch_train == 0 || batch_val == 0) throw std::invalid_argument("batch sizes must be >= 1");
    if (k == 0) throw std::invalid_argument("k must be >= 1");
  }
};

class SearchDiverged : public std::runtime_error {
 public:
  SearchDiverged(std::uint64_t step, const std::string& why)
      : std::runtime_error("search diverged at step " + std::to_string(step) + ": " + why),
        step_(step) {}
  std::uint64_t step() const noexcept { return step_; }

 private:
  std::uint64_t step_;
};

struct SearchState {
  ArchitectureParams arch;
  LearnerWeights w1;
  LearnerWeights w2;
  EncoderWeights v;
  Tensor r;
  std::uint64_t step = 0;

  bool all_finite() const {
    auto finite = [](const Tensor& t) {
      return std::all_of(t.values().begin(), t.values().end(), [](double x) { return std::isfinite(x); });
    };
    return finite(arch.logits) && w1.params.all_finite() && w2.params.all_finite() &&
           v.params.all_finite() && finite(r);
  }
};

/// Seeds: A <- stream 10, W1 <- 11, W2 <- 12, V <- 13. r starts at zero.
inline SearchState init_search_state(const ModelConfig& model, const SearchConfig& cfg) {
  model.validate();
  cfg.validate();
  SearchState s;
  s.arch = ArchitectureParams::random(model.cell, model.op_set, derive_seed(cfg.seed, 10));
  s.w1 = init_learner(model, derive_seed(cfg.seed, 11), LearnerRole::W1);
  s.w2 = init_learner(model, derive_seed(cfg.seed, 12), LearnerRole::W2);
  s.v = init_encoder(model, derive_seed(cfg.seed, 13));
  s.r = Tensor::zeros(Shape{cfg.batch_val});
  return s;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline Tensor batch_loss(const ModelConfig& m, const ArchitectureParams& arch, const ParamSet& w,
                         const Batch& batch) {
  return mean(cross_entropy(learner_forward(m, arch, w, batch.inputs), batch.labels));
}

inline Tensor weighted_loss(const ModelConfig& m, const ArchitectureParams& arch,
                            const ParamSet& w, const Batch& batch, const Tensor& a,
                            Reduction reduction) {
  Tensor s = sum(mul(a, cross_entropy(learner_forward(m, arch, w, batch.inputs), batch.labels)));
  return reduction == Reduction::Mean ? scale(s, 1.0 / static_cast<double>(batch.size())) : s;
}

inline double error_rate(const Tensor& logits, std::span<const int> labels) {
  std::size_t B = logits.dim(0), C = logits.dim(1), wrong = 0;
  for (std::size_t n = 0; n < B; ++n) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logits[n * C + c] > logits[n * C + best]) best = c;
    wrong += static_cast<int>(best) != labels[n];
  }
  return static_cast<double>(wrong) / static_cast<double>(B);
}

namespace detail {

inline ArchitectureParams arch_leaf(const ArchitectureParams& a, bool requires_grad) {
  Tensor t = a.logits.detach();
  t.set_requires_grad(requires_grad);
  return {t};
}

inline Tensor leaf(const Tensor& t, bool requires_grad) {
  Tensor c = t.detach();
  c.set_requires_grad(requires_grad);
  return c;
}

inline void require_finite(std::span<const Tensor> ts, std::uint64_t step, const char* what) {
  for (const auto& t : ts)
    for (double v : t.values())
      if (!std::isfinite(v)) throw SearchDiverged(step, std::string("non-finite ") + what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Re-weighting inputs
// ---------------------------------------------------------------------------

/// Perturbations applied only to the inputs of the re-weighting pipeline. Used
/// to verify that an ablated factor has no influence on a step.
struct ReweightProbe {
  std::vector<std::size_t> val_label_permutation;  // labels fed to Z
  double embedding_noise = 0.0;                    // added to both embedding sets
  double logit_noise = 0.0;                        // added to validation logits before u
  std::uint64_t seed = 0;
};

namespace detail {

inline Tensor probe_noise(const Shape& s, double scale_, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale_);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = d(rng);
  return Tensor(s, std::move(v));
}

}  // namespace detail

/// X, Z, u, a for one (train, val) batch pair. Differentiable with respect to
/// whichever of V, r, W1', A are on a tape.
inline ReweightBundle compute_bundle(const ModelConfig& m, const SearchConfig& cfg,
                                     const ArchitectureParams& arch, const ParamSet& w1_next,
                                     const ParamSet& v, const Tensor& r, const Batch& train,
                                     const Batch& val, const ReweightProbe* probe = nullptr) {
  if (val.size() != r.numel())
    throw ShapeError("validation batch of " + std::to_string(val.size()) +
                     " does not match coefficient vector of " + std::to_string(r.numel()));
  Tensor e_tr = encoder_embed(m, v, train.inputs);
  Tensor e_val = encoder_embed(m, v, val.inputs);
  Tensor val_logits = learner_forward(m, arch, w1_next, val.inputs);
  std::vector<int> z_labels = val.labels;
  if (probe) {
    if (probe->embedding_noise != 0.0) {
      e_tr = add(e_tr, detail::probe_noise(e_tr.shape(), probe->embedding_noise, derive_seed(probe->seed, 1)));
      e_val = add(e_val, detail::probe_noise(e_val.shape(), probe->embedding_noise, derive_seed(probe->seed, 2)));
    }
    if (probe->logit_noise != 0.0)
      val_logits = add(val_logits, detail::probe_noise(val_logits.shape(), probe->logit_noise,
                                                       derive_seed(probe->seed, 3)));
    if (!probe->val_label_permutation.empty()) {
      if (probe->val_label_permutation.size() != val.size())
        throw std::invalid_argument("label permutation has the wrong length");
      for (std::size_t j = 0; j < val.size(); ++j)
        z_labels[j] = val.labels.at(probe->val_label_permutation[j]);
    }
  }
  ReweightBundle b;
  b.X = visual_similarity(e_tr, e_val, cfg.metric);
  b.Z = label_similarity(train.labels, z_labels, m.classes);
  b.u = validation_losses(val_logits, val.labels);
  b.r = r;
  b.a = example_weights(b.X, b.Z, b.u, r, cfg.ablation);
  return b;
}

// ---------------------------------------------------------------------------
// Unrolled problem
//
// The update rules only need four functions of the variables. The learner
// models provide one instance (make_problem); tests provide closed-form ones.
// ---------------------------------------------------------------------------

struct UnrolledProblem {
  std::function<Tensor(const Tensor& arch, const ParamSet& w1)> train_loss;
  std::function<ReweightBundle(const Tensor& arch, const ParamSet& w1_next, const ParamSet& v,
                               const Tensor& r)>
      reweight;
  std::function<Tensor(const Tensor& arch, const ParamSet& w2, const Tensor& a)> stage2_loss;
  std::function<Tensor(const Tensor& arch, const ParamSet& w2_next)> val_loss;
};

inline UnrolledProblem make_problem(const ModelConfig& m, const SearchConfig& cfg,
                                    const Batch& train, const Batch& val,
                                    const ReweightProbe* probe = nullptr) {
  std::optional<ReweightProbe> pr;
  if (probe) pr = *probe;
  UnrolledProblem p;
  p.train_loss = [m, train](const Tensor& A, const ParamSet& w) {
    return batch_loss(m, ArchitectureParams{A}, w, train);
  };
  p.reweight = [m, cfg, train, val, pr](const Tensor& A, const ParamSet& w1n, const ParamSet& v,
                                        const Tensor& r) {
    return compute_bundle(m, cfg, ArchitectureParams{A}, w1n, v, r, train, val, pr ? &*pr : nullptr);
  };
  p.stage2_loss = [m, train, red = cfg.stage2_reduction](const Tensor& A, const ParamSet& w,
                                                         const Tensor& a) {
    return weighted_loss(m, ArchitectureParams{A}, w, train, a, red);
  };
  p.val_loss = [m, val](const Tensor& A, const ParamSet& w) {
    return batch_loss(m, ArchitectureParams{A}, w, val);
  };
  return p;
}

// ---------------------------------------------------------------------------
// Stage I and II
// ---------------------------------------------------------------------------

/// W1' = W1 - lr_w1 * grad L_tr(A, W1). The result is a set of plain leaves;
/// the exact oracle rebuilds this step on a live graph when it needs the
/// dependence on A.
inline ParamSet stage1_update(const UnrolledProblem& p, const SearchState& state,
                              const SearchConfig& cfg, double* loss_out = nullptr) {
  NoGradGuard enable(true);
  ParamSet w = state.w1.params.clone(true);
  Tensor loss = p.train_loss(state.arch.logits, w);
  if (loss_out) *loss_out = loss.item();
  auto g = grad(loss, w.tensors());
  detail::require_finite(g, state.step, "stage-1 gradient");
  return w.step(-cfg.lr.w1, g);
}

inline ParamSet stage1_update(const ModelConfig& m, const SearchState& state, const Batch& train,
                              const SearchConfig& cfg, double* loss_out = nullptr) {
  if (train.size() == 0) throw std::invalid_argument("empty training batch");
  UnrolledProblem p;
  p.train_loss = [&](const Tensor& A, const ParamSet& w) {
    return batch_loss(m, ArchitectureParams{A}, w, train);
  };
  return stage1_update(p, state, cfg, loss_out);
}

struct Stage2Result {
  ParamSet w2_next;
  ReweightBundle bundle;
  double weighted_loss = 0.0;
};

/// W2' = W2 - lr_w2 * grad S(A, W2, a). `a` is treated as a constant here.
/// `w2_override` replaces W2 (single weight-set mode).
inline Stage2Result stage2_update(const UnrolledProblem& p, const SearchState& state,
                                  const ParamSet& w1_next, const SearchConfig& cfg,
                                  const ParamSet* w2_override = nullptr) {
  NoGradGuard enable(true);
  Stage2Result out;
  {
    NoGradGuard ng;
    out.bundle = p.reweight(state.arch.logits, w1_next, state.v.params, state.r);
  }
  ParamSet w = (w2_override ? *w2_override : state.w2.params).clone(true);
  Tensor loss = p.stage2_loss(state.arch.logits, w, out.bundle.a);
  out.weighted_loss = loss.item();
  auto g = grad(loss, w.tensors());
  detail::require_finite(g, state.step, "stage-2 gradient");
  out.w2_next = w.step(-cfg.lr.w2, g);
  return out;
}

inline Stage2Result stage2_update(const ModelConfig& m, const SearchState& state,
                                  const ParamSet& w1_next, const Batch& train, const Batch& val,
                                  const SearchConfig& cfg, const ReweightProbe* probe = nullptr,
                                  const ParamSet* w2_override = nullptr) {
  return stage2_update(make_problem(m, cfg, train, val, probe), state, w1_next, cfg, w2_override);
}

// ---------------------------------------------------------------------------
// Stage III
// ---------------------------------------------------------------------------

/// Quantities shared by the encoder, coefficient and architecture updates.
struct OuterContext {
  std::vector<Tensor> val_grad_w2;  // g = dL_val/dW2'
  Tensor direct_arch;               // dL_val/dA at fixed W2'
  Tensor coeff;                     // c_i = d/da_i <dS/dW2, g>
  double val_loss = 0.0;
};

inline OuterContext outer_context(const UnrolledProblem& p, const SearchState& state,
                                  const ParamSet& w2_next, const Tensor& a_value,
                                  const ParamSet* w2_base = nullptr) {
  NoGradGuard enable(true);
  OuterContext ctx;
  {
    ParamSet w = w2_next.clone(true);
    Tensor A = detail::leaf(state.arch.logits, true);
    Tensor loss = p.val_loss(A, w);
    ctx.val_loss = loss.item();
    std::vector<Tensor> wrt = w.tensors();
    wrt.push_back(A);
    auto g = grad(loss, wrt);
    ctx.direct_arch = g.back();
    g.pop_back();
    ctx.val_grad_w2 = std::move(g);
  }
  {
    // <dS/dW2, g> is linear in a, so its gradient in a is exact and constant.
    ParamSet w = (w2_base ? *w2_base : state.w2.params).clone(true);
    Tensor a = detail::leaf(a_value, true);
    Tensor S = p.stage2_loss(state.arch.logits, w, a);
    auto gs = grad(S, w.tensors(), {.create_graph = true});
    std::optional<Tensor> q;
    for (std::size_t k = 0; k < gs.size(); ++k) {
      Tensor term = dot(gs[k], ctx.val_grad_w2[k]);
      q = q ? add(*q, term) : term;
    }
    ctx.coeff = q->requires_grad() ? grad(*q, a) : Tensor::zeros(a.shape());
  }
  detail::require_finite(ctx.val_grad_w2, state.step, "validation gradient");
  return ctx;
}

struct SurrogateGradients {
  std::vector<Tensor> encoder;  // ds/dV
  Tensor coeff;                 // ds/dr
  std::vector<Tensor> w1_next;  // ds/dW1'
  Tensor arch_via_u;            // ds/dA through u only
};

inline SurrogateGradients surrogate_gradients(const UnrolledProblem& p, const SearchState& state,
                                              const ParamSet& w1_next, const OuterContext& ctx) {
  NoGradGuard enable(true);
  ParamSet v = state.v.params.clone(true);
  Tensor r = detail::leaf(state.r, true);
  ParamSet w1 = w1_next.clone(true);
  Tensor A = detail::leaf(state.arch.logits, true);
  ReweightBundle b = p.reweight(A, w1, v, r);
  Tensor s = dot(ctx.coeff, b.a);

  std::vector<Tensor> wrt = v.tensors();
  std::size_t nv = wrt.size();
  wrt.push_back(r);
  auto w1t = w1.tensors();
  wrt.insert(wrt.end(), w1t.begin(), w1t.end());
  wrt.push_back(A);

  SurrogateGradients out;
  std::vector<Tensor> g;
  if (s.requires_grad()) {
    g = grad(s, wrt);
  } else {
    for (const auto& t : wrt) g.push_back(Tensor::zeros(t.shape()));
  }
  out.encoder.assign(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(nv));
  out.coeff = g[nv];
  out.w1_next.assign(g.begin() + static_cast<std::ptrdiff_t>(nv + 1), g.end() - 1);
  out.arch_via_u = g.back();
  return out;
}

struct ArchGradient {
  Tensor total;
  Tensor direct;
  Tensor via_u;   // -lr_w2 * ds/dA|_u (zero in first-order mode or when disabled)
  Tensor fd1;     // finite-difference term through W1'
  Tensor fd2;     // finite-difference term through W2
  std::vector<std::string> warnings;
};

namespace detail {

// Central difference of the A-gradient of f(A, W) along a weight-space direction.
template <class LossFn>
Tensor fd_arch_term(const Tensor& arch, const ParamSet& base, std::span<const Tensor> direction,
                    double eps_scale, LossFn loss_fn, std::vector<std::string>& warnings,
                    const char* label) {
  double norm = norm_values(direction);
  if (!(norm > 0.0)) {
    warnings.push_back(std::string(label) + ": zero-norm finite-difference direction, term skipped");
    return Tensor::zeros(arch.shape());
  }
  double eps = eps_scale / norm;
  auto arch_grad_at = [&](double sign) {
    NoGradGuard on(true);
    ParamSet w = base.axpy(sign * eps, direction).clone(false);
    Tensor A = leaf(arch, true);
    return grad(loss_fn(A, w), A);
  };
  Tensor gp = arch_grad_at(+1.0), gm = arch_grad_at(-1.0);
  NoGradGuard ng;
  return scale(sub(gp, gm), 1.0 / (2.0 * eps));
}

}  // namespace detail

inline ArchGradient architecture_gradient(const UnrolledProblem& p, const SearchState& state,
                                          const Tensor& a_value, const OuterContext& ctx,
                                          const SurrogateGradients& sur, const SearchConfig& cfg) {
  NoGradGuard ng;
  ArchGradient out;
  const Tensor& A = state.arch.logits;
  out.direct = ctx.direct_arch;
  out.via_u = Tensor::zeros(A.shape());
  out.fd1 = Tensor::zeros(A.shape());
  out.fd2 = Tensor::zeros(A.shape());
  if (cfg.order == Order::First || cfg.single_set) {
    out.total = out.direct;
    return out;
  }
  if (cfg.u_direct_term) out.via_u = scale(sur.arch_via_u, -cfg.lr.w2);
  if (cfg.lr.w1 != 0.0)
    out.fd1 = detail::fd_arch_term(A, state.w1.params, sur.w1_next, cfg.eps_scale, p.train_loss,
                                   out.warnings, "W1 term");
  Tensor a = a_value.detach();
  out.fd2 = detail::fd_arch_term(
      A, state.w2.params, ctx.val_grad_w2, cfg.eps_scale,
      [&](const Tensor& arch, const ParamSet& w) { return p.stage2_loss(arch, w, a); },
      out.warnings, "W2 term");
  // dL/dA = direct + via_u - lr_w2 * (-lr_w1 * FD1 + FD2)
  Tensor hv = sub(out.fd2, scale(out.fd1, cfg.lr.w1));
  out.total = add(add(out.direct, out.via_u), scale(hv, -cfg.lr.w2));
  return out;
}

// ---------------------------------------------------------------------------
// Update operations
// ---------------------------------------------------------------------------

struct Stage3Result {
  OuterContext ctx;
  SurrogateGradients sur;
  ArchGradient arch_grad;
  std::vector<Tensor> encoder_grad;  // dL_val/dV
  Tensor coeff_grad;                 // dL_val/dr
};

inline Stage3Result stage3_gradients(const UnrolledProblem& p, const SearchState& state,
                                     const ParamSet& w1_next, const ParamSet& w2_next,
                                     const Tensor& a_value, const SearchConfig& cfg,
                                     const ParamSet* w2_base = nullptr) {
  Stage3Result out;
  out.ctx = outer_context(p, state, w2_next, a_value, w2_base);
  out.sur = surrogate_gradients(p, state, w1_next, out.ctx);
  SearchState base = state;
  if (w2_base) base.w2.params = *w2_base;
  out.arch_grad = architecture_gradient(p, base, a_value, out.ctx, out.sur, cfg);
  NoGradGuard ng;
  for (const auto& g : out.sur.encoder) out.encoder_grad.push_back(scale(g, -cfg.lr.w2));
  out.coeff_grad = scale(out.sur.coeff, -cfg.lr.w2);
  return out;
}

inline Stage3Result stage3_gradients(const ModelConfig& m, const SearchState& state,
                                     const ParamSet& w1_next, const ParamSet& w2_next,
                                     const ReweightBundle& bundle, const Batch& train,
                                     const Batch& val, const SearchConfig& cfg,
                                     const ReweightProbe* probe = nullptr,
                                     const ParamSet* w2_base = nullptr) {
  return stage3_gradients(make_problem(m, cfg, train, val, probe), state, w1_next, w2_next,
                          bundle.a, cfg, w2_base);
}

inline ParamSet apply_encoder_update(const SearchState& state, const Stage3Result& s3,
                                     const SearchConfig& cfg) {
  detail::require_finite(s3.encoder_grad, state.step, "encoder gradient");
  return state.v.params.step(-cfg.lr.encoder, s3.encoder_grad);
}

inline Tensor apply_coefficient_update(const SearchState& state, const Stage3Result& s3,
                                       const SearchConfig& cfg) {
  detail::require_finite(std::span<const Tensor>(&s3.coeff_grad, 1), state.step, "coefficient gradient");
  NoGradGuard ng;
  Tensor r = sub(state.r, scale(s3.coeff_grad, cfg.lr.coeff)).detach();
  if (cfg.clamp_r_nonnegative)
    for (auto& x : r.mutable_values()) x = std::max(0.0, x);
  return r;
}

inline ArchitectureParams apply_architecture_update(const SearchState& state,
                                                    const Stage3Result& s3,
                                                    const SearchConfig& cfg) {
  detail::require_finite(std::span<const Tensor>(&s3.arch_grad.total, 1), state.step,
                         "architecture gradient");
  NoGradGuard ng;
  return {sub(state.arch.logits, scale(s3.arch_grad.total, cfg.lr.arch)).detach()};
}

/// V' = V - lr_v * dL_val/dV.
inline ParamSet update_encoder(const ModelConfig& m, const SearchState& state,
                               const ParamSet& w1_next, const ParamSet& w2_next,
                               const ReweightBundle& bundle, const Batch& train, const Batch& val,
                               const SearchConfig& cfg) {
  return apply_encoder_update(state, stage3_gradients(m, state, w1_next, w2_next, bundle, train, val, cfg), cfg);
}

/// r' = r - lr_r * dL_val/dr.
inline Tensor update_coefficients(const ModelConfig& m, const SearchState& state,
                                  const ParamSet& w1_next, const ParamSet& w2_next,
                                  const ReweightBundle& bundle, const Batch& train,
                                  const Batch& val, const SearchConfig& cfg) {
  return apply_coefficient_update(state, stage3_gradients(m, state, w1_next, w2_next, bundle, train, val, cfg), cfg);
}

/// A' = A - lr_A * dL_val/dA with finite-difference second-order terms.
inline ArchitectureParams update_architecture(const ModelConfig& m, const SearchState& state,
                                              const ParamSet& w1_next, const ParamSet& w2_next,
                                              const ReweightBundle& bundle, const Batch& train,
                                              const Batch& val, const SearchConfig& cfg) {
  return apply_architecture_update(state, stage3_gradients(m, state, w1_next, w2_next, bundle, train, val, cfg), cfg);
}

// ---------------------------------------------------------------------------
// Exact oracle
// ---------------------------------------------------------------------------

struct HyperGradients {
  Tensor arch;
  std::vector<Tensor> encoder;
  Tensor coeff;
  double val_loss = 0.0;
};

/// Gradients of L_val(A, W2'(W1'(A), V, r)) with respect to A, V and r,
/// differentiating through both materialised one-step updates.
inline HyperGradients exact_hypergradient_oracle(const UnrolledProblem& p,
                                                 const SearchState& state,
                                                 const SearchConfig& cfg) {
  NoGradGuard on(true);
  Tensor A = detail::leaf(state.arch.logits, true);
  ParamSet w1 = state.w1.params.clone(true);
  ParamSet w2 = state.w2.params.clone(true);
  ParamSet v = state.v.params.clone(true);
  Tensor r = detail::leaf(state.r, true);

  auto g1 = grad(p.train_loss(A, w1), w1.tensors(), {.create_graph = true});
  ParamSet w1_next = w1.axpy(-cfg.lr.w1, g1);
  Tensor a = p.reweight(A, w1_next, v, r).a;
  auto g2 = grad(p.stage2_loss(A, w2, a), w2.tensors(), {.create_graph = true});
  ParamSet w2_next = w2.axpy(-cfg.lr.w2, g2);

  Tensor l_val = p.val_loss(A, w2_next);
  std::vector<Tensor> wrt{A};
  auto vt = v.tensors();
  wrt.insert(wrt.end(), vt.begin(), vt.end());
  wrt.push_back(r);
  auto g = grad(l_val, wrt);
  HyperGradients out;
  out.arch = g.front();
  out.encoder.assign(g.begin() + 1, g.end() - 1);
  out.coeff = g.back();
  out.val_loss = l_val.item();
  return out;
}

inline HyperGradients exact_hypergradient_oracle(const ModelConfig& m, const SearchState& state,
                                                 const Batch& train, const Batch& val,
                                                 const SearchConfig& cfg) {
  return exact_hypergradient_oracle(make_problem(m, cfg, train, val), state, cfg);
}

// ---------------------------------------------------------------------------
// Full step and search driver
// ---------------------------------------------------------------------------

struct StepDiagnostics {
  double w1_train_loss = 0.0;     // at W1, before the step
  double w2_weighted_loss = 0.0;  // at W2, before the step
  double w2_val_loss = 0.0;       // at W2'
  double w2_val_error = 0.0;
  std::vector<double> example_weights;
  std::vector<std::string> warnings;
};

struct StepResult {
  SearchState state;
  StepDiagnostics diag;
};

/// W1 update, W2 update, then A, V, r from the same pre-update state.
inline StepResult lfm_step(const ModelConfig& m, const SearchState& state, const Batch& train,
                           const Batch& val, const SearchConfig& cfg,
                           const ReweightProbe* probe = nullptr) {
  if (train.size() == 0 || val.size() == 0) throw std::invalid_argument("empty batch");
  UnrolledProblem p = make_problem(m, cfg, train, val, probe);
  StepResult out;
  ParamSet w1_next = stage1_update(p, state, cfg, &out.diag.w1_train_loss);

  std::optional<ParamSet> shared;
  if (cfg.single_set) shared = w1_next;
  Stage2Result s2 = stage2_update(p, state, w1_next, cfg, shared ? &*shared : nullptr);
  Stage3Result s3 = stage3_gradients(p, state, w1_next, s2.w2_next, s2.bundle.a, cfg,
                                     shared ? &*shared : nullptr);

  out.state.arch = apply_architecture_update(state, s3, cfg);
  out.state.v.params = apply_encoder_update(state, s3, cfg);
  out.state.r = apply_coefficient_update(state, s3, cfg);
  out.state.w2 = {s2.w2_next, LearnerRole::W2};
  out.state.w1 = {cfg.single_set ? s2.w2_next.clone() : w1_next, LearnerRole::W1};
  out.state.step = state.step + 1;

  out.diag.w2_weighted_loss = s2.weighted_loss;
  out.diag.w2_val_loss = s3.ctx.val_loss;
  {
    NoGradGuard ng;
    out.diag.w2_val_error = error_rate(learner_forward(m, state.arch, s2.w2_next, val.inputs), val.labels);
  }
  out.diag.example_weights = s2.bundle.a.data();
  out.diag.warnings = s3.arch_grad.warnings;
  if (!out.state.all_finite()) throw SearchDiverged(state.step, "non-finite state after update");
  return out;
}

struct EpochSummary {
  std::size_t epoch = 0;  // 1-based
  std::size_t steps = 0;
  double w1_train_loss = 0.0;
  double w2_weighted_loss = 0.0;
  double w2_val_loss = 0.0;
  double w2_val_error = 0.0;
  WeightStats a_stats;
  double arch_entropy = 0.0;
  std::size_t warnings = 0;
  double wall_ms = 0.0;
};

struct SearchResult {
  DiscreteArchitecture arch;
  SearchState state;
  std::vector<EpochSummary> epochs;
};

using EpochCallback = std::function<void(const EpochSummary&, const SearchState&)>;

/// Iterates lfm_step over shuffled, complete mini-batches. Incomplete trailing
/// batches are dropped. Validation batches cycle when the validation split
/// has fewer batches than the training split.
inline SearchResult run_search(const ModelConfig& m, const SearchConfig& cfg, const Dataset& train,
                               const Dataset& val, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.size() < cfg.batch_train || val.size() < cfg.batch_val)
    throw std::invalid_argument("splits smaller than one batch");
  SearchResult res;
  res.state = init_search_state(m, cfg);
  std::mt19937_64 rng(derive_seed(cfg.seed, 20));
  std::size_t n_tr = train.size() / cfg.batch_train;
  std::size_t n_val = val.size() / cfg.batch_val;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> tr_idx(train.size()), val_idx(val.size());
    std::iota(tr_idx.begin(), tr_idx.end(), 0);
    std::iota(val_idx.begin(), val_idx.end(), 0);
    std::shuffle(tr_idx.begin(), tr_idx.end(), rng);
    std::shuffle(val_idx.begin(), val_idx.end(), rng);

    EpochSummary es;
    es.epoch = epoch;
    std::vector<double> all_a;
    for (std::size_t b = 0; b < n_tr; ++b) {
      std::span<const std::size_t> tb(tr_idx.data() + b * cfg.batch_train, cfg.batch_train);
      std::span<const std::size_t> vb(val_idx.data() + (b % n_val) * cfg.batch_val, cfg.batch_val);
      Batch tbatch = make_batch(train, tb), vbatch = make_batch(val, vb);
      StepResult step;
      try {
        step = lfm_step(m, res.state, tbatch, vbatch, cfg);
      } catch (const NonFiniteError& e) {
        throw SearchDiverged(res.state.step, e.what());
      }
      res.state = std::move(step.state);
      es.w1_train_loss += step.diag.w1_train_loss;
      es.w2_weighted_loss += step.diag.w2_weighted_loss;
      es.w2_val_loss += step.diag.w2_val_loss;
      es.w2_val_error += step.diag.w2_val_error;
      es.warnings += step.diag.warnings.size();
      all_a.insert(all_a.end(), step.diag.example_weights.begin(), step.diag.example_weights.end());
      ++es.steps;
    }
    if (es.steps) {
      double n = static_cast<double>(es.steps);
      es.w1_train_loss /= n;
      es.w2_weighted_loss /= n;
      es.w2_val_loss /= n;
      es.w2_val_error /= n;
    }
    es.a_stats = weight_stats(all_a);
    es.arch_entropy = res.state.arch.entropy();
    es.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.epochs.push_back(es);
    if (on_epoch) on_epoch(es, res.state);
  }
  res.arch = derive_architecture(res.state.arch, m.op_set, m.cell, cfg.k);
  return res;
}

}  // namespace lfm
