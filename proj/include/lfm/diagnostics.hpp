#pragma once

// Self-checks shared by the CLI and the test suites: random-network gradient
// checks and hypergradient-vs-oracle comparisons on a small linear instance.

#include <lfm/trilevel.hpp>

namespace lfm {

// ---------------------------------------------------------------------------
// Random networks
// ---------------------------------------------------------------------------

struct GradCheckReport {
  std::uint64_t seed = 0;
  std::string description;
  double max_error = 0.0;
};

/// Builds a random network of 1-3 layers drawn from matmul / conv blocks with
/// mixed activations and a cross-entropy or squared head, and grad-checks it
/// with respect to every parameter and the input.
inline GradCheckReport random_network_gradcheck(std::uint64_t seed, double step = 1e-6) {
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
  auto rand_tensor = [&](Shape s, double a = 1.0) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = uni(-a, a);
    return Tensor(std::move(s), std::move(v));
  };

  bool conv = pick(2) == 0;
  std::size_t layers = 1 + pick(3);
  std::size_t B = 2 + pick(3), classes = 2 + pick(3);
  std::vector<Tensor> params;
  Tensor input;
  std::ostringstream desc;
  if (conv) {
    std::size_t C = 1 + pick(2), S = 3 + pick(2);
    input = rand_tensor({B, C, S, S});
    std::size_t c_in = C;
    for (std::size_t l = 0; l + 1 < layers; ++l) {
      std::size_t c_out = 1 + pick(3);
      params.push_back(rand_tensor({c_out, c_in, 3, 3}, 0.5));
      c_in = c_out;
    }
    params.push_back(rand_tensor({c_in, classes}, 0.5));
    desc << "conv net, " << layers << " layer(s)";
  } else {
    std::size_t f_in = 2 + pick(4);
    input = rand_tensor({B, f_in});
    for (std::size_t l = 0; l < layers; ++l) {
      std::size_t f_out = l + 1 == layers ? classes : 2 + pick(4);
      params.push_back(rand_tensor({f_in, f_out}, 0.8));
      f_in = f_out;
    }
    desc << "dense net, " << layers << " layer(s)";
  }
  std::vector<int> act(layers);
  for (auto& a : act) a = static_cast<int>(pick(4));  // relu, sigmoid, softmax-gate, none
  bool ce_head = pick(2) == 0;
  std::vector<int> labels(B);
  for (auto& y : labels) y = static_cast<int>(pick(classes));
  Tensor target = rand_tensor({B, classes});
  desc << (ce_head ? ", cross-entropy head" : ", squared head");

  auto activate = [&](const Tensor& h, int a) {
    switch (a) {
      case 0: return relu(h);
      case 1: return sigmoid(h);
      case 2: return mul(h, softmax(h, h.rank() - 1));
      default: return h;
    }
  };
  auto forward = [&](const Tensor& x, const std::vector<Tensor>& ps) {
    Tensor h = x;
    for (std::size_t l = 0; l < ps.size(); ++l) {
      bool last = l + 1 == ps.size();
      if (conv && !last) {
        h = activate(conv2d(h, ps[l]), act[l]);
      } else {
        if (conv) h = mean_axis(reshape(h, Shape{h.dim(0), h.dim(1), h.dim(2) * h.dim(3)}), 2);
        h = matmul(h, ps[l]);
        if (!last) h = activate(h, act[l]);
      }
    }
    if (ce_head) return mean(cross_entropy(h, labels));
    Tensor d = sub(h, target);
    return mean(mul(d, d));
  };

  GradCheckReport rep{seed, desc.str(), 0.0};
  for (std::size_t p = 0; p <= params.size(); ++p) {
    auto f = [&](const Tensor& t) {
      if (p == params.size()) return forward(t, params);
      auto ps = params;
      ps[p] = t;
      return forward(input, ps);
    };
    rep.max_error = std::max(rep.max_error, grad_check(f, p == params.size() ? input : params[p], step));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Oracle comparison instance
// ---------------------------------------------------------------------------

struct OracleInstance {
  ModelConfig model;
  SearchConfig cfg;
  SearchState state;
  Batch train;
  Batch val;
};

/// Feature-vector inputs, {dense, identity} operations, linear learners,
/// 16 training and 8 validation examples. Architecture logits and r are drawn
/// away from zero so every chain carries signal.
inline OracleInstance make_oracle_instance(std::uint64_t seed) {
  OracleInstance inst;
  ModelConfig& m = inst.model;
  m.input_shape = {4};
  m.classes = 3;
  m.channels = 4;
  m.cell = CellSpec{2};
  m.op_set = OpSet{{CandidateOp::Dense, CandidateOp::Identity}};
  m.embed_dim = 4;
  m.encoder_channels = 5;
  inst.cfg.batch_train = 16;
  inst.cfg.batch_val = 8;
  inst.cfg.seed = seed;

  SyntheticOptions opt;
  opt.image_size = 0;
  opt.features = 4;
  Dataset ds = make_synthetic(24, m.classes, {0.25}, derive_seed(seed, 40), opt);
  std::vector<std::size_t> tr(16), va(8);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(va.begin(), va.end(), 16);
  inst.train = make_batch(ds, tr);
  inst.val = make_batch(ds, va);

  inst.state = init_search_state(m, inst.cfg);
  inst.state.arch = ArchitectureParams::random(m.cell, m.op_set, derive_seed(seed, 41), 0.5);
  std::mt19937_64 rng(derive_seed(seed, 42));
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> r(inst.cfg.batch_val);
  for (auto& x : r) x = nd(rng);
  inst.state.r = Tensor(Shape{r.size()}, r);
  return inst;
}

struct OracleComparison {
  double arch_cosine = 0.0;
  double encoder_cosine = 0.0;
  double coeff_cosine = 0.0;
  HyperGradients oracle;
  Stage3Result estimate;
};

/// Compares the update directions of one step with the exact oracle.
inline OracleComparison compare_with_oracle(const UnrolledProblem& p, const SearchState& state,
                                            const SearchConfig& cfg) {
  OracleComparison out;
  ParamSet w1_next = stage1_update(p, state, cfg);
  Stage2Result s2 = stage2_update(p, state, w1_next, cfg);
  out.estimate = stage3_gradients(p, state, w1_next, s2.w2_next, s2.bundle.a, cfg);
  out.oracle = exact_hypergradient_oracle(p, state, cfg);
  out.arch_cosine = cosine_similarity(out.estimate.arch_grad.total.values(), out.oracle.arch.values());
  out.encoder_cosine = cosine_similarity(flatten_values(out.estimate.encoder_grad),
                                         flatten_values(out.oracle.encoder));
  out.coeff_cosine = cosine_similarity(out.estimate.coeff_grad.values(), out.oracle.coeff.values());
  return out;
}

inline OracleComparison compare_with_oracle(const ModelConfig& m, const SearchState& state,
                                            const Batch& train, const Batch& val,
                                            const SearchConfig& cfg) {
  return compare_with_oracle(make_problem(m, cfg, train, val), state, cfg);
}

inline OracleComparison compare_with_oracle(const OracleInstance& inst) {
  return compare_with_oracle(inst.model, inst.state, inst.train, inst.val, inst.cfg);
}

}  // namespace lfm
