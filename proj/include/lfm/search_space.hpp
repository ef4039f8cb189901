#pragma once

// Continuous relaxation of a small cell: every edge of the cell DAG carries a
// softmax-weighted mixture of candidate operations.

#include <lfm/params.hpp>

namespace lfm {

enum class CandidateOp { Conv3x3, Identity, AvgPool3x3, Zero, Dense };

inline std::string_view op_name(CandidateOp op) {
  switch (op) {
    case CandidateOp::Conv3x3: return "conv3x3";
    case CandidateOp::Identity: return "identity";
    case CandidateOp::AvgPool3x3: return "avg_pool3x3";
    case CandidateOp::Zero: return "zero";
    case CandidateOp::Dense: return "dense";
  }
  return "?";
}

inline CandidateOp parse_op(std::string_view name) {
  for (auto op : {CandidateOp::Conv3x3, CandidateOp::Identity, CandidateOp::AvgPool3x3,
                  CandidateOp::Zero, CandidateOp::Dense})
    if (op_name(op) == name) return op;
  throw std::invalid_argument("unknown operation '" + std::string(name) + "'");
}

inline bool is_parameterized(CandidateOp op) {
  return op == CandidateOp::Conv3x3 || op == CandidateOp::Dense;
}

struct OpSet {
  std::vector<CandidateOp> ops;

  static OpSet image_default() {
    return {{CandidateOp::Conv3x3, CandidateOp::Identity, CandidateOp::AvgPool3x3,
             CandidateOp::Zero}};
  }
  static OpSet vector_default() {
    return {{CandidateOp::Dense, CandidateOp::Identity, CandidateOp::Zero}};
  }

  std::size_t size() const { return ops.size(); }
  void validate() const {
    if (ops.empty()) throw std::invalid_argument("operation set is empty");
    for (std::size_t i = 0; i < ops.size(); ++i)
      for (std::size_t j = i + 1; j < ops.size(); ++j)
        if (ops[i] == ops[j])
          throw std::invalid_argument("duplicate operation '" + std::string(op_name(ops[i])) + "'");
  }
};

struct Edge {
  std::size_t src, dst;
};

/// Node 0 is the cell input; nodes 1..node_count are intermediate nodes, each
/// fed by every lower-numbered node.
struct CellSpec {
  std::size_t node_count = 2;

  void validate() const {
    if (node_count == 0) throw std::invalid_argument("cell needs at least one intermediate node");
  }
  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (std::size_t j = 1; j <= node_count; ++j)
      for (std::size_t i = 0; i < j; ++i) out.push_back({i, j});
    return out;
  }
  std::size_t edge_count() const { return node_count * (node_count + 1) / 2; }
};

/// Per-edge operation logits, one row per edge.
struct ArchitectureParams {
  Tensor logits;

  static ArchitectureParams zeros(const CellSpec& cell, const OpSet& ops) {
    return {Tensor::zeros(Shape{cell.edge_count(), ops.size()})};
  }
  static ArchitectureParams random(const CellSpec& cell, const OpSet& ops, std::uint64_t seed,
                                   double stddev = 1e-3) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(cell.edge_count() * ops.size());
    for (auto& x : v) x = dist(rng);
    return {Tensor(Shape{cell.edge_count(), ops.size()}, std::move(v))};
  }

  std::size_t edge_count() const { return logits.dim(0); }
  std::size_t op_count() const { return logits.dim(1); }

  /// Softmax of each edge's logits, (edges, ops).
  Tensor mixing_weights() const { return softmax(logits, 1); }

  /// Mean over edges of the entropy of the mixing distribution.
  double entropy() const {
    NoGradGuard ng;
    Tensor p = mixing_weights();
    double h = 0.0;
    for (double v : p.values())
      if (v > 0.0) h -= v * std::log(v);
    return h / static_cast<double>(edge_count());
  }
};

/// Retained operation indices per edge, best first.
struct DiscreteArchitecture {
  OpSet op_set;
  std::vector<Edge> edges;
  std::vector<std::vector<std::size_t>> retained;

  bool operator==(const DiscreteArchitecture& o) const {
    return op_set.ops == o.op_set.ops && retained == o.retained && edges.size() == o.edges.size();
  }

  /// One line per edge: "src->dst: op[,op]".
  std::string serialize() const {
    std::ostringstream os;
    for (std::size_t e = 0; e < edges.size(); ++e) {
      os << edges[e].src << "->" << edges[e].dst << ": ";
      for (std::size_t i = 0; i < retained[e].size(); ++i)
        os << (i ? "," : "") << op_name(op_set.ops[retained[e][i]]);
      os << '\n';
    }
    return os.str();
  }

  static DiscreteArchitecture parse(std::string_view text, const OpSet& op_set,
                                    const CellSpec& cell) {
    DiscreteArchitecture out{op_set, cell.edges(), {}};
    out.retained.resize(out.edges.size());
    std::vector<bool> seen(out.edges.size(), false);
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      auto fail = [&](const std::string& why) {
        throw std::invalid_argument("architecture line " + std::to_string(lineno) + ": " + why);
      };
      auto arrow = line.find("->");
      auto colon = line.find(':');
      if (arrow == std::string::npos || colon == std::string::npos || colon < arrow)
        fail("expected 'src->dst: op'");
      std::size_t src = 0, dst = 0;
      try {
        src = std::stoul(line.substr(0, arrow));
        dst = std::stoul(line.substr(arrow + 2, colon - arrow - 2));
      } catch (const std::exception&) {
        fail("bad node index");
      }
      std::size_t e = 0;
      while (e < out.edges.size() && !(out.edges[e].src == src && out.edges[e].dst == dst)) ++e;
      if (e == out.edges.size()) fail("edge not in cell");
      if (seen[e]) fail("duplicate edge");
      seen[e] = true;
      std::istringstream ops(line.substr(colon + 1));
      std::string tok;
      while (std::getline(ops, tok, ',')) {
        auto b = tok.find_first_not_of(" \t\r"), t = tok.find_last_not_of(" \t\r");
        if (b == std::string::npos) fail("empty op name");
        CandidateOp op = parse_op(tok.substr(b, t - b + 1));
        auto it = std::find(op_set.ops.begin(), op_set.ops.end(), op);
        if (it == op_set.ops.end()) fail("op not in operation set");
        out.retained[e].push_back(static_cast<std::size_t>(it - op_set.ops.begin()));
      }
    }
    for (std::size_t e = 0; e < seen.size(); ++e)
      if (!seen[e]) throw std::invalid_argument("architecture is missing an edge");
    return out;
  }
};

/// Top-k operations per edge by raw logit; ties go to the lower op index.
inline DiscreteArchitecture derive_architecture(const ArchitectureParams& arch,
                                                const OpSet& op_set, const CellSpec& cell,
                                                std::size_t k) {
  if (k == 0 || k > arch.op_count())
    throw std::invalid_argument("k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(arch.op_count()) + "]");
  if (arch.edge_count() != cell.edge_count() || arch.op_count() != op_set.size())
    throw ShapeError("architecture logits do not match the cell/op set");
  DiscreteArchitecture out{op_set, cell.edges(), {}};
  for (std::size_t e = 0; e < arch.edge_count(); ++e) {
    std::vector<std::size_t> idx(arch.op_count());
    std::iota(idx.begin(), idx.end(), 0);
    auto row = [&](std::size_t o) { return arch.logits[e * arch.op_count() + o]; };
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return row(a) > row(b); });
    idx.resize(k);
    out.retained.push_back(std::move(idx));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline std::string edge_param_name(std::size_t cell, std::size_t edge, CandidateOp op) {
  return "cell" + std::to_string(cell) + ".e" + std::to_string(edge) + "." +
         std::string(op_name(op));
}

/// Applies one candidate op. Conv3x3 is ReLU followed by a bias-free 3x3
/// convolution; Dense is a bias-free linear map on (B, F) inputs.
inline Tensor apply_candidate(CandidateOp op, const Tensor& x, const Tensor* weight) {
  switch (op) {
    case CandidateOp::Identity: return x;
    case CandidateOp::Zero: return scale(x, 0.0);
    case CandidateOp::AvgPool3x3: return avg_pool3x3(x);
    case CandidateOp::Conv3x3:
      if (!weight) throw std::invalid_argument("conv3x3 candidate has no kernel");
      return conv2d(relu(x), *weight);
    case CandidateOp::Dense:
      if (!weight) throw std::invalid_argument("dense candidate has no weight matrix");
      detail::require_rank(x, 2, "dense");
      return matmul(x, *weight);
  }
  throw std::invalid_argument("unknown candidate op");
}

/// sum_o weights[o] * op_o(input), skipping the zero op and any op whose
/// weight is a constant zero. `edge_weights` is a length-|ops| tensor.
/// `op_params[o]` holds the parameter of op o (nullptr for parameter-free ops).
inline Tensor mixed_op_forward(const Tensor& edge_weights, const Tensor& input,
                               const OpSet& op_set, std::span<const Tensor* const> op_params,
                               bool skip_constant_zero_weights = false) {
  if (edge_weights.numel() != op_set.size() || op_params.size() != op_set.size())
    throw ShapeError("mixed op: " + std::to_string(edge_weights.numel()) + " weights for " +
                     std::to_string(op_set.size()) + " ops");
  std::optional<Tensor> out;
  for (std::size_t o = 0; o < op_set.size(); ++o) {
    if (op_set.ops[o] == CandidateOp::Zero) continue;
    if (skip_constant_zero_weights && !edge_weights.requires_grad() && edge_weights[o] == 0.0)
      continue;
    Tensor y = apply_candidate(op_set.ops[o], input, op_params[o]);
    if (y.shape() != input.shape())
      throw ShapeError("candidate '" + std::string(op_name(op_set.ops[o])) +
                       "' changed shape " + shape_str(input.shape()) + " -> " +
                       shape_str(y.shape()));
    Tensor term = mul(y, slice(edge_weights, 0, o, 1));
    out = out ? add(*out, term) : term;
  }
  return out ? *out : scale(input, 0.0);
}

/// Convenience form taking logits of one edge and softmaxing them.
inline Tensor mixed_op_forward_logits(const Tensor& edge_logits, const Tensor& input,
                                      const OpSet& op_set,
                                      std::span<const Tensor* const> op_params) {
  return mixed_op_forward(softmax(reshape(edge_logits, Shape{edge_logits.numel()}), 0), input,
                          op_set, op_params);
}

/// Edge mixing for a cell: either continuous (softmax rows of the logits) or a
/// fixed 0/1 mask from a discrete architecture.
struct CellMixing {
  Tensor weights;  // (edges, ops)
  bool discrete = false;

  static CellMixing continuous(const ArchitectureParams& arch) {
    return {arch.mixing_weights(), false};
  }
  static CellMixing fixed(const DiscreteArchitecture& d) {
    std::size_t E = d.edges.size(), O = d.op_set.size();
    std::vector<double> m(E * O, 0.0);
    for (std::size_t e = 0; e < E; ++e)
      for (auto o : d.retained[e]) m[e * O + o] = 1.0;
    return {Tensor(Shape{E, O}, std::move(m)), true};
  }
};

/// One cell: node j = sum over i<j of the mixed op on edge (i->j); output is
/// the sum of the intermediate nodes.
inline Tensor cell_forward(const CellMixing& mixing, const ParamSet& weights,
                           const CellSpec& spec, const OpSet& op_set, const Tensor& input,
                           std::size_t cell_index = 0) {
  spec.validate();
  auto edges = spec.edges();
  if (mixing.weights.rank() != 2 || mixing.weights.dim(0) != edges.size() ||
      mixing.weights.dim(1) != op_set.size())
    throw ShapeError("architecture covers " + shape_str(mixing.weights.shape()) +
                     " but the cell needs (" + std::to_string(edges.size()) + "," +
                     std::to_string(op_set.size()) + ")");
  std::vector<Tensor> nodes{input};
  std::size_t e = 0;
  for (std::size_t j = 1; j <= spec.node_count; ++j) {
    std::optional<Tensor> acc;
    for (std::size_t i = 0; i < j; ++i, ++e) {
      std::vector<const Tensor*> params(op_set.size(), nullptr);
      for (std::size_t o = 0; o < op_set.size(); ++o)
        if (is_parameterized(op_set.ops[o])) {
          std::string name = edge_param_name(cell_index, e, op_set.ops[o]);
          if (!weights.contains(name)) throw std::out_of_range("missing op weights '" + name + "'");
          params[o] = &weights.at(name);
        }
      Tensor row = reshape(slice(mixing.weights, 0, e, 1), Shape{op_set.size()});
      Tensor y = mixed_op_forward(row, nodes[i], op_set, params, mixing.discrete);
      acc = acc ? add(*acc, y) : y;
    }
    nodes.push_back(*acc);
  }
  Tensor out = nodes[1];
  for (std::size_t j = 2; j < nodes.size(); ++j) out = add(out, nodes[j]);
  return out;
}

inline Tensor cell_forward(const ArchitectureParams& arch, const ParamSet& weights,
                           const CellSpec& spec, const OpSet& op_set, const Tensor& input) {
  return cell_forward(CellMixing::continuous(arch), weights, spec, op_set, input);
}

}  // namespace lfm
