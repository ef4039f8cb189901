#pragma once

// Training-example weights from validation mistakes:
//   X[i,j] = softmax_j(score(e_tr_i, e_val_j))      visual similarity
//   Z[i,j] = 1{y_tr_i == y_val_j}                   label similarity
//   u_j    = cross-entropy of the first learner on validation example j
//   a_i    = sigmoid(sum_j X[i,j] Z[i,j] u_j r_j)

#include <lfm/ops.hpp>

namespace lfm {

enum class SimilarityMetric { Dot, Cosine, NegL2 };

inline std::string_view metric_name(SimilarityMetric m) {
  switch (m) {
    case SimilarityMetric::Dot: return "dot";
    case SimilarityMetric::Cosine: return "cosine";
    case SimilarityMetric::NegL2: return "l2";
  }
  return "?";
}

inline SimilarityMetric parse_metric(std::string_view s) {
  if (s == "dot") return SimilarityMetric::Dot;
  if (s == "cosine") return SimilarityMetric::Cosine;
  if (s == "l2" || s == "neg-l2") return SimilarityMetric::NegL2;
  throw std::invalid_argument("unknown similarity metric '" + std::string(s) + "'");
}

/// Each flag replaces the corresponding factor of the inner product with ones.
struct AblationFlags {
  bool no_x = false;
  bool no_z = false;
  bool no_u = false;

  bool all() const { return no_x && no_z && no_u; }
  bool operator==(const AblationFlags&) const = default;
};

struct ReweightBundle {
  Tensor X;  // (B_tr, B_val)
  Tensor Z;  // (B_tr, B_val)
  Tensor u;  // (B_val)
  Tensor r;  // (B_val)
  Tensor a;  // (B_tr)
};

struct WeightStats {
  double min = 0, max = 0, mean = 0, variance = 0;
  std::size_t count = 0;
};

inline WeightStats weight_stats(std::span<const double> a) {
  WeightStats s;
  s.count = a.size();
  if (a.empty()) return s;
  s.min = *std::min_element(a.begin(), a.end());
  s.max = *std::max_element(a.begin(), a.end());
  double sum = 0.0;
  for (double v : a) sum += v;
  s.mean = sum / static_cast<double>(a.size());
  double ss = 0.0;
  for (double v : a) ss += (v - s.mean) * (v - s.mean);
  s.variance = ss / static_cast<double>(a.size());
  return s;
}

inline Tensor visual_similarity(const Tensor& train_emb, const Tensor& val_emb,
                                SimilarityMetric metric = SimilarityMetric::Dot) {
  detail::require_rank(train_emb, 2, "visual_similarity");
  detail::require_rank(val_emb, 2, "visual_similarity");
  if (train_emb.dim(1) != val_emb.dim(1))
    throw ShapeError("embedding width mismatch: " + shape_str(train_emb.shape()) + " vs " +
                     shape_str(val_emb.shape()));
  Tensor scores;
  switch (metric) {
    case SimilarityMetric::Dot:
      scores = matmul(train_emb, transpose(val_emb));
      break;
    case SimilarityMetric::Cosine: {
      auto normalize = [](const Tensor& e) {
        return div(e, sqrt(add_scalar(sum_axis(mul(e, e), 1, true), 1e-12)));
      };
      scores = matmul(normalize(train_emb), transpose(normalize(val_emb)));
      break;
    }
    case SimilarityMetric::NegL2: {
      std::size_t bv = val_emb.dim(0);
      Tensor sq_tr = sum_axis(mul(train_emb, train_emb), 1, true);                   // (bt,1)
      Tensor sq_val = reshape(sum_axis(mul(val_emb, val_emb), 1), Shape{1, bv});     // (1,bv)
      Tensor cross = matmul(train_emb, transpose(val_emb));                          // (bt,bv)
      scores = sub(scale(cross, 2.0), add(sq_tr, sq_val));
      break;
    }
  }
  return softmax(scores, 1);
}

inline Tensor label_similarity(std::span<const int> train_labels, std::span<const int> val_labels,
                               std::size_t classes) {
  auto check = [classes](std::span<const int> ls, const char* which) {
    for (std::size_t i = 0; i < ls.size(); ++i)
      if (ls[i] < 0 || static_cast<std::size_t>(ls[i]) >= classes)
        throw std::out_of_range(std::string(which) + " label " + std::to_string(ls[i]) +
                                " at index " + std::to_string(i) + " outside [0, " +
                                std::to_string(classes) + ")");
  };
  check(train_labels, "train");
  check(val_labels, "validation");
  if (train_labels.empty() || val_labels.empty()) throw ShapeError("empty label batch");
  std::vector<double> z(train_labels.size() * val_labels.size());
  for (std::size_t i = 0; i < train_labels.size(); ++i)
    for (std::size_t j = 0; j < val_labels.size(); ++j)
      z[i * val_labels.size() + j] = train_labels[i] == val_labels[j] ? 1.0 : 0.0;
  return Tensor(Shape{train_labels.size(), val_labels.size()}, std::move(z));
}

inline Tensor validation_losses(const Tensor& val_logits, std::span<const int> val_labels) {
  return cross_entropy(val_logits, val_labels);
}

/// a_i = sigmoid((x_i * z_i * u)^T r), with ablated factors replaced by ones.
inline Tensor example_weights(const Tensor& X, const Tensor& Z, const Tensor& u, const Tensor& r,
                              const AblationFlags& flags = {}) {
  detail::require_rank(X, 2, "example_weights");
  std::size_t bt = X.dim(0), bv = X.dim(1);
  if (Z.shape() != X.shape() || u.numel() != bv || r.numel() != bv)
    throw ShapeError("example_weights: X " + shape_str(X.shape()) + ", Z " +
                     shape_str(Z.shape()) + ", u " + shape_str(u.shape()) + ", r " +
                     shape_str(r.shape()));
  Tensor prod = broadcast_to(reshape(r, Shape{1, bv}), Shape{bt, bv});
  if (!flags.no_u) prod = mul(prod, reshape(u, Shape{1, bv}));
  if (!flags.no_z) prod = mul(prod, Z);
  if (!flags.no_x) prod = mul(prod, X);
  return sigmoid(sum_axis(prod, 1));
}

}  // namespace lfm
