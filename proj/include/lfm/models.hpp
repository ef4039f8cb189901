#pragma once

// The two learners (sharing one architecture) and the embedding encoder.
//
// Image inputs are (B, C, H, W); feature inputs are (B, F). The learner is
// stem -> cell(s) -> global average pool -> linear head. In feature mode every
// piece is linear, which gives the small exactly-checkable instance.

#include <lfm/search_space.hpp>

namespace lfm {

struct ModelConfig {
  Shape input_shape{1, 8, 8};  // per example: (C, H, W) or (F)
  std::size_t classes = 4;
  std::size_t channels = 4;  // learner width
  CellSpec cell{};
  std::size_t cells = 1;
  OpSet op_set = OpSet::image_default();
  std::size_t embed_dim = 16;
  std::size_t encoder_channels = 4;
  /// Image heads average over a grid x grid partition of the feature map;
  /// 1 is global average pooling.
  std::size_t pool_grid = 2;
  InitScheme init = InitScheme::ScaledNormal;

  bool image_mode() const { return input_shape.size() == 3; }

  /// Width of the pooled features fed to a head with the given channel count.
  std::size_t pooled_width(std::size_t ch) const { return image_mode() ? ch * pool_grid * pool_grid : ch; }

  void validate() const {
    if (input_shape.size() != 3 && input_shape.size() != 1)
      throw std::invalid_argument("input shape must be (C,H,W) or (F)");
    if (classes < 2) throw std::invalid_argument("need at least two classes");
    if (channels == 0 || embed_dim == 0 || encoder_channels == 0 || cells == 0)
      throw std::invalid_argument("model widths must be positive");
    if (image_mode() && (pool_grid == 0 || pool_grid > input_shape[1] || pool_grid > input_shape[2]))
      throw std::invalid_argument("pool_grid must be in [1, image side]");
    cell.validate();
    op_set.validate();
    for (auto op : op_set.ops) {
      bool spatial = op == CandidateOp::Conv3x3 || op == CandidateOp::AvgPool3x3;
      if (spatial && !image_mode())
        throw std::invalid_argument(std::string(op_name(op)) + " needs image inputs");
      if (op == CandidateOp::Dense && image_mode())
        throw std::invalid_argument("dense candidate needs feature inputs");
    }
  }

  Shape batch_shape(std::size_t batch) const {
    Shape s{batch};
    s.insert(s.end(), input_shape.begin(), input_shape.end());
    return s;
  }
};

enum class LearnerRole { W1, W2, Eval };

struct LearnerWeights {
  ParamSet params;
  LearnerRole role = LearnerRole::W1;
};

struct EncoderWeights {
  ParamSet params;
};

inline std::vector<ParamSpec> learner_param_specs(const ModelConfig& m) {
  std::vector<ParamSpec> specs;
  std::size_t ch = m.channels;
  if (m.image_mode()) {
    specs.push_back({"stem.w", Shape{ch, m.input_shape[0], 3, 3}});
  } else {
    specs.push_back({"stem.w", Shape{m.input_shape[0], ch}});
  }
  for (std::size_t c = 0; c < m.cells; ++c)
    for (std::size_t e = 0; e < m.cell.edge_count(); ++e)
      for (auto op : m.op_set.ops) {
        if (op == CandidateOp::Conv3x3)
          specs.push_back({edge_param_name(c, e, op), Shape{ch, ch, 3, 3}});
        else if (op == CandidateOp::Dense)
          specs.push_back({edge_param_name(c, e, op), Shape{ch, ch}});
      }
  specs.push_back({"head.w", Shape{m.pooled_width(ch), m.classes}});
  specs.push_back({"head.b", Shape{m.classes}, 0, InitScheme::Zeros});
  return specs;
}

inline std::vector<ParamSpec> encoder_param_specs(const ModelConfig& m) {
  std::size_t h = m.encoder_channels;
  std::vector<ParamSpec> specs;
  if (m.image_mode()) {
    specs.push_back({"enc.conv1", Shape{h, m.input_shape[0], 3, 3}});
    specs.push_back({"enc.conv2", Shape{h, h, 3, 3}});
  } else {
    specs.push_back({"enc.fc1", Shape{m.input_shape[0], h}});
  }
  specs.push_back({"enc.proj.w", Shape{m.pooled_width(h), m.embed_dim}});
  specs.push_back({"enc.proj.b", Shape{m.embed_dim}, 0, InitScheme::Zeros});
  return specs;
}

inline LearnerWeights init_learner(const ModelConfig& m, std::uint64_t seed, LearnerRole role) {
  return {init_weights(seed, learner_param_specs(m), m.init), role};
}

inline EncoderWeights init_encoder(const ModelConfig& m, std::uint64_t seed) {
  return {init_weights(seed, encoder_param_specs(m), m.init)};
}

namespace detail {

inline void check_batch(const ModelConfig& m, const Tensor& batch) {
  if (batch.rank() != m.input_shape.size() + 1 ||
      !std::equal(m.input_shape.begin(), m.input_shape.end(), batch.shape().begin() + 1))
    throw ShapeError("batch shape " + shape_str(batch.shape()) + " does not match input shape " +
                     shape_str(m.input_shape));
}

// (B, C, H, W) -> (B, C * g * g): means over a g x g partition of each map.
// Row y belongs to region floor(y * g / H); columns likewise.
inline Tensor grid_avg_pool(const Tensor& x, std::size_t g) {
  std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (g == 1) return mean_axis(reshape(x, Shape{B, C, H * W}), 2);
  std::vector<double> pool(H * W * g * g, 0.0), count(g * g, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx) count[(y * g / H) * g + xx * g / W] += 1.0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx) {
      std::size_t r = (y * g / H) * g + xx * g / W;
      pool[(y * W + xx) * g * g + r] = 1.0 / count[r];
    }
  Tensor P(Shape{H * W, g * g}, std::move(pool));
  return reshape(matmul(reshape(x, Shape{B * C, H * W}), P), Shape{B, C * g * g});
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

inline Tensor learner_forward_impl(const ModelConfig& m, const CellMixing& mix,
                                   const ParamSet& w, const Tensor& batch) {
  check_batch(m, batch);
  Tensor h = m.image_mode() ? conv2d(batch, w.at("stem.w")) : matmul(batch, w.at("stem.w"));
  for (std::size_t c = 0; c < m.cells; ++c) h = cell_forward(mix, w, m.cell, m.op_set, h, c);
  if (m.image_mode()) h = grid_avg_pool(h, m.pool_grid);
  return linear(h, w.at("head.w"), w.at("head.b"));
}

}  // namespace detail

/// Logits (B, classes) of a learner on the continuous architecture.
inline Tensor learner_forward(const ModelConfig& m, const ArchitectureParams& arch,
                              const ParamSet& w, const Tensor& batch) {
  return detail::learner_forward_impl(m, CellMixing::continuous(arch), w, batch);
}

/// Logits of the fixed network selected by a discrete architecture.
inline Tensor learner_forward(const ModelConfig& m, const DiscreteArchitecture& arch,
                              const ParamSet& w, const Tensor& batch) {
  return detail::learner_forward_impl(m, CellMixing::fixed(arch), w, batch);
}

/// Embeddings (B, embed_dim).
inline Tensor encoder_embed(const ModelConfig& m, const ParamSet& v, const Tensor& batch) {
  detail::check_batch(m, batch);
  Tensor h;
  if (m.image_mode()) {
    h = relu(conv2d(batch, v.at("enc.conv1")));
    h = relu(conv2d(h, v.at("enc.conv2")));
    h = detail::grid_avg_pool(h, m.pool_grid);
  } else {
    h = relu(matmul(batch, v.at("enc.fc1")));
  }
  return detail::linear(h, v.at("enc.proj.w"), v.at("enc.proj.b"));
}

}  // namespace lfm
