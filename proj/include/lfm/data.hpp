#pragma once

// Synthetic benchmark data, label noise, deterministic splits, and the "LFMD"
// dataset container.
//
// LFMD layout (little-endian):
//   magic "LFMD" | version u32 | N u64 | C u32 | rank u32 | dims u64[rank]
//   | labels u32[N] | values f64[N * prod(dims)]
// `dims` is the per-example shape.

#include <lfm/params.hpp>

#include <array>

namespace lfm {

/// splitmix64 finaliser, used to derive independent stream seeds from one seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

enum class Provenance { Synthetic, File };

struct Dataset {
  Shape example_shape;
  std::vector<double> values;  // N * prod(example_shape), row-major
  std::vector<int> labels;
  std::vector<int> clean_labels;  // labels before noise; equals labels when none applied
  std::size_t classes = 0;
  Provenance provenance = Provenance::Synthetic;

  std::size_t size() const { return labels.size(); }
  std::size_t example_numel() const { return shape_numel(example_shape); }

  void validate() const {
    if (labels.empty()) throw std::invalid_argument("dataset is empty");
    if (values.size() != labels.size() * example_numel())
      throw std::invalid_argument("dataset value count does not match N * example size");
    if (clean_labels.size() != labels.size())
      throw std::invalid_argument("clean label record has the wrong length");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
        throw std::out_of_range("label " + std::to_string(labels[i]) + " at index " +
                                std::to_string(i) + " outside [0, " + std::to_string(classes) +
                                ")");
  }

  std::size_t flipped_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) n += labels[i] != clean_labels[i];
    return n;
  }
};

struct Batch {
  Tensor inputs;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  std::size_t m = ds.example_numel();
  std::vector<double> v(indices.size() * m);
  std::vector<int> labels(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::size_t i = indices[b];
    if (i >= ds.size()) throw std::out_of_range("batch index out of range");
    std::copy_n(ds.values.begin() + static_cast<std::ptrdiff_t>(i * m), m,
                v.begin() + static_cast<std::ptrdiff_t>(b * m));
    labels[b] = ds.labels[i];
  }
  Shape s{indices.size()};
  s.insert(s.end(), ds.example_shape.begin(), ds.example_shape.end());
  return {Tensor(std::move(s), std::move(v)), std::move(labels)};
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out{ds.example_shape, {}, {}, {}, ds.classes, ds.provenance};
  std::size_t m = ds.example_numel();
  out.values.reserve(indices.size() * m);
  for (auto i : indices) {
    out.values.insert(out.values.end(), ds.values.begin() + static_cast<std::ptrdiff_t>(i * m),
                      ds.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
    out.labels.push_back(ds.labels[i]);
    out.clean_labels.push_back(ds.clean_labels[i]);
  }
  return out;
}

inline Dataset concat_datasets(const Dataset& a, const Dataset& b) {
  if (a.example_shape != b.example_shape || a.classes != b.classes)
    throw std::invalid_argument("cannot concatenate datasets of different layouts");
  Dataset out = a;
  out.values.insert(out.values.end(), b.values.begin(), b.values.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.clean_labels.insert(out.clean_labels.end(), b.clean_labels.begin(), b.clean_labels.end());
  return out;
}

// ---------------------------------------------------------------------------
// Label noise
// ---------------------------------------------------------------------------

struct NoiseSpec {
  double rate = 0.0;  // fraction of labels flipped, uniform over the other classes

  void validate() const {
    if (!(rate >= 0.0 && rate <= 1.0))
      throw std::invalid_argument("noise rate " + std::to_string(rate) + " outside [0, 1]");
  }
};

/// Flips exactly round(rate * N) labels, each to a uniformly chosen different class.
inline void apply_label_noise(Dataset& ds, const NoiseSpec& noise, std::uint64_t seed) {
  noise.validate();
  if (ds.classes < 2 && noise.rate > 0.0) throw std::invalid_argument("cannot flip with one class");
  std::size_t n = ds.size();
  auto flips = static_cast<std::size_t>(std::llround(noise.rate * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<int> shift(1, static_cast<int>(ds.classes) - 1);
  for (std::size_t k = 0; k < flips; ++k) {
    std::size_t i = order[k];
    ds.labels[i] = (ds.clean_labels[i] + shift(rng)) % static_cast<int>(ds.classes);
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct SyntheticOptions {
  std::size_t image_size = 8;  // 0 selects raw feature vectors
  std::size_t features = 8;    // feature-vector width when image_size == 0
  double blob_sigma = 1.6;
  double center_jitter = 1.0;
  double pixel_noise = 0.6;
  double amplitude = 1.0;
};

/// Class-conditional Gaussian blobs. In image mode each class places a blob at
/// its own position on a ring around the image centre; in feature mode each
/// class is an isotropic Gaussian around its own mean.
inline Dataset make_synthetic(std::size_t n, std::size_t classes, const NoiseSpec& noise,
                              std::uint64_t seed, const SyntheticOptions& opt = {}) {
  noise.validate();
  if (classes < 2) throw std::invalid_argument("need at least two classes");
  if (n < classes) throw std::invalid_argument("n must be at least the class count");
  std::mt19937_64 rng(derive_seed(seed, 0));
  std::normal_distribution<double> gauss(0.0, 1.0);

  Dataset ds;
  ds.classes = classes;
  ds.provenance = Provenance::Synthetic;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % classes);
  std::shuffle(ds.labels.begin(), ds.labels.end(), rng);

  const double pi = std::acos(-1.0);
  if (opt.image_size > 0) {
    std::size_t S = opt.image_size;
    ds.example_shape = {1, S, S};
    ds.values.resize(n * S * S);
    double mid = (static_cast<double>(S) - 1.0) / 2.0, radius = static_cast<double>(S) / 4.0;
    for (std::size_t i = 0; i < n; ++i) {
      double ang = 2.0 * pi * ds.labels[i] / static_cast<double>(classes);
      double cy = mid + radius * std::sin(ang) + opt.center_jitter * gauss(rng);
      double cx = mid + radius * std::cos(ang) + opt.center_jitter * gauss(rng);
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          double v = opt.amplitude * std::exp(-(dx * dx + dy * dy) / (2 * opt.blob_sigma * opt.blob_sigma));
          ds.values[(i * S + y) * S + x] = v + opt.pixel_noise * gauss(rng);
        }
    }
  } else {
    std::size_t F = opt.features;
    ds.example_shape = {F};
    std::vector<double> means(classes * F);
    for (auto& m : means) m = gauss(rng);
    ds.values.resize(n * F);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = 0; f < F; ++f)
        ds.values[i * F + f] =
            means[static_cast<std::size_t>(ds.labels[i]) * F + f] + opt.pixel_noise * gauss(rng);
  }
  ds.clean_labels = ds.labels;
  apply_label_noise(ds, noise, derive_seed(seed, 1));
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct Splits {
  Dataset train, val, test;
};

/// Default fractions mirror a 25K / 25K / 10K split of 60K examples.
inline constexpr std::array<double, 3> kDefaultSplit{5.0 / 12.0, 5.0 / 12.0, 2.0 / 12.0};

inline std::array<std::vector<std::size_t>, 3> split_indices(std::size_t n,
                                                             std::array<double, 3> fractions,
                                                             std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw std::invalid_argument("every split fraction must be positive");
    total += f;
  }
  if (total > 1.0 + 1e-9)
    throw std::invalid_argument("split fractions sum to " + std::to_string(total) + " > 1");
  std::array<std::size_t, 3> sizes{};
  for (int s = 0; s < 2; ++s)
    sizes[s] = static_cast<std::size_t>(std::llround(fractions[s] * static_cast<double>(n)));
  sizes[2] = std::abs(total - 1.0) <= 1e-9
                 ? n - std::min(n, sizes[0] + sizes[1])
                 : static_cast<std::size_t>(std::llround(fractions[2] * static_cast<double>(n)));
  if (sizes[0] + sizes[1] + sizes[2] > n) throw std::invalid_argument("split sizes exceed N");
  for (auto s : sizes)
    if (s == 0) throw std::invalid_argument("split would be empty; each split must be nonempty");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::array<std::vector<std::size_t>, 3> out;
  std::size_t pos = 0;
  for (int s = 0; s < 3; ++s) {
    out[s].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                  order.begin() + static_cast<std::ptrdiff_t>(pos + sizes[s]));
    pos += sizes[s];
  }
  return out;
}

inline Splits split_dataset(const Dataset& ds, std::array<double, 3> fractions,
                            std::uint64_t seed) {
  auto idx = split_indices(ds.size(), fractions, seed);
  return {subset(ds, idx[0]), subset(ds, idx[1]), subset(ds, idx[2])};
}

// ---------------------------------------------------------------------------
// LFMD container
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(std::ostream& os, const Dataset& ds) {
  ds.validate();
  os.write("LFMD", 4);
  io::write_le<std::uint32_t>(os, kDatasetVersion);
  io::write_le<std::uint64_t>(os, ds.size());
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.classes));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.example_shape.size()));
  for (auto d : ds.example_shape) io::write_le<std::uint64_t>(os, d);
  for (int y : ds.labels) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(y));
  for (double v : ds.values) io::write_le<double>(os, v);
}

/// Loaded datasets carry no noise history: clean labels equal stored labels.
inline Dataset load_dataset(std::istream& is) {
  io::LeReader in(is);
  in.expect_magic("LFMD");
  auto at = in.offset();
  auto version = in.read<std::uint32_t>("version");
  if (version != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(version), at);
  at = in.offset();
  auto n = in.read<std::uint64_t>("example count");
  if (n == 0 || n > (1ull << 32)) throw FormatError("invalid example count", at);
  at = in.offset();
  auto classes = in.read<std::uint32_t>("class count");
  if (classes == 0) throw FormatError("class count must be positive", at);
  at = in.offset();
  auto rank = in.read<std::uint32_t>("rank");
  if (rank == 0 || rank > 8) throw FormatError("invalid rank " + std::to_string(rank), at);
  Dataset ds;
  ds.classes = classes;
  ds.provenance = Provenance::File;
  for (std::uint32_t r = 0; r < rank; ++r) {
    at = in.offset();
    auto d = in.read<std::uint64_t>("dimension");
    if (d == 0 || d > (1u << 20)) throw FormatError("invalid dimension", at);
    ds.example_shape.push_back(d);
  }
  ds.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    at = in.offset();
    auto y = in.read<std::uint32_t>("labels");
    if (y >= classes)
      throw FormatError("label " + std::to_string(y) + " at index " + std::to_string(i) +
                            " is not below class count " + std::to_string(classes),
                        at);
    ds.labels[i] = static_cast<int>(y);
  }
  ds.values.resize(n * ds.example_numel());
  for (auto& v : ds.values) v = in.read<double>("values");
  ds.clean_labels = ds.labels;
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  save_dataset(os, ds);
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return load_dataset(is);
}

}  // namespace lfm
