#pragma once

// Named parameter collections, deterministic initialisation, and the "LFMW"
// little-endian checkpoint container.

#include <lfm/autodiff.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>

namespace lfm {

/// Ordered name -> tensor collection. Copies share tensors; use clone() for an
/// independent copy.
class ParamSet {
 public:
  void add(std::string name, Tensor t) {
    if (index_of(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(t));
  }

  const Tensor& at(std::string_view name) const {
    auto i = index_of(name);
    if (!i) throw std::out_of_range("missing parameter '" + std::string(name) + "'");
    return entries_[*i].second;
  }
  bool contains(std::string_view name) const { return index_of(name).has_value(); }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& [_, t] : entries_) out.push_back(t);
    return out;
  }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  std::map<std::string, Shape> shape_signature() const {
    std::map<std::string, Shape> sig;
    for (const auto& [n, t] : entries_) sig.emplace(n, t.shape());
    return sig;
  }

  /// Fresh leaves with copied values; `requires_grad` applied to every leaf.
  ParamSet clone(bool requires_grad = false) const {
    ParamSet out;
    for (const auto& [n, t] : entries_) {
      Tensor c = t.detach();
      c.set_requires_grad(requires_grad);
      out.entries_.emplace_back(n, std::move(c));
    }
    return out;
  }

  /// this + alpha * dirs, entry by entry. Differentiable when inputs are on a tape.
  ParamSet axpy(double alpha, std::span<const Tensor> dirs) const {
    check_dirs(dirs);
    ParamSet out;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      out.entries_.emplace_back(entries_[i].first, lfm::add(entries_[i].second, scale(dirs[i], alpha)));
    return out;
  }

  /// Same as axpy but the result is a set of plain leaves (no graph history).
  ParamSet step(double alpha, std::span<const Tensor> dirs) const {
    NoGradGuard no_grad;
    return axpy(alpha, dirs).clone();
  }

  bool all_finite() const {
    for (const auto& [_, t] : entries_)
      for (double v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
  }

  bool values_equal(const ParamSet& o) const {
    if (o.entries_.size() != entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].first != o.entries_[i].first ||
          entries_[i].second.shape() != o.entries_[i].second.shape() ||
          entries_[i].second.data() != o.entries_[i].second.data())
        return false;
    return true;
  }

 private:
  std::optional<std::size_t> index_of(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].first == name) return i;
    return std::nullopt;
  }
  void check_dirs(std::span<const Tensor> dirs) const {
    if (dirs.size() != entries_.size()) throw ShapeError("direction count mismatch");
    for (std::size_t i = 0; i < dirs.size(); ++i)
      if (dirs[i].shape() != entries_[i].second.shape())
        throw ShapeError("direction shape mismatch for '" + entries_[i].first + "'");
  }

  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Flat-vector helpers over lists of tensors.
inline double dot_values(std::span<const Tensor> a, std::span<const Tensor> b) {
  if (a.size() != b.size()) throw ShapeError("dot_values: list length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].numel() != b[i].numel()) throw ShapeError("dot_values: size mismatch");
    for (std::size_t k = 0; k < a[i].numel(); ++k) s += a[i][k] * b[i][k];
  }
  return s;
}

inline double norm_values(std::span<const Tensor> a) { return std::sqrt(dot_values(a, a)); }

inline std::vector<double> flatten_values(std::span<const Tensor> ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

enum class InitScheme { ScaledNormal, Uniform, Zeros };

inline InitScheme parse_init_scheme(std::string_view s) {
  if (s == "scaled-normal") return InitScheme::ScaledNormal;
  if (s == "uniform") return InitScheme::Uniform;
  if (s == "zeros") return InitScheme::Zeros;
  throw std::invalid_argument("unknown init scheme '" + std::string(s) + "'");
}

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;  // 0: product of all dims but the first (conv) or dim 0 (matrix)
  std::optional<InitScheme> scheme;  // overrides the collection default (e.g. zero biases)
};

inline std::size_t default_fan_in(const Shape& s) {
  if (s.size() == 4) return s[1] * s[2] * s[3];
  return s.front();
}

/// Scaled-normal draws N(0, 2 / fan_in); uniform draws U(-bound, bound).
inline ParamSet init_weights(std::uint64_t seed, const std::vector<ParamSpec>& specs,
                             InitScheme scheme, double uniform_bound = 0.1) {
  std::mt19937_64 rng(seed);
  ParamSet out;
  for (const auto& spec : specs) {
    std::vector<double> v(shape_numel(spec.shape), 0.0);
    InitScheme s = spec.scheme.value_or(scheme);
    std::size_t fan_in = spec.fan_in ? spec.fan_in : default_fan_in(spec.shape);
    if (s == InitScheme::ScaledNormal) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (auto& x : v) x = dist(rng);
    } else if (s == InitScheme::Uniform) {
      std::uniform_real_distribution<double> dist(-uniform_bound, uniform_bound);
      for (auto& x : v) x = dist(rng);
    }
    out.add(spec.name, Tensor(spec.shape, std::move(v)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// LFMW checkpoint container
//
//   magic "LFMW" | version u32 | entry count u32
//   per entry: name length u32 | name bytes | rank u32 | dims u64[rank] | f64[numel]
//
// All integers and reals little-endian.
// ---------------------------------------------------------------------------

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

namespace io {

template <class T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

/// Reader that tracks its byte offset for error reporting.
class LeReader {
 public:
  explicit LeReader(std::istream& is) : is_(is) {}

  template <class T>
  T read(const char* what) {
    unsigned char buf[sizeof(T)];
    if (!is_.read(reinterpret_cast<char*>(buf), sizeof(T)))
      throw FormatError(std::string("truncated payload reading ") + what, offset_);
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    offset_ += sizeof(T);
    return v;
  }

  std::string read_bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    if (n && !is_.read(s.data(), static_cast<std::streamsize>(n)))
      throw FormatError(std::string("truncated payload reading ") + what, offset_);
    offset_ += n;
    return s;
  }

  void expect_magic(std::string_view magic) {
    std::uint64_t at = offset_;
    std::string got = read_bytes(magic.size(), "magic");
    if (got != magic)
      throw FormatError("bad magic: expected '" + std::string(magic) + "'", at);
  }

  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::uint64_t offset_ = 0;
};

}  // namespace io

inline constexpr std::uint32_t kWeightsVersion = 1;

inline void save_weights(std::ostream& os, const ParamSet& params) {
  os.write("LFMW", 4);
  io::write_le<std::uint32_t>(os, kWeightsVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params.entries()) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) io::write_le<std::uint64_t>(os, d);
    for (double v : t.values()) io::write_le<double>(os, v);
  }
}

inline ParamSet load_weights(std::istream& is) {
  io::LeReader in(is);
  in.expect_magic("LFMW");
  auto at = in.offset();
  auto version = in.read<std::uint32_t>("version");
  if (version != kWeightsVersion)
    throw FormatError("unsupported weights version " + std::to_string(version), at);
  auto count = in.read<std::uint32_t>("entry count");
  ParamSet out;
  for (std::uint32_t e = 0; e < count; ++e) {
    auto len = in.read<std::uint32_t>("name length");
    std::string name = in.read_bytes(len, "name");
    at = in.offset();
    auto rank = in.read<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw FormatError("invalid rank " + std::to_string(rank), at);
    Shape shape(rank);
    for (auto& d : shape) {
      at = in.offset();
      d = in.read<std::uint64_t>("dimension");
      if (d == 0 || d > (1u << 28)) throw FormatError("invalid dimension", at);
    }
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = in.read<double>("values");
    out.add(std::move(name), Tensor(std::move(shape), std::move(v)));
  }
  return out;
}

inline void save_weights(const std::string& path, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  save_weights(os, params);
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

inline ParamSet load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return load_weights(is);
}

}  // namespace lfm
