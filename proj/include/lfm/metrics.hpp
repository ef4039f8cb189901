#pragma once

// Line-delimited JSON metrics: one record per epoch, flushed as written.

#include <lfm/config.hpp>

#include <filesystem>

namespace lfm {

enum class Phase { Search, Eval };

inline std::string_view phase_name(Phase p) { return p == Phase::Search ? "search" : "eval"; }

inline Phase parse_phase(std::string_view s) {
  if (s == "search") return Phase::Search;
  if (s == "eval") return Phase::Eval;
  throw std::invalid_argument("unknown phase '" + std::string(s) + "'");
}

/// Fields that do not apply to a phase are absent rather than zero.
struct MetricsRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  Phase phase = Phase::Search;
  std::size_t epoch = 0;
  std::optional<double> w1_train_loss;
  std::optional<double> w2_weighted_loss;
  std::optional<double> w2_val_loss;
  std::optional<double> w2_val_error;
  std::optional<double> a_mean;
  std::optional<double> a_variance;
  std::optional<double> a_min;
  std::optional<double> a_max;
  std::optional<double> arch_entropy;
  std::optional<double> train_loss;
  std::optional<double> train_error;
  std::optional<double> test_error;
  std::optional<double> wall_clock_ms;

  bool operator==(const MetricsRecord&) const = default;
};

namespace detail {

template <class F>
void for_each_metric(F&& f) {
  f("w1_train_loss", &MetricsRecord::w1_train_loss);
  f("w2_weighted_loss", &MetricsRecord::w2_weighted_loss);
  f("w2_val_loss", &MetricsRecord::w2_val_loss);
  f("w2_val_error", &MetricsRecord::w2_val_error);
  f("a_mean", &MetricsRecord::a_mean);
  f("a_variance", &MetricsRecord::a_variance);
  f("a_min", &MetricsRecord::a_min);
  f("a_max", &MetricsRecord::a_max);
  f("arch_entropy", &MetricsRecord::arch_entropy);
  f("train_loss", &MetricsRecord::train_loss);
  f("train_error", &MetricsRecord::train_error);
  f("test_error", &MetricsRecord::test_error);
  f("wall_clock_ms", &MetricsRecord::wall_clock_ms);
}

}  // namespace detail

inline json record_to_json(const MetricsRecord& r) {
  json j;
  j["run_id"] = r.run_id;
  j["seed"] = r.seed;
  j["phase"] = std::string(phase_name(r.phase));
  j["epoch"] = r.epoch;
  detail::for_each_metric([&](const char* name, std::optional<double> MetricsRecord::*field) {
    if (const auto& v = r.*field) {
      if (!std::isfinite(*v)) throw std::invalid_argument(std::string("metric ") + name + " is not finite");
      j[name] = *v;
    }
  });
  return j;
}

inline MetricsRecord record_from_json(const json& j) {
  MetricsRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.phase = parse_phase(j.at("phase").get<std::string>());
  r.epoch = j.at("epoch").get<std::size_t>();
  detail::for_each_metric([&](const char* name, std::optional<double> MetricsRecord::*field) {
    if (j.contains(name)) r.*field = j.at(name).get<double>();
  });
  return r;
}

/// Search-phase record from one epoch of run_search.
inline MetricsRecord search_record(const std::string& run_id, std::uint64_t seed, const EpochSummary& e,
                                   bool timing) {
  MetricsRecord r;
  r.run_id = run_id;
  r.seed = seed;
  r.phase = Phase::Search;
  r.epoch = e.epoch;
  r.w1_train_loss = e.w1_train_loss;
  r.w2_weighted_loss = e.w2_weighted_loss;
  r.w2_val_loss = e.w2_val_loss;
  r.w2_val_error = e.w2_val_error;
  r.a_mean = e.a_stats.mean;
  r.a_variance = e.a_stats.variance;
  r.a_min = e.a_stats.min;
  r.a_max = e.a_stats.max;
  r.arch_entropy = e.arch_entropy;
  if (timing) r.wall_clock_ms = e.wall_ms;
  return r;
}

/// Appends one JSON line per record and flushes after each, so an interrupted
/// run keeps every completed epoch. The file is truncated when opened.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::out | std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open metrics file '" + path.string() + "'");
  }

  void write(const MetricsRecord& r) {
    out_ << record_to_json(r).dump() << '\n';
    out_.flush();
    if (!out_) throw std::runtime_error("write to metrics file '" + path_.string() + "' failed");
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file '" + path.string() + "'");
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": invalid JSON");
    out.push_back(record_from_json(j));
  }
  return out;
}

}  // namespace lfm
