#pragma once

// Experiment configuration: a flat JSON object whose keys are listed in
// config_keys(). Resolution order is defaults, then file, then flags. Unknown
// keys and type mismatches are hard errors.

#include <lfm/trilevel.hpp>

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <functional>

namespace lfm {

using json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class RunMode { Lfm, DartsBaseline, RandomSearch, SingleSetBaseline };

inline std::string_view mode_name(RunMode m) {
  switch (m) {
    case RunMode::Lfm: return "lfm";
    case RunMode::DartsBaseline: return "darts-baseline";
    case RunMode::RandomSearch: return "random-search";
    case RunMode::SingleSetBaseline: return "single-set-baseline";
  }
  return "?";
}

inline RunMode parse_mode(std::string_view s) {
  for (auto m : {RunMode::Lfm, RunMode::DartsBaseline, RunMode::RandomSearch, RunMode::SingleSetBaseline})
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

inline constexpr const char* kOutputDirEnv = "LFM_OUTPUT_DIR";

inline std::string default_output_dir() {
  const char* env = std::getenv(kOutputDirEnv);
  return env && *env ? env : "runs";
}

struct ExperimentConfig {
  // run
  RunMode mode = RunMode::Lfm;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = default_output_dir();
  std::size_t jobs = 1;
  bool timing = false;

  // data
  std::string data_path;  // empty selects the synthetic generator
  std::size_t n = 2000;
  std::size_t classes = 4;
  double noise_rate = 0.2;
  std::size_t image_size = 8;  // 0 selects feature vectors
  std::size_t features = 8;
  std::uint64_t data_seed = 0;
  std::array<double, 3> split = kDefaultSplit;

  // model
  std::size_t channels = 4;
  std::size_t nodes = 2;
  std::size_t cells = 1;
  std::vector<std::string> ops;  // empty selects the default set for the input kind
  std::size_t embed_dim = 16;
  std::size_t encoder_channels = 4;
  std::size_t pool_grid = 2;
  std::string init = "scaled-normal";

  // search
  SearchConfig search;

  // evaluation
  std::size_t eval_epochs = 10;
  double eval_lr = 0.1;
  std::size_t eval_batch = 32;

  // random-search baseline
  std::size_t random_samples = 8;
  std::size_t random_epochs = 2;

  /// Model for the given per-example shape; empty selects the synthetic shape.
  ModelConfig model(const Shape& example_shape = {}) const {
    ModelConfig m;
    m.input_shape = !example_shape.empty() ? example_shape
                    : image_size           ? Shape{1, image_size, image_size}
                                           : Shape{features};
    m.classes = classes;
    m.channels = channels;
    m.cell = CellSpec{nodes};
    m.cells = cells;
    if (ops.empty()) {
      m.op_set = m.image_mode() ? OpSet::image_default() : OpSet::vector_default();
    } else {
      m.op_set.ops.clear();
      for (const auto& o : ops) m.op_set.ops.push_back(parse_op(o));
    }
    m.embed_dim = embed_dim;
    m.encoder_channels = encoder_channels;
    m.pool_grid = pool_grid;
    m.init = parse_init_scheme(init);
    return m;
  }

  void validate() const {
    if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
    if (jobs == 0) throw ConfigError("jobs: must be >= 1");
    if (eval_batch == 0) throw ConfigError("eval_batch: must be >= 1");
    if (!(eval_lr >= 0.0)) throw ConfigError("eval_lr: must be >= 0");
    if (mode == RunMode::RandomSearch && random_samples == 0)
      throw ConfigError("random_samples: must be >= 1");
    try {
      NoiseSpec{noise_rate}.validate();
      search.validate();
      if (data_path.empty()) model().validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Key registry
// ---------------------------------------------------------------------------

struct ConfigKey {
  std::string name;
  std::string type;  // int | float | bool | string | list
  std::string help;
  std::function<json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const json&)> set;
};

namespace detail {

inline std::size_t as_size(const std::string& key, const json& v) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw ConfigError(key + ": expected a non-negative integer");
  return v.get<std::size_t>();
}

inline double as_double(const std::string& key, const json& v) {
  if (!v.is_number()) throw ConfigError(key + ": expected a number");
  return v.get<double>();
}

inline bool as_bool(const std::string& key, const json& v) {
  if (!v.is_boolean()) throw ConfigError(key + ": expected true or false");
  return v.get<bool>();
}

inline std::string as_string(const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError(key + ": expected a string");
  return v.get<std::string>();
}

template <class Get, class Set>
ConfigKey make_key(std::string name, std::string type, std::string help, Get g, Set s) {
  return {std::move(name), std::move(type), std::move(help), g, s};
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  using C = ExperimentConfig;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto num = [&](std::string name, std::string help, auto access) {
      k.push_back(make_key(
          name, "float", std::move(help), [access](const C& c) { return json(access(c)); },
          [access, name](C& c, const json& v) { access(c) = as_double(name, v); }));
    };
    auto flag = [&](std::string name, std::string help, auto access) {
      k.push_back(make_key(
          name, "bool", std::move(help), [access](const C& c) { return json(access(c)); },
          [access, name](C& c, const json& v) { access(c) = as_bool(name, v); }));
    };
    auto size = [&](std::string name, std::string help, auto access) {
      k.push_back(make_key(
          name, "int", std::move(help), [access](const C& c) { return json(access(c)); },
          [access, name](C& c, const json& v) {
            access(c) = static_cast<std::remove_reference_t<decltype(access(c))>>(as_size(name, v));
          }));
    };
    auto str = [&](std::string name, std::string help, auto access) {
      k.push_back(make_key(
          name, "string", std::move(help), [access](const C& c) { return json(access(c)); },
          [access, name](C& c, const json& v) { access(c) = as_string(name, v); }));
    };

    // run
    k.push_back(make_key(
        "mode", "string", "lfm | darts-baseline | random-search | single-set-baseline",
        [](const C& c) { return json(std::string(mode_name(c.mode))); },
        [](C& c, const json& v) { c.mode = parse_mode(as_string("mode", v)); }));
    k.push_back(make_key(
        "seeds", "list", "experiment seeds, one run per seed", [](const C& c) { return json(c.seeds); },
        [](C& c, const json& v) {
          if (!v.is_array()) throw ConfigError("seeds: expected a list of integers");
          std::vector<std::uint64_t> s;
          for (const auto& x : v) s.push_back(as_size("seeds", x));
          c.seeds = std::move(s);
        }));
    str("output_dir", "directory for metrics, architectures and summaries (default from LFM_OUTPUT_DIR)",
        [](auto& c) -> auto& { return c.output_dir; });
    size("jobs", "seeds run concurrently", [](auto& c) -> auto& { return c.jobs; });
    flag("timing", "record wall_clock_ms in metrics (breaks byte-identical reruns)",
         [](auto& c) -> auto& { return c.timing; });

    // data
    str("data_path", "LFMD dataset file; empty generates synthetic data",
        [](auto& c) -> auto& { return c.data_path; });
    size("n", "synthetic example count", [](auto& c) -> auto& { return c.n; });
    size("classes", "class count", [](auto& c) -> auto& { return c.classes; });
    num("noise_rate", "fraction of training labels flipped", [](auto& c) -> auto& { return c.noise_rate; });
    size("image_size", "synthetic image side; 0 selects feature vectors",
         [](auto& c) -> auto& { return c.image_size; });
    size("features", "feature-vector width when image_size is 0", [](auto& c) -> auto& { return c.features; });
    size("data_seed", "seed for generation, splitting and label noise",
         [](auto& c) -> auto& { return c.data_seed; });
    k.push_back(make_key(
        "split", "list", "train / val / test fractions", [](const C& c) { return json(c.split); },
        [](C& c, const json& v) {
          if (!v.is_array() || v.size() != 3) throw ConfigError("split: expected three fractions");
          for (std::size_t i = 0; i < 3; ++i) c.split[i] = as_double("split", v[i]);
        }));

    // model
    size("channels", "learner width", [](auto& c) -> auto& { return c.channels; });
    size("nodes", "intermediate nodes per cell", [](auto& c) -> auto& { return c.nodes; });
    size("cells", "stacked cells", [](auto& c) -> auto& { return c.cells; });
    k.push_back(make_key(
        "ops", "list", "candidate operations; empty selects the default for the input kind",
        [](const C& c) { return json(c.ops); },
        [](C& c, const json& v) {
          if (!v.is_array()) throw ConfigError("ops: expected a list of operation names");
          std::vector<std::string> o;
          for (const auto& x : v) o.push_back(as_string("ops", x));
          c.ops = std::move(o);
        }));
    size("embed_dim", "encoder embedding width", [](auto& c) -> auto& { return c.embed_dim; });
    size("encoder_channels", "encoder width", [](auto& c) -> auto& { return c.encoder_channels; });
    size("pool_grid", "image heads pool over a grid x grid partition; 1 is global pooling",
         [](auto& c) -> auto& { return c.pool_grid; });
    str("init", "scaled-normal | uniform | zeros", [](auto& c) -> auto& { return c.init; });

    // search
    size("epochs", "search epochs", [](auto& c) -> auto& { return c.search.epochs; });
    size("batch_train", "training batch size", [](auto& c) -> auto& { return c.search.batch_train; });
    size("batch_val", "validation batch size (length of r)", [](auto& c) -> auto& { return c.search.batch_val; });
    num("lr_w1", "first learner step size", [](auto& c) -> auto& { return c.search.lr.w1; });
    num("lr_w2", "second learner step size", [](auto& c) -> auto& { return c.search.lr.w2; });
    num("lr_arch", "architecture step size", [](auto& c) -> auto& { return c.search.lr.arch; });
    num("lr_encoder", "encoder step size", [](auto& c) -> auto& { return c.search.lr.encoder; });
    num("lr_coeff", "coefficient vector step size", [](auto& c) -> auto& { return c.search.lr.coeff; });
    num("eps_scale", "finite-difference scale, divided by the direction norm",
        [](auto& c) -> auto& { return c.search.eps_scale; });
    k.push_back(make_key(
        "order", "string", "first | second",
        [](const C& c) { return json(c.search.order == Order::First ? "first" : "second"); },
        [](C& c, const json& v) {
          auto s = as_string("order", v);
          if (s == "first") c.search.order = Order::First;
          else if (s == "second") c.search.order = Order::Second;
          else throw ConfigError("order: expected first or second, got '" + s + "'");
        }));
    size("k", "operations kept per edge", [](auto& c) -> auto& { return c.search.k; });
    k.push_back(make_key(
        "metric", "string", "dot | cosine | l2",
        [](const C& c) { return json(std::string(metric_name(c.search.metric))); },
        [](C& c, const json& v) {
          try {
            c.search.metric = parse_metric(as_string("metric", v));
          } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("metric: ") + e.what());
          }
        }));
    k.push_back(make_key(
        "reduction", "string", "mean | sum over the weighted training batch",
        [](const C& c) { return json(c.search.stage2_reduction == Reduction::Mean ? "mean" : "sum"); },
        [](C& c, const json& v) {
          auto s = as_string("reduction", v);
          if (s == "mean") c.search.stage2_reduction = Reduction::Mean;
          else if (s == "sum") c.search.stage2_reduction = Reduction::Sum;
          else throw ConfigError("reduction: expected mean or sum, got '" + s + "'");
        }));
    flag("no_x", "drop visual similarity", [](auto& c) -> auto& { return c.search.ablation.no_x; });
    flag("no_z", "drop label similarity", [](auto& c) -> auto& { return c.search.ablation.no_z; });
    flag("no_u", "drop validation losses", [](auto& c) -> auto& { return c.search.ablation.no_u; });
    flag("u_direct_term", "include the architecture's direct path through u",
         [](auto& c) -> auto& { return c.search.u_direct_term; });
    flag("clamp_r", "keep r nonnegative", [](auto& c) -> auto& { return c.search.clamp_r_nonnegative; });

    // evaluation
    size("eval_epochs", "evaluation training epochs", [](auto& c) -> auto& { return c.eval_epochs; });
    num("eval_lr", "evaluation step size", [](auto& c) -> auto& { return c.eval_lr; });
    size("eval_batch", "evaluation batch size", [](auto& c) -> auto& { return c.eval_batch; });

    // random search
    size("random_samples", "architectures sampled by random-search",
         [](auto& c) -> auto& { return c.random_samples; });
    size("random_epochs", "training epochs per random-search candidate",
         [](auto& c) -> auto& { return c.random_epochs; });
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_config_key(std::string_view name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

inline json config_to_json(const ExperimentConfig& c) {
  json j = json::object();
  for (const auto& k : config_keys()) j[k.name] = k.get(c);
  return j;
}

/// Applies every key of a flat JSON object on top of cfg.
inline void apply_config(ExperimentConfig& cfg, const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const ConfigKey* k = find_config_key(key);
    if (!k) throw ConfigError("unknown config key '" + key + "'");
    k->set(cfg, value);
  }
}

/// Interprets a command-line value: JSON when it parses, a bare string
/// otherwise; comma-separated values become lists for list-typed keys.
inline json flag_value(const ConfigKey& key, const std::string& text) {
  if (key.type == "list" && !text.empty() && text.front() != '[') {
    json arr = json::array();
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find(',', start);
      if (end == std::string::npos) end = text.size();
      std::string item = text.substr(start, end - start);
      json v = json::parse(item, nullptr, false);
      arr.push_back(v.is_discarded() ? json(item) : v);
      start = end + 1;
    }
    return arr;
  }
  if (key.type == "string") return json(text);
  json v = json::parse(text, nullptr, false);
  return v.is_discarded() ? json(text) : v;
}

/// Resolves defaults, then the optional file, then flag overrides given as
/// key -> raw text pairs.
inline ExperimentConfig parse_config(const std::string& path,
                                     const std::vector<std::pair<std::string, std::string>>& flags = {}) {
  ExperimentConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
    apply_config(cfg, j);
  }
  for (const auto& [name, text] : flags) {
    const ConfigKey* k = find_config_key(name);
    if (!k) throw ConfigError("unknown config key '" + name + "'");
    k->set(cfg, flag_value(*k, text));
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config_json(const json& j) {
  ExperimentConfig cfg;
  apply_config(cfg, j);
  cfg.validate();
  return cfg;
}

}  // namespace lfm
