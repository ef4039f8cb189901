#pragma once

// Two-phase experiments: architecture search followed by evaluation of the
// discretized architecture trained from scratch on train + val.

#include <lfm/metrics.hpp>

#include <atomic>
#include <iomanip>
#include <mutex>
#include <thread>

namespace lfm {

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Seeds: generation <- data_seed, split <- stream 2, training noise <- stream 1.
/// Validation and test stay clean.
inline Splits prepare_data(const ExperimentConfig& cfg) {
  Dataset ds;
  if (cfg.data_path.empty()) {
    SyntheticOptions opt;
    opt.image_size = cfg.image_size;
    opt.features = cfg.features;
    ds = make_synthetic(cfg.n, cfg.classes, {0.0}, cfg.data_seed, opt);
  } else {
    ds = load_dataset(cfg.data_path);
    if (ds.classes != cfg.classes)
      throw ConfigError("classes: config says " + std::to_string(cfg.classes) + " but '" + cfg.data_path +
                        "' has " + std::to_string(ds.classes));
  }
  Splits s = split_dataset(ds, cfg.split, derive_seed(cfg.data_seed, 2));
  apply_label_noise(s.train, {cfg.noise_rate}, derive_seed(cfg.data_seed, 1));
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::size_t epochs = 10;
  double lr = 0.1;
  std::size_t batch = 32;
};

inline double dataset_error(const ModelConfig& m, const DiscreteArchitecture& arch, const ParamSet& w,
                            const Dataset& ds) {
  NoGradGuard ng;
  constexpr std::size_t chunk = 256;
  std::size_t wrong = 0;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Batch b = make_batch(ds, idx);
    wrong += static_cast<std::size_t>(
        std::llround(error_rate(learner_forward(m, arch, w, b.inputs), b.labels) * static_cast<double>(idx.size())));
  }
  return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

struct EvalEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_error = 0.0;
  double test_error = 0.0;
  double wall_ms = 0.0;
};

struct EvalResult {
  double test_error = 0.0;
  std::vector<EvalEpoch> epochs;
};

/// Trains a freshly initialized network with the fixed architecture using
/// plain mini-batch SGD and uniform example weights. Nothing from the search
/// phase is read except the architecture itself.
/// Seeds: weights <- stream 30, batch order <- stream 31.
inline EvalResult evaluate_architecture(const ModelConfig& m, const DiscreteArchitecture& arch,
                                        const Dataset& train, const Dataset& test, const EvalOptions& opt,
                                        std::uint64_t seed,
                                        const std::function<void(const EvalEpoch&)>& on_epoch = {}) {
  if (opt.batch == 0) throw std::invalid_argument("evaluation batch size must be >= 1");
  ParamSet w = init_learner(m, derive_seed(seed, 30), LearnerRole::Eval).params;
  std::mt19937_64 rng(derive_seed(seed, 31));
  EvalResult res;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    EvalEpoch ep;
    ep.epoch = epoch;
    std::size_t wrong = 0, batches = 0;
    for (std::size_t start = 0; start < idx.size(); start += opt.batch) {
      std::span<const std::size_t> bi(idx.data() + start, std::min(opt.batch, idx.size() - start));
      Batch b = make_batch(train, bi);
      ParamSet leaf = w.clone(true);
      Tensor logits = learner_forward(m, arch, leaf, b.inputs);
      Tensor loss = mean(cross_entropy(logits, b.labels));
      if (!std::isfinite(loss.item()))
        throw std::runtime_error("evaluation diverged at epoch " + std::to_string(epoch));
      w = w.step(-opt.lr, grad(loss, leaf.tensors()));
      ep.train_loss += loss.item();
      wrong += static_cast<std::size_t>(
          std::llround(error_rate(logits, b.labels) * static_cast<double>(bi.size())));
      ++batches;
    }
    ep.train_loss /= static_cast<double>(std::max<std::size_t>(batches, 1));
    ep.train_error = static_cast<double>(wrong) / static_cast<double>(train.size());
    ep.test_error = dataset_error(m, arch, w, test);
    ep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.epochs.push_back(ep);
    if (on_epoch) on_epoch(ep);
  }
  res.test_error = opt.epochs ? res.epochs.back().test_error : dataset_error(m, arch, w, test);
  return res;
}

// ---------------------------------------------------------------------------
// Search phase per mode
// ---------------------------------------------------------------------------

/// darts-baseline removes every reweighting factor and freezes V and r, so
/// every example weight stays 1/2; the second learner's step is doubled so its
/// update equals plain unweighted descent.
inline SearchConfig search_config_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  SearchConfig s = cfg.search;
  s.seed = seed;
  switch (cfg.mode) {
    case RunMode::Lfm:
    case RunMode::RandomSearch: break;
    case RunMode::DartsBaseline:
      s.ablation = {true, true, true};
      s.lr.encoder = 0.0;
      s.lr.coeff = 0.0;
      s.lr.w2 *= 2.0;
      s.clamp_r_nonnegative = false;
      break;
    case RunMode::SingleSetBaseline: s.single_set = true; break;
  }
  return s;
}

/// Samples k distinct operations per edge uniformly. Seed stream 50.
inline DiscreteArchitecture random_architecture(const ModelConfig& m, std::size_t k, std::mt19937_64& rng) {
  if (k == 0 || k > m.op_set.size()) throw std::invalid_argument("k outside [1, op count]");
  DiscreteArchitecture d{m.op_set, m.cell.edges(), {}};
  for (std::size_t e = 0; e < d.edges.size(); ++e) {
    std::vector<std::size_t> ops(m.op_set.size());
    std::iota(ops.begin(), ops.end(), 0);
    std::shuffle(ops.begin(), ops.end(), rng);
    ops.resize(k);
    d.retained.push_back(ops);
  }
  return d;
}

struct SearchOutcome {
  DiscreteArchitecture arch;
  std::vector<double> a_variance;  // per search epoch; empty for random search
};

/// Runs the search phase for one seed, writing one search record per epoch
/// (per candidate for random search).
inline SearchOutcome search_phase(const ExperimentConfig& cfg, const ModelConfig& m, const Splits& data,
                                  std::uint64_t seed, const std::string& run_id, MetricsWriter* out,
                                  std::ostream* log = nullptr) {
  SearchOutcome res;
  if (cfg.mode == RunMode::RandomSearch) {
    std::mt19937_64 rng(derive_seed(seed, 50));
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i <= cfg.random_samples; ++i) {
      DiscreteArchitecture cand = random_architecture(m, cfg.search.k, rng);
      EvalOptions brief{cfg.random_epochs, cfg.eval_lr, cfg.eval_batch};
      auto t0 = std::chrono::steady_clock::now();
      // brief training on train, scored on the validation split
      double err = evaluate_architecture(m, cand, data.train, data.val, brief, derive_seed(seed, 100 + i)).test_error;
      if (out) {
        MetricsRecord r;
        r.run_id = run_id;
        r.seed = seed;
        r.phase = Phase::Search;
        r.epoch = i;
        r.w2_val_error = err;
        if (cfg.timing)
          r.wall_clock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        out->write(r);
      }
      if (log) *log << run_id << " seed " << seed << " candidate " << i << " val_error " << err << "\n";
      if (err < best) {
        best = err;
        res.arch = cand;
      }
    }
    return res;
  }
  SearchConfig sc = search_config_for(cfg, seed);
  auto on_epoch = [&](const EpochSummary& e, const SearchState&) {
    res.a_variance.push_back(e.a_stats.variance);
    if (out) out->write(search_record(run_id, seed, e, cfg.timing));
    if (log)
      *log << run_id << " seed " << seed << " search epoch " << e.epoch << " val_loss " << e.w2_val_loss
           << " a_var " << e.a_stats.variance << "\n";
  };
  res.arch = run_search(m, sc, data.train, data.val, on_epoch).arch;
  return res;
}

/// Evaluation phase for one seed: train on train + val, score on test.
inline double eval_phase(const ExperimentConfig& cfg, const ModelConfig& m, const DiscreteArchitecture& arch,
                         const Splits& data, std::uint64_t seed, const std::string& run_id, MetricsWriter* out,
                         std::ostream* log = nullptr) {
  Dataset pool = concat_datasets(data.train, data.val);
  EvalOptions opt{cfg.eval_epochs, cfg.eval_lr, cfg.eval_batch};
  return evaluate_architecture(m, arch, pool, data.test, opt, seed, [&](const EvalEpoch& e) {
           if (out) {
             MetricsRecord r;
             r.run_id = run_id;
             r.seed = seed;
             r.phase = Phase::Eval;
             r.epoch = e.epoch;
             r.train_loss = e.train_loss;
             r.train_error = e.train_error;
             r.test_error = e.test_error;
             if (cfg.timing) r.wall_clock_ms = e.wall_ms;
             out->write(r);
           }
           if (log)
             *log << run_id << " seed " << seed << " eval epoch " << e.epoch << " test_error " << e.test_error
                  << "\n";
         }).test_error;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::string architecture;  // DiscreteArchitecture::serialize()
  double test_error = 0.0;
  std::vector<double> a_variance;
};

struct ExperimentSummary {
  std::string run_id;
  RunMode mode = RunMode::Lfm;
  std::vector<SeedResult> seeds;
  std::size_t completed = 0;
  double mean_test_error = 0.0;
  double std_test_error = 0.0;  // sample standard deviation; 0 for one seed
  std::vector<std::string> warnings;
};

struct RunOptions {
  std::string run_id;  // defaults to the mode name
  std::ostream* log = nullptr;
};

inline std::pair<double, double> mean_and_std(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

inline json summary_to_json(const ExperimentSummary& s) {
  json j;
  j["run_id"] = s.run_id;
  j["mode"] = std::string(mode_name(s.mode));
  j["completed"] = s.completed;
  j["mean_test_error"] = s.mean_test_error;
  j["std_test_error"] = s.std_test_error;
  j["seeds"] = json::array();
  for (const auto& r : s.seeds) {
    json e;
    e["seed"] = r.seed;
    e["ok"] = r.ok;
    if (r.ok) {
      e["test_error"] = r.test_error;
      e["architecture"] = r.architecture;
    } else {
      e["error"] = r.error;
    }
    j["seeds"].push_back(e);
  }
  j["warnings"] = s.warnings;
  return j;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
}

/// Runs search then evaluation for every configured seed. Layout under
/// output_dir/run_id: config.json, summary.json and per seed
/// seed-<s>/metrics.jsonl and seed-<s>/architecture.txt. A seed that throws is
/// recorded, excluded from the statistics and reported as a warning.
inline ExperimentSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  ExperimentSummary sum;
  sum.mode = cfg.mode;
  sum.run_id = opt.run_id.empty() ? std::string(mode_name(cfg.mode)) : opt.run_id;
  std::filesystem::path dir = std::filesystem::path(cfg.output_dir) / sum.run_id;
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");

  Splits data = prepare_data(cfg);
  ModelConfig m = cfg.model(data.train.example_shape);
  m.validate();

  sum.seeds.resize(cfg.seeds.size());
  std::mutex log_mu;
  auto run_one = [&](std::size_t i) {
    SeedResult& r = sum.seeds[i];
    r.seed = cfg.seeds[i];
    std::ostringstream local;
    std::ostream* log = opt.log ? &local : nullptr;
    try {
      std::filesystem::path sd = dir / ("seed-" + std::to_string(r.seed));
      MetricsWriter out(sd / "metrics.jsonl");
      SearchOutcome so = search_phase(cfg, m, data, r.seed, sum.run_id, &out, log);
      r.architecture = so.arch.serialize();
      r.a_variance = so.a_variance;
      write_text(sd / "architecture.txt", r.architecture);
      r.test_error = eval_phase(cfg, m, so.arch, data, r.seed, sum.run_id, &out, log);
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    if (opt.log) {
      std::lock_guard lock(log_mu);
      *opt.log << local.str() << std::flush;
    }
  };
  if (cfg.jobs <= 1 || cfg.seeds.size() <= 1) {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(cfg.jobs, cfg.seeds.size()); ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < cfg.seeds.size();) run_one(i);
      });
    for (auto& th : pool) th.join();
  }

  std::vector<double> errs;
  for (const auto& r : sum.seeds) {
    if (r.ok) {
      errs.push_back(r.test_error);
    } else {
      sum.warnings.push_back("seed " + std::to_string(r.seed) + " failed and is excluded: " + r.error);
    }
  }
  sum.completed = errs.size();
  std::tie(sum.mean_test_error, sum.std_test_error) = mean_and_std(errs);
  write_text(dir / "summary.json", summary_to_json(sum).dump(2) + "\n");
  if (opt.log)
    for (const auto& w : sum.warnings) *opt.log << "warning: " << w << "\n";
  return sum;
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"no-u", "no-x", "no-z", "metric:cosine", "metric:l2"};
  return names;
}

inline ExperimentConfig ablation_variant(const ExperimentConfig& base, const std::string& which) {
  ExperimentConfig c = base;
  c.mode = RunMode::Lfm;
  if (which == "full") return c;
  if (which == "no-u") c.search.ablation.no_u = true;
  else if (which == "no-x") c.search.ablation.no_x = true;
  else if (which == "no-z") c.search.ablation.no_z = true;
  else if (which == "metric:cosine") c.search.metric = SimilarityMetric::Cosine;
  else if (which == "metric:l2") c.search.metric = SimilarityMetric::NegL2;
  else if (which == "metric:dot") c.search.metric = SimilarityMetric::Dot;
  else throw ConfigError("unknown ablation '" + which + "'");
  return c;
}

struct AblationTable {
  std::vector<std::pair<std::string, ExperimentSummary>> rows;  // "full" first

  const ExperimentSummary& at(const std::string& name) const {
    for (const auto& [n, s] : rows)
      if (n == name) return s;
    throw std::out_of_range("no ablation row '" + name + "'");
  }

  std::string render() const {
    std::ostringstream os;
    os << "| variant | mean test error | std | seeds | vs full |\n|---|---|---|---|---|\n";
    double full = rows.empty() ? 0.0 : rows.front().second.mean_test_error;
    os << std::fixed << std::setprecision(4);
    for (const auto& [name, s] : rows) {
      os << "| " << name << " | " << s.mean_test_error << " | " << s.std_test_error << " | " << s.completed
         << "/" << s.seeds.size() << " | ";
      if (name == "full") os << "-";
      else os << std::showpos << s.mean_test_error - full << std::noshowpos;
      os << " |\n";
    }
    return os.str();
  }
};

/// Runs the full configuration and each requested variant with identical
/// seeds and budgets. Variant order follows the request; duplicates are
/// dropped. Rows are written under output_dir/ablation/<variant>.
inline AblationTable run_ablation(const ExperimentConfig& base, const std::vector<std::string>& which,
                                  const RunOptions& opt = {}) {
  std::vector<std::string> names{"full"};
  for (const auto& w : which) {
    ablation_variant(base, w);  // reject unknown names before any run starts
    if (std::find(names.begin(), names.end(), w) == names.end()) names.push_back(w);
  }
  AblationTable t;
  for (const auto& name : names) {
    ExperimentConfig c = ablation_variant(base, name);
    std::string id = name;
    std::replace(id.begin(), id.end(), ':', '-');
    RunOptions ro = opt;
    ro.run_id = (opt.run_id.empty() ? std::string("ablation") : opt.run_id) + "/" + id;
    t.rows.emplace_back(name, run_experiment(c, ro));
  }
  std::filesystem::path dir = std::filesystem::path(base.output_dir) / (opt.run_id.empty() ? "ablation" : opt.run_id);
  write_text(dir / "table.md", t.render());
  return t;
}

}  // namespace lfm
