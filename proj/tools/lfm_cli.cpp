// Command-line front end. Every verb prints results to stdout; failures print
// a single JSON line prefixed with "error: " to stderr and exit nonzero:
//   2 usage or configuration, 3 data or file format, 4 failed check, 1 other.

#include <lfm/lfm.hpp>

#include <CLI11.hpp>

#include <iostream>
#include <map>

using namespace lfm;

namespace {

struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> keys;
  bool quiet = false;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.file, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", args.sets, "key=value override, repeatable");
  cmd->add_flag("-q,--quiet", args.quiet, "suppress progress lines");
  cmd->allow_extras();
  for (const auto& k : config_keys()) {
    cmd->add_option_function<std::string>(
           "--" + k.name, [&args, name = k.name](const std::string& v) { args.keys[name] = v; },
           k.help + " (" + k.type + ")")
        ->group("Config keys");
  }
}

ExperimentConfig resolve(const ConfigArgs& args) {
  std::vector<std::pair<std::string, std::string>> flags;
  for (const auto& s : args.sets) {
    auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    flags.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  // explicit --key flags win over --set
  for (const auto& [k, v] : args.keys) flags.emplace_back(k, v);
  return parse_config(args.file, flags);
}

std::ostream* progress(const ConfigArgs& a) { return a.quiet ? nullptr : &std::cerr; }

void print_summary(const ExperimentSummary& s) {
  std::cout << s.run_id << ": test error " << std::fixed << std::setprecision(4) << s.mean_test_error << " +- "
            << s.std_test_error << " over " << s.completed << "/" << s.seeds.size() << " seeds\n";
  for (const auto& r : s.seeds) {
    std::cout << "  seed " << r.seed << ": ";
    if (r.ok) std::cout << r.test_error << "\n";
    else std::cout << "failed: " << r.error << "\n";
  }
  for (const auto& w : s.warnings) std::cerr << "warning: " << w << "\n";
}

int cmd_search(const ConfigArgs& args) {
  ExperimentConfig cfg = resolve(args);
  Splits data = prepare_data(cfg);
  ModelConfig m = cfg.model(data.train.example_shape);
  std::string run_id = "search-" + std::string(mode_name(cfg.mode));
  std::filesystem::path dir = std::filesystem::path(cfg.output_dir) / run_id;
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  for (auto seed : cfg.seeds) {
    std::filesystem::path sd = dir / ("seed-" + std::to_string(seed));
    MetricsWriter out(sd / "metrics.jsonl");
    SearchOutcome so = search_phase(cfg, m, data, seed, run_id, &out, progress(args));
    write_text(sd / "architecture.txt", so.arch.serialize());
    std::cout << "seed " << seed << " -> " << (sd / "architecture.txt").string() << "\n" << so.arch.serialize();
  }
  return 0;
}

int cmd_evaluate(const ConfigArgs& args, const std::string& arch_path) {
  ExperimentConfig cfg = resolve(args);
  Splits data = prepare_data(cfg);
  ModelConfig m = cfg.model(data.train.example_shape);
  std::ifstream in(arch_path);
  if (!in) throw std::runtime_error("cannot open architecture file '" + arch_path + "'");
  std::stringstream text;
  text << in.rdbuf();
  DiscreteArchitecture arch;
  try {
    arch = DiscreteArchitecture::parse(text.str(), m.op_set, m.cell);
  } catch (const std::invalid_argument& e) {
    throw FormatError(arch_path + ": " + e.what(), 0);
  }
  std::string run_id = "evaluate";
  std::filesystem::path dir = std::filesystem::path(cfg.output_dir) / run_id;
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  std::vector<double> errs;
  for (auto seed : cfg.seeds) {
    MetricsWriter out(dir / ("seed-" + std::to_string(seed)) / "metrics.jsonl");
    errs.push_back(eval_phase(cfg, m, arch, data, seed, run_id, &out, progress(args)));
    std::cout << "seed " << seed << ": test error " << errs.back() << "\n";
  }
  auto [mean, sd] = mean_and_std(errs);
  std::cout << "test error " << std::fixed << std::setprecision(4) << mean << " +- " << sd << "\n";
  return 0;
}

int cmd_experiment(const ConfigArgs& args) {
  ExperimentConfig cfg = resolve(args);
  auto s = run_experiment(cfg, {"", progress(args)});
  print_summary(s);
  return s.completed ? 0 : 1;
}

int cmd_ablate(const ConfigArgs& args, std::vector<std::string> which) {
  ExperimentConfig cfg = resolve(args);
  if (which.empty()) which = ablation_names();
  auto t = run_ablation(cfg, which, {"", progress(args)});
  std::cout << t.render();
  return 0;
}

int cmd_gradcheck(std::size_t count, std::uint64_t seed, double tol) {
  double worst = 0.0;
  std::string worst_desc;
  auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < count; ++i) {
    auto r = random_network_gradcheck(seed + i);
    if (r.max_error >= worst) {
      worst = r.max_error;
      worst_desc = "seed " + std::to_string(r.seed) + ", " + r.description;
    }
  }
  double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << count << " networks, max relative error " << std::scientific << worst << " (" << worst_desc
            << "), " << std::fixed << std::setprecision(2) << sec << " s\n";
  if (!(worst < tol)) throw CheckFailed("max relative error above tolerance");
  return 0;
}

int cmd_oracle(std::size_t count, std::uint64_t seed, double arch_tol, double chain_tol) {
  double wa = 1.0, wv = 1.0, wr = 1.0;
  for (std::size_t i = 0; i < count; ++i) {
    auto c = compare_with_oracle(make_oracle_instance(seed + i));
    std::cout << "state " << seed + i << ": arch " << std::fixed << std::setprecision(6) << c.arch_cosine
              << "  encoder " << c.encoder_cosine << "  coeff " << c.coeff_cosine << "\n";
    wa = std::min(wa, c.arch_cosine);
    wv = std::min(wv, c.encoder_cosine);
    wr = std::min(wr, c.coeff_cosine);
  }
  std::cout << "worst cosine: arch " << wa << "  encoder " << wv << "  coeff " << wr << "\n";
  if (!(wa >= arch_tol && wv >= chain_tol && wr >= chain_tol)) throw CheckFailed("cosine below threshold");
  return 0;
}

int cmd_gen_data(const ConfigArgs& args, const std::string& out, bool noisy) {
  ExperimentConfig cfg = resolve(args);
  SyntheticOptions opt;
  opt.image_size = cfg.image_size;
  opt.features = cfg.features;
  Dataset ds = make_synthetic(cfg.n, cfg.classes, {noisy ? cfg.noise_rate : 0.0}, cfg.data_seed, opt);
  save_dataset(out, ds);
  std::cout << "wrote " << ds.size() << " examples, " << ds.classes << " classes, shape "
            << shape_str(ds.example_shape) << ", " << ds.flipped_count() << " flipped labels to " << out << "\n";
  return 0;
}

int fail(const std::string& verb, const std::string& type, int code, const std::string& message) {
  json j;
  j["verb"] = verb;
  j["type"] = type;
  j["exit_code"] = code;
  j["message"] = message;
  std::cerr << "error: " << j.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Architecture search that learns from its mistakes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "lfm 1.0.0");

  ConfigArgs ca;
  std::string arch_path, out_path;
  std::vector<std::string> which;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  double tol = 1e-5, arch_tol = 0.95, chain_tol = 0.999;
  bool noisy = false;

  auto* search = app.add_subcommand("search", "run the search phase and write the derived architectures");
  add_config_options(search, ca);
  auto* evaluate = app.add_subcommand("evaluate", "train a fixed architecture from scratch and report test error");
  add_config_options(evaluate, ca);
  evaluate->add_option("-a,--arch", arch_path, "architecture file")->required()->check(CLI::ExistingFile);
  auto* experiment = app.add_subcommand("experiment", "search then evaluate for every seed");
  add_config_options(experiment, ca);
  auto* ablate = app.add_subcommand("ablate", "compare the full method against ablated variants");
  add_config_options(ablate, ca);
  ablate->add_option("-w,--which", which, "variants: no-u no-x no-z metric:cosine metric:l2 (default all)")
      ->delimiter(',');
  auto* gradcheck = app.add_subcommand("gradcheck", "check autodiff against finite differences");
  gradcheck->add_option("-n,--count", count, "random networks")->default_val(100);
  gradcheck->add_option("-s,--seed", seed, "first seed")->default_val(0);
  gradcheck->add_option("-t,--tol", tol, "max relative error")->default_val(1e-5);
  auto* oracle = app.add_subcommand("oracle-compare", "compare hypergradient estimates with exact unrolling");
  oracle->add_option("-n,--count", count, "random states")->default_val(20);
  oracle->add_option("-s,--seed", seed, "first seed")->default_val(0);
  oracle->add_option("--arch-tol", arch_tol, "minimum architecture cosine")->default_val(0.95);
  oracle->add_option("--chain-tol", chain_tol, "minimum encoder and coefficient cosine")->default_val(0.999);
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset in LFMD format");
  add_config_options(gen, ca);
  gen->add_option("-o,--out", out_path, "output file")->required();
  gen->add_flag("--noisy", noisy, "flip noise_rate of all labels (experiments flip the training split only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(), "usage", 2,
                e.what());
  }

  std::string verb = app.get_subcommands().front()->get_name();
  try {
    auto extras = app.get_subcommands().front()->remaining();
    if (!extras.empty()) {
      const std::string& x = extras.front();
      if (x.rfind("--", 0) == 0) throw ConfigError("unknown config key '" + x.substr(2, x.find('=') - 2) + "'");
      throw ConfigError("unexpected argument '" + x + "'");
    }
    if (verb == "search") return cmd_search(ca);
    if (verb == "evaluate") return cmd_evaluate(ca, arch_path);
    if (verb == "experiment") return cmd_experiment(ca);
    if (verb == "ablate") return cmd_ablate(ca, which);
    if (verb == "gradcheck") return cmd_gradcheck(count, seed, tol);
    if (verb == "oracle-compare") return cmd_oracle(count, seed, arch_tol, chain_tol);
    if (verb == "gen-data") return cmd_gen_data(ca, out_path, noisy);
  } catch (const ConfigError& e) {
    return fail(verb, "config", 2, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(verb, "config", 2, e.what());
  } catch (const FormatError& e) {
    return fail(verb, "format", 3, e.what());
  } catch (const CheckFailed& e) {
    return fail(verb, "check", 4, e.what());
  } catch (const SearchDiverged& e) {
    return fail(verb, "diverged", 1, e.what());
  } catch (const std::exception& e) {
    return fail(verb, "runtime", 1, e.what());
  }
  return fail(verb, "usage", 2, "unknown verb");
}
