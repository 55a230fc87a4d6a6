// fedtune: run federated hyperparameter searches from a JSON config.
//
// Exit codes: 0 success, 2 invalid configuration, 3 runtime failure,
// 64 command line usage error.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedtune/fedtune.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitUsage = 64;

namespace ex = fedtune::experiment;

ex::ExperimentConfig load(const std::string& path, const std::vector<std::string>& sets) {
  return ex::load_config(path, sets, std::getenv("FEDTUNE_SEED"));
}

int cmd_run(const std::string& path, const std::vector<std::string>& sets, const std::string& out_dir,
            bool quiet) {
  auto cfg = load(path, sets);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  ex::prepare_output_dir(cfg.output_dir);
  ex::Logger log;
  if (!quiet) log = [](const std::string& line) { std::cerr << line << '\n'; };
  const auto report = ex::run_experiment(cfg, log);
  ex::emit_metrics(report, cfg.output_dir);
  for (const auto& s : report.seeds) {
    if (s.best) {
      const auto& b = s.trials[*s.best];
      std::printf("seed %llu: best %s objective=%.6g accuracy=%.4f\n",
                  static_cast<unsigned long long>(s.seed), b.config_id().c_str(), b.objective, b.accuracy);
    } else {
      std::printf("seed %llu: every trial diverged\n", static_cast<unsigned long long>(s.seed));
    }
  }
  std::printf("wrote %s\n", cfg.output_dir.c_str());
  return 0;
}

int cmd_validate(const std::string& path, const std::vector<std::string>& sets) {
  const auto cfg = load(path, sets);
  std::cout << ex::to_json(cfg).dump(2) << '\n';
  return 0;
}

int cmd_grid(const std::string& path, const std::vector<std::string>& sets) {
  const auto cfg = load(path, sets);
  for (const auto& d : cfg.search_space.dims) {
    std::printf("%s (%s):", d.name.c_str(), fedtune::hpo::to_string(d.scale));
    for (double v : fedtune::hpo::grid(d)) std::printf(" %g", v);
    std::printf("\n");
  }
  std::printf("configs: %.0f\n", cfg.search_space.cardinality());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated hyperparameter search with grouped asynchronous feedback"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> sets;
  bool quiet = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config_path, "Experiment config (JSON)")->required();
    sub->add_option("--set", sets, "Override a field, e.g. --set hpo.sampler=random");
  };
  auto* run = app.add_subcommand("run", "Run the search and write metrics");
  add_common(run);
  run->add_option("-o,--out", out_dir, "Output directory (overrides output_dir)");
  run->add_flag("-q,--quiet", quiet, "Suppress per-trial progress lines");
  auto* val = app.add_subcommand("validate", "Check a config and print it with defaults filled in");
  add_common(val);
  auto* grid = app.add_subcommand("grid", "Print the discrete grid of every tuned hyperparameter");
  add_common(grid);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*run) return cmd_run(config_path, sets, out_dir, quiet);
    if (*val) return cmd_validate(config_path, sets);
    if (*grid) return cmd_grid(config_path, sets);
  } catch (const fedtune::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
