// Runs one configured experiment and writes its tables to the output
// directory. Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <iostream>

#include <CLI11.hpp>

#include "earnlab/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"earnlab: earnings forecasting experiments"};
  std::string config_path;
  std::string out_dir;
  std::string study;
  std::uint64_t seed = 0;
  int threads = 0;
  app.add_option("-c,--config", config_path, "experiment TOML file")->required();
  app.add_option("-o,--out", out_dir, "output directory (overrides [experiment] out)");
  app.add_option("-s,--seed", seed, "master seed (overrides [experiment] seed)");
  app.add_option("-t,--threads", threads, "worker threads; results do not depend on it");
  app.add_option("--study", study, "headline, placebo-perm, placebo-short, loco or bootstrap");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  earnlab::ExperimentConfig cfg;
  try {
    cfg = earnlab::load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (app.count("--seed") > 0) cfg.seed = seed;
    if (threads > 0) cfg.threads = threads;
    if (!study.empty()) cfg.study = study;
    cfg.validate();
  } catch (const earnlab::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    const auto r = earnlab::run_and_write(cfg);
    std::cerr << "wrote " << cfg.out_dir << " (" << r.roster.size() << " forecasters, panel " << r.panel_hash << ")\n";
  } catch (const earnlab::Error& e) {
    std::cerr << (e.kind() == earnlab::ErrorKind::Config ? "config error: " : "error: ") << e.what() << "\n";
    return e.kind() == earnlab::ErrorKind::Config ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
