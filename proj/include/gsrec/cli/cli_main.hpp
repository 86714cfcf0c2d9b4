#pragma once

// CLI11 wiring. Kept in a header so tests can drive the exact binary
// surface in-process; tools/main.cpp is a two-line wrapper.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gsrec/cli/commands.hpp"
#include "gsrec/cli/run_config.hpp"

namespace gsrec::cli {

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{
      "gsrec: a desk-scale laboratory for negatively sampled sequential "
      "recommenders"};
  app.require_subcommand(1);

  std::string config_path;
  std::string user;
  int jobs = 1;

  struct Sub {
    CLI::App* cmd;
    std::vector<std::string> overrides;
  };
  auto add = [&](const char* name, const char* help) {
    Sub s;
    s.cmd = app.add_subcommand(name, help);
    s.cmd->add_option("--config", config_path, "run config JSON file");
    s.cmd->add_option("overrides", s.overrides,
                      "dotted key=value config overrides (e.g. loss.t=0.9)");
    return s;
  };

  Sub prepare = add("prepare-data",
                    "load, filter, and split the interaction log; "
                    "write the split manifest");
  Sub train = add("train", "train a model into the run directory");
  Sub evaluate = add("evaluate",
                     "rank held-out targets with the run's best checkpoint");
  Sub diagnose = add("diagnose",
                     "probability mass and calibration diagnostics for the "
                     "run's best checkpoint");
  diagnose.cmd->add_option("--user", user,
                           "restrict diagnostics to one test user");
  Sub theory = add("verify-theory",
                   "write the converged-sigmoid oracle grid CSV");
  Sub sweep = add("sweep", "train the (k, t) grid and emit the NDCG@10 matrix");
  sweep.cmd->add_option("--jobs", jobs, "worker bound for grid points")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    nlohmann::json raw = nlohmann::json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw std::runtime_error("config: cannot open " + config_path);
      try {
        raw = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("config: cannot parse " + config_path + ": " +
                                 e.what());
      }
    }
    const Sub* active = nullptr;
    for (const Sub* s : {&prepare, &train, &evaluate, &diagnose, &theory,
                         &sweep}) {
      if (s->cmd->parsed()) active = s;
    }
    for (const std::string& kv : active->overrides) apply_override(raw, kv);
    RunConfig cfg = run_config_from_json(raw);

    if (prepare.cmd->parsed()) run_prepare_data(cfg);
    if (train.cmd->parsed()) run_train(cfg);
    if (evaluate.cmd->parsed()) run_evaluate(cfg);
    if (diagnose.cmd->parsed()) run_diagnose(cfg, user);
    if (theory.cmd->parsed()) run_verify_theory(cfg);
    if (sweep.cmd->parsed()) run_sweep(cfg, jobs);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int cli_main(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.push_back("gsrec");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  argv.reserve(full.size());
  for (const std::string& s : full) argv.push_back(s.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace gsrec::cli
