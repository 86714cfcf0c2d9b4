#pragma once

// Subcommand implementations. Each runner writes its artifacts under
// cfg.output_dir and throws on any failure, so the entry point can map
// "all artifacts written" to exit status 0. Every runner also writes the
// fully resolved config.json, which together with the seeds makes each
// artifact re-derivable.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gsrec/cli/run_config.hpp"
#include "gsrec/core/checkpoint.hpp"
#include "gsrec/data/dataset.hpp"
#include "gsrec/diag/overconfidence.hpp"
#include "gsrec/eval/evaluate.hpp"
#include "gsrec/theory/convergence.hpp"
#include "gsrec/trainer/trainer.hpp"

namespace gsrec::cli {

struct LoadedData {
  data::InteractionLog log;
  data::DatasetSplit split;
};

inline LoadedData load_dataset(const RunConfig& cfg) {
  if (cfg.dataset.path.empty())
    throw std::invalid_argument(
        "config: dataset.path is required for this subcommand");
  if (!std::filesystem::exists(cfg.dataset.path))
    throw std::runtime_error("dataset not found: " + cfg.dataset.path);
  LoadedData d;
  d.log = data::load_interactions(cfg.dataset.path,
                                  data::parse_log_format(cfg.dataset.format));
  d.log = data::kcore_filter_users(d.log, cfg.dataset.kcore);
  d.split = data::leave_one_out_split(d.log, cfg.split.n_validation_users,
                                      cfg.split.seed);
  return d;
}

namespace detail {

inline void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

inline void write_resolved_config(const RunConfig& cfg, int64_t catalog) {
  std::filesystem::create_directories(cfg.output_dir);
  write_json(run_config_json(cfg, catalog),
             (std::filesystem::path(cfg.output_dir) / "config.json").string());
}

inline std::string best_checkpoint_path(const RunConfig& cfg) {
  return (std::filesystem::path(cfg.output_dir) / "best.bin").string();
}

// Loads the best checkpoint of the run directory and cross-checks its
// recorded model section against the active config, so evaluating with
// mismatched dimensions fails with a clear message instead of a shape error.
inline nlohmann::json load_best_checkpoint(const RunConfig& cfg,
                                           int64_t catalog,
                                           ParameterStore& store) {
  std::string path = best_checkpoint_path(cfg);
  if (!std::filesystem::exists(path))
    throw std::runtime_error("no checkpoint at '" + path +
                             "'; run the train subcommand first");
  nlohmann::json meta = load_checkpoint(store, path);
  if (meta.contains("model") &&
      meta.at("model") != model::config_json(cfg.model, catalog)) {
    throw std::runtime_error(
        "checkpoint at '" + path +
        "' was trained with a different model or catalog than this config");
  }
  if (meta.contains("loss") && meta.at("loss") != trainer::loss_json(cfg.loss)) {
    std::cerr << "warning: checkpoint was trained with loss "
              << meta.at("loss").dump() << " but this config says "
              << trainer::loss_json(cfg.loss).dump()
              << "; probabilities are read out under the config's loss\n";
  }
  return meta;
}

inline std::string format_t(double t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", t);
  return buf;
}

}  // namespace detail

inline void run_prepare_data(const RunConfig& cfg) {
  LoadedData d = load_dataset(cfg);
  detail::write_resolved_config(cfg, d.log.catalog_size);
  nlohmann::json manifest = data::split_manifest(d.log, d.split,
                                                 cfg.split.seed);
  std::string path =
      (std::filesystem::path(cfg.output_dir) / "split.json").string();
  detail::write_json(manifest, path);
  std::cout << "wrote " << path << " (users=" << d.log.n_users()
            << " items=" << d.log.catalog_size
            << " interactions=" << d.log.n_interactions() << ")\n";
}

inline trainer::TrainRecord run_train(const RunConfig& cfg) {
  LoadedData d = load_dataset(cfg);
  ParameterStore store;
  trainer::TrainRecord rec = trainer::train(d.split, cfg.model, cfg.loss,
                                            cfg.train, cfg.output_dir, store);
  // train() wrote a model/loss/train config.json; replace it with the full
  // resolved run config so the run directory is self-describing.
  detail::write_resolved_config(cfg, d.log.catalog_size);
  std::cout << "trained " << rec.epochs.size() << " epochs, best epoch "
            << rec.best_epoch << " val ndcg@10 " << rec.best_ndcg10
            << "; run directory " << cfg.output_dir << "\n";
  return rec;
}

inline eval::RankReport run_evaluate(const RunConfig& cfg) {
  LoadedData d = load_dataset(cfg);
  ParameterStore store;
  nlohmann::json meta =
      detail::load_best_checkpoint(cfg, d.log.catalog_size, store);

  eval::EvalOptions opt;
  opt.exclude_seen = cfg.eval.exclude_seen;
  for (int64_t k : cfg.eval.cutoffs) opt.k_max = std::max(opt.k_max, k);
  eval::RankReport rep = eval::evaluate(cfg.model, store, d.split, opt);

  nlohmann::json j = eval::report_json(rep);
  j["checkpoint"] = detail::best_checkpoint_path(cfg);
  if (meta.contains("epoch")) j["checkpoint_epoch"] = meta.at("epoch");
  nlohmann::json cuts = nlohmann::json::array();
  for (int64_t k : cfg.eval.cutoffs) {
    double recall = 0.0, ndcg = 0.0;
    for (const eval::UserResult& u : rep.users) {
      recall += eval::recall_at_k(u.rank, k);
      ndcg += eval::ndcg_at_k(u.rank, k);
    }
    int64_t n = static_cast<int64_t>(rep.users.size());
    if (n > 0) {
      recall /= static_cast<double>(n);
      ndcg /= static_cast<double>(n);
    }
    cuts.push_back({{"k", k},
                    {"recall", recall},
                    {"ndcg", ndcg},
                    {"precision", recall / static_cast<double>(k)}});
  }
  j["cutoffs"] = cuts;

  detail::write_resolved_config(cfg, d.log.catalog_size);
  std::filesystem::path dir(cfg.output_dir);
  detail::write_json(j, (dir / "eval_report.json").string());
  eval::write_user_csv(rep, (dir / "eval_users.csv").string());
  std::cout << "test ndcg@10 " << rep.ndcg_at_10 << " recall@10 "
            << rep.recall_at_10 << " over " << rep.users.size()
            << " users; wrote " << (dir / "eval_report.json").string() << "\n";
  return rep;
}

inline diag::OverconfidenceReport run_diagnose(const RunConfig& cfg,
                                               const std::string& user) {
  LoadedData d = load_dataset(cfg);
  ParameterStore store;
  detail::load_best_checkpoint(cfg, d.log.catalog_size, store);

  diag::DiagOptions opt;
  opt.exclude_seen = cfg.eval.exclude_seen;
  if (!user.empty()) opt.users = {user};
  diag::OverconfidenceReport rep =
      diag::diagnose(cfg.model, store, d.split, cfg.loss, opt);

  detail::write_resolved_config(cfg, d.log.catalog_size);
  std::filesystem::path dir(cfg.output_dir);
  nlohmann::json j = diag::diag_json(rep);
  j["checkpoint"] = detail::best_checkpoint_path(cfg);
  detail::write_json(j, (dir / "diag_report.json").string());
  diag::write_rank_probability_csv(rep,
                                   (dir / "rank_probability.csv").string());
  diag::write_calibration_csv(rep, (dir / "calibration.csv").string());
  std::cout << "mean probability mass " << rep.mean_prob_mass << " ("
            << (rep.kind == diag::ProbKind::Softmax ? "softmax" : "sigmoid")
            << ") over " << rep.users.size() << " users; wrote "
            << (dir / "diag_report.json").string() << "\n";
  return rep;
}

// Writes the oracle-equivalence grid: for every (p, alpha, beta) point the
// closed-form converged sigmoid next to an independent numeric minimizer of
// the expected loss, plus (optionally, when theory.steps > 0) the sigma a
// from-scratch tabular SGD run actually reaches. Returns max |closed - num|.
inline double run_verify_theory(const RunConfig& cfg) {
  static const double ps[] = {0.001, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99};
  // alpha = 1/(n-1) with one sampled negative, so each alpha also names the
  // catalog size a tabular run needs to realize it exactly.
  static const int64_t catalogs[] = {1000, 101, 11, 3, 2};

  std::filesystem::create_directories(cfg.output_dir);
  std::filesystem::path dir(cfg.output_dir);
  std::ofstream out((dir / "theory.csv").string());
  if (!out) throw std::runtime_error("cannot write theory.csv");
  out.precision(17);
  out << "p,alpha,beta,closed_form,numeric_min,empirical_sigma,abs_error\n";

  double max_err = 0.0;
  int64_t row = 0;
  for (int64_t n : catalogs) {
    double alpha = 1.0 / static_cast<double>(n - 1);
    const double betas[] = {alpha, (1.0 + alpha) / 2.0, 1.0};
    const double ts[] = {1.0, 0.5, 0.0};  // beta_from_t(t, alpha) hits betas[]
    for (int bi = 0; bi < 3; ++bi) {
      for (double p : ps) {
        double closed = theory::converged_sigmoid(p, alpha, betas[bi]);
        double numeric = theory::numeric_minimizer(p, alpha, betas[bi]);
        double err = std::abs(closed - numeric);
        max_err = std::max(max_err, err);

        double empirical = std::numeric_limits<double>::quiet_NaN();
        if (cfg.theory.steps > 0) {
          theory::PriorDistribution prior;
          prior.p.assign(static_cast<size_t>(n),
                         (1.0 - p) / static_cast<double>(n - 1));
          prior.p[0] = p;
          double sum = 0.0;
          for (double pi : prior.p) sum += pi;
          for (double& pi : prior.p) pi /= sum;
          theory::ConvergenceExperiment ex =
              theory::synthetic_convergence_experiment(
                  prior, 1, ts[bi], cfg.theory.steps, cfg.theory.lr,
                  cfg.theory.seed + static_cast<uint64_t>(row));
          empirical = ex.sigma[0];
        }
        out << p << ',' << alpha << ',' << betas[bi] << ',' << closed << ','
            << numeric << ',' << empirical << ',' << err << "\n";
        ++row;
      }
    }
  }
  detail::write_resolved_config(cfg, -1);
  std::cout << row << " grid points, max |closed_form - numeric_min| = "
            << max_err << "; wrote " << (dir / "theory.csv").string() << "\n";
  return max_err;
}

// Trains one run per (k, t) grid point on a shared split and emits the
// test NDCG@10 matrix. Points run sequentially; --jobs is accepted for
// interface stability but this build does not fan out worker processes.
inline std::vector<std::vector<double>> run_sweep(const RunConfig& cfg,
                                                  int jobs) {
  if (jobs < 1) throw std::invalid_argument("sweep: --jobs must be >= 1");
  LoadedData d = load_dataset(cfg);
  for (int64_t k : cfg.sweep.k_grid) {
    if (k > d.log.catalog_size - 1)
      throw std::runtime_error(
          "sweep: grid point k=" + std::to_string(k) +
          " needs a catalog of at least " + std::to_string(k + 1) +
          " items, dataset has " + std::to_string(d.log.catalog_size));
  }
  detail::write_resolved_config(cfg, d.log.catalog_size);

  std::filesystem::path dir(cfg.output_dir);
  std::vector<std::vector<double>> matrix;
  for (int64_t k : cfg.sweep.k_grid) {
    std::vector<double> rowv;
    for (double t : cfg.sweep.t_grid) {
      RunConfig point = cfg;
      point.loss.kind = LossSpec::Kind::GBCE;
      point.loss.k = k;
      point.loss.t = t;
      point.output_dir =
          (dir / "sweep" /
           ("k" + std::to_string(k) + "_t" + detail::format_t(t)))
              .string();
      ParameterStore store;
      trainer::train(d.split, point.model, point.loss, point.train,
                     point.output_dir, store);
      detail::write_resolved_config(point, d.log.catalog_size);

      eval::EvalOptions opt;
      opt.exclude_seen = cfg.eval.exclude_seen;
      opt.top_k = 10;
      opt.k_max = 10;
      eval::RankReport rep = eval::evaluate(point.model, store, d.split, opt);
      rowv.push_back(rep.ndcg_at_10);
      std::cout << "k=" << k << " t=" << detail::format_t(t) << " ndcg@10 "
                << rep.ndcg_at_10 << "\n";
    }
    matrix.push_back(std::move(rowv));
  }

  std::ofstream out((dir / "sweep.csv").string());
  if (!out) throw std::runtime_error("cannot write sweep.csv");
  out.precision(17);
  out << "k";
  for (double t : cfg.sweep.t_grid) out << ",t=" << detail::format_t(t);
  out << "\n";
  for (size_t i = 0; i < cfg.sweep.k_grid.size(); ++i) {
    out << cfg.sweep.k_grid[i];
    for (double v : matrix[i]) out << ',' << v;
    out << "\n";
  }
  std::cout << "wrote " << (dir / "sweep.csv").string() << "\n";
  return matrix;
}

}  // namespace gsrec::cli
