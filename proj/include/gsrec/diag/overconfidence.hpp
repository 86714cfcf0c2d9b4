#pragma once
// Overconfidence instrumentation: per-rank predicted probabilities, total
// probability mass over the catalog, and calibration curves comparing mean
// predicted probability@K against Precision@K with a closed-form overlay.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsrec/core/gemm.hpp"
#include "gsrec/core/graph.hpp"
#include "gsrec/data/dataset.hpp"
#include "gsrec/eval/metrics.hpp"
#include "gsrec/losses/losses.hpp"
#include "gsrec/model/sasrec.hpp"
#include "gsrec/sampling/negatives.hpp"
#include "gsrec/theory/convergence.hpp"
#include "nlohmann/json.hpp"

namespace gsrec::diag {

// Read-out family for turning scores into probabilities. Only models trained
// with the full softmax report softmax probabilities; sampled-softmax scores
// are still read through the logistic sigmoid.
enum class ProbKind { Sigmoid, Softmax };

inline ProbKind prob_kind(const LossSpec& spec) {
  return spec.kind == LossSpec::Kind::Softmax ? ProbKind::Softmax
                                              : ProbKind::Sigmoid;
}

struct DiagOptions {
  int64_t k_max = 100;
  bool exclude_seen = true;
  int64_t batch_size = 64;
  // Empty means every test user; otherwise restrict to these users, which
  // must all have test targets.
  std::vector<std::string> users;
};

struct UserDiagnostics {
  std::string user;
  int64_t rank = 0;        // rank of the held-out target
  double prob_mass = 0.0;  // over the full catalog, nothing excluded
  std::vector<double> prob_at_rank;  // ranked list, min(k_max, candidates)
};

struct OverconfidenceReport {
  std::vector<UserDiagnostics> users;
  double mean_prob_mass = 0.0;
  // All curves are indexed [K-1] for K in 1..k_max. Entries where no user
  // has K ranked candidates are NaN.
  std::vector<double> mean_prob_at_rank;  // mean probability at rank K
  std::vector<double> mean_prob_at_k;     // mean of per-user top-K means
  std::vector<double> precision_at_k;
  std::vector<double> theory_overlay;  // converged sigmoid of precision@K
  ProbKind kind = ProbKind::Sigmoid;
  double alpha = std::numeric_limits<double>::quiet_NaN();
  double beta = std::numeric_limits<double>::quiet_NaN();
  bool exclude_seen = true;
  int64_t catalog_size = 0;
};

// Full-catalog probability diagnostics over the held-out test users, fed the
// same sequences and exclusion rule as ranking evaluation so the precision
// curve here matches the evaluator's. The calibration overlay maps observed
// Precision@K through the converged-sigmoid fixed point at the run's
// (alpha, beta); it exists only for the sampled binary losses, whose
// minimizers that fixed point describes.
inline OverconfidenceReport diagnose(const model::ModelConfig& cfg,
                                     ParameterStore& store,
                                     const data::DatasetSplit& split,
                                     const LossSpec& spec,
                                     const DiagOptions& opt = {}) {
  cfg.validate();
  spec.validate();
  if (opt.k_max < 1 || opt.batch_size < 1)
    throw std::invalid_argument("diagnose: k_max and batch_size >= 1");

  const Tensor& table = store.get(
      cfg.tie_output_embeddings ? "item_embedding" : "output_embedding");
  int64_t catalog = table.dim(0) - 1;
  int64_t d = table.dim(1);

  struct Job {
    std::string user;
    const std::vector<int64_t>* history;
    int64_t extra = 0;  // validation item appended for test-time ranking
    int64_t target = 0;
  };
  auto make_job = [&](const std::string& user) {
    auto tt = split.test_targets.find(user);
    if (tt == split.test_targets.end())
      throw std::invalid_argument("diagnose: user '" + user +
                                  "' has no test target");
    auto vt = split.validation_targets.find(user);
    return Job{user, &split.train.users.at(user),
               vt == split.validation_targets.end() ? 0 : vt->second,
               tt->second};
  };
  std::vector<Job> jobs;
  if (opt.users.empty()) {
    for (const auto& [user, target] : split.test_targets)
      jobs.push_back(make_job(user));
  } else {
    for (const std::string& user : opt.users) jobs.push_back(make_job(user));
  }
  if (jobs.empty()) throw std::invalid_argument("diagnose: no users");

  OverconfidenceReport report;
  report.kind = prob_kind(spec);
  report.exclude_seen = opt.exclude_seen;
  report.catalog_size = catalog;
  if (spec.kind == LossSpec::Kind::BCE || spec.kind == LossSpec::Kind::GBCE) {
    report.alpha = sampling::sampling_rate(spec.k, catalog);
    report.beta = spec.kind == LossSpec::Kind::BCE
                      ? 1.0
                      : beta_from_t(spec.t, report.alpha);
  }

  CompGraph g(&store);
  NodeId hidden = model::forward_hidden(g, cfg);

  std::vector<double> scores(static_cast<size_t>(catalog));
  std::vector<double> probs(static_cast<size_t>(catalog));
  for (size_t start = 0; start < jobs.size();
       start += static_cast<size_t>(opt.batch_size)) {
    size_t stop = std::min(jobs.size(),
                           start + static_cast<size_t>(opt.batch_size));
    std::vector<std::vector<int64_t>> seqs;
    seqs.reserve(stop - start);
    for (size_t i = start; i < stop; ++i) {
      std::vector<int64_t> s = *jobs[i].history;
      if (jobs[i].extra != 0) s.push_back(jobs[i].extra);
      seqs.push_back(std::move(s));
    }
    model::InferenceBatch ib =
        model::make_inference_batch(seqs, cfg.max_seq_len);
    Bindings binds;
    binds["input_ids"] = ib.inputs;
    binds["key_valid"] = ib.mask;
    Tensor mask3 = ib.mask;
    mask3.reshape({static_cast<int64_t>(stop - start), cfg.max_seq_len, 1});
    binds["pos_mask"] = std::move(mask3);
    const Tensor& h = g.forward(hidden, binds);

    for (size_t i = start; i < stop; ++i) {
      const Job& job = jobs[i];
      const double* hv = h.data() +
                         ((static_cast<int64_t>(i - start) + 1) *
                              cfg.max_seq_len -
                          1) *
                             d;
      std::fill(scores.begin(), scores.end(), 0.0);  // gemm accumulates
      gemm_nt(1, catalog, d, hv, table.data() + d, scores.data());

      if (report.kind == ProbKind::Sigmoid) {
        for (size_t j = 0; j < scores.size(); ++j)
          probs[j] = scalar::sigmoid(scores[j]);
      } else {
        double m = *std::max_element(scores.begin(), scores.end());
        double z = 0.0;
        for (size_t j = 0; j < scores.size(); ++j) {
          probs[j] = std::exp(scores[j] - m);
          z += probs[j];
        }
        for (size_t j = 0; j < scores.size(); ++j) probs[j] /= z;
      }

      UserDiagnostics ud;
      ud.user = job.user;
      for (double p : probs) ud.prob_mass += p;

      std::vector<int64_t> excluded;
      if (opt.exclude_seen) {
        std::set<int64_t> seen(seqs[i - start].begin(),
                               seqs[i - start].end());
        seen.erase(job.target);  // the target itself is never excluded
        excluded.assign(seen.begin(), seen.end());
      }
      ud.rank = eval::rank_target(scores, job.target, excluded);

      std::vector<int64_t> order;
      order.reserve(static_cast<size_t>(catalog));
      for (int64_t id = 1; id <= catalog; ++id) {
        if (!excluded.empty() &&
            std::binary_search(excluded.begin(), excluded.end(), id))
          continue;
        order.push_back(id);
      }
      int64_t want = std::min<int64_t>(opt.k_max,
                                       static_cast<int64_t>(order.size()));
      auto better = [&](int64_t lhs, int64_t rhs) {
        double ls = scores[static_cast<size_t>(lhs - 1)];
        double rs = scores[static_cast<size_t>(rhs - 1)];
        return ls > rs || (ls == rs && lhs < rhs);
      };
      std::partial_sort(order.begin(), order.begin() + want, order.end(),
                        better);
      ud.prob_at_rank.reserve(static_cast<size_t>(want));
      for (int64_t j = 0; j < want; ++j)
        ud.prob_at_rank.push_back(
            probs[static_cast<size_t>(order[static_cast<size_t>(j)] - 1)]);
      report.users.push_back(std::move(ud));
    }
  }

  const double nan = std::numeric_limits<double>::quiet_NaN();
  report.mean_prob_at_rank.assign(static_cast<size_t>(opt.k_max), nan);
  report.mean_prob_at_k.assign(static_cast<size_t>(opt.k_max), nan);
  std::vector<int64_t> ranks;
  double mass = 0.0;
  for (const UserDiagnostics& ud : report.users) {
    ranks.push_back(ud.rank);
    mass += ud.prob_mass;
  }
  report.mean_prob_mass = mass / static_cast<double>(report.users.size());
  for (int64_t k = 1; k <= opt.k_max; ++k) {
    double at_rank = 0.0, topk = 0.0;
    int64_t covered = 0;
    for (const UserDiagnostics& ud : report.users) {
      if (static_cast<int64_t>(ud.prob_at_rank.size()) < k) continue;
      ++covered;
      at_rank += ud.prob_at_rank[static_cast<size_t>(k - 1)];
      double acc = 0.0;
      for (int64_t j = 0; j < k; ++j)
        acc += ud.prob_at_rank[static_cast<size_t>(j)];
      topk += acc / static_cast<double>(k);
    }
    if (covered > 0) {
      report.mean_prob_at_rank[static_cast<size_t>(k - 1)] =
          at_rank / static_cast<double>(covered);
      report.mean_prob_at_k[static_cast<size_t>(k - 1)] =
          topk / static_cast<double>(covered);
    }
  }
  report.precision_at_k = eval::precision_at_k_curve(ranks, opt.k_max);
  report.theory_overlay.assign(static_cast<size_t>(opt.k_max), nan);
  if (std::isfinite(report.alpha) && std::isfinite(report.beta)) {
    for (size_t j = 0; j < report.precision_at_k.size(); ++j) {
      report.theory_overlay[j] = theory::converged_sigmoid(
          report.precision_at_k[j], report.alpha, report.beta);
    }
  }
  return report;
}

// Figure-style single-user views.
inline std::vector<double> probability_at_rank(const model::ModelConfig& cfg,
                                               ParameterStore& store,
                                               const data::DatasetSplit& split,
                                               const LossSpec& spec,
                                               const std::string& user,
                                               int64_t k_max = 100) {
  DiagOptions opt;
  opt.k_max = k_max;
  opt.users = {user};
  return diagnose(cfg, store, split, spec, opt).users.at(0).prob_at_rank;
}

inline double probability_mass(const model::ModelConfig& cfg,
                               ParameterStore& store,
                               const data::DatasetSplit& split,
                               const LossSpec& spec,
                               const std::string& user) {
  DiagOptions opt;
  opt.k_max = 1;
  opt.users = {user};
  return diagnose(cfg, store, split, spec, opt).users.at(0).prob_mass;
}

inline nlohmann::json diag_json(const OverconfidenceReport& r) {
  nlohmann::json j;
  j["users"] = r.users.size();
  j["catalog_size"] = r.catalog_size;
  j["probability_kind"] =
      r.kind == ProbKind::Sigmoid ? "sigmoid" : "softmax";
  j["mean_probability_mass"] = r.mean_prob_mass;
  j["alpha"] = r.alpha;
  j["beta"] = r.beta;
  j["exclude_seen"] = r.exclude_seen;
  j["mean_probability_at_rank"] = r.mean_prob_at_rank;
  j["mean_probability_at_k"] = r.mean_prob_at_k;
  j["precision_at_k"] = r.precision_at_k;
  j["theory_overlay"] = r.theory_overlay;
  return j;
}

// rank,probability rows: the mean probability at each rank position, which is
// a single user's own curve when the report was restricted to one user.
inline void write_rank_probability_csv(const OverconfidenceReport& r,
                                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(17);
  out << "rank,probability\n";
  for (size_t j = 0; j < r.mean_prob_at_rank.size(); ++j)
    out << (j + 1) << ',' << r.mean_prob_at_rank[j] << '\n';
}

inline void write_calibration_csv(const OverconfidenceReport& r,
                                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(17);
  out << "k,precision,mean_probability,theory_overlay\n";
  for (size_t j = 0; j < r.precision_at_k.size(); ++j) {
    out << (j + 1) << ',' << r.precision_at_k[j] << ','
        << r.mean_prob_at_k[j] << ',' << r.theory_overlay[j] << '\n';
  }
}

}  // namespace gsrec::diag
