#pragma once

// Full-catalog evaluation of a model against a leave-one-out split. Every
// item is scored for every evaluated user; nothing is sampled.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gsrec/core/gemm.hpp"
#include "gsrec/data/dataset.hpp"
#include "gsrec/eval/metrics.hpp"
#include "gsrec/losses/losses.hpp"
#include "gsrec/model/sasrec.hpp"

namespace gsrec::eval {

struct EvalOptions {
  int64_t top_k = 10;
  int64_t k_max = 100;  // precision curve reach
  bool exclude_seen = true;
  bool rank_validation_targets = false;  // rank the held-out validation item
  int64_t batch_size = 64;
};

struct UserResult {
  std::string user;
  int64_t rank = 0;
  std::vector<int64_t> top_items;
  std::vector<double> top_scores;
  std::vector<double> top_probs;  // sigmoid of the score
};

struct RankReport {
  std::vector<UserResult> users;
  double recall_at_1 = 0.0;
  double recall_at_10 = 0.0;
  double ndcg_at_10 = 0.0;
  std::vector<double> precision_curve;
  bool exclude_seen = true;
  bool validation_mode = false;
  std::string tie_rule = "ascending-item-index";
  int64_t catalog_size = 0;
  int64_t scores_examined = 0;
};

inline RankReport evaluate(const model::ModelConfig& cfg,
                           ParameterStore& store,
                           const data::DatasetSplit& split,
                           const EvalOptions& opt = {}) {
  cfg.validate();
  if (opt.top_k < 1 || opt.k_max < 1 || opt.batch_size < 1)
    throw std::invalid_argument("evaluate: top_k, k_max, batch_size >= 1");

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
  std::vector<Job> jobs;
  if (opt.rank_validation_targets) {
    for (const std::string& user : split.validation_users) {
      jobs.push_back({user, &split.train.users.at(user), 0,
                      split.validation_targets.at(user)});
    }
  } else {
    for (const auto& [user, target] : split.test_targets) {
      auto it = split.validation_targets.find(user);
      jobs.push_back({user, &split.train.users.at(user),
                      it == split.validation_targets.end() ? 0 : it->second,
                      target});
    }
  }
  if (jobs.empty()) throw std::invalid_argument("evaluate: no users to rank");

  RankReport report;
  report.exclude_seen = opt.exclude_seen;
  report.validation_mode = opt.rank_validation_targets;
  report.catalog_size = catalog;

  CompGraph g(&store);
  NodeId hidden = model::forward_hidden(g, cfg);

  std::vector<double> scores(static_cast<size_t>(catalog));
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

      std::vector<int64_t> excluded;
      if (opt.exclude_seen) {
        std::set<int64_t> seen(seqs[i - start].begin(),
                               seqs[i - start].end());
        seen.erase(job.target);  // the target itself is never excluded
        excluded.assign(seen.begin(), seen.end());
      }

      UserResult ur;
      ur.user = job.user;
      ur.rank = rank_target(scores, job.target, excluded,
                            &report.scores_examined);

      int64_t want = std::min(opt.top_k, catalog);
      std::vector<int64_t> order;
      order.reserve(static_cast<size_t>(catalog));
      for (int64_t id = 1; id <= catalog; ++id) {
        if (!excluded.empty() &&
            std::binary_search(excluded.begin(), excluded.end(), id))
          continue;
        order.push_back(id);
      }
      want = std::min<int64_t>(want, static_cast<int64_t>(order.size()));
      auto better = [&](int64_t lhs, int64_t rhs) {
        double ls = scores[static_cast<size_t>(lhs - 1)];
        double rs = scores[static_cast<size_t>(rhs - 1)];
        return ls > rs || (ls == rs && lhs < rhs);
      };
      std::partial_sort(order.begin(), order.begin() + want, order.end(),
                        better);
      for (int64_t j = 0; j < want; ++j) {
        int64_t id = order[static_cast<size_t>(j)];
        ur.top_items.push_back(id);
        ur.top_scores.push_back(scores[static_cast<size_t>(id - 1)]);
        ur.top_probs.push_back(
            scalar::sigmoid(scores[static_cast<size_t>(id - 1)]));
      }
      report.users.push_back(std::move(ur));
    }
  }

  std::vector<int64_t> ranks;
  ranks.reserve(report.users.size());
  double r1 = 0.0, r10 = 0.0, n10 = 0.0;
  for (const UserResult& ur : report.users) {
    ranks.push_back(ur.rank);
    r1 += recall_at_k(ur.rank, 1);
    r10 += recall_at_k(ur.rank, 10);
    n10 += ndcg_at_k(ur.rank, 10);
  }
  double inv = 1.0 / static_cast<double>(report.users.size());
  report.recall_at_1 = r1 * inv;
  report.recall_at_10 = r10 * inv;
  report.ndcg_at_10 = n10 * inv;
  report.precision_curve = precision_at_k_curve(ranks, opt.k_max);
  return report;
}

inline nlohmann::json report_json(const RankReport& r) {
  nlohmann::json j;
  j["users"] = r.users.size();
  j["catalog_size"] = r.catalog_size;
  j["recall_at_1"] = r.recall_at_1;
  j["recall_at_10"] = r.recall_at_10;
  j["ndcg_at_10"] = r.ndcg_at_10;
  j["precision_curve"] = r.precision_curve;
  j["exclude_seen"] = r.exclude_seen;
  j["validation_mode"] = r.validation_mode;
  j["tie_rule"] = r.tie_rule;
  j["scores_examined"] = r.scores_examined;
  return j;
}

inline void write_user_csv(const RankReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "user,rank,top_items,top_scores,top_probs\n";
  for (const UserResult& ur : r.users) {
    out << ur.user << ',' << ur.rank << ',';
    auto join = [&out](const auto& v, auto fmt) {
      for (size_t i = 0; i < v.size(); ++i) {
        if (i) out << '|';
        fmt(v[i]);
      }
    };
    join(ur.top_items, [&out](int64_t x) { out << x; });
    out << ',';
    out.setf(std::ios::fmtflags(0), std::ios::floatfield);
    out.precision(17);
    join(ur.top_scores, [&out](double x) { out << x; });
    out << ',';
    join(ur.top_probs, [&out](double x) { out << x; });
    out << '\n';
  }
}

}  // namespace gsrec::eval
