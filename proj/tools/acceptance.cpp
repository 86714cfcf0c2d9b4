// Acceptance gate: nine checks, one PASS/FAIL line each, tolerances pinned
// below. Checks 1-6 are self-contained oracle and property checks. Checks
// 7-8 train desk-scale models on the MovieLens-1M interaction log (looked
// up at $GSREC_ML1M, then data/ml-1m.txt, whitespace "user item" lines in
// time order) and check 9's clamp-rate bound reads check 7's training
// record. When that dataset is absent those checks are reported FAIL with
// the reason; the exit status covers the checks whose inputs exist, so the
// report stays honest about what did not run without masking library
// regressions.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gsrec/core/gradcheck.hpp"
#include "gsrec/core/graph.hpp"
#include "gsrec/core/rng.hpp"
#include "gsrec/data/dataset.hpp"
#include "gsrec/diag/overconfidence.hpp"
#include "gsrec/eval/evaluate.hpp"
#include "gsrec/eval/metrics.hpp"
#include "gsrec/losses/losses.hpp"
#include "gsrec/model/sasrec.hpp"
#include "gsrec/sampling/negatives.hpp"
#include "gsrec/theory/convergence.hpp"
#include "gsrec/trainer/trainer.hpp"

namespace {

using namespace gsrec;

// check 1: closed form vs numeric minimizer over the full grid
constexpr double kOracleTol = 1e-6;
constexpr double kOracleBudgetSec = 10.0;

// check 2: tabular SGD convergence to the predicted sigmoids
constexpr double kConvergenceTol = 0.02;
constexpr int64_t kConvergenceSteps = 200000;
constexpr int kConvergenceSeeds = 5;
constexpr double kConvergenceLr = 0.1;
constexpr double kConvergenceBudgetSec = 120.0;

// check 3: score-transform identity between the two loss forms
constexpr int kIdentityDraws = 10000;
constexpr double kIdentityTol = 1e-9;
constexpr double kIdentityExactTol = 1e-12;
constexpr double kIdentityBudgetSec = 5.0;

// check 4: finite-difference gradients
constexpr double kGradEps = 1e-5;
constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetSec = 60.0;

// check 5: negative-sampler uniformity and positive exclusion
constexpr int64_t kChiCatalog = 1000;
constexpr int64_t kChiDraws = 1000000;
// upper 0.001 tail of chi-square with 998 degrees of freedom (inverse CDF;
// Wilson-Hilferty gives 1141.796, exact value pinned)
constexpr double kChiCrit = 1141.778840572295;

// check 6: ranking metrics vs a full-sort oracle
constexpr int kMetricVectors = 1000;
constexpr double kRecallPrecisionTol = 1e-12;  // fp rounding of 1/K only

// checks 7-9: desk-scale training runs
constexpr double kDirectionalGain = 1.15;  // relative NDCG@10 improvement
constexpr double kMassRatioMin = 20.0;
constexpr double kCalibrationTol = 0.1;
constexpr double kClampRateMax = 0.001;

struct CheckResult {
  bool pass = false;
  bool runnable = true;  // false = inputs for this check do not exist here
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream ss;
  ss.precision(prec);
  ss << v;
  return ss.str();
}

// ---------------------------------------------------------------- check 1

CheckResult check_oracle_grid() {
  auto t0 = std::chrono::steady_clock::now();
  const double ps[] = {0.001, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99};
  const int64_t catalogs[] = {1000, 101, 11, 3, 2};  // alpha = 1/(n-1)
  double max_err = 0.0;
  int points = 0;
  for (int64_t n : catalogs) {
    double alpha = 1.0 / static_cast<double>(n - 1);
    for (double beta : {alpha, (1.0 + alpha) / 2.0, 1.0}) {
      for (double p : ps) {
        double closed = theory::converged_sigmoid(p, alpha, beta);
        double numeric = theory::numeric_minimizer(p, alpha, beta);
        if (!std::isfinite(closed) || !std::isfinite(numeric)) {
          return {false, true, "non-finite value at p=" + fmt(p)};
        }
        max_err = std::max(max_err, std::abs(closed - numeric));
        ++points;
      }
    }
  }
  double secs = seconds_since(t0);
  CheckResult r;
  r.pass = max_err < kOracleTol && secs < kOracleBudgetSec;
  r.detail = "max |closed-numeric| = " + fmt(max_err, 3) + " over " +
             std::to_string(points) + " points in " + fmt(secs, 3) + " s";
  return r;
}

// ---------------------------------------------------------------- check 2

CheckResult check_synthetic_convergence(bool* stability_clean) {
  auto t0 = std::chrono::steady_clock::now();
  theory::PriorDistribution prior;
  prior.p = {0.5, 0.3, 0.2};
  // targets: calibrated run reproduces the prior; plain-BCE run lands on
  // the inflated fixed points for alpha = 1/2
  const std::vector<double> bce_anchor = {0.6667, 0.4615, 0.3333};
  double worst = 0.0;
  std::string worst_case;
  for (int seed = 1; seed <= kConvergenceSeeds; ++seed) {
    for (double t : {1.0, 0.0}) {
      theory::ConvergenceExperiment ex;
      try {
        ex = theory::synthetic_convergence_experiment(
            prior, 1, t, kConvergenceSteps, kConvergenceLr,
            static_cast<uint64_t>(seed));
      } catch (const std::exception& e) {
        *stability_clean = false;
        return {false, true, std::string("experiment diverged: ") + e.what()};
      }
      const std::vector<double>& want = (t == 1.0) ? prior.p : bce_anchor;
      for (size_t i = 0; i < want.size(); ++i) {
        if (!std::isfinite(ex.sigma[i])) *stability_clean = false;
        double dev = std::abs(ex.sigma[i] - want[i]);
        if (dev > worst) {
          worst = dev;
          worst_case = "t=" + fmt(t, 2) + " seed=" + std::to_string(seed) +
                       " item=" + std::to_string(i);
        }
      }
    }
  }
  double secs = seconds_since(t0);
  CheckResult r;
  r.pass = worst <= kConvergenceTol && secs < kConvergenceBudgetSec;
  r.detail = "max |sigma-target| = " + fmt(worst, 4) + " (" + worst_case +
             "), " + std::to_string(kConvergenceSeeds) + " seeds x " +
             std::to_string(kConvergenceSteps) + " steps in " + fmt(secs, 3) +
             " s";
  return r;
}

// ---------------------------------------------------------------- check 3

// The production loss routes the positive score through the gamma transform
// into plain sampled BCE; the independent side here is the direct form
// -(beta log sigmoid(s+) + sum log(1 - sigmoid(s-))) / (k+1).
CheckResult check_transform_identity(bool* stability_clean) {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng = Rng::rooted(42);
  double worst_general = 0.0, worst_exact = 0.0;
  for (int d = 0; d < kIdentityDraws; ++d) {
    double s_plus = rng.gaussian(0.0, 2.0);
    int64_t k = 1 + static_cast<int64_t>(rng.uniform_index(8));
    std::vector<double> s_minus(static_cast<size_t>(k));
    for (double& s : s_minus) s = rng.gaussian(0.0, 2.0);
    double beta = rng.uniform(0.01, 1.0);

    double direct = beta * scalar::softplus(-s_plus);
    for (double s : s_minus) direct += scalar::softplus(s);
    direct /= static_cast<double>(k + 1);

    double via_transform = scalar::gbce(s_plus, s_minus, beta);
    if (!std::isfinite(direct) || !std::isfinite(via_transform))
      *stability_clean = false;
    worst_general = std::max(worst_general, std::abs(direct - via_transform));

    double bce_direct = scalar::softplus(-s_plus);
    for (double s : s_minus) bce_direct += scalar::softplus(s);
    bce_direct /= static_cast<double>(k + 1);
    worst_exact = std::max(
        worst_exact, std::abs(scalar::gbce(s_plus, s_minus, 1.0) -
                              scalar::bce_sampled(s_plus, s_minus)));
    worst_exact = std::max(worst_exact,
                           std::abs(bce_direct -
                                    scalar::bce_sampled(s_plus, s_minus)));
  }
  double secs = seconds_since(t0);
  CheckResult r;
  r.pass = worst_general <= kIdentityTol && worst_exact <= kIdentityExactTol &&
           secs < kIdentityBudgetSec;
  r.detail = "max |direct-transformed| = " + fmt(worst_general, 3) +
             ", beta=1 max = " + fmt(worst_exact, 3) + " over " +
             std::to_string(kIdentityDraws) + " draws in " + fmt(secs, 3) +
             " s";
  return r;
}

// ---------------------------------------------------------------- check 4

void fill_gaussian(Tensor& t, Rng& rng, double scale = 1.0) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.gaussian();
}

void fill_away_from_zero(Tensor& t, Rng& rng, double gap) {
  for (int64_t i = 0; i < t.numel(); ++i) {
    double v = rng.gaussian();
    if (std::abs(v) < gap) v = (v >= 0.0 ? gap : -gap) * 2.0;
    t[i] = v;
  }
}

CheckResult check_gradients_everywhere(bool* stability_clean) {
  auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_op;
  auto track = [&](const std::string& name, const GradCheckResult& res) {
    if (!std::isfinite(res.max_rel_error)) *stability_clean = false;
    if (res.max_rel_error > worst) {
      worst = res.max_rel_error;
      worst_op = name + " (" + res.worst_coord + ")";
    }
  };
  GradCheckOptions opt;
  opt.eps = kGradEps;

  Rng rng = Rng::rooted(314);

  // every unary elementwise op through a scalar mean root
  auto unary = [&](const char* name, auto build, bool positive, double gap) {
    ParameterStore store;
    Tensor& x = store.create("x", {3, 4});
    if (positive) {
      for (int64_t i = 0; i < x.numel(); ++i)
        x[i] = 0.2 + std::abs(rng.gaussian());
    } else if (gap > 0.0) {
      fill_away_from_zero(x, rng, gap);
    } else {
      fill_gaussian(x, rng);
    }
    CompGraph g(&store);
    NodeId root = g.mean(build(g, g.param("x")));
    track(name, check_gradients(g, root, {}, store, opt));
  };
  unary("sigmoid", [](CompGraph& g, NodeId a) { return g.sigmoid(a); }, false,
        0.0);
  unary("softplus", [](CompGraph& g, NodeId a) { return g.softplus(a); },
        false, 0.0);
  unary("gelu", [](CompGraph& g, NodeId a) { return g.gelu(a); }, false, 0.0);
  unary("relu", [](CompGraph& g, NodeId a) { return g.relu(a); }, false, 1e-3);
  unary("log", [](CompGraph& g, NodeId a) { return g.log(a); }, true, 0.0);
  unary("log_expm1", [](CompGraph& g, NodeId a) { return g.log_expm1(a); },
        true, 0.0);
  unary("scale", [](CompGraph& g, NodeId a) { return g.scale(a, -2.5); },
        false, 0.0);
  unary("clamp_min",
        [](CompGraph& g, NodeId a) { return g.clamp_min(a, 0.0); }, false,
        1e-3);
  unary("reshape",
        [](CompGraph& g, NodeId a) {
          return g.sigmoid(g.reshape(a, {4, 3}));
        },
        false, 0.0);
  unary("sum", [](CompGraph& g, NodeId a) { return g.sum(a); }, false, 0.0);
  unary("sum_last", [](CompGraph& g, NodeId a) { return g.sum_last(a); },
        false, 0.0);
  unary("mean_last", [](CompGraph& g, NodeId a) { return g.mean_last(a); },
        false, 0.0);
  unary("logsumexp_last",
        [](CompGraph& g, NodeId a) { return g.logsumexp_last(a); }, false,
        0.0);

  // binary ops, including one broadcast mode (logaddexp is same-shape only)
  for (const char* mode : {"same", "broadcast"}) {
    bool same = mode == std::string("same");
    ParameterStore store;
    Tensor& a = store.create("a", {2, 3, 4});
    Tensor& b = store.create("b", same ? Shape{2, 3, 4} : Shape{4});
    fill_gaussian(a, rng);
    fill_gaussian(b, rng);
    CompGraph g(&store);
    NodeId pa = g.param("a"), pb = g.param("b");
    NodeId y = g.add(g.sigmoid(g.add(pa, pb)), g.sigmoid(g.mul(pa, pb)));
    if (same) y = g.add(y, g.sigmoid(g.logaddexp(pa, pb)));
    track(std::string("add/mul/logaddexp ") + mode,
          check_gradients(g, g.mean(y), {}, store, opt));
  }

  // matmul, both transpose modes
  for (bool trans : {false, true}) {
    ParameterStore store;
    Tensor& a = store.create("a", {3, 4});
    Tensor& b = store.create("b", trans ? Shape{5, 4} : Shape{4, 5});
    fill_gaussian(a, rng, 0.5);
    fill_gaussian(b, rng, 0.5);
    CompGraph g(&store);
    NodeId y = g.matmul(g.param("a"), g.param("b"), trans);
    track(trans ? "matmul_nt" : "matmul_nn",
          check_gradients(g, g.mean(g.sigmoid(y)), {}, store, opt));
  }

  // index-driven ops
  {
    ParameterStore store;
    Tensor& emb = store.create("emb", {6, 3});
    Tensor& h = store.create("h", {2, 4, 3});
    fill_gaussian(emb, rng, 0.5);
    fill_gaussian(h, rng, 0.5);
    CompGraph g(&store);
    NodeId idx = g.input("idx");
    NodeId cand = g.input("cand");
    NodeId e = g.embedding(g.param("emb"), idx);
    NodeId gd = g.gather_dot(g.param("h"), g.param("emb"), cand);
    NodeId cs = g.catalog_scores(g.param("h"), g.param("emb"));
    NodeId root = g.mean(g.add(
        g.mean_last(g.sigmoid(gd)),
        g.add(g.mean_last(e), g.mean_last(g.sigmoid(cs)))));
    Bindings binds;
    binds["idx"] = Tensor({2, 4}, {0, 1, 2, 3, 4, 5, 1, 2});
    binds["cand"] = Tensor({2, 4, 2},
                           {1, 2, 3, 4, 5, 1, 2, 3, 4, 5, 1, 2, 3, 4, 5, 1});
    track("embedding/gather_dot/catalog_scores",
          check_gradients(g, root, binds, store, opt));
  }

  // layer_norm
  {
    ParameterStore store;
    Tensor& x = store.create("x", {3, 5});
    Tensor& gain = store.create("gain", {5});
    Tensor& bias = store.create("bias", {5});
    fill_gaussian(x, rng);
    for (int64_t i = 0; i < 5; ++i) gain[i] = 1.0 + 0.1 * rng.gaussian();
    fill_gaussian(bias, rng, 0.1);
    CompGraph g(&store);
    NodeId y = g.layer_norm(g.param("x"), g.param("gain"), g.param("bias"));
    track("layer_norm", check_gradients(g, g.mean(g.sigmoid(y)), {}, store,
                                        opt));
  }

  // causal attention with a left-padded row
  {
    ParameterStore store;
    for (const char* n : {"q", "k", "v"}) {
      Tensor& t = store.create(n, {2, 4, 6});
      fill_gaussian(t, rng, 0.7);
    }
    CompGraph g(&store);
    NodeId valid = g.input("valid");
    NodeId y = g.causal_attention(g.param("q"), g.param("k"), g.param("v"),
                                  valid, 2);
    Bindings binds;
    binds["valid"] = Tensor({2, 4}, {1, 1, 1, 1, 0, 0, 1, 1});
    track("causal_attention",
          check_gradients(g, g.mean(g.sigmoid(y)), binds, store, opt));
  }

  // dropout under a fixed mask seed
  {
    ParameterStore store;
    Tensor& x = store.create("x", {4, 8});
    fill_gaussian(x, rng);
    CompGraph g(&store);
    NodeId root = g.mean(g.dropout(g.sigmoid(g.param("x")), 0.3));
    GradCheckOptions dopt = opt;
    dopt.training = true;
    dopt.dropout_seed = 99;
    track("dropout", check_gradients(g, root, {}, store, dopt));
  }

  // the full tiny-config model, training graph end to end
  {
    model::ModelConfig cfg;
    cfg.max_seq_len = 5;
    cfg.embed_dim = 8;
    cfg.n_blocks = 1;
    cfg.n_heads = 2;
    cfg.dropout_rate = 0.2;
    const int64_t catalog = 9;
    LossSpec spec;
    spec.kind = LossSpec::Kind::GBCE;
    spec.k = 2;
    spec.t = 0.75;
    ParameterStore store;
    model::init_params(store, cfg, catalog, 11);
    CompGraph g(&store);
    model::TrainingGraph tg = model::build_training_graph(g, cfg, spec,
                                                          catalog);
    model::SequenceBatch batch = model::make_batch(
        {{3, 1, 4, 1, 5, 9}, {2, 6, 5}, {8, 2, 7, 1}}, cfg.max_seq_len);
    Rng neg_rng = Rng::rooted(23);
    Bindings binds = model::training_bindings(batch, cfg, spec, catalog,
                                              neg_rng);
    GradCheckOptions mopt = opt;
    mopt.training = true;
    mopt.dropout_seed = 7;
    track("tiny model", check_gradients(g, tg.loss, binds, store, mopt));
  }

  double secs = seconds_since(t0);
  CheckResult r;
  r.pass = worst < kGradTol && secs < kGradBudgetSec;
  r.detail = "max rel error = " + fmt(worst, 3) + " at " + worst_op + " in " +
             fmt(secs, 3) + " s";
  return r;
}

// ---------------------------------------------------------------- check 5

CheckResult check_sampler() {
  Rng rng = Rng::rooted(505);
  const int64_t positive = 137;
  sampling::NegativeSampleSet set =
      sampling::sample_negatives(positive, kChiCatalog, kChiDraws, rng);
  std::vector<int64_t> counts(static_cast<size_t>(kChiCatalog) + 1, 0);
  for (int64_t id : set.indices) ++counts[static_cast<size_t>(id)];
  if (counts[static_cast<size_t>(positive)] != 0) {
    return {false, true, "positive sampled " +
                             std::to_string(counts[(size_t)positive]) +
                             " times in " + std::to_string(kChiDraws)};
  }
  double expect = static_cast<double>(kChiDraws) /
                  static_cast<double>(kChiCatalog - 1);
  double chi2 = 0.0;
  for (int64_t id = 1; id <= kChiCatalog; ++id) {
    if (id == positive) continue;
    double d = static_cast<double>(counts[static_cast<size_t>(id)]) - expect;
    chi2 += d * d / expect;
  }

  // exhaustive positive exclusion and coverage on tiny catalogs
  int64_t combos = 0;
  for (int64_t catalog = 2; catalog <= 5; ++catalog) {
    for (int64_t pos = 1; pos <= catalog; ++pos) {
      Rng r2 = Rng::rooted(600 + static_cast<uint64_t>(catalog * 10 + pos));
      sampling::NegativeSampleSet s =
          sampling::sample_negatives(pos, catalog, 200 * (catalog - 1), r2);
      std::vector<bool> seen(static_cast<size_t>(catalog) + 1, false);
      for (int64_t id : s.indices) {
        if (id == pos)
          return {false, true,
                  "positive " + std::to_string(pos) + " sampled at catalog " +
                      std::to_string(catalog)};
        seen[static_cast<size_t>(id)] = true;
      }
      for (int64_t id = 1; id <= catalog; ++id) {
        if (id != pos && !seen[static_cast<size_t>(id)])
          return {false, true,
                  "candidate " + std::to_string(id) + " never drawn at "
                  "catalog " + std::to_string(catalog)};
      }
      ++combos;
    }
  }

  CheckResult r;
  r.pass = chi2 < kChiCrit;
  r.detail = "chi-square " + fmt(chi2, 6) + " < " + fmt(kChiCrit, 7) +
             " (df=998, p>0.001), positive never drawn; " +
             std::to_string(combos) + " exhaustive small-catalog combos clean";
  return r;
}

// ---------------------------------------------------------------- check 6

CheckResult check_metrics_oracle() {
  Rng rng = Rng::rooted(66);
  int64_t checked = 0;
  for (int v = 0; v < kMetricVectors; ++v) {
    int64_t n = 5 + static_cast<int64_t>(rng.uniform_index(46));
    std::vector<double> scores(static_cast<size_t>(n));
    // lattice scores force ties so the tie rule is actually exercised
    for (double& s : scores)
      s = 0.25 * static_cast<double>(rng.uniform_index(9)) - 1.0;
    std::vector<int64_t> excluded;
    for (int64_t id = 1; id <= n; ++id)
      if (rng.uniform() < 0.2) excluded.push_back(id);
    int64_t target = 1 + static_cast<int64_t>(rng.uniform_index(
                             static_cast<uint64_t>(n)));
    excluded.erase(std::remove(excluded.begin(), excluded.end(), target),
                   excluded.end());

    // independent oracle: materialize the candidate list, full sort with
    // (score desc, id asc), find the target's position
    std::vector<int64_t> cand;
    for (int64_t id = 1; id <= n; ++id)
      if (!std::binary_search(excluded.begin(), excluded.end(), id))
        cand.push_back(id);
    std::sort(cand.begin(), cand.end(), [&](int64_t a, int64_t b) {
      double sa = scores[static_cast<size_t>(a - 1)];
      double sb = scores[static_cast<size_t>(b - 1)];
      if (sa != sb) return sa > sb;
      return a < b;
    });
    int64_t oracle_rank =
        1 + (std::find(cand.begin(), cand.end(), target) - cand.begin());

    int64_t rank = eval::rank_target(scores, target, excluded);
    if (rank != oracle_rank) {
      return {false, true,
              "rank mismatch: got " + std::to_string(rank) + ", oracle " +
                  std::to_string(oracle_rank) + " on vector " +
                  std::to_string(v)};
    }
    for (int64_t k : {1, 5, 10}) {
      double o_recall = oracle_rank <= k ? 1.0 : 0.0;
      double o_prec = o_recall / static_cast<double>(k);
      double o_ndcg = oracle_rank <= k
                          ? 1.0 / std::log2(static_cast<double>(oracle_rank) +
                                            1.0)
                          : 0.0;
      if (eval::recall_at_k(rank, k) != o_recall)
        return {false, true, "recall mismatch at K=" + std::to_string(k)};
      if (eval::ndcg_at_k(rank, k) != o_ndcg)
        return {false, true, "ndcg mismatch at K=" + std::to_string(k)};
      double prec = eval::precision_at_k_curve({rank}, k)[static_cast<size_t>(
          k - 1)];
      if (prec != o_prec)
        return {false, true, "precision mismatch at K=" + std::to_string(k)};
      if (std::abs(eval::recall_at_k(rank, k) -
                   static_cast<double>(k) * prec) > kRecallPrecisionTol)
        return {false, true,
                "recall != K*precision at K=" + std::to_string(k)};
      ++checked;
    }
  }
  CheckResult r;
  r.pass = true;
  r.detail = std::to_string(kMetricVectors) + " random vectors, " +
             std::to_string(checked) +
             " metric comparisons exact, recall = K*precision within " +
             fmt(kRecallPrecisionTol, 2);
  return r;
}

// ------------------------------------------------------------- checks 7-9

std::string ml1m_path() {
  if (const char* env = std::getenv("GSREC_ML1M")) return env;
  if (std::filesystem::exists("data/ml-1m.txt")) return "data/ml-1m.txt";
  return "";
}

struct DeskRun {
  trainer::TrainRecord record;
  double test_ndcg10 = 0.0;
  ParameterStore store;
  int64_t positive_terms_per_epoch = 0;
};

// seq 50, dim 64, 2 blocks: small enough for a desk, big enough to show the
// loss-family gap
model::ModelConfig desk_model() {
  model::ModelConfig cfg;
  cfg.max_seq_len = 50;
  cfg.embed_dim = 64;
  cfg.n_blocks = 2;
  cfg.n_heads = 1;
  cfg.dropout_rate = 0.2;
  return cfg;
}

trainer::TrainConfig desk_train() {
  trainer::TrainConfig tc;
  tc.optimizer = "adam";
  tc.lr = 1e-3;
  tc.batch_size = 128;
  tc.max_epochs = 100;
  tc.early_stop_patience_epochs = 20;
  tc.eval_every_epochs = 1;
  tc.seed = 1;
  return tc;
}

DeskRun desk_run(const data::DatasetSplit& split, const LossSpec& spec,
                 const std::string& run_dir) {
  DeskRun out;
  model::ModelConfig cfg = desk_model();
  out.record = trainer::train(split, cfg, spec, desk_train(), run_dir,
                              out.store);
  eval::EvalOptions opt;
  opt.top_k = 10;
  opt.k_max = 10;
  eval::RankReport rep = eval::evaluate(cfg, out.store, split, opt);
  out.test_ndcg10 = rep.ndcg_at_10;
  for (const auto& [user, seq] : split.train.users) {
    int64_t pairs = static_cast<int64_t>(seq.size()) - 1;
    if (pairs >= 1) out.positive_terms_per_epoch += std::min(pairs,
                                                             cfg.max_seq_len);
  }
  return out;
}

}  // namespace

int main() {
  std::cout << "acceptance gate: 9 checks\n";
  bool stability_clean = true;
  std::vector<std::pair<std::string, CheckResult>> results;
  auto run = [&](const std::string& label, auto fn) {
    CheckResult res;
    try {
      res = fn();
    } catch (const std::exception& e) {
      res.pass = false;
      res.runnable = true;
      res.detail = std::string("exception: ") + e.what();
    }
    results.emplace_back(label, res);
    std::cout << "check " << results.size() << " " << label << ": "
              << (res.pass ? "PASS" : "FAIL") << " (" << res.detail << ")\n"
              << std::flush;
  };

  run("closed-form vs numeric-minimizer grid", check_oracle_grid);
  run("tabular SGD reaches the predicted sigmoids",
      [&] { return check_synthetic_convergence(&stability_clean); });
  run("score-transform identity between loss forms",
      [&] { return check_transform_identity(&stability_clean); });
  run("finite-difference gradients, every op and the tiny model",
      [&] { return check_gradients_everywhere(&stability_clean); });
  run("negative sampler uniform and positive-free", check_sampler);
  run("ranking metrics match the full-sort oracle", check_metrics_oracle);

  std::string data_path = ml1m_path();
  std::string unavailable =
      "MovieLens-1M not found: set GSREC_ML1M or add data/ml-1m.txt "
      "(whitespace \"user item\" lines in time order)";

  // shared state across checks 7-9
  bool desk_ran = false;
  DeskRun run_bce, run_gbce, run_gbce_t1;
  double clamp_rate = std::numeric_limits<double>::quiet_NaN();
  data::DatasetSplit desk_split;

  run("desk-scale directional gain on MovieLens-1M", [&]() -> CheckResult {
    if (data_path.empty()) return {false, false, unavailable};
    auto t0 = std::chrono::steady_clock::now();
    data::InteractionLog log = data::load_interactions(
        data_path, data::LogFormat::Bert4RecTxt);
    log = data::kcore_filter_users(log, 5);
    desk_split = data::leave_one_out_split(log, 512, 1);

    LossSpec bce;
    bce.kind = LossSpec::Kind::BCE;
    bce.k = 1;
    bce.t = 0.0;
    LossSpec gbce;
    gbce.kind = LossSpec::Kind::GBCE;
    gbce.k = 256;
    gbce.t = 0.75;
    run_bce = desk_run(desk_split, bce, "acceptance-runs/bce_k1");
    run_gbce = desk_run(desk_split, gbce, "acceptance-runs/gbce_k256_t075");
    desk_ran = true;

    int64_t clamps = 0;
    for (const auto& er : run_gbce.record.epochs) clamps += er.clamp_events;
    int64_t positives = run_gbce.positive_terms_per_epoch *
                        static_cast<int64_t>(run_gbce.record.epochs.size());
    clamp_rate = positives > 0 ? static_cast<double>(clamps) /
                                     static_cast<double>(positives)
                               : 0.0;

    double gain = run_gbce.test_ndcg10 / run_bce.test_ndcg10;
    CheckResult r;
    r.pass = gain >= kDirectionalGain;
    r.detail = "test NDCG@10 " + fmt(run_gbce.test_ndcg10, 4) + " vs " +
               fmt(run_bce.test_ndcg10, 4) + " (x" + fmt(gain, 4) +
               ", need >= " + fmt(kDirectionalGain, 3) + ") in " +
               fmt(seconds_since(t0), 1) + " s";
    return r;
  });

  run("overconfidence signature and calibration", [&]() -> CheckResult {
    if (data_path.empty())
      return {false, false,
              "needs the two checkpoints from check 7; " + unavailable};
    if (!desk_ran) return {false, true, "check 7 did not complete"};
    auto t0 = std::chrono::steady_clock::now();
    LossSpec gbce_t1;
    gbce_t1.kind = LossSpec::Kind::GBCE;
    gbce_t1.k = 256;
    gbce_t1.t = 1.0;
    run_gbce_t1 = desk_run(desk_split, gbce_t1,
                           "acceptance-runs/gbce_k256_t1");

    model::ModelConfig cfg = desk_model();
    LossSpec bce;
    bce.kind = LossSpec::Kind::BCE;
    bce.k = 1;
    diag::DiagOptions dopt;
    diag::OverconfidenceReport rep_bce =
        diag::diagnose(cfg, run_bce.store, desk_split, bce, dopt);
    diag::OverconfidenceReport rep_t1 =
        diag::diagnose(cfg, run_gbce_t1.store, desk_split, gbce_t1, dopt);

    double ratio = rep_bce.mean_prob_mass / rep_t1.mean_prob_mass;
    double prob10 = rep_t1.mean_prob_at_k[9];
    double prec10 = rep_t1.precision_at_k[9];
    double gap = std::abs(prob10 - prec10);
    CheckResult r;
    r.pass = ratio >= kMassRatioMin && gap <= kCalibrationTol;
    r.detail = "mass ratio " + fmt(ratio, 4) + " (need >= " +
               fmt(kMassRatioMin, 3) + "), |prob@10 - precision@10| = " +
               fmt(gap, 4) + " (need <= " + fmt(kCalibrationTol, 2) +
               ") in " + fmt(seconds_since(t0), 1) + " s";
    return r;
  });

  run("stability: finite losses and bounded clamp rate", [&]() -> CheckResult {
    CheckResult r;
    if (!stability_clean) {
      r.pass = false;
      r.detail = "non-finite loss or gradient observed in checks 2-4";
      return r;
    }
    if (data_path.empty()) {
      r.pass = false;
      r.runnable = false;
      r.detail =
          "all performed checks finite and divergence-free, but the "
          "clamp-rate bound needs check 7's training; " + unavailable;
      return r;
    }
    if (!desk_ran || !std::isfinite(clamp_rate)) {
      r.pass = false;
      r.detail = "check 7 did not complete, clamp rate unavailable";
      return r;
    }
    // training aborts on any non-finite loss or gradient step, so completed
    // runs certify finiteness; the clamp counter comes from the saturated
    // positive-score guard in the loss graph
    r.pass = clamp_rate < kClampRateMax;
    r.detail = "runs completed without divergence, clamp rate " +
               fmt(clamp_rate, 4) + " of positive terms (need < " +
               fmt(kClampRateMax, 4) + ")";
    return r;
  });

  int failed_runnable = 0, failed_unrunnable = 0, passed = 0;
  for (const auto& [label, res] : results) {
    if (res.pass) ++passed;
    else if (res.runnable) ++failed_runnable;
    else ++failed_unrunnable;
  }
  std::cout << "summary: " << passed << " passed, " << failed_runnable
            << " failed";
  if (failed_unrunnable > 0) {
    std::cout << ", " << failed_unrunnable
              << " not runnable here (missing dataset, reported FAIL above)";
  }
  std::cout << "\n";
  // exit status covers the checks whose inputs exist; the printed lines
  // carry the full record
  return failed_runnable == 0 ? 0 : 1;
}
