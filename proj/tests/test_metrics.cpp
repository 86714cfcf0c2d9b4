#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gsrec/core/rng.hpp"
#include "gsrec/core/special.hpp"
#include "gsrec/eval/metrics.hpp"

using namespace gsrec;
using Catch::Approx;

namespace {

// independent route: materialize the full ordering and look the target up
int64_t brute_rank(const std::vector<double>& scores, int64_t target,
                   const std::vector<int64_t>& excl) {
  std::vector<int64_t> ids;
  for (int64_t id = 1; id <= static_cast<int64_t>(scores.size()); ++id)
    if (!std::binary_search(excl.begin(), excl.end(), id)) ids.push_back(id);
  std::sort(ids.begin(), ids.end(), [&](int64_t a, int64_t b) {
    double sa = scores[size_t(a - 1)], sb = scores[size_t(b - 1)];
    return sa > sb || (sa == sb && a < b);
  });
  auto it = std::find(ids.begin(), ids.end(), target);
  return 1 + static_cast<int64_t>(it - ids.begin());
}

}  // namespace

TEST_CASE("regularized incomplete beta matches 60-digit references") {
  REQUIRE(reg_incomplete_beta(2.5, 1.5, 0.3) ==
          Approx(0.08894372317066559935).epsilon(1e-14));
  REQUIRE(reg_incomplete_beta(0.5, 4.0, 0.7) ==
          Approx(0.99745562538359319236).epsilon(1e-14));
  REQUIRE(reg_incomplete_beta(3.0, 3.0, 0.5) == Approx(0.5).epsilon(1e-14));
  REQUIRE(reg_incomplete_beta(2.0, 5.0, 0.0) == 0.0);
  REQUIRE(reg_incomplete_beta(2.0, 5.0, 1.0) == 1.0);
  REQUIRE_THROWS_AS(reg_incomplete_beta(-1.0, 2.0, 0.5),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(reg_incomplete_beta(1.0, 2.0, 1.5),
                    std::invalid_argument);
}

TEST_CASE("unique best score ranks first") {
  std::vector<double> scores = {0.1, 0.9, 0.3, 0.2};
  REQUIRE(eval::rank_target(scores, 2, {}) == 1);
  REQUIRE(eval::rank_target(scores, 3, {}) == 2);
  REQUIRE(eval::rank_target(scores, 1, {}) == 4);
}

TEST_CASE("ties resolve by ascending item index") {
  std::vector<double> flat(5, 1.0);
  REQUIRE(eval::rank_target(flat, 1, {}) == 1);
  REQUIRE(eval::rank_target(flat, 3, {}) == 3);
  REQUIRE(eval::rank_target(flat, 5, {}) == 5);
}

TEST_CASE("excluded items do not compete and an excluded target errors") {
  std::vector<double> scores = {0.5, 0.9, 0.7, 0.1};
  // item 2 and 3 outscore item 4; excluding them promotes it
  REQUIRE(eval::rank_target(scores, 4, {}) == 4);
  REQUIRE(eval::rank_target(scores, 4, {2, 3}) == 2);
  REQUIRE_THROWS_AS(eval::rank_target(scores, 2, {2, 3}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(eval::rank_target(scores, 9, {}), std::invalid_argument);
  REQUIRE_THROWS_AS(eval::rank_target({}, 1, {}), std::invalid_argument);
}

TEST_CASE("rank matches the full-sort oracle on tied random vectors") {
  Rng rng = Rng::rooted(314);
  const std::vector<double> levels = {-1.0, -0.5, 0.0, 0.5, 1.0};
  for (int trial = 0; trial < 500; ++trial) {
    int64_t n = 20;
    std::vector<double> scores(static_cast<size_t>(n));
    for (auto& s : scores) s = levels[rng.uniform_index(levels.size())];
    std::vector<int64_t> excl;
    for (int64_t id = 1; id <= n; ++id)
      if (rng.uniform(0.0, 1.0) < 0.25) excl.push_back(id);
    int64_t target = 1 + int64_t(rng.uniform_index(uint64_t(n)));
    while (std::binary_search(excl.begin(), excl.end(), target))
      target = 1 + int64_t(rng.uniform_index(uint64_t(n)));
    REQUIRE(eval::rank_target(scores, target, excl) ==
            brute_rank(scores, target, excl));
  }
}

TEST_CASE("the ranking scan examines every catalog item") {
  std::vector<double> scores(50, 0.0);
  int64_t examined = 0;
  eval::rank_target(scores, 7, {}, &examined);
  REQUIRE(examined == 50);
  eval::rank_target(scores, 7, {1, 2, 3, 4, 5}, &examined);
  REQUIRE(examined == 100);  // exclusions are inspected, not skipped blindly
}

TEST_CASE("recall at K is the indicator of a hit") {
  REQUIRE(eval::recall_at_k(1, 1) == 1.0);
  REQUIRE(eval::recall_at_k(11, 10) == 0.0);
  REQUIRE(eval::recall_at_k(10, 10) == 1.0);
  REQUIRE_THROWS_AS(eval::recall_at_k(0, 5), std::invalid_argument);
  REQUIRE_THROWS_AS(eval::recall_at_k(3, 0), std::invalid_argument);
}

TEST_CASE("ndcg for a single relevant item") {
  REQUIRE(eval::ndcg_at_k(1, 10) == 1.0);
  REQUIRE(eval::ndcg_at_k(2, 10) ==
          Approx(0.63092975357145743710).epsilon(1e-15));
  REQUIRE(eval::ndcg_at_k(5, 10) ==
          Approx(0.38685280723454158687).epsilon(1e-15));
  REQUIRE(eval::ndcg_at_k(11, 10) == 0.0);
  REQUIRE(eval::ndcg_at_k(10, 10) > 0.0);
}

TEST_CASE("precision curve equals the hand recompute") {
  // one user at rank 1: P@1 = 1, P@2 = 0.5, non-increasing
  auto solo = eval::precision_at_k_curve({1}, 5);
  REQUIRE(solo[0] == 1.0);
  REQUIRE(solo[1] == 0.5);
  for (size_t k = 1; k < solo.size(); ++k) REQUIRE(solo[k] <= solo[k - 1]);

  Rng rng = Rng::rooted(99);
  std::vector<int64_t> ranks;
  for (int i = 0; i < 40; ++i)
    ranks.push_back(1 + int64_t(rng.uniform_index(30)));
  auto curve = eval::precision_at_k_curve(ranks, 25);
  REQUIRE(curve.size() == 25);
  for (int64_t k = 1; k <= 25; ++k) {
    double acc = 0.0;
    for (int64_t r : ranks) acc += (r <= k ? 1.0 : 0.0) / double(k);
    REQUIRE(curve[size_t(k - 1)] == Approx(acc / 40.0).epsilon(1e-14));
    // recall identity under a single relevant item
    double mean_recall = 0.0;
    for (int64_t r : ranks) mean_recall += (r <= k ? 1.0 : 0.0);
    mean_recall /= 40.0;
    REQUIRE(double(k) * curve[size_t(k - 1)] ==
            Approx(mean_recall).epsilon(1e-12));
  }
  REQUIRE_THROWS_AS(eval::precision_at_k_curve({}, 5), std::invalid_argument);
}

TEST_CASE("paired t-test matches the reference computation") {
  std::vector<double> a = {0.1, 0.2, 0.15, 0.3, 0.25, 0.4};
  std::vector<double> b = {0.12, 0.18, 0.1, 0.28, 0.3, 0.31};
  auto res = eval::paired_ttest(a, b);
  REQUIRE(res.df == 5);
  REQUIRE(res.mean_diff == Approx(0.01833333333333333).epsilon(1e-13));
  REQUIRE(res.t == Approx(0.90603284840454858).epsilon(1e-13));
  REQUIRE(res.p == Approx(0.40646015531823738).epsilon(1e-12));

  auto sym = eval::paired_ttest(b, a);
  REQUIRE(sym.t == Approx(-res.t).epsilon(1e-13));
  REQUIRE(sym.p == Approx(res.p).epsilon(1e-12));

  REQUIRE_THROWS_AS(eval::paired_ttest({1.0}, {2.0}), std::invalid_argument);
  REQUIRE_THROWS_AS(eval::paired_ttest({1.0, 2.0}, {1.0}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(eval::paired_ttest({1.0, 2.0}, {0.5, 1.5}),
                    std::invalid_argument);  // constant difference
}
