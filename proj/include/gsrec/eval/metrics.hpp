#pragma once

// Unsampled ranking and the ranking metrics. A score vector covers the whole
// catalog: scores[j] belongs to item id j+1 (padding id 0 never scored).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gsrec/core/special.hpp"

namespace gsrec::eval {

// 1-based rank of the target among non-excluded items: one plus the number
// of strictly better scores, with equal scores won by the lower item index.
// `examined` counts every item the scan actually inspected, so a test can
// prove no sampling shortcut crept in.
inline int64_t rank_target(const std::vector<double>& scores, int64_t target,
                           const std::vector<int64_t>& excluded_sorted,
                           int64_t* examined = nullptr) {
  int64_t n = static_cast<int64_t>(scores.size());
  if (n < 1) throw std::invalid_argument("rank: empty score vector");
  if (target < 1 || target > n)
    throw std::invalid_argument("rank: target id outside the catalog");
  if (std::binary_search(excluded_sorted.begin(), excluded_sorted.end(),
                         target))
    throw std::invalid_argument("rank: target is in the exclusion set");
  double ts = scores[static_cast<size_t>(target - 1)];
  int64_t above = 0, seen = 0;
  for (int64_t j = 0; j < n; ++j) {
    ++seen;
    int64_t id = j + 1;
    if (id == target) continue;
    if (std::binary_search(excluded_sorted.begin(), excluded_sorted.end(),
                           id))
      continue;
    double s = scores[static_cast<size_t>(j)];
    if (s > ts || (s == ts && id < target)) ++above;
  }
  if (examined) *examined += seen;
  return above + 1;
}

inline double recall_at_k(int64_t rank, int64_t k) {
  if (rank < 1 || k < 1)
    throw std::invalid_argument("recall: rank and K must be >= 1");
  return rank <= k ? 1.0 : 0.0;
}

// single relevant item per user, so ideal DCG is 1 and the hit contributes
// 1/log2(rank+1)
inline double ndcg_at_k(int64_t rank, int64_t k) {
  if (rank < 1 || k < 1)
    throw std::invalid_argument("ndcg: rank and K must be >= 1");
  if (rank > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

// curve[K-1] = mean over users of (rank <= K) / K, K in 1..k_max
inline std::vector<double> precision_at_k_curve(
    const std::vector<int64_t>& ranks, int64_t k_max = 100) {
  if (ranks.empty())
    throw std::invalid_argument("precision curve: no ranks given");
  if (k_max < 1) throw std::invalid_argument("precision curve: k_max >= 1");
  std::vector<double> curve(static_cast<size_t>(k_max), 0.0);
  for (int64_t k = 1; k <= k_max; ++k) {
    double acc = 0.0;
    for (int64_t r : ranks) acc += recall_at_k(r, k) / static_cast<double>(k);
    curve[static_cast<size_t>(k - 1)] = acc / static_cast<double>(ranks.size());
  }
  return curve;
}

struct TTestResult {
  double mean_diff = 0.0;
  double t = 0.0;
  double p = 1.0;
  int64_t df = 0;
};

// paired two-sided Student t-test on per-user metric vectors
inline TTestResult paired_ttest(const std::vector<double>& a,
                                const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("t-test: vectors differ in length");
  int64_t n = static_cast<int64_t>(a.size());
  if (n < 2) throw std::invalid_argument("t-test: need at least two pairs");
  double mean = 0.0;
  for (int64_t i = 0; i < n; ++i)
    mean += (a[static_cast<size_t>(i)] - b[static_cast<size_t>(i)]);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = a[static_cast<size_t>(i)] - b[static_cast<size_t>(i)] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n - 1);
  if (var == 0.0)
    throw std::invalid_argument("t-test: zero variance in differences");
  TTestResult res;
  res.mean_diff = mean;
  res.df = n - 1;
  res.t = mean / std::sqrt(var / static_cast<double>(n));
  res.p = student_t_two_sided_p(res.t, static_cast<double>(res.df));
  return res;
}

}  // namespace gsrec::eval
