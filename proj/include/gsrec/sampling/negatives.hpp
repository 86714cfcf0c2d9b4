#pragma once

// Uniform-with-replacement negative sampling over a dense 1-based item
// catalog (id 0 is reserved for padding everywhere in this codebase).
//
// The default sampler excludes only the current positive: every other item
// has probability exactly 1/(|I|-1) per draw, which is the regime the
// convergence analysis assumes. Excluding the user's whole history changes
// that distribution, so it exists only behind an explicit flag.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsrec/core/rng.hpp"

namespace gsrec::sampling {

struct NegativeSampleSet {
  int64_t excluded = 0;           // the positive item id
  std::vector<int64_t> indices;   // k sampled negatives, duplicates allowed
};

// alpha = k / (|I| - 1), the fraction of the candidate pool seen per positive.
inline double sampling_rate(int64_t k, int64_t catalog_size) {
  if (catalog_size < 2) {
    throw std::invalid_argument("sampling_rate: catalog_size must be >= 2");
  }
  return static_cast<double>(k) / static_cast<double>(catalog_size - 1);
}

// k draws, each uniform over {1..catalog_size} \ {positive}.
inline NegativeSampleSet sample_negatives(int64_t positive,
                                          int64_t catalog_size, int64_t k,
                                          Rng& rng) {
  if (catalog_size < 2) {
    throw std::invalid_argument("sample_negatives: catalog_size must be >= 2");
  }
  if (k < 1) throw std::invalid_argument("sample_negatives: k must be >= 1");
  if (positive < 1 || positive > catalog_size) {
    throw std::invalid_argument("sample_negatives: positive id " +
                                std::to_string(positive) +
                                " outside 1.." + std::to_string(catalog_size));
  }
  NegativeSampleSet out;
  out.excluded = positive;
  out.indices.resize(static_cast<size_t>(k));
  for (int64_t j = 0; j < k; ++j) {
    int64_t id = 1 + static_cast<int64_t>(rng.uniform_index(
                         static_cast<uint64_t>(catalog_size - 1)));
    if (id >= positive) ++id;
    out.indices[static_cast<size_t>(j)] = id;
  }
  return out;
}

// Flagged variant: also rejects anything in `excluded_sorted` (ascending item
// ids, the user's history). Draws stay uniform over the remaining items.
inline NegativeSampleSet sample_negatives_excluding(
    int64_t positive, int64_t catalog_size, int64_t k, Rng& rng,
    const std::vector<int64_t>& excluded_sorted) {
  if (catalog_size < 2) {
    throw std::invalid_argument("sample_negatives: catalog_size must be >= 2");
  }
  if (k < 1) throw std::invalid_argument("sample_negatives: k must be >= 1");
  int64_t blocked = static_cast<int64_t>(excluded_sorted.size());
  if (!std::binary_search(excluded_sorted.begin(), excluded_sorted.end(),
                          positive)) {
    ++blocked;
  }
  if (catalog_size - blocked < 1) {
    throw std::invalid_argument(
        "sample_negatives: no candidates left after exclusions");
  }
  NegativeSampleSet out;
  out.excluded = positive;
  out.indices.resize(static_cast<size_t>(k));
  for (int64_t j = 0; j < k; ++j) {
    int64_t id;
    do {
      id = 1 + static_cast<int64_t>(rng.uniform_index(
                   static_cast<uint64_t>(catalog_size)));
    } while (id == positive ||
             std::binary_search(excluded_sorted.begin(), excluded_sorted.end(),
                                id));
    out.indices[static_cast<size_t>(j)] = id;
  }
  return out;
}

}  // namespace gsrec::sampling
