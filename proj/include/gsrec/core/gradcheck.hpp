#pragma once

// Central finite-difference verification of backward() against forward().
// Dropout stays checkable because every probe pass reuses the same dropout
// seed, so the sampled mask is a fixed function and not fresh noise.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gsrec/core/graph.hpp"
#include "gsrec/core/rng.hpp"

namespace gsrec {

struct GradCheckOptions {
  double eps = 1e-5;          // scaled by max(1, |x|) per coordinate
  int64_t max_coords = 0;     // 0 = every coordinate of every parameter
  uint64_t coord_seed = 17;   // coordinate subsampling stream
  bool training = false;
  uint64_t dropout_seed = 1;  // reused for every probe forward
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_coord;
  int64_t coords_checked = 0;
};

inline GradCheckResult check_gradients(CompGraph& graph, NodeId root,
                                       const Bindings& binds,
                                       ParameterStore& store,
                                       const GradCheckOptions& opt = {}) {
  auto run = [&]() -> double {
    Rng drop = Rng::rooted(opt.dropout_seed);
    ForwardOptions fo;
    fo.training = opt.training;
    fo.rng = &drop;
    const Tensor& out = graph.forward(root, binds, fo);
    if (out.numel() != 1) {
      throw std::invalid_argument("check_gradients: root must be scalar");
    }
    return out[0];
  };

  run();
  GradientMap analytic = graph.backward(root);

  GradCheckResult res;
  Rng pick = Rng::rooted(opt.coord_seed);
  for (auto& [name, agrad] : analytic) {
    Tensor& p = store.get(name);
    std::vector<int64_t> coords;
    if (opt.max_coords > 0 && p.numel() > opt.max_coords) {
      for (int64_t c = 0; c < opt.max_coords; ++c) {
        coords.push_back(static_cast<int64_t>(
            pick.uniform_index(static_cast<uint64_t>(p.numel()))));
      }
    } else {
      coords.resize(static_cast<size_t>(p.numel()));
      for (int64_t c = 0; c < p.numel(); ++c) coords[c] = c;
    }
    for (int64_t c : coords) {
      double old = p[c];
      double h = opt.eps * std::max(1.0, std::abs(old));
      p[c] = old + h;
      double f_plus = run();
      p[c] = old - h;
      double f_minus = run();
      p[c] = old;
      double fd = (f_plus - f_minus) / (2.0 * h);
      double an = agrad[c];
      double rel =
          std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an));
      ++res.coords_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_coord = name + "[" + std::to_string(c) + "] fd=" +
                          std::to_string(fd) + " analytic=" +
                          std::to_string(an);
      }
    }
  }
  // Leave activations consistent with the unperturbed point.
  run();
  return res;
}

}  // namespace gsrec
