#pragma once

// Closed-form converged-score predictions for negatively-sampled binary
// losses, the expected per-item loss whose minimizer they are, a bisection
// oracle that re-derives the minimizer numerically, and a tabular SGD
// experiment that reproduces the same fixed point empirically.
//
// Three independent routes to the same number (algebra, 1-D optimization,
// simulation) is the point: each validates the others.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsrec/core/rng.hpp"
#include "gsrec/losses/losses.hpp"

namespace gsrec::theory {

struct PriorDistribution {
  std::vector<double> p;

  void validate() const {
    if (p.size() < 2) {
      throw std::invalid_argument("prior: need at least 2 items");
    }
    double sum = 0.0;
    for (double pi : p) {
      if (!(pi >= 0.0) || pi > 1.0) {
        throw std::invalid_argument("prior: probabilities must be in [0,1]");
      }
      sum += pi;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      throw std::invalid_argument("prior: probabilities sum to " +
                                  std::to_string(sum) + ", expected 1");
    }
  }
};

namespace detail {
inline void check_alpha_beta(double alpha, double beta) {
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw std::invalid_argument("alpha must be in (0,1], got " +
                                std::to_string(alpha));
  }
  if (!(beta > 0.0) || beta > 1.0) {
    throw std::invalid_argument("beta must be in (0,1], got " +
                                std::to_string(beta));
  }
}
}  // namespace detail

// The converged sigmoid for an item with prior probability p when training
// with k-negative sampling rate alpha and positive-score power beta:
//   sigma = beta p / (alpha - alpha p + beta p).
// beta == alpha collapses to the identity (the calibrated case) and is
// returned as such so the calibration limit holds exactly, not to rounding.
inline double converged_sigmoid(double p, double alpha, double beta) {
  detail::check_alpha_beta(alpha, beta);
  if (!(p >= 0.0) || p > 1.0) {
    throw std::invalid_argument("converged_sigmoid: p must be in [0,1]");
  }
  if (p == 0.0) return 0.0;
  if (p == 1.0) return 1.0;
  if (beta == alpha) return p;
  return beta * p / (alpha - alpha * p + beta * p);
}

// beta = 1 special case: what plain sampled BCE converges to.
inline double bce_converged_sigmoid(double p, double alpha) {
  return converged_sigmoid(p, alpha, 1.0);
}

// One uniform negative per positive over a catalog of the given size, i.e.
// alpha = 1/(catalog_size - 1):  (p N - p) / (p N - 2 p + 1).
inline double sasrec_converged_sigmoid(double p, int64_t catalog_size) {
  if (catalog_size < 2) {
    throw std::invalid_argument("sasrec_converged_sigmoid: catalog_size >= 2");
  }
  if (!(p >= 0.0) || p > 1.0) {
    throw std::invalid_argument("sasrec_converged_sigmoid: p must be in [0,1]");
  }
  double n = static_cast<double>(catalog_size);
  return (p * n - p) / (p * n - 2.0 * p + 1.0);
}

// E[L_i](sigma) = -(p beta log sigma + alpha (1-p) log(1-sigma)); the
// expected contribution of one item under the sampling scheme, as a function
// of the score it has converged to.
inline double expected_item_loss(double sigma, double p, double alpha,
                                 double beta) {
  detail::check_alpha_beta(alpha, beta);
  if (!(sigma > 0.0) || !(sigma < 1.0)) {
    throw std::domain_error("expected_item_loss: sigma must be in (0,1)");
  }
  return -(p * beta * std::log(sigma) +
           alpha * (1.0 - p) * std::log1p(-sigma));
}

// dE/dsigma = -beta p / sigma + alpha (1-p) / (1-sigma)
inline double expected_item_loss_derivative(double sigma, double p,
                                            double alpha, double beta) {
  detail::check_alpha_beta(alpha, beta);
  if (!(sigma > 0.0) || !(sigma < 1.0)) {
    throw std::domain_error("expected_item_loss_derivative: sigma in (0,1)");
  }
  return -beta * p / sigma + alpha * (1.0 - p) / (1.0 - sigma);
}

// Independent oracle: finds the minimizer of expected_item_loss by bisecting
// the sign change of its derivative, with no reference to the closed form.
inline double numeric_minimizer(double p, double alpha, double beta) {
  detail::check_alpha_beta(alpha, beta);
  if (!(p > 0.0) || !(p < 1.0)) {
    throw std::invalid_argument("numeric_minimizer: p must be in (0,1)");
  }
  double lo = 1e-15, hi = 1.0 - 1e-15;
  double flo = expected_item_loss_derivative(lo, p, alpha, beta);
  double fhi = expected_item_loss_derivative(hi, p, alpha, beta);
  if (!(flo < 0.0) || !(fhi > 0.0)) {
    throw std::runtime_error("numeric_minimizer: derivative does not bracket "
                             "a root");
  }
  for (int iter = 0; iter < 200; ++iter) {
    double mid = 0.5 * (lo + hi);
    if (hi - lo < 1e-10) return mid;
    double fm = expected_item_loss_derivative(mid, p, alpha, beta);
    if (fm < 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  throw std::runtime_error("numeric_minimizer: no convergence after 200 "
                           "iterations");
}

struct ConvergencePrediction {
  std::vector<double> sigma;
  double alpha = 0.0;
  double beta = 0.0;
};

inline ConvergencePrediction predict_convergence(
    const PriorDistribution& prior, double alpha, double beta) {
  prior.validate();
  ConvergencePrediction out;
  out.alpha = alpha;
  out.beta = beta;
  out.sigma.reserve(prior.p.size());
  for (double pi : prior.p) {
    out.sigma.push_back(converged_sigmoid(pi, alpha, beta));
  }
  return out;
}

struct ConvergenceExperiment {
  std::vector<double> scores;   // final raw score per item
  std::vector<double> sigma;    // sigmoid of scores
  std::vector<double> target;   // closed-form prediction per item
  double alpha = 0.0;
  double beta = 0.0;
  double max_abs_deviation = 0.0;
  int64_t steps = 0;
  double base_lr = 0.0;
};

// Tabular SGD: one free score per item, positives drawn from the prior,
// k negatives drawn uniformly from the other items, stepping the calibrated
// sampled-BCE loss. The update uses the hand-derived gradient of the direct
// loss form
//   dL/ds+   = -beta sigmoid(-s+) / (k+1)
//   dL/ds-_j =       sigmoid(s-_j) / (k+1)
// so the experiment shares no code with the graph/transform implementation
// it is evidence for. Learning rate decays x0.1 at 50% and 75% of steps;
// both choices are recorded in the result.
inline ConvergenceExperiment synthetic_convergence_experiment(
    const PriorDistribution& prior, int64_t k, double t, int64_t steps,
    double lr, uint64_t seed) {
  prior.validate();
  int64_t n = static_cast<int64_t>(prior.p.size());
  if (k < 1 || k > n - 1) {
    throw std::invalid_argument("experiment: need 1 <= k <= |I|-1");
  }
  if (steps < 1) throw std::invalid_argument("experiment: steps >= 1");
  double alpha = static_cast<double>(k) / static_cast<double>(n - 1);
  double beta = beta_from_t(t, alpha);

  std::vector<double> cdf(prior.p.size());
  double acc = 0.0;
  for (size_t i = 0; i < prior.p.size(); ++i) {
    acc += prior.p[i];
    cdf[i] = acc;
  }

  std::vector<double> s(static_cast<size_t>(n), 0.0);
  Rng rng = Rng::rooted(seed);
  double inv_kp1 = 1.0 / static_cast<double>(k + 1);
  for (int64_t step = 0; step < steps; ++step) {
    double cur_lr = lr;
    if (step >= steps * 3 / 4) {
      cur_lr = lr * 0.01;
    } else if (step >= steps / 2) {
      cur_lr = lr * 0.1;
    }
    int64_t pos = static_cast<int64_t>(sample_cdf(rng, cdf));
    s[pos] += cur_lr * beta * scalar::sigmoid(-s[pos]) * inv_kp1;
    if (!std::isfinite(s[pos])) {
      throw std::runtime_error("experiment diverged at step " +
                               std::to_string(step));
    }
    for (int64_t j = 0; j < k; ++j) {
      int64_t neg = static_cast<int64_t>(
          rng.uniform_index(static_cast<uint64_t>(n - 1)));
      if (neg >= pos) ++neg;
      s[neg] -= cur_lr * scalar::sigmoid(s[neg]) * inv_kp1;
      if (!std::isfinite(s[neg])) {
        throw std::runtime_error("experiment diverged at step " +
                                 std::to_string(step));
      }
    }
  }

  ConvergenceExperiment out;
  out.alpha = alpha;
  out.beta = beta;
  out.steps = steps;
  out.base_lr = lr;
  out.scores = s;
  out.sigma.reserve(s.size());
  out.target.reserve(s.size());
  for (size_t i = 0; i < s.size(); ++i) {
    double sig = scalar::sigmoid(s[i]);
    double tgt = converged_sigmoid(prior.p[i], alpha, beta);
    out.sigma.push_back(sig);
    out.target.push_back(tgt);
    out.max_abs_deviation =
        std::max(out.max_abs_deviation, std::abs(sig - tgt));
  }
  return out;
}

}  // namespace gsrec::theory
