#pragma once

// The four training losses over (positive, sampled negatives) scores, plus
// the score-calibration machinery: beta from the (t, alpha) schedule and the
// gamma score transform that turns calibrated BCE into plain BCE on a moved
// positive score.
//
// Two layers live here:
//   scalar::*   plain-double reference forms used by the convergence study,
//               diagnostics and tests;
//   fragments   the same math emitted as CompGraph nodes for training.
//
// Sign conventions follow the usual "higher score means more likely next
// item"; every log runs through softplus/log1p style identities so scores up
// to |s| = 500 stay finite.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include "gsrec/core/graph.hpp"

namespace gsrec {

struct LossSpec {
  enum class Kind { BCE, GBCE, Softmax, SSM };
  Kind kind = Kind::GBCE;
  int64_t k = 1;   // negatives per positive; ignored for Softmax
  double t = 1.0;  // calibration in [0,1]; gBCE only

  void validate() const {
    if (t < 0.0 || t > 1.0) {
      throw std::invalid_argument("loss: t must be in [0,1], got " +
                                  std::to_string(t));
    }
    if (kind != Kind::Softmax && k < 1) {
      throw std::invalid_argument("loss: sampled losses need k >= 1, got " +
                                  std::to_string(k));
    }
  }

  static Kind parse_kind(const std::string& s) {
    if (s == "bce") return Kind::BCE;
    if (s == "gbce") return Kind::GBCE;
    if (s == "softmax") return Kind::Softmax;
    if (s == "ssm") return Kind::SSM;
    throw std::invalid_argument(
        "loss: unknown kind '" + s + "' (expected bce|gbce|softmax|ssm)");
  }

  static std::string kind_name(Kind k) {
    switch (k) {
      case Kind::BCE: return "bce";
      case Kind::GBCE: return "gbce";
      case Kind::Softmax: return "softmax";
      case Kind::SSM: return "ssm";
    }
    return "?";
  }

  bool needs_negatives() const { return kind != Kind::Softmax; }
  bool needs_catalog() const { return kind == Kind::Softmax; }
};

// beta = alpha * (t * (1 - 1/alpha) + 1/alpha), the calibration schedule:
// t=0 gives beta=1 (plain BCE), t=1 gives beta=alpha (fully calibrated).
inline double beta_from_t(double t, double alpha) {
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw std::invalid_argument("beta_from_t: alpha must be in (0,1], got " +
                                std::to_string(alpha));
  }
  if (t < 0.0 || t > 1.0) {
    throw std::invalid_argument("beta_from_t: t must be in [0,1], got " +
                                std::to_string(t));
  }
  return alpha * (t * (1.0 - 1.0 / alpha) + 1.0 / alpha);
}

namespace scalar {

inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sigmoid(double x) { return -softplus(-x); }

// -(1/(k+1)) * (log sigmoid(s+) + sum log(1 - sigmoid(s-_j)))
inline double bce_sampled(double s_plus, std::span<const double> s_minus) {
  if (s_minus.empty()) {
    throw std::invalid_argument("bce_sampled: needs k >= 1 negatives");
  }
  double acc = softplus(-s_plus);
  for (double s : s_minus) acc += softplus(s);
  return acc / static_cast<double>(s_minus.size() + 1);
}

// gamma(s+) = log(1 / (sigmoid^{-beta}(s+) - 1)), computed in the log domain
// as -log(expm1(-beta * logsigmoid(s+))). sigmoid(gamma(s+)) = sigmoid^beta(s+).
// beta == 1 short-circuits to the untouched score so the plain-BCE case is
// exact rather than merely close.
inline double gamma_transform(double s_plus, double beta) {
  if (!(beta > 0.0) || beta > 1.0) {
    throw std::invalid_argument("gamma_transform: beta must be in (0,1]");
  }
  if (beta == 1.0) return s_plus;
  double u = beta * softplus(-s_plus);  // = -beta * logsigmoid(s+)
  if (u == 0.0) {
    throw std::domain_error(
        "gamma_transform: sigmoid^beta(s+) saturated to 1 (s+ = " +
        std::to_string(s_plus) + ", beta = " + std::to_string(beta) + ")");
  }
  if (u > 30.0) return -(u + std::log1p(-std::exp(-u)));
  return -std::log(std::expm1(u));
}

// Calibrated BCE via the score transform: bce_sampled with the positive score
// moved by gamma. This is the only production path; the direct
// -(1/(k+1))(beta log sigmoid(s+) + ...) form lives in tests as an oracle.
inline double gbce(double s_plus, std::span<const double> s_minus,
                   double beta) {
  return bce_sampled(gamma_transform(s_plus, beta), s_minus);
}

// -log softmax(s[positive]) over the full score vector, max-subtracted.
inline double softmax_loss(std::span<const double> all_scores,
                           size_t positive) {
  if (positive >= all_scores.size()) {
    throw std::out_of_range("softmax_loss: positive index out of range");
  }
  double m = all_scores[0];
  for (double s : all_scores) m = std::max(m, s);
  double z = 0.0;
  for (double s : all_scores) z += std::exp(s - m);
  return m + std::log(z) - all_scores[positive];
}

// -log( e^{s+} / (e^{s+} + sum e^{s-_j}) )
inline double sampled_softmax_loss(double s_plus,
                                   std::span<const double> s_minus) {
  if (s_minus.empty()) {
    throw std::invalid_argument("sampled_softmax_loss: needs k >= 1");
  }
  double m = s_plus;
  for (double s : s_minus) m = std::max(m, s);
  double z = std::exp(s_plus - m);
  for (double s : s_minus) z += std::exp(s - m);
  return m + std::log(z) - s_plus;
}

}  // namespace scalar

namespace fragments {

// Applies the gamma transform to a score node. Instead of erroring on
// saturated scores like the scalar form, the graph path clamps the expm1
// argument at 1e-15 and counts the event (visible via
// CompGraph::clamp_events) so a training run can report saturation without
// dying mid-epoch.
inline NodeId gamma_transform(CompGraph& g, NodeId s_plus, double beta) {
  if (!(beta > 0.0) || beta > 1.0) {
    throw std::invalid_argument("gamma_transform: beta must be in (0,1]");
  }
  if (beta == 1.0) return s_plus;
  NodeId u = g.scale(g.softplus(g.scale(s_plus, -1.0)), beta);
  NodeId clamped = g.clamp_min(u, 1e-15);
  return g.scale(g.log_expm1(clamped), -1.0);
}

// Per-position loss tensor for the sampled kinds. s_plus is [..]-shaped
// (typically [B,L]) and s_minus is [.., k]; output matches s_plus.
inline NodeId bce_per_position(CompGraph& g, NodeId s_plus, NodeId s_minus,
                               int64_t k) {
  NodeId pos_term = g.softplus(g.scale(s_plus, -1.0));
  NodeId neg_term = g.sum_last(g.softplus(s_minus));
  return g.scale(g.add(pos_term, neg_term), 1.0 / static_cast<double>(k + 1));
}

inline NodeId gbce_per_position(CompGraph& g, NodeId s_plus, NodeId s_minus,
                                int64_t k, double beta) {
  return bce_per_position(g, gamma_transform(g, s_plus, beta), s_minus, k);
}

inline NodeId ssm_per_position(CompGraph& g, NodeId s_plus, NodeId s_minus) {
  // -log(e^{s+} / (e^{s+} + sum e^{s-})) = logaddexp(s+, lse(s-)) - s+
  NodeId lse_neg = g.logsumexp_last(s_minus);
  return g.add(g.logaddexp(s_plus, lse_neg), g.scale(s_plus, -1.0));
}

// catalog_scores must cover every real item (the padding row is excluded by
// the op itself), with s_plus the matching positive score.
inline NodeId softmax_per_position(CompGraph& g, NodeId catalog_scores,
                                   NodeId s_plus) {
  return g.add(g.logsumexp_last(catalog_scores), g.scale(s_plus, -1.0));
}

// Mean over valid positions: per_position * mask summed, scaled by a bound
// 1/(number of valid positions) scalar. Binding the inverse count instead of
// dividing in-graph keeps the fragment free of a division op.
inline NodeId masked_mean(CompGraph& g, NodeId per_position, NodeId mask,
                          NodeId inv_valid_count) {
  return g.mul(g.sum(g.mul(per_position, mask)), inv_valid_count);
}

// Full per-position fragment for a LossSpec; beta must come from
// beta_from_t(spec.t, alpha) with alpha = k / (|I| - 1) for gBCE, and is
// ignored otherwise. Pass -1 for score nodes a kind does not use.
inline NodeId per_position_loss(CompGraph& g, const LossSpec& spec,
                                double beta, NodeId s_plus, NodeId s_minus,
                                NodeId catalog) {
  spec.validate();
  switch (spec.kind) {
    case LossSpec::Kind::BCE:
      return bce_per_position(g, s_plus, s_minus, spec.k);
    case LossSpec::Kind::GBCE:
      return gbce_per_position(g, s_plus, s_minus, spec.k, beta);
    case LossSpec::Kind::SSM:
      return ssm_per_position(g, s_plus, s_minus);
    case LossSpec::Kind::Softmax:
      return softmax_per_position(g, catalog, s_plus);
  }
  throw std::logic_error("per_position_loss: unreachable");
}

}  // namespace fragments
}  // namespace gsrec
