#pragma once

// Regularized incomplete beta and the Student-t tail built on it. Continued
// fraction per the classic Lentz scheme; float64 accuracy is ample for
// p-values.

#include <cmath>
#include <stdexcept>

namespace gsrec {

namespace detail {

inline double beta_cont_frac(double a, double b, double x) {
  const int max_iter = 400;
  const double eps = 3e-16, tiny = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) return h;
  }
  throw std::runtime_error("incomplete beta: no convergence");
}

}  // namespace detail

inline double reg_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0))
    throw std::invalid_argument("incomplete beta: a, b must be positive");
  if (!(x >= 0.0) || !(x <= 1.0))
    throw std::invalid_argument("incomplete beta: x must be in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  double ln_front = a * std::log(x) + b * std::log1p(-x) -
                    (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
  double front = std::exp(ln_front);
  // choose the branch where the continued fraction converges fast
  if (x < (a + 1.0) / (a + b + 2.0))
    return front * detail::beta_cont_frac(a, b, x) / a;
  return 1.0 - front * detail::beta_cont_frac(b, a, 1.0 - x) / b;
}

inline double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0))
    throw std::invalid_argument("t-test: df must be positive");
  if (!std::isfinite(t)) throw std::invalid_argument("t-test: t not finite");
  return reg_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

}  // namespace gsrec
