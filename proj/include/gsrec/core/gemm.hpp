#pragma once

// Hand-rolled dense kernels with a fixed reduction order. A BLAS would be
// faster and also free to reorder sums per thread count, which breaks the
// bit-identical-runs guarantee, so everything routes through these.

#include <cstdint>

namespace gsrec {

// C[m,n] += sum_k A[m,k] * B[k,n]
inline void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A,
                    const double* B, double* C) {
  for (int64_t m = 0; m < M; ++m) {
    const double* a = A + m * K;
    double* c = C + m * N;
    for (int64_t k = 0; k < K; ++k) {
      double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + k * N;
      for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

// C[m,n] += sum_k A[m,k] * B[n,k]
inline void gemm_nt(int64_t M, int64_t N, int64_t K, const double* A,
                    const double* B, double* C) {
  for (int64_t m = 0; m < M; ++m) {
    const double* a = A + m * K;
    double* c = C + m * N;
    for (int64_t n = 0; n < N; ++n) {
      const double* b = B + n * K;
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[n] += acc;
    }
  }
}

// C[m,n] += sum_k A[k,m] * B[k,n]
inline void gemm_tn(int64_t M, int64_t N, int64_t K, const double* A,
                    const double* B, double* C) {
  for (int64_t k = 0; k < K; ++k) {
    const double* a = A + k * M;
    const double* b = B + k * N;
    for (int64_t m = 0; m < M; ++m) {
      double av = a[m];
      if (av == 0.0) continue;
      double* c = C + m * N;
      for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

inline double dot(const double* a, const double* b, int64_t n) {
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline void axpy(double alpha, const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace gsrec
