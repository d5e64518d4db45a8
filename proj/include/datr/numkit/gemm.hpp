#pragma once

#include <algorithm>
#include <vector>

#include "datr/numkit/parallel.hpp"

namespace datr::numkit {

// Dense row-major matrix kernels. Every output row is accumulated by a
// single thread in a fixed order, so results are identical for any thread
// count. The only kernel shapes are NN (optionally accumulating) and the
// transposed-A weight-gradient form; A*B^T products go through an explicit
// transpose of B into scratch, which keeps the hot loop in the stride-1
// broadcast-FMA form compilers vectorize without reassociation licenses.

namespace detail {

template <typename T, int RB, bool Acc>
inline void gemm_nn_rows(const T* a, const T* b, T* c, long i0, long i1, long k, long n) {
  long i = i0;
  for (; i + RB <= i1; i += RB) {
    T* crow[RB];
    const T* arow[RB];
    for (int r = 0; r < RB; ++r) {
      crow[r] = c + (i + r) * n;
      arow[r] = a + (i + r) * k;
      if constexpr (!Acc) std::fill(crow[r], crow[r] + n, T(0));
    }
    for (long p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T av[RB];
      for (int r = 0; r < RB; ++r) av[r] = arow[r][p];
      for (long j = 0; j < n; ++j) {
        T bv = brow[j];
        for (int r = 0; r < RB; ++r) crow[r][j] += av[r] * bv;
      }
    }
  }
  for (; i < i1; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    if constexpr (!Acc) std::fill(crow, crow + n, T(0));
    for (long p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + p * n;
      for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// C[m x n] = A[m x k] * B[k x n]
template <typename T>
inline void gemm_nn(const T* a, const T* b, T* c, long m, long k, long n) {
  if (m * k * n < 32768) {
    detail::gemm_nn_rows<T, 4, false>(a, b, c, 0, m, k, n);
    return;
  }
  parallel_for(m, [&](long i0, long i1) {
    detail::gemm_nn_rows<T, 4, false>(a, b, c, i0, i1, k, n);
  });
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
inline void gemm_nn_acc(const T* a, const T* b, T* c, long m, long k, long n) {
  if (m * k * n < 32768) {
    detail::gemm_nn_rows<T, 4, true>(a, b, c, 0, m, k, n);
    return;
  }
  parallel_for(m, [&](long i0, long i1) {
    detail::gemm_nn_rows<T, 4, true>(a, b, c, i0, i1, k, n);
  });
}

// scratch[n x m] = transpose of A[m x n]
template <typename T>
inline void transpose_into(const T* a, T* at, long m, long n) {
  constexpr long kTile = 32;
  for (long i0 = 0; i0 < m; i0 += kTile)
    for (long j0 = 0; j0 < n; j0 += kTile) {
      const long i1 = std::min(i0 + kTile, m), j1 = std::min(j0 + kTile, n);
      for (long i = i0; i < i1; ++i)
        for (long j = j0; j < j1; ++j) at[j * m + i] = a[i * n + j];
    }
}

// C[m x n] += A[m x k] * B[n x k]^T, via transposed scratch.
template <typename T>
inline void gemm_nt_acc(const T* a, const T* b, T* c, long m, long k, long n) {
  std::vector<T> bt(static_cast<std::size_t>(k) * n);
  transpose_into(b, bt.data(), n, k);
  gemm_nn_acc(a, bt.data(), c, m, k, n);
}

// C[k x n] += A[m x k]^T * B[m x n]  (weight-gradient shape)
template <typename T>
inline void gemm_tn_acc(const T* a, const T* b, T* c, long m, long k, long n) {
  constexpr long kBlock = 32;
  auto cols = [&](long c0, long c1) {
    for (long i0 = c0; i0 < c1; i0 += kBlock) {
      long i1 = std::min(i0 + kBlock, c1);
      for (long p = 0; p < m; ++p) {
        const T* arow = a + p * k;
        const T* brow = b + p * n;
        for (long i = i0; i < i1; ++i) {
          T av = arow[i];
          if (av == T(0)) continue;
          T* crow = c + i * n;
          for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  };
  if (m * k * n < 32768) {
    cols(0, k);
    return;
  }
  parallel_for(k, cols);
}

}  // namespace datr::numkit
