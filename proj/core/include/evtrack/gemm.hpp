#pragma once

// Register-blocked row-major matrix multiply used by the dense and
// convolution primitives: y[M,N] += x[M,K] @ w[K,N]. Per output element the
// update is one k-ascending partial sum added onto y, computed by exactly
// one thread, so results are bit-identical for any thread count.

#include <cstddef>

#include "evtrack/parallel.hpp"

namespace evtrack {

namespace detail {

// Microkernel: MR x NR register tile. The local copy of the w row and the
// restrict qualifiers let the compiler keep the whole tile in registers.
template <typename T, std::size_t MR, std::size_t NR>
inline void gemm_tile(std::size_t K, const T* __restrict x, std::size_t ldx,
                      const T* __restrict w, std::size_t ldw,
                      T* __restrict y, std::size_t ldy) {
  T acc[MR][NR] = {};
  for (std::size_t k = 0; k < K; ++k) {
    T wbuf[NR];
    const T* wrow = w + k * ldw;
    for (std::size_t j = 0; j < NR; ++j) wbuf[j] = wrow[j];
    for (std::size_t i = 0; i < MR; ++i) {
      const T xv = x[i * ldx + k];
      for (std::size_t j = 0; j < NR; ++j) acc[i][j] += xv * wbuf[j];
    }
  }
  for (std::size_t i = 0; i < MR; ++i)
    for (std::size_t j = 0; j < NR; ++j) y[i * ldy + j] += acc[i][j];
}

template <typename T, std::size_t MR>
inline void gemm_row_block(std::size_t m, std::size_t N, std::size_t K,
                           const T* __restrict x, std::size_t ldx,
                           const T* __restrict w, std::size_t ldw,
                           T* __restrict y, std::size_t ldy) {
  constexpr std::size_t NR = 64 / sizeof(T);  // 16 floats or 8 doubles
  const T* xrow = x + m * ldx;
  T* yrow = y + m * ldy;
  std::size_t n = 0;
  for (; n + NR <= N; n += NR)
    gemm_tile<T, MR, NR>(K, xrow, ldx, w + n, ldw, yrow + n, ldy);
  for (; n < N; ++n) {
    for (std::size_t i = 0; i < MR; ++i) {
      T acc = 0;
      for (std::size_t k = 0; k < K; ++k)
        acc += xrow[i * ldx + k] * w[k * ldw + n];
      yrow[i * ldy + n] += acc;
    }
  }
}

template <typename T>
inline void gemm_rows(std::size_t m0, std::size_t m1, std::size_t N,
                      std::size_t K, const T* x, std::size_t ldx, const T* w,
                      std::size_t ldw, T* y, std::size_t ldy) {
  std::size_t m = m0;
  for (; m + 4 <= m1; m += 4)
    gemm_row_block<T, 4>(m, N, K, x, ldx, w, ldw, y, ldy);
  for (; m < m1; ++m) gemm_row_block<T, 1>(m, N, K, x, ldx, w, ldw, y, ldy);
}

}  // namespace detail

// y += x @ w with row-parallel partitioning.
template <typename T>
void gemm_accumulate(std::size_t M, std::size_t N, std::size_t K, const T* x,
                     std::size_t ldx, const T* w, std::size_t ldw, T* y,
                     std::size_t ldy) {
  if (M == 0 || N == 0 || K == 0) return;
  parallel_for(M, [&](std::size_t m0, std::size_t m1) {
    detail::gemm_rows(m0, m1, N, K, x, ldx, w, ldw, y, ldy);
  }, 16);
}

// Contiguous convenience overload.
template <typename T>
void gemm_accumulate(std::size_t M, std::size_t N, std::size_t K, const T* x,
                     const T* w, T* y) {
  gemm_accumulate(M, N, K, x, K, w, N, y, N);
}

}  // namespace evtrack
