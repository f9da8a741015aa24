// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace ddistill::gemm {

// Register-tiled matrix products over row-major storage.
//
// Every output element is accumulated over k in ascending order by the same
// microkernel regardless of M, so a row of C depends only on the matching row
// of A. Batched inference therefore reproduces item-by-item inference bit
// for bit.

namespace detail {

template <class T>
struct Tile {
  static constexpr int kRows = 6;
  static constexpr int kCols = 128 / static_cast<int>(sizeof(T));  // two 512-bit lanes
};

// Packs an MR-row strip of A (or Aᵀ) as Ap[k * MR + r], zero padded.
template <class T, bool kTransA>
inline void pack_a(const T* a, int lda, int row0, int rows, int depth, T* out) {
  constexpr int kMr = Tile<T>::kRows;
  for (int k = 0; k < depth; ++k) {
    T* dst = out + static_cast<std::size_t>(k) * kMr;
    for (int r = 0; r < kMr; ++r) {
      if (r < rows) {
        dst[r] = kTransA ? a[static_cast<std::size_t>(k) * lda + row0 + r]
                         : a[static_cast<std::size_t>(row0 + r) * lda + k];
      } else {
        dst[r] = T(0);
      }
    }
  }
}

// Packs an NR-column panel of op(B) as Bp[k * NR + c], zero padded.
template <class T, bool kTransB>
inline void pack_b(const T* b, int ldb, int col0, int cols, int depth, T* out) {
  constexpr int kNr = Tile<T>::kCols;
  for (int k = 0; k < depth; ++k) {
    T* dst = out + static_cast<std::size_t>(k) * kNr;
    if constexpr (kTransB) {
      for (int c = 0; c < cols; ++c) dst[c] = b[static_cast<std::size_t>(col0 + c) * ldb + k];
    } else {
      const T* src = b + static_cast<std::size_t>(k) * ldb + col0;
      std::copy(src, src + cols, dst);
    }
    std::fill(dst + cols, dst + kNr, T(0));
  }
}

template <class T>
inline void micro_kernel(int depth, const T* __restrict ap, const T* __restrict bp, T* __restrict c,
                         int ldc, int rows, int cols, bool accumulate) {
  constexpr int kMr = Tile<T>::kRows;
  constexpr int kNr = Tile<T>::kCols;
  constexpr int kLane = 64 / static_cast<int>(sizeof(T));
  static_assert(kMr == 6 && kNr == 2 * kLane);
  typedef T Vec __attribute__((vector_size(64), aligned(sizeof(T))));
  // named accumulators stay in registers; an array of vectors is kept in memory
  Vec c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{}, c40{}, c41{}, c50{}, c51{};
  for (int k = 0; k < depth; ++k) {
    const Vec* brow = reinterpret_cast<const Vec*>(bp + static_cast<std::size_t>(k) * kNr);
    const Vec b0 = brow[0];
    const Vec b1 = brow[1];
    const T* acol = ap + static_cast<std::size_t>(k) * kMr;
    T a = acol[0];
    c00 += a * b0; c01 += a * b1;
    a = acol[1];
    c10 += a * b0; c11 += a * b1;
    a = acol[2];
    c20 += a * b0; c21 += a * b1;
    a = acol[3];
    c30 += a * b0; c31 += a * b1;
    a = acol[4];
    c40 += a * b0; c41 += a * b1;
    a = acol[5];
    c50 += a * b0; c51 += a * b1;
  }
  alignas(64) T out[kMr][kNr];
  Vec* o = reinterpret_cast<Vec*>(&out[0][0]);
  o[0] = c00; o[1] = c01; o[2] = c10; o[3] = c11; o[4] = c20; o[5] = c21;
  o[6] = c30; o[7] = c31; o[8] = c40; o[9] = c41; o[10] = c50; o[11] = c51;
  for (int r = 0; r < rows; ++r) {
    T* crow = c + static_cast<std::size_t>(r) * ldc;
    if (accumulate) {
      for (int j = 0; j < cols; ++j) crow[j] += out[r][j];
    } else {
      for (int j = 0; j < cols; ++j) crow[j] = out[r][j];
    }
  }
}

template <class T, bool kTransA, bool kTransB>
void product(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
             bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate) {
      for (int i = 0; i < m; ++i) std::fill(c + static_cast<std::size_t>(i) * ldc, c + static_cast<std::size_t>(i) * ldc + n, T(0));
    }
    return;
  }
  constexpr int kMr = Tile<T>::kRows;
  constexpr int kNr = Tile<T>::kCols;
  thread_local std::vector<T> bpack;
  thread_local std::vector<T> apack;
  const int panels = (n + kNr - 1) / kNr;
  bpack.resize(static_cast<std::size_t>(panels) * k * kNr);
  for (int p = 0; p < panels; ++p) {
    const int col0 = p * kNr;
    pack_b<T, kTransB>(b, ldb, col0, std::min(kNr, n - col0), k,
                       bpack.data() + static_cast<std::size_t>(p) * k * kNr);
  }
  apack.resize(static_cast<std::size_t>(k) * kMr);
  for (int row0 = 0; row0 < m; row0 += kMr) {
    const int rows = std::min(kMr, m - row0);
    pack_a<T, kTransA>(a, lda, row0, rows, k, apack.data());
    for (int p = 0; p < panels; ++p) {
      const int col0 = p * kNr;
      micro_kernel<T>(k, apack.data(), bpack.data() + static_cast<std::size_t>(p) * k * kNr,
                      c + static_cast<std::size_t>(row0) * ldc + col0, ldc, rows,
                      std::min(kNr, n - col0), accumulate);
    }
  }
}

}  // namespace detail

/// C[m×n] = A[m×k]·B[k×n], or C += when `accumulate`.
template <class T>
void nn(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
        bool accumulate = false) {
  detail::product<T, false, false>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

/// C[m×n] = A[m×k]·Bᵀ where B is stored n×k.
template <class T>
void nt(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
        bool accumulate = false) {
  detail::product<T, false, true>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

/// C[m×n] = Aᵀ·B where A is stored k×m.
template <class T>
void tn(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
        bool accumulate = false) {
  detail::product<T, true, false>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

}  // namespace ddistill::gemm
