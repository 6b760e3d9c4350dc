#pragma once

#include <algorithm>
#include <cstring>
#include <limits>
#include <type_traits>

#include "gdr2/common.hpp"

namespace gdr2 {

// Precision the inner products are carried in. `f64` keeps binary64
// accumulators even for binary32 inputs; `input` accumulates natively.
enum class Accum { input, f64 };

namespace detail {

#ifndef NDEBUG
template <typename scalar_t>
inline void debug_check_finite(const Mat<scalar_t>& m, const char* what) {
  if (!all_finite(m)) throw RangeError(std::string("non-finite result in ") + what);
}
#else
template <typename scalar_t>
inline void debug_check_finite(const Mat<scalar_t>&, const char*) {}
#endif

// Register-blocked 8-row x one-vector tile. Every output element still
// accumulates with k ascending, so results are bitwise equal to the naive
// triple loop; the blocking only interleaves independent elements.
template <typename scalar_t, int TJ>
inline void matmul_tile8(const scalar_t* __restrict__ a, index_t lda,
                         const scalar_t* __restrict__ b, index_t ldb, index_t kk,
                         index_t j0, scalar_t* __restrict__ c, index_t ldc) {
  scalar_t acc0[TJ] = {}, acc1[TJ] = {}, acc2[TJ] = {}, acc3[TJ] = {};
  scalar_t acc4[TJ] = {}, acc5[TJ] = {}, acc6[TJ] = {}, acc7[TJ] = {};
  index_t k = 0;
  const index_t k4 = kk - kk % 4;
  for (; k < k4; k += 4) {
#pragma GCC unroll 4
    for (index_t u = k; u < k + 4; ++u) {
      const scalar_t* __restrict__ br = b + u * ldb + j0;
      const scalar_t v0 = a[0 * lda + u], v1 = a[1 * lda + u];
      const scalar_t v2 = a[2 * lda + u], v3 = a[3 * lda + u];
      const scalar_t v4 = a[4 * lda + u], v5 = a[5 * lda + u];
      const scalar_t v6 = a[6 * lda + u], v7 = a[7 * lda + u];
      for (int j = 0; j < TJ; ++j) {
        const scalar_t bj = br[j];
        acc0[j] += v0 * bj;
        acc1[j] += v1 * bj;
        acc2[j] += v2 * bj;
        acc3[j] += v3 * bj;
        acc4[j] += v4 * bj;
        acc5[j] += v5 * bj;
        acc6[j] += v6 * bj;
        acc7[j] += v7 * bj;
      }
    }
  }
  for (; k < kk; ++k) {
    const scalar_t* __restrict__ br = b + k * ldb + j0;
    const scalar_t v0 = a[0 * lda + k], v1 = a[1 * lda + k];
    const scalar_t v2 = a[2 * lda + k], v3 = a[3 * lda + k];
    const scalar_t v4 = a[4 * lda + k], v5 = a[5 * lda + k];
    const scalar_t v6 = a[6 * lda + k], v7 = a[7 * lda + k];
    for (int j = 0; j < TJ; ++j) {
      const scalar_t bj = br[j];
      acc0[j] += v0 * bj;
      acc1[j] += v1 * bj;
      acc2[j] += v2 * bj;
      acc3[j] += v3 * bj;
      acc4[j] += v4 * bj;
      acc5[j] += v5 * bj;
      acc6[j] += v6 * bj;
      acc7[j] += v7 * bj;
    }
  }
  scalar_t* r = c + j0;
  for (int j = 0; j < TJ; ++j) r[0 * ldc + j] = acc0[j];
  for (int j = 0; j < TJ; ++j) r[1 * ldc + j] = acc1[j];
  for (int j = 0; j < TJ; ++j) r[2 * ldc + j] = acc2[j];
  for (int j = 0; j < TJ; ++j) r[3 * ldc + j] = acc3[j];
  for (int j = 0; j < TJ; ++j) r[4 * ldc + j] = acc4[j];
  for (int j = 0; j < TJ; ++j) r[5 * ldc + j] = acc5[j];
  for (int j = 0; j < TJ; ++j) r[6 * ldc + j] = acc6[j];
  for (int j = 0; j < TJ; ++j) r[7 * ldc + j] = acc7[j];
}

// Plain fallback for remainders and small shapes; same accumulation order.
// Accumulates into whatever c holds (callers zero the region first).
template <typename scalar_t>
inline void matmul_simple(const Mat<scalar_t>& a, const Mat<scalar_t>& b, Mat<scalar_t>& c,
                          index_t i_begin, index_t i_end, index_t j_begin, index_t j_end,
                          index_t kk) {
  for (index_t i = i_begin; i < i_end; ++i) {
    scalar_t* crow = c.row(i);
    const scalar_t* arow = a.row(i);
    for (index_t k = 0; k < kk; ++k) {
      const scalar_t aik = arow[k];
      const scalar_t* brow = b.row(k);
      for (index_t j = j_begin; j < j_end; ++j) crow[j] += aik * brow[j];
    }
  }
}

template <typename scalar_t, typename acc_t>
void matmul_ikj(const Mat<scalar_t>& a, const Mat<scalar_t>& b, Mat<scalar_t>& c) {
  const index_t m = a.rows, kk = a.cols, n = b.cols;
  if constexpr (std::is_same_v<scalar_t, acc_t>) {
    constexpr int TJ = 64 / sizeof(scalar_t);  // one 512-bit vector per row
    const index_t j_full = n - n % TJ;
    const index_t i_full = m - m % 8;
    for (index_t j0 = 0; j0 < j_full; j0 += TJ)
      for (index_t i0 = 0; i0 < i_full; i0 += 8)
        matmul_tile8<scalar_t, TJ>(a.row(i0), kk, b.data.data(), n, kk, j0, c.row(i0), n);
    if (i_full < m) matmul_simple(a, b, c, i_full, m, 0, j_full, kk);
    if (j_full < n) matmul_simple(a, b, c, 0, m, j_full, n, kk);
  } else {
    std::vector<acc_t> acc(static_cast<std::size_t>(n));
    for (index_t i = 0; i < m; ++i) {
      std::fill(acc.begin(), acc.end(), acc_t(0));
      const scalar_t* arow = a.row(i);
      for (index_t k = 0; k < kk; ++k) {
        const acc_t aik = static_cast<acc_t>(arow[k]);
        const scalar_t* brow = b.row(k);
        for (index_t j = 0; j < n; ++j) acc[j] += aik * static_cast<acc_t>(brow[j]);
      }
      scalar_t* crow = c.row(i);
      for (index_t j = 0; j < n; ++j) crow[j] = static_cast<scalar_t>(acc[j]);
    }
  }
}

template <typename scalar_t>
void reset(Mat<scalar_t>& m, index_t rows, index_t cols) {
  m.rows = rows;
  m.cols = cols;
  m.data.assign(static_cast<std::size_t>(rows * cols), scalar_t(0));
}

// Shape the buffer without clearing it; used when every element is about to
// be overwritten.
template <typename scalar_t>
void reshape_for_overwrite(Mat<scalar_t>& m, index_t rows, index_t cols) {
  m.rows = rows;
  m.cols = cols;
  m.data.resize(static_cast<std::size_t>(rows * cols));
}

}  // namespace detail

// c = a b, overwriting c (reuses its storage when already allocated).
template <typename scalar_t>
void matmul_into(const Mat<scalar_t>& a, const Mat<scalar_t>& b, Mat<scalar_t>& c,
                 Accum acc = Accum::f64) {
  check_dim(a.cols == b.rows, "matmul: inner dimensions differ");
  constexpr int TJ = 64 / sizeof(scalar_t);
  const bool native = (acc == Accum::input) || std::is_same_v<scalar_t, double>;
  const bool tiles_cover = native && a.rows % 8 == 0 && b.cols % TJ == 0;
  if (tiles_cover)
    detail::reshape_for_overwrite(c, a.rows, b.cols);
  else
    detail::reset(c, a.rows, b.cols);
  if (acc == Accum::f64)
    detail::matmul_ikj<scalar_t, double>(a, b, c);
  else
    detail::matmul_ikj<scalar_t, scalar_t>(a, b, c);
  detail::debug_check_finite(c, "matmul");
}

template <typename scalar_t>
Mat<scalar_t> matmul(const Mat<scalar_t>& a, const Mat<scalar_t>& b, Accum acc = Accum::f64) {
  Mat<scalar_t> c;
  matmul_into(a, b, c, acc);
  return c;
}

// Keep entries with col <= row + diag, zero the rest.
template <typename scalar_t>
void tril_inplace(Mat<scalar_t>& m, index_t diag) {
  for (index_t i = 0; i < m.rows; ++i) {
    scalar_t* r = m.row(i);
    for (index_t j = std::max<index_t>(i + diag + 1, 0); j < m.cols; ++j) r[j] = scalar_t(0);
  }
}

// c = tril(a b, diag): tiles entirely above the kept band are skipped.
template <typename scalar_t>
void tril_matmul_into(const Mat<scalar_t>& a, const Mat<scalar_t>& b, Mat<scalar_t>& c,
                      index_t diag, Accum acc = Accum::f64) {
  check_dim(a.cols == b.rows, "matmul: inner dimensions differ");
  const index_t m = a.rows, kk = a.cols, n = b.cols;
  if (acc == Accum::f64 && !std::is_same_v<scalar_t, double>) {
    detail::reset(c, m, n);
    detail::matmul_ikj<scalar_t, double>(a, b, c);
    tril_inplace(c, diag);
    return;
  }
  constexpr int TJ = 64 / sizeof(scalar_t);
  const index_t j_full = n - n % TJ;
  const index_t i_full = m - m % 8;
  if (j_full == n && i_full == m) {
    // tile stores plus the final mask touch every element
    detail::reshape_for_overwrite(c, m, n);
    for (index_t i0 = 0; i0 < i_full; i0 += 8) {
      const index_t band_end = std::min<index_t>(n, i0 + 8 + diag);
      for (index_t j0 = 0; j0 < band_end; j0 += TJ)
        detail::matmul_tile8<scalar_t, TJ>(a.row(i0), kk, b.data.data(), n, kk, j0, c.row(i0),
                                           n);
      // anything at or beyond band_end is cleared by the mask below
      for (index_t i = i0; i < i0 + 8; ++i) {
        scalar_t* row = c.row(i);
        for (index_t j = std::max<index_t>(band_end, 0); j < n; ++j) row[j] = scalar_t(0);
      }
    }
    tril_inplace(c, diag);
    return;
  }
  detail::reset(c, m, n);
  for (index_t i0 = 0; i0 < i_full; i0 += 8) {
    const index_t j_need = std::min<index_t>(j_full, i0 + 8 + diag);  // beyond is all zero
    for (index_t j0 = 0; j0 < j_need; j0 += TJ)
      detail::matmul_tile8<scalar_t, TJ>(a.row(i0), kk, b.data.data(), n, kk, j0, c.row(i0), n);
    if (j_full < n && j_full <= i0 + 7 + diag)
      detail::matmul_simple(a, b, c, i0, i0 + 8, j_full, n, kk);
  }
  if (i_full < m) detail::matmul_simple(a, b, c, i_full, m, 0, n, kk);
  tril_inplace(c, diag);
}

// c = a b where a is lower triangular (incl. diagonal): the k loop stops at
// the row block's last live column. Zero entries past it contribute nothing.
template <typename scalar_t>
void causal_matmul_into(const Mat<scalar_t>& a, const Mat<scalar_t>& b, Mat<scalar_t>& c,
                        Accum acc = Accum::f64) {
  check_dim(a.cols == b.rows, "matmul: inner dimensions differ");
  const index_t m = a.rows, kk = a.cols, n = b.cols;
  constexpr int TJ = 64 / sizeof(scalar_t);
  const bool native = (acc == Accum::input) || std::is_same_v<scalar_t, double>;
  const bool tiles_cover = native && m % 8 == 0 && n % TJ == 0;
  if (tiles_cover)
    detail::reshape_for_overwrite(c, m, n);
  else
    detail::reset(c, m, n);
  if (!native) {
    detail::matmul_ikj<scalar_t, double>(a, b, c);
    return;
  }
  const index_t j_full = n - n % TJ;
  const index_t i_full = m - m % 8;
  for (index_t i0 = 0; i0 < i_full; i0 += 8) {
    const index_t kk_eff = std::min<index_t>(kk, i0 + 8);
    for (index_t j0 = 0; j0 < j_full; j0 += TJ)
      detail::matmul_tile8<scalar_t, TJ>(a.row(i0), kk, b.data.data(), n, kk_eff, j0, c.row(i0),
                                         n);
    if (j_full < n) detail::matmul_simple(a, b, c, i0, i0 + 8, j_full, n, kk_eff);
  }
  if (i_full < m) detail::matmul_simple(a, b, c, i_full, m, 0, n, kk);
}

template <typename scalar_t>
void transpose_into(const Mat<scalar_t>& m, Mat<scalar_t>& t) {
  detail::reshape_for_overwrite(t, m.cols, m.rows);
  constexpr index_t TB = 16;
  for (index_t i0 = 0; i0 < m.rows; i0 += TB)
    for (index_t j0 = 0; j0 < m.cols; j0 += TB) {
      const index_t imax = std::min(i0 + TB, m.rows);
      const index_t jmax = std::min(j0 + TB, m.cols);
      for (index_t i = i0; i < imax; ++i)
        for (index_t j = j0; j < jmax; ++j) t(j, i) = m(i, j);
    }
}

template <typename scalar_t>
Mat<scalar_t> transposed(const Mat<scalar_t>& m) {
  Mat<scalar_t> t;
  transpose_into(m, t);
  return t;
}

// Lane-parallel reductions; the serial min/max dependency chain otherwise
// dominates large scans.
template <typename scalar_t>
bool within_range(const Mat<scalar_t>& m, double lo, double hi) {
  if (m.size() == 0) return true;
  constexpr int LANES = 16;
  scalar_t mn[LANES], mx[LANES];
  for (int l = 0; l < LANES; ++l) {
    mn[l] = m.data[0];
    mx[l] = m.data[0];
  }
  const index_t full = m.size() - m.size() % LANES;
  const scalar_t* p = m.data.data();
  for (index_t i = 0; i < full; i += LANES)
    for (int l = 0; l < LANES; ++l) {
      mn[l] = std::min(mn[l], p[i + l]);
      mx[l] = std::max(mx[l], p[i + l]);
    }
  scalar_t lo_all = m.data[0], hi_all = m.data[0];
  for (int l = 0; l < LANES; ++l) {
    lo_all = std::min(lo_all, mn[l]);
    hi_all = std::max(hi_all, mx[l]);
  }
  for (index_t i = full; i < m.size(); ++i) {
    lo_all = std::min(lo_all, p[i]);
    hi_all = std::max(hi_all, p[i]);
  }
  return static_cast<double>(lo_all) >= lo && static_cast<double>(hi_all) <= hi;
}

template <typename scalar_t>
bool is_all_zero(const Mat<scalar_t>& m) {
  constexpr int LANES = 16;
  scalar_t acc[LANES] = {};
  const index_t full = m.size() - m.size() % LANES;
  const scalar_t* p = m.data.data();
  for (index_t i = 0; i < full; i += LANES)
    for (int l = 0; l < LANES; ++l) acc[l] = std::max(acc[l], std::abs(p[i + l]));
  scalar_t top = scalar_t(0);
  for (int l = 0; l < LANES; ++l) top = std::max(top, acc[l]);
  for (index_t i = full; i < m.size(); ++i) top = std::max(top, std::abs(p[i]));
  return top == scalar_t(0);
}

namespace detail {

// One row of the solve with the accumulator held in register tiles; the
// subtraction order over s is ascending, matching the plain elimination.
template <typename scalar_t>
inline void solve_row_tile64(const Mat<scalar_t>& t, Mat<scalar_t>& x, const Mat<scalar_t>& rhs,
                             index_t r, index_t j0) {
  constexpr int V = 64 / sizeof(scalar_t);
  scalar_t a0[V], a1[V], a2[V], a3[V];
  const scalar_t* br = rhs.row(r) + j0;
  for (int j = 0; j < V; ++j) a0[j] = br[j];
  for (int j = 0; j < V; ++j) a1[j] = br[V + j];
  for (int j = 0; j < V; ++j) a2[j] = br[2 * V + j];
  for (int j = 0; j < V; ++j) a3[j] = br[3 * V + j];
  const scalar_t* trow = t.row(r);
  for (index_t s = 0; s < r; ++s) {
    const scalar_t trs = trow[s];
    const scalar_t* xs = x.row(s) + j0;
    for (int j = 0; j < V; ++j) a0[j] -= trs * xs[j];
    for (int j = 0; j < V; ++j) a1[j] -= trs * xs[V + j];
    for (int j = 0; j < V; ++j) a2[j] -= trs * xs[2 * V + j];
    for (int j = 0; j < V; ++j) a3[j] -= trs * xs[3 * V + j];
  }
  scalar_t* xr = x.row(r) + j0;
  for (int j = 0; j < V; ++j) xr[j] = a0[j];
  for (int j = 0; j < V; ++j) xr[V + j] = a1[j];
  for (int j = 0; j < V; ++j) xr[2 * V + j] = a2[j];
  for (int j = 0; j < V; ++j) xr[3 * V + j] = a3[j];
}

// Both WY systems share (I + T); solving them together halves the T traffic.
template <typename scalar_t>
void solve_unitriangular_pair_native(const Mat<scalar_t>& t, const Mat<scalar_t>& rhs1,
                                     const Mat<scalar_t>& rhs2, Mat<scalar_t>& x1,
                                     Mat<scalar_t>& x2) {
  constexpr int TJ = 256 / sizeof(scalar_t);
  const index_t n = t.rows, w1 = rhs1.cols, w2 = rhs2.cols;
  const index_t f1 = w1 - w1 % TJ, f2 = w2 - w2 % TJ;
  const auto tail = [&](const Mat<scalar_t>& rhs, Mat<scalar_t>& x, index_t from, index_t to,
                        index_t r) {
    scalar_t* xr = x.row(r);
    const scalar_t* br = rhs.row(r);
    for (index_t j = from; j < to; ++j) xr[j] = br[j];
    const scalar_t* trow = t.row(r);
    for (index_t s = 0; s < r; ++s) {
      const scalar_t trs = trow[s];
      const scalar_t* xs = x.row(s);
      for (index_t j = from; j < to; ++j) xr[j] -= trs * xs[j];
    }
  };
  for (index_t r = 0; r < n; ++r) {
    for (index_t j0 = 0; j0 < f1; j0 += TJ) solve_row_tile64(t, x1, rhs1, r, j0);
    if (f1 < w1) tail(rhs1, x1, f1, w1, r);
    for (index_t j0 = 0; j0 < f2; j0 += TJ) solve_row_tile64(t, x2, rhs2, r, j0);
    if (f2 < w2) tail(rhs2, x2, f2, w2, r);
  }
}

template <typename scalar_t>
void solve_unitriangular_native(const Mat<scalar_t>& t, const Mat<scalar_t>& rhs,
                                Mat<scalar_t>& x) {
  constexpr int TJ = 256 / sizeof(scalar_t);  // four vectors of accumulators
  const index_t n = t.rows, w = rhs.cols;
  const index_t j_full = w - w % TJ;
  for (index_t r = 0; r < n; ++r) {
    for (index_t j0 = 0; j0 < j_full; j0 += TJ) solve_row_tile64(t, x, rhs, r, j0);
    if (j_full < w) {
      scalar_t* xr = x.row(r);
      const scalar_t* br = rhs.row(r);
      for (index_t j = j_full; j < w; ++j) xr[j] = br[j];
      const scalar_t* trow = t.row(r);
      for (index_t s = 0; s < r; ++s) {
        const scalar_t trs = trow[s];
        const scalar_t* xs = x.row(s);
        for (index_t j = j_full; j < w; ++j) xr[j] -= trs * xs[j];
      }
    }
  }
}

}  // namespace detail

// Solves (I + T) X = RHS by sequential row elimination; T must be strictly
// lower triangular. With acc f64 the whole solve is carried in binary64.
template <typename scalar_t>
Mat<scalar_t> forward_substitution_unitriangular(const Mat<scalar_t>& t,
                                                 const Mat<scalar_t>& rhs,
                                                 Accum acc = Accum::f64) {
  check_contract(t.rows == t.cols, "forward_substitution: T not square");
  check_dim(t.rows == rhs.rows, "forward_substitution: RHS row mismatch");
  {
    constexpr int LANES = 16;
    scalar_t mag[LANES] = {};
    for (index_t i = 0; i < t.rows; ++i) {
      const scalar_t* row = t.row(i);
      const index_t len = t.cols - i;
      const index_t full = len - len % LANES;
      for (index_t j = 0; j < full; j += LANES)
        for (int l = 0; l < LANES; ++l)
          mag[l] = std::max(mag[l], std::abs(row[i + j + l]));
      for (index_t j = full; j < len; ++j) mag[0] = std::max(mag[0], std::abs(row[i + j]));
    }
    scalar_t top = scalar_t(0);
    for (int l = 0; l < LANES; ++l) top = std::max(top, mag[l]);
    check_contract(top == scalar_t(0),
                   "forward_substitution: T has nonzero diagonal or upper entry");
  }

  const index_t n = t.rows, w = rhs.cols;
  if (acc == Accum::f64 && !std::is_same_v<scalar_t, double>) {
    Mat<double> t64(n, n), rhs64(n, w);
    for (index_t i = 0; i < t.size(); ++i) t64.data[i] = static_cast<double>(t.data[i]);
    for (index_t i = 0; i < rhs.size(); ++i) rhs64.data[i] = static_cast<double>(rhs.data[i]);
    Mat<double> x64(n, w);
    detail::solve_unitriangular_native(t64, rhs64, x64);
    Mat<scalar_t> out(n, w);
    for (index_t i = 0; i < x64.size(); ++i) out.data[i] = static_cast<scalar_t>(x64.data[i]);
    return out;
  }
  Mat<scalar_t> x(n, w);
  detail::solve_unitriangular_native(t, rhs, x);
  detail::debug_check_finite(x, "forward_substitution");
  return x;
}

// Each row divided by max(||row||_2, eps); zero rows stay zero.
template <typename scalar_t>
Mat<scalar_t> l2_normalize_rows(const Mat<scalar_t>& m, double eps) {
  check_contract(eps > 0.0, "l2_normalize_rows: eps must be positive");
  Mat<scalar_t> out(m.rows, m.cols);
  for (index_t i = 0; i < m.rows; ++i) {
    const scalar_t* src = m.row(i);
    double ss = 0.0;
    for (index_t j = 0; j < m.cols; ++j) ss += static_cast<double>(src[j]) * src[j];
    const double denom = std::max(std::sqrt(ss), eps);
    scalar_t* dst = out.row(i);
    for (index_t j = 0; j < m.cols; ++j)
      dst[j] = static_cast<scalar_t>(static_cast<double>(src[j]) / denom);
  }
  return out;
}

// Polynomial expf for the binary32 engine path: ~2 ulp over the gate range,
// flushing to zero near the binary32 floor (callers guard the result).
// The vector and scalar forms run the same arithmetic, so lane boundaries
// never change results.
inline float fast_expf(float x) {
  x = x < -87.0f ? -87.0f : x;
  const float t = x * 1.44269504088896341f;
  const float n = (t + 12582912.0f) - 12582912.0f;  // round to nearest
  float f = x - n * 0.693359375f;
  f -= n * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * f + 1.3981999507e-3f;
  p = p * f + 8.3334519073e-3f;
  p = p * f + 4.1665795894e-2f;
  p = p * f + 1.6666665459e-1f;
  p = p * f + 5.0000001201e-1f;
  p = p * f * f + f + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof(scale));
  return p * scale;
}

namespace detail {

typedef float vf16 __attribute__((vector_size(64)));
typedef std::int32_t vi16 __attribute__((vector_size(64)));

inline vf16 fast_expf_v(vf16 x) {
  const vf16 floor_v = vf16{} - 87.0f;
  x = x < -87.0f ? floor_v : x;
  const vf16 t = x * 1.44269504088896341f;
  const vf16 n = (t + 12582912.0f) - 12582912.0f;
  vf16 f = x - n * 0.693359375f;
  f -= n * -2.12194440e-4f;
  vf16 p = f * 0.0f + 1.9875691500e-4f;
  p = p * f + 1.3981999507e-3f;
  p = p * f + 8.3334519073e-3f;
  p = p * f + 4.1665795894e-2f;
  p = p * f + 1.6666665459e-1f;
  p = p * f + 5.0000001201e-1f;
  p = p * f * f + f + 1.0f;
  const vi16 bits = (__builtin_convertvector(n, vi16) + 127) << 23;
  vf16 scale;
  __builtin_memcpy(&scale, &bits, sizeof(scale));
  return p * scale;
}

}  // namespace detail

inline void fast_expf_buffer(const double* in, float* out, index_t n) {
  index_t i = 0;
  for (; i + 16 <= n; i += 16) {
    detail::vf16 x;
    for (int l = 0; l < 16; ++l) x[l] = static_cast<float>(in[i + l]);
    const detail::vf16 e = detail::fast_expf_v(x);
    for (int l = 0; l < 16; ++l) out[i + l] = e[l];
  }
  for (; i < n; ++i) out[i] = fast_expf(static_cast<float>(in[i]));
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double softplus_scalar(double x) {
  return x > 20.0 ? x : std::log1p(std::exp(x));  // overflow-safe branch
}
inline double silu_scalar(double x) { return x * sigmoid_scalar(x); }
inline double silu_grad_scalar(double x) {
  const double s = sigmoid_scalar(x);
  return s * (1.0 + x * (1.0 - s));
}

namespace detail {
template <typename scalar_t, typename F>
Mat<scalar_t> map(const Mat<scalar_t>& a, F f) {
  Mat<scalar_t> out(a.rows, a.cols);
  for (index_t i = 0; i < a.size(); ++i)
    out.data[i] = static_cast<scalar_t>(f(static_cast<double>(a.data[i])));
  return out;
}
template <typename scalar_t, typename F>
Mat<scalar_t> zip(const Mat<scalar_t>& a, const Mat<scalar_t>& b, F f, const char* what) {
  check_dim(a.same_shape(b), what);
  Mat<scalar_t> out(a.rows, a.cols);
  for (index_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
  return out;
}
}  // namespace detail

template <typename scalar_t>
Mat<scalar_t> ew_mul(const Mat<scalar_t>& a, const Mat<scalar_t>& b) {
  return detail::zip(a, b, [](scalar_t x, scalar_t y) { return x * y; }, "ew_mul: shape mismatch");
}
template <typename scalar_t>
Mat<scalar_t> ew_add(const Mat<scalar_t>& a, const Mat<scalar_t>& b) {
  return detail::zip(a, b, [](scalar_t x, scalar_t y) { return x + y; }, "ew_add: shape mismatch");
}
template <typename scalar_t>
Mat<scalar_t> ew_sub(const Mat<scalar_t>& a, const Mat<scalar_t>& b) {
  return detail::zip(a, b, [](scalar_t x, scalar_t y) { return x - y; }, "ew_sub: shape mismatch");
}
template <typename scalar_t>
Mat<scalar_t> ew_exp(const Mat<scalar_t>& a) {
  return detail::map(a, [](double x) { return std::exp(x); });
}
template <typename scalar_t>
Mat<scalar_t> ew_sigmoid(const Mat<scalar_t>& a) {
  return detail::map(a, sigmoid_scalar);
}
template <typename scalar_t>
Mat<scalar_t> ew_silu(const Mat<scalar_t>& a) {
  return detail::map(a, silu_scalar);
}
template <typename scalar_t>
Mat<scalar_t> ew_softplus(const Mat<scalar_t>& a) {
  return detail::map(a, softplus_scalar);
}
template <typename scalar_t>
Mat<scalar_t> ew_reciprocal(const Mat<scalar_t>& a) {
  return detail::map(a, [](double x) { return 1.0 / x; });
}

// out[r] = sum_{s >= r} m[s], per column.
template <typename scalar_t>
Mat<scalar_t> reverse_cumsum_rows(const Mat<scalar_t>& m) {
  Mat<scalar_t> out(m.rows, m.cols);
  std::vector<double> acc(static_cast<std::size_t>(m.cols), 0.0);
  for (index_t r = m.rows - 1; r >= 0; --r) {
    const scalar_t* src = m.row(r);
    scalar_t* dst = out.row(r);
    for (index_t j = 0; j < m.cols; ++j) {
      acc[j] += static_cast<double>(src[j]);
      dst[j] = static_cast<scalar_t>(acc[j]);
    }
  }
  return out;
}

// v / sqrt(mean(v^2) + eps), scaled by weight.
template <typename scalar_t>
Vec<scalar_t> rms_norm(const Vec<scalar_t>& v, const Vec<scalar_t>& weight, double eps) {
  check_dim(v.size() == weight.size(), "rms_norm: length mismatch");
  check_contract(eps >= 0.0, "rms_norm: eps must be nonnegative");
  double ss = 0.0;
  for (scalar_t x : v) ss += static_cast<double>(x) * x;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(v.size()) + eps);
  Vec<scalar_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<scalar_t>(static_cast<double>(v[i]) * inv * static_cast<double>(weight[i]));
  return out;
}

}  // namespace gdr2
