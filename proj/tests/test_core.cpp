#include <cmath>

#include "doctest.h"
#include "gdr2/common.hpp"
#include "gdr2/ops.hpp"

using namespace gdr2;

namespace {

// independent naive triple-loop product, fixed k-ascending order
template <typename T>
Mat<T> naive_matmul(const Mat<T>& a, const Mat<T>& b) {
  Mat<T> c(a.rows, b.cols);
  for (index_t i = 0; i < a.rows; ++i)
    for (index_t j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (index_t k = 0; k < a.cols; ++k)
        acc += static_cast<double>(a(i, k)) * static_cast<double>(b(k, j));
      c(i, j) = static_cast<T>(acc);
    }
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand sums") {
  Mat<double> x(2, 3);
  for (index_t i = 0; i < x.size(); ++i) x.data[i] = 0.5 * static_cast<double>(i) - 1.0;
  const Mat<double> i2 = Mat<double>::eye(2);
  CHECK(max_abs_diff(matmul(i2, x), x) == 0.0);

  Mat<double> a(2, 2);
  a(0, 0) = 1; a(0, 1) = 2; a(1, 0) = 3; a(1, 1) = 4;
  Mat<double> ones(2, 1);
  ones(0, 0) = 1; ones(1, 0) = 1;
  const Mat<double> c = matmul(a, ones);
  CHECK(c(0, 0) == 3.0);
  CHECK(c(1, 0) == 7.0);
}

TEST_CASE("matmul random vs naive oracle, bitwise in binary64") {
  Rng rng(7);
  const Mat<double> a = random_uniform<double>(rng, 7, 5, -1.0, 1.0);
  const Mat<double> b = random_uniform<double>(rng, 5, 3, -1.0, 1.0);
  CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) == 0.0);
}

TEST_CASE("matmul shape mismatch") {
  CHECK_THROWS_AS(matmul(Mat<double>(2, 3), Mat<double>(2, 3)), DimensionError);
}

TEST_CASE("forward substitution unitriangular") {
  SUBCASE("T = 0 returns RHS") {
    Rng rng(3);
    const Mat<double> rhs = random_uniform<double>(rng, 4, 2, -1.0, 1.0);
    CHECK(max_abs_diff(forward_substitution_unitriangular(Mat<double>(4, 4), rhs), rhs) == 0.0);
  }
  SUBCASE("2x2 unitriangular inverse") {
    const double t = 0.37;
    Mat<double> tm(2, 2);
    tm(1, 0) = t;
    const Mat<double> inv = forward_substitution_unitriangular(tm, Mat<double>::eye(2));
    CHECK(inv(0, 0) == 1.0);
    CHECK(inv(0, 1) == 0.0);
    CHECK(inv(1, 0) == -t);
    CHECK(inv(1, 1) == 1.0);
  }
  SUBCASE("residual check, C = 8") {
    Rng rng(11);
    const index_t n = 8;
    Mat<double> t(n, n);
    for (index_t i = 1; i < n; ++i)
      for (index_t j = 0; j < i; ++j) t(i, j) = rng.uniform(-1.0, 1.0);
    const Mat<double> rhs = random_uniform<double>(rng, n, 5, -1.0, 1.0);
    const Mat<double> x = forward_substitution_unitriangular(t, rhs);
    // (I + T) X - RHS
    Mat<double> resid = matmul(t, x);
    for (index_t i = 0; i < resid.size(); ++i) resid.data[i] += x.data[i] - rhs.data[i];
    CHECK(max_abs(resid) <= 1e-12);
  }
  SUBCASE("residual stays at rounding level relative to the solution, C = 64") {
    // dense uniform T grows the solution, so the bound is scaled by ||X||
    Rng rng(11);
    const index_t n = 64;
    Mat<double> t(n, n);
    for (index_t i = 1; i < n; ++i)
      for (index_t j = 0; j < i; ++j) t(i, j) = rng.uniform(-1.0, 1.0);
    const Mat<double> rhs = random_uniform<double>(rng, n, 5, -1.0, 1.0);
    const Mat<double> x = forward_substitution_unitriangular(t, rhs);
    Mat<double> resid = matmul(t, x);
    for (index_t i = 0; i < resid.size(); ++i) resid.data[i] += x.data[i] - rhs.data[i];
    CHECK(max_abs(resid) <= 1e-12 * std::max(1.0, max_abs(x)));
  }
  SUBCASE("contract errors") {
    Mat<double> bad(2, 2);
    bad(0, 0) = 1.0;  // nonzero diagonal
    CHECK_THROWS_AS(forward_substitution_unitriangular(bad, Mat<double>::eye(2)), ContractError);
    Mat<double> upper(2, 2);
    upper(0, 1) = 0.5;
    CHECK_THROWS_AS(forward_substitution_unitriangular(upper, Mat<double>::eye(2)), ContractError);
    CHECK_THROWS_AS(forward_substitution_unitriangular(Mat<double>(2, 3), Mat<double>(2, 2)),
                    ContractError);
  }
}

TEST_CASE("l2_normalize_rows") {
  Mat<double> m(1, 2);
  m(0, 0) = 3.0; m(0, 1) = 4.0;
  const Mat<double> n = l2_normalize_rows(m, 1e-6);
  CHECK(n(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(n(0, 1) == doctest::Approx(0.8).epsilon(1e-12));

  const Mat<double> z = l2_normalize_rows(Mat<double>(1, 4), 1e-6);
  CHECK(max_abs(z) == 0.0);

  Rng rng(5);
  const Mat<double> r = random_uniform<double>(rng, 4, 8, -2.0, 2.0);
  const Mat<double> rn = l2_normalize_rows(r, 1e-6);
  for (index_t i = 0; i < rn.rows; ++i) {
    double ss = 0.0;
    for (index_t j = 0; j < rn.cols; ++j) ss += rn(i, j) * rn(i, j);
    CHECK(std::abs(std::sqrt(ss) - 1.0) <= 1e-12);
  }
  CHECK_THROWS_AS(l2_normalize_rows(r, 0.0), ContractError);
}

TEST_CASE("elementwise kernels") {
  CHECK(sigmoid_scalar(0.0) == 0.5);
  CHECK(softplus_scalar(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(softplus_scalar(50.0) == 50.0);  // overflow-safe branch

  Rng rng(9);
  const Mat<double> x = random_uniform<double>(rng, 6, 6, -30.0, 30.0);
  const Mat<double> s = ew_silu(x);
  const Mat<double> sig = ew_sigmoid(x);
  for (index_t i = 0; i < x.size(); ++i) {
    CHECK(std::abs(s.data[i] - x.data[i] * sig.data[i]) <= 1e-15 * std::abs(s.data[i]) + 1e-300);
    CHECK(sig.data[i] > 0.0);
    CHECK(sig.data[i] < 1.0);
  }
  const Mat<double> sp = ew_softplus(x);
  for (double v : sp.data) CHECK(v >= 0.0);
  const Mat<double> neg = random_uniform<double>(rng, 4, 4, -20.0, -1e-3);
  const Mat<double> e = ew_exp(neg);
  for (double v : e.data) {
    CHECK(v > 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(ew_mul(Mat<double>(2, 2), Mat<double>(2, 3)), DimensionError);
}

TEST_CASE("reverse cumulative sum over rows") {
  Mat<double> m(3, 1);
  m(0, 0) = 1; m(1, 0) = 2; m(2, 0) = 3;
  const Mat<double> r = reverse_cumsum_rows(m);
  CHECK(r(0, 0) == 6.0);
  CHECK(r(1, 0) == 5.0);
  CHECK(r(2, 0) == 3.0);

  Mat<double> single(1, 4);
  for (index_t i = 0; i < 4; ++i) single(0, i) = static_cast<double>(i) - 1.5;
  CHECK(max_abs_diff(reverse_cumsum_rows(single), single) == 0.0);

  Rng rng(2);
  const Mat<double> x = random_uniform<double>(rng, 16, 4, -1.0, 1.0);
  const Mat<double> got = reverse_cumsum_rows(x);
  // reversal oracle: forward cumsum on reversed rows, reversed back
  Mat<double> expect(16, 4);
  std::vector<double> acc(4, 0.0);
  for (index_t r2 = 15; r2 >= 0; --r2)
    for (index_t c = 0; c < 4; ++c) {
      acc[static_cast<std::size_t>(c)] += x(r2, c);
      expect(r2, c) = acc[static_cast<std::size_t>(c)];
    }
  CHECK(max_abs_diff(got, expect) <= 1e-15);
}

TEST_CASE("rms_norm") {
  const Vec<double> ones(4, 1.0);
  const Vec<double> out = rms_norm(ones, ones, 0.0);
  for (double v : out) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));

  const Vec<double> zero(4, 0.0);
  const Vec<double> z = rms_norm(zero, ones, 1e-5);
  for (double v : z) CHECK(v == 0.0);

  Rng rng(17);
  const Vec<double> v = random_uniform_vec<double>(rng, 8, -2.0, 2.0);
  const Vec<double> w = random_uniform_vec<double>(rng, 8, 0.5, 1.5);
  const Vec<double> got = rms_norm(v, w, 1e-5);
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double denom = std::sqrt(ss / 8.0 + 1e-5);
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(std::abs(got[i] - v[i] / denom * w[i]) <= 1e-12);

  CHECK_THROWS_AS(rms_norm(v, Vec<double>(3, 1.0), 1e-5), DimensionError);
}

TEST_CASE("rng determinism and uniform bounds") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(1);
  double mean_abs = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double x = c.uniform(-0.5, 0.5);
    CHECK(x >= -0.5);
    CHECK(x < 0.5);
    mean_abs += std::abs(x);
  }
  mean_abs /= 10000.0;
  CHECK(mean_abs == doctest::Approx(0.25).epsilon(0.05));  // E|U(-l,l)| = l/2
}
