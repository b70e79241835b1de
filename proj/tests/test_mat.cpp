// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "slicesim/mat.hpp"
#include "slicesim/rng.hpp"

using namespace slicesim;

namespace {

Mat random_mat(int r, int c, Rng& rng) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

// Reference: per-element ascending-k dot product, the semantics every kernel
// must reproduce bit for bit.
Mat naive_nn(const Mat& a, const Mat& b) {
  Mat c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  }
  return c;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("gemm_nn matches the naive ascending-k product bitwise") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(40));
    const int k = 1 + static_cast<int>(rng.below(40));
    const int n = 1 + static_cast<int>(rng.below(70));
    const Mat a = random_mat(m, k, rng);
    const Mat b = random_mat(k, n, rng);
    Mat c(m, n);
    gemm_nn(a, b, c);
    REQUIRE(bitwise_equal(c, naive_nn(a, b)));
  }
}

TEST_CASE("transpose kernels agree with explicit transposition bitwise") {
  Rng rng(2);
  const Mat a = random_mat(17, 9, rng);
  const Mat b = random_mat(17, 13, rng);
  Mat c(9, 13);
  gemm_tn(a, b, c);
  REQUIRE(bitwise_equal(c, naive_nn(detail::transposed(a), b)));

  const Mat d = random_mat(11, 7, rng);
  const Mat e = random_mat(23, 7, rng);
  Mat f(11, 23);
  gemm_nt(d, e, f);
  REQUIRE(bitwise_equal(f, naive_nn(d, detail::transposed(e))));
}

TEST_CASE("row-sliced product equals the corresponding rows of the full product bitwise") {
  // The property the partial backward relies on: restricting an operand to a
  // row/column band must not change a single bit of the surviving outputs.
  Rng rng(3);
  const Mat a = random_mat(32, 24, rng);
  const Mat b = random_mat(24, 16, rng);
  Mat full(32, 16);
  gemm_nn(a, b, full);
  for (int r0 = 0; r0 < 32; r0 += 8) {
    Mat part(8, 16);
    gemm_nn(row_band(a, r0, r0 + 8), b, part);
    REQUIRE(bitwise_equal(part, row_band(full, r0, r0 + 8)));
  }
}

TEST_CASE("column-sliced gemm_tn equals the corresponding columns bitwise") {
  Rng rng(4);
  const Mat x = random_mat(48, 12, rng);   // activations
  const Mat dq = random_mat(48, 20, rng);  // upstream
  Mat full(12, 20);
  gemm_tn(x, dq, full);
  for (int c0 = 0; c0 < 20; c0 += 5) {
    Mat part(12, 5);
    gemm_tn(x, col_band(dq, c0, c0 + 5), part);
    REQUIRE(bitwise_equal(part, col_band(full, c0, c0 + 5)));
  }
}

TEST_CASE("accumulating gemm adds to existing contents") {
  Rng rng(5);
  const Mat a = random_mat(6, 4, rng);
  const Mat b = random_mat(4, 3, rng);
  Mat c(6, 3);
  gemm_nn(a, b, c);
  Mat c2 = c;
  gemm_nn(a, b, c2, /*accumulate=*/true);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 3; ++j) REQUIRE(c2(i, j) == c(i, j) + c(i, j));
}

TEST_CASE("dimension mismatches are configuration errors") {
  Mat a(3, 4), b(5, 6), c(3, 6);
  REQUIRE_THROWS_AS(gemm_nn(a, b, c), ConfigError);
  REQUIRE_THROWS_AS(row_band(a, 2, 5), ConfigError);
  REQUIRE_THROWS_AS(col_band(a, 3, 2), ConfigError);
}

TEST_CASE("band extraction copies exactly") {
  Rng rng(6);
  const Mat a = random_mat(10, 8, rng);
  const Mat rows = row_band(a, 3, 7);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j) REQUIRE(rows(i, j) == a(3 + i, j));
  const Mat cols = col_band(a, 2, 5);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 3; ++j) REQUIRE(cols(i, j) == a(i, 2 + j));
}
