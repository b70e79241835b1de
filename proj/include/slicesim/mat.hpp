// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <string>
#include <vector>

#include "slicesim/errors.hpp"

namespace slicesim {

// Dense row-major double matrix.
//
// Every product kernel in this file computes each output element as the
// serial ascending-k dot product of its operands. That ordering is the load
// bearing invariant: the product of any row/column sub-block equals the
// corresponding block of the full product bit for bit, which the sliced
// backward passes rely on. Kernels may copy or transpose operands internally
// (copies are exact) but must never split or reorder the k accumulation.
class Mat {
 public:
  Mat() : rows_(0), cols_(0) {}
  Mat(int rows, int cols) : rows_(rows), cols_(cols), a_(static_cast<std::size_t>(rows) * cols, 0.0) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return a_.size(); }

  double& operator()(int r, int c) { return a_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return a_[static_cast<std::size_t>(r) * cols_ + c]; }

  double* data() { return a_.data(); }
  const double* data() const { return a_.data(); }
  double* row(int r) { return a_.data() + static_cast<std::size_t>(r) * cols_; }
  const double* row(int r) const { return a_.data() + static_cast<std::size_t>(r) * cols_; }

  void set_zero() { std::memset(a_.data(), 0, a_.size() * sizeof(double)); }

  bool all_finite() const {
    for (double v : a_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  int rows_, cols_;
  std::vector<double> a_;
};

namespace detail {

inline void check_dims(bool ok, const char* what) {
  if (!ok) throw ConfigError(std::string("dimension mismatch in ") + what);
}

// C (m x n) = A (m x k) * B (k x n), plus accumulate when acc is true.
// Inner j loop carries independent accumulator chains, so each C(i,j) is a
// plain ascending-k dot product.
inline void gemm_nn_core(const double* A, const double* B, double* C, int m, int k, int n, bool acc) {
  constexpr int kBlock = 32;
  double local[kBlock];
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * k;
    double* crow = C + static_cast<std::size_t>(i) * n;
    for (int j0 = 0; j0 < n; j0 += kBlock) {
      const int nj = (n - j0 < kBlock) ? (n - j0) : kBlock;
      for (int j = 0; j < nj; ++j) local[j] = 0.0;
      const double* bp = B + j0;
      for (int p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = bp + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < nj; ++j) local[j] += av * brow[j];
      }
      if (acc) {
        for (int j = 0; j < nj; ++j) crow[j0 + j] += local[j];
      } else {
        for (int j = 0; j < nj; ++j) crow[j0 + j] = local[j];
      }
    }
  }
}

inline Mat transposed(const Mat& m) {
  Mat t(m.cols(), m.rows());
  for (int r = 0; r < m.rows(); ++r) {
    const double* src = m.row(r);
    for (int c = 0; c < m.cols(); ++c) t(c, r) = src[c];
  }
  return t;
}

}  // namespace detail

// C = A * B
inline void gemm_nn(const Mat& A, const Mat& B, Mat& C, bool accumulate = false) {
  detail::check_dims(A.cols() == B.rows() && C.rows() == A.rows() && C.cols() == B.cols(), "gemm_nn");
  detail::gemm_nn_core(A.data(), B.data(), C.data(), A.rows(), A.cols(), B.cols(), accumulate);
}

// C = A^T * B
inline void gemm_tn(const Mat& A, const Mat& B, Mat& C, bool accumulate = false) {
  detail::check_dims(A.rows() == B.rows() && C.rows() == A.cols() && C.cols() == B.cols(), "gemm_tn");
  const Mat at = detail::transposed(A);
  detail::gemm_nn_core(at.data(), B.data(), C.data(), at.rows(), at.cols(), B.cols(), accumulate);
}

// C = A * B^T
inline void gemm_nt(const Mat& A, const Mat& B, Mat& C, bool accumulate = false) {
  detail::check_dims(A.cols() == B.cols() && C.rows() == A.rows() && C.cols() == B.rows(), "gemm_nt");
  const Mat bt = detail::transposed(B);
  detail::gemm_nn_core(A.data(), bt.data(), C.data(), A.rows(), A.cols(), bt.cols(), accumulate);
}

// Column band [c0, c1) of src as a fresh matrix.
inline Mat col_band(const Mat& src, int c0, int c1) {
  detail::check_dims(0 <= c0 && c0 <= c1 && c1 <= src.cols(), "col_band");
  Mat out(src.rows(), c1 - c0);
  for (int r = 0; r < src.rows(); ++r)
    std::memcpy(out.row(r), src.row(r) + c0, static_cast<std::size_t>(c1 - c0) * sizeof(double));
  return out;
}

// Row band [r0, r1) of src as a fresh matrix.
inline Mat row_band(const Mat& src, int r0, int r1) {
  detail::check_dims(0 <= r0 && r0 <= r1 && r1 <= src.rows(), "row_band");
  Mat out(r1 - r0, src.cols());
  std::memcpy(out.data(), src.row(r0), out.size() * sizeof(double));
  return out;
}

inline void add_inplace(Mat& dst, const Mat& src) {
  detail::check_dims(dst.rows() == src.rows() && dst.cols() == src.cols(), "add_inplace");
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

inline void scale_inplace(Mat& m, double s) {
  double* d = m.data();
  for (std::size_t i = 0; i < m.size(); ++i) d[i] *= s;
}

}  // namespace slicesim
