#include "vitfl/matrix.hpp"

#include <string>

#include "vitfl/error.hpp"

namespace vitfl {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix Matrix::operator*(const Matrix& rhs) const {
  if (cols_ != rhs.rows_) {
    throw ShapeError("Matrix product: inner dimensions " + std::to_string(cols_) + " and " +
                     std::to_string(rhs.rows_) + " differ");
  }
  Matrix out(rows_, rhs.cols_);
  gemm(false, false, rows_, rhs.cols_, cols_, 1.0, data_.data(), rhs.data_.data(), 0.0,
       out.data_.data());
  return out;
}

Matrix Matrix::scaled(double s) const {
  Matrix out = *this;
  for (double& v : out.data_) v *= s;
  return out;
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c) {
  if (beta == 0.0) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  } else if (beta != 1.0) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] *= beta;
  }
  if (m == 0 || n == 0 || k == 0) return;

  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      const double* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double s = alpha * ai[p];
        if (s == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
        std::size_t p = 0;
        for (; p + 4 <= k; p += 4) {
          s0 += ai[p] * bj[p];
          s1 += ai[p + 1] * bj[p + 1];
          s2 += ai[p + 2] * bj[p + 2];
          s3 += ai[p + 3] * bj[p + 3];
        }
        for (; p < k; ++p) s0 += ai[p] * bj[p];
        ci[j] += alpha * ((s0 + s1) + (s2 + s3));
      }
    }
  } else if (trans_a && !trans_b) {
    // A stored k x m.
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double s = alpha * ap[i];
        if (s == 0.0) continue;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
        c[i * n + j] += alpha * s;
      }
  }
}

}  // namespace vitfl
