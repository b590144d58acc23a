#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace ditlab {

/// Row-major dense matrix of doubles. The single carrier type for all
/// linear algebra in this project; public operations keep entries finite.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  DenseMatrix transposed() const;
  DenseMatrix operator*(const DenseMatrix& rhs) const;
  DenseMatrix operator+(const DenseMatrix& rhs) const;
  DenseMatrix operator-(const DenseMatrix& rhs) const;
  DenseMatrix& operator+=(const DenseMatrix& rhs);
  DenseMatrix& operator-=(const DenseMatrix& rhs);
  DenseMatrix scaled(double s) const;
  DenseMatrix hadamard(const DenseMatrix& rhs) const;

  /// y = A x for a length-cols() vector x.
  std::vector<double> mul_vec(const std::vector<double>& x) const;
  /// y = A^T x for a length-rows() vector x.
  std::vector<double> mul_vec_transposed(const std::vector<double>& x) const;

  std::vector<double> row(std::size_t i) const;
  std::vector<double> col(std::size_t j) const;
  void set_row(std::size_t i, const std::vector<double>& v);
  void set_col(std::size_t j, const std::vector<double>& v);

  bool all_finite() const;
  void require_finite(const std::string& where) const;
  bool same_shape(const DenseMatrix& rhs) const {
    return rows_ == rhs.rows_ && cols_ == rhs.cols_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Row-by-row flattening: X(i,j) -> v[i*cols + j].
std::vector<double> vectorize(const DenseMatrix& x);

/// Exact inverse of vectorize for the given shape. Throws on length mismatch.
DenseMatrix matrixize(const std::vector<double>& v, std::size_t rows, std::size_t cols);

/// Kronecker product, (La*Lb) x (da*db).
DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b);

/// Row-wise (face-splitting) Kronecker product: row l of the result is
/// kron(row l of a, row l of b). Satisfies
///   row_kron(U1,U2) * row_kron(V1,V2)^T == (U1 V1^T) .* (U2 V2^T).
DenseMatrix row_kron(const DenseMatrix& a, const DenseMatrix& b);

enum class MatrixNorm {
  max,        // max |entry|
  frobenius,  // sqrt of sum of squares
  two_inf,    // max over columns of column 2-norms
  op2,        // largest singular value (power iteration, tol 1e-10)
};

double norm(const DenseMatrix& x, MatrixNorm kind);

/// Low-rank factor pair (u v^T approximates some L x L target) with a
/// certified max-norm error bound.
struct LowRankFactors {
  DenseMatrix u;
  DenseMatrix v;
  std::size_t rank = 0;
  double err_bound = 0.0;
};

/// A * B^T for row-major operands sharing their inner dimension as columns.
DenseMatrix mul_abt(const DenseMatrix& a, const DenseMatrix& b);
/// A^T * B for row-major operands sharing their inner dimension as rows.
DenseMatrix mul_atb(const DenseMatrix& a, const DenseMatrix& b);

// Small vector helpers shared across modules.
double dot(const std::vector<double>& a, const std::vector<double>& b);
double norm2(const std::vector<double>& a);
std::vector<double> vec_add(const std::vector<double>& a, const std::vector<double>& b);
std::vector<double> vec_sub(const std::vector<double>& a, const std::vector<double>& b);
std::vector<double> vec_scaled(const std::vector<double>& a, double s);

}  // namespace ditlab
