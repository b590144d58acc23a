#include "ditlab/dense_matrix.hpp"

#include <algorithm>
#include <cmath>

namespace ditlab {

DenseMatrix DenseMatrix::from_rows(
    std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  DenseMatrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("from_rows: ragged rows");
    std::size_t j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

DenseMatrix DenseMatrix::operator*(const DenseMatrix& rhs) const {
  if (cols_ != rhs.rows_)
    throw std::invalid_argument("matmul: inner dimensions mismatch (" +
                                std::to_string(cols_) + " vs " +
                                std::to_string(rhs.rows_) + ")");
  DenseMatrix out(rows_, rhs.cols_);
  for (std::size_t i = 0; i < rows_; ++i) {
    for (std::size_t k = 0; k < cols_; ++k) {
      const double a = (*this)(i, k);
      if (a == 0.0) continue;
      const double* rhs_row = &rhs.data_[k * rhs.cols_];
      double* out_row = &out.data_[i * rhs.cols_];
      for (std::size_t j = 0; j < rhs.cols_; ++j) out_row[j] += a * rhs_row[j];
    }
  }
  return out;
}

DenseMatrix DenseMatrix::operator+(const DenseMatrix& rhs) const {
  DenseMatrix out = *this;
  out += rhs;
  return out;
}

DenseMatrix DenseMatrix::operator-(const DenseMatrix& rhs) const {
  DenseMatrix out = *this;
  out -= rhs;
  return out;
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& rhs) {
  if (!same_shape(rhs)) throw std::invalid_argument("add: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += rhs.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& rhs) {
  if (!same_shape(rhs)) throw std::invalid_argument("sub: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= rhs.data_[i];
  return *this;
}

DenseMatrix DenseMatrix::scaled(double s) const {
  DenseMatrix out = *this;
  for (double& v : out.data_) v *= s;
  return out;
}

DenseMatrix DenseMatrix::hadamard(const DenseMatrix& rhs) const {
  if (!same_shape(rhs)) throw std::invalid_argument("hadamard: shape mismatch");
  DenseMatrix out = *this;
  for (std::size_t i = 0; i < data_.size(); ++i) out.data_[i] *= rhs.data_[i];
  return out;
}

std::vector<double> DenseMatrix::mul_vec(const std::vector<double>& x) const {
  if (x.size() != cols_) throw std::invalid_argument("mul_vec: length mismatch");
  std::vector<double> y(rows_, 0.0);
  for (std::size_t i = 0; i < rows_; ++i) {
    const double* row = &data_[i * cols_];
    double acc = 0.0;
    for (std::size_t j = 0; j < cols_; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

std::vector<double> DenseMatrix::mul_vec_transposed(const std::vector<double>& x) const {
  if (x.size() != rows_) throw std::invalid_argument("mul_vec_transposed: length mismatch");
  std::vector<double> y(cols_, 0.0);
  for (std::size_t i = 0; i < rows_; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* row = &data_[i * cols_];
    for (std::size_t j = 0; j < cols_; ++j) y[j] += xi * row[j];
  }
  return y;
}

std::vector<double> DenseMatrix::row(std::size_t i) const {
  return std::vector<double>(data_.begin() + i * cols_, data_.begin() + (i + 1) * cols_);
}

std::vector<double> DenseMatrix::col(std::size_t j) const {
  std::vector<double> c(rows_);
  for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
  return c;
}

void DenseMatrix::set_row(std::size_t i, const std::vector<double>& v) {
  if (v.size() != cols_) throw std::invalid_argument("set_row: length mismatch");
  std::copy(v.begin(), v.end(), data_.begin() + i * cols_);
}

void DenseMatrix::set_col(std::size_t j, const std::vector<double>& v) {
  if (v.size() != rows_) throw std::invalid_argument("set_col: length mismatch");
  for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
}

bool DenseMatrix::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void DenseMatrix::require_finite(const std::string& where) const {
  if (!all_finite()) throw std::runtime_error(where + ": non-finite matrix entry");
}

std::vector<double> vectorize(const DenseMatrix& x) { return x.data(); }

DenseMatrix matrixize(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  if (v.size() != rows * cols)
    throw std::invalid_argument("matrixize: length " + std::to_string(v.size()) +
                                " does not equal " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  DenseMatrix m(rows, cols);
  m.data() = v;
  return m;
}

DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t ia = 0; ia < a.rows(); ++ia)
    for (std::size_t ja = 0; ja < a.cols(); ++ja) {
      const double av = a(ia, ja);
      if (av == 0.0) continue;
      for (std::size_t ib = 0; ib < b.rows(); ++ib)
        for (std::size_t jb = 0; jb < b.cols(); ++jb)
          out(ia * b.rows() + ib, ja * b.cols() + jb) = av * b(ib, jb);
    }
  return out;
}

DenseMatrix row_kron(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows())
    throw std::invalid_argument("row_kron: row counts differ (" +
                                std::to_string(a.rows()) + " vs " +
                                std::to_string(b.rows()) + ")");
  const std::size_t k1 = a.cols(), k2 = b.cols();
  DenseMatrix out(a.rows(), k1 * k2);
  for (std::size_t l = 0; l < a.rows(); ++l)
    for (std::size_t s = 0; s < k1; ++s) {
      const double av = a(l, s);
      for (std::size_t t = 0; t < k2; ++t) out(l, s * k2 + t) = av * b(l, t);
    }
  return out;
}

namespace {

double norm_max(const DenseMatrix& x) {
  double m = 0.0;
  for (double v : x.data()) m = std::max(m, std::fabs(v));
  return m;
}

double norm_frobenius(const DenseMatrix& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return std::sqrt(s);
}

double norm_two_inf(const DenseMatrix& x) {
  double m = 0.0;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) s += x(i, j) * x(i, j);
    m = std::max(m, std::sqrt(s));
  }
  return m;
}

// Largest singular value by power iteration on A^T A.
double norm_op2(const DenseMatrix& x) {
  const std::size_t n = x.cols();
  if (n == 0 || x.rows() == 0) return 0.0;
  const double fro = norm_frobenius(x);
  if (fro == 0.0) return 0.0;

  std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n)));
  // Deterministic perturbation so v is never orthogonal to the top space.
  for (std::size_t j = 0; j < n; ++j) v[j] += 1e-3 * std::sin(0.7 * (double)(j + 1));
  double nv = norm2(v);
  for (double& e : v) e /= nv;

  double sigma_prev = 0.0;
  for (int iter = 0; iter < 20000; ++iter) {
    std::vector<double> av = x.mul_vec(v);
    std::vector<double> w = x.mul_vec_transposed(av);
    double nw = norm2(w);
    if (nw == 0.0) return 0.0;
    for (double& e : w) e /= nw;
    v = std::move(w);
    const double sigma = std::sqrt(nw);  // ||A^T A v|| -> sigma^2 at the fixed point
    if (std::fabs(sigma - sigma_prev) <= 1e-10 * std::max(1.0, sigma)) return sigma;
    sigma_prev = sigma;
  }
  return sigma_prev;
}

}  // namespace

double norm(const DenseMatrix& x, MatrixNorm kind) {
  switch (kind) {
    case MatrixNorm::max: return norm_max(x);
    case MatrixNorm::frobenius: return norm_frobenius(x);
    case MatrixNorm::two_inf: return norm_two_inf(x);
    case MatrixNorm::op2: return norm_op2(x);
  }
  throw std::invalid_argument("norm: unknown kind");
}

DenseMatrix mul_abt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("mul_abt: inner dimension mismatch");
  DenseMatrix out(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = &a.data()[i * k];
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = &b.data()[j * k];
      double acc = 0.0;
      for (std::size_t s = 0; s < k; ++s) acc += arow[s] * brow[s];
      out(i, j) = acc;
    }
  }
  return out;
}

DenseMatrix mul_atb(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("mul_atb: inner dimension mismatch");
  DenseMatrix out(a.cols(), b.cols());
  for (std::size_t l = 0; l < a.rows(); ++l) {
    const double* arow = &a.data()[l * a.cols()];
    const double* brow = &b.data()[l * b.cols()];
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = &out.data()[i * b.cols()];
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

std::vector<double> vec_add(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("vec_add: length mismatch");
  std::vector<double> c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] + b[i];
  return c;
}

std::vector<double> vec_sub(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("vec_sub: length mismatch");
  std::vector<double> c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] - b[i];
  return c;
}

std::vector<double> vec_scaled(const std::vector<double>& a, double s) {
  std::vector<double> c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] * s;
  return c;
}

}  // namespace ditlab
