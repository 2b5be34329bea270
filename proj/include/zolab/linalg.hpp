#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "zolab/errors.hpp"
#include "zolab/prng.hpp"

namespace zolab {

using Vector = std::vector<double>;

/// Dense row-major real matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Throws ShapeError unless data.size() == rows * cols.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }
  Vector col(std::size_t j) const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Vector helpers.
double dot(std::span<const double> x, std::span<const double> y);
double norm_sq(std::span<const double> x);
double norm(std::span<const double> x);
/// y += a * x
void axpy(double a, std::span<const double> x, std::span<double> y);
Vector scaled(double a, std::span<const double> x);
bool all_finite(std::span<const double> x) noexcept;

// Matrix helpers.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
/// a * x
Vector matvec(const Matrix& a, std::span<const double> x);
/// a^T * y
Vector matvec_transposed(const Matrix& a, std::span<const double> y);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scaled(double s, const Matrix& a);
Matrix outer(std::span<const double> u, std::span<const double> v);
/// Sum of squared entries.
double frobenius_sq(const Matrix& g);
/// Trace inner product <a, b> = sum_ij a_ij b_ij.
double frobenius_inner(const Matrix& a, const Matrix& b);

// Random sampling.
Vector sample_gaussian(Prng& rng, std::size_t len);
Matrix sample_gaussian(Prng& rng, std::size_t rows, std::size_t cols);
/// Uniform random unit vector (normalized Gaussian).
Vector sample_unit(Prng& rng, std::size_t len);
/// n x k matrix with orthonormal columns (Gram-Schmidt of a Gaussian matrix,
/// two passes). Requires k <= n.
Matrix random_orthonormal_columns(Prng& rng, std::size_t n, std::size_t k);

struct TopSingularPair {
  double sigma1 = 0.0;
  Vector u1;  ///< unit, length rows
  Vector v1;  ///< unit, length cols
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& message, TopSingularPair last)
      : Error("convergence", message), last_(std::move(last)) {}
  const TopSingularPair& last_iterate() const noexcept { return last_; }

 private:
  TopSingularPair last_;
};

inline constexpr double kPowerIterationTol = 1e-10;
inline constexpr std::size_t kPowerIterationMaxIter = 10000;

/// Largest singular value and vectors of g by power iteration on g g^T,
/// alternating u <- g v / |g v|, v <- g^T u / |g^T u| from a random start.
/// Stops when successive v iterates differ by at most tol in norm.
/// Sign convention: the first entry of u1 whose magnitude exceeds 1e-6 * max|u1|
/// is positive.
/// Throws DomainError for a zero matrix or tol <= 0, ConvergenceError when
/// max_iter is exhausted.
TopSingularPair top_singular_pair(const Matrix& g, double tol, std::size_t max_iter, Prng& rng);
inline TopSingularPair top_singular_pair(const Matrix& g, Prng& rng) {
  return top_singular_pair(g, kPowerIterationTol, kPowerIterationMaxIter, rng);
}

}  // namespace zolab
