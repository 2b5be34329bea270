#include "zolab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace zolab {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_len(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    std::ostringstream os;
    os << what << ": length " << got << ", expected " << want;
    throw ShapeError(os.str());
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    std::ostringstream os;
    os << "matrix data length " << data_.size() << " does not match " << rows_ << "x" << cols_;
    throw ShapeError(os.str());
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() == 0 ? 0 : rows.begin()->size()) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) {
      throw ShapeError("ragged matrix literal");
    }
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    m(i, i) = 1.0;
  }
  return m;
}

Vector Matrix::col(std::size_t j) const {
  Vector out(rows_);
  for (std::size_t i = 0; i < rows_; ++i) {
    out[i] = (*this)(i, j);
  }
  return out;
}

double dot(std::span<const double> x, std::span<const double> y) {
  require_len(y.size(), x.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += x[i] * y[i];
  }
  return s;
}

double norm_sq(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) {
    s += v * v;
  }
  return s;
}

double norm(std::span<const double> x) { return std::sqrt(norm_sq(x)); }

void axpy(double a, std::span<const double> x, std::span<double> y) {
  require_len(y.size(), x.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] += a * x[i];
  }
}

Vector scaled(double a, std::span<const double> x) {
  Vector out(x.begin(), x.end());
  for (double& v : out) {
    v *= a;
  }
  return out;
}

bool all_finite(std::span<const double> x) noexcept {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) {
        continue;
      }
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        crow[j] += aik * brow[j];
      }
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      t(j, i) = a(i, j);
    }
  }
  return t;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  require_len(x.size(), a.cols(), "matvec");
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    y[i] = dot(a.row(i), x);
  }
  return y;
}

Vector matvec_transposed(const Matrix& a, std::span<const double> y) {
  require_len(y.size(), a.rows(), "matvec_transposed");
  Vector x(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    axpy(y[i], a.row(i), x);
  }
  return x;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix c = a;
  axpy(1.0, b.data(), c.data());
  return c;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix c = a;
  axpy(-1.0, b.data(), c.data());
  return c;
}

Matrix scaled(double s, const Matrix& a) {
  Matrix c = a;
  for (double& v : c.data()) {
    v *= s;
  }
  return c;
}

Matrix outer(std::span<const double> u, std::span<const double> v) {
  Matrix m(u.size(), v.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    axpy(u[i], v, m.row(i));
  }
  return m;
}

double frobenius_sq(const Matrix& g) { return norm_sq(g.data()); }

double frobenius_inner(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "frobenius_inner");
  return dot(a.data(), b.data());
}

Vector sample_gaussian(Prng& rng, std::size_t len) {
  Vector out(len);
  for (double& v : out) {
    v = rng.gaussian();
  }
  return out;
}

Matrix sample_gaussian(Prng& rng, std::size_t rows, std::size_t cols) {
  return Matrix(rows, cols, sample_gaussian(rng, rows * cols));
}

Vector sample_unit(Prng& rng, std::size_t len) {
  Vector v = sample_gaussian(rng, len);
  const double n = norm(v);
  for (double& x : v) {
    x /= n;
  }
  return v;
}

Matrix random_orthonormal_columns(Prng& rng, std::size_t n, std::size_t k) {
  if (k > n) {
    throw ShapeError("random_orthonormal_columns: more columns than rows");
  }
  std::vector<Vector> basis;
  basis.reserve(k);
  while (basis.size() < k) {
    Vector v = sample_gaussian(rng, n);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) {
        axpy(-dot(q, v), q, v);
      }
    }
    const double nv = norm(v);
    if (nv < 1e-8) {
      continue;
    }
    for (double& x : v) {
      x /= nv;
    }
    basis.push_back(std::move(v));
  }
  Matrix out(n, k);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      out(i, j) = basis[j][i];
    }
  }
  return out;
}

TopSingularPair top_singular_pair(const Matrix& g, double tol, std::size_t max_iter, Prng& rng) {
  if (!(tol > 0.0)) {
    throw DomainError("top_singular_pair: tol must be positive");
  }
  if (frobenius_sq(g) == 0.0) {
    throw DomainError("top_singular_pair: zero matrix");
  }

  TopSingularPair pair;
  Vector v = sample_unit(rng, g.cols());
  bool converged = false;
  for (std::size_t it = 0; it < max_iter; ++it) {
    Vector u = matvec(g, v);
    double su = norm(u);
    if (su == 0.0) {
      // Start landed in the null space; restart.
      v = sample_unit(rng, g.cols());
      continue;
    }
    for (double& x : u) {
      x /= su;
    }
    Vector w = matvec_transposed(g, u);
    const double sw = norm(w);
    for (double& x : w) {
      x /= sw;
    }
    double delta = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double d = w[j] - v[j];
      delta += d * d;
    }
    pair.sigma1 = sw;
    pair.u1 = std::move(u);
    pair.v1 = w;
    v = std::move(w);
    if (std::sqrt(delta) <= tol) {
      converged = true;
      break;
    }
  }

  if (!pair.u1.empty()) {
    // Re-derive u1 from the final v1 so that g v1 = sigma1 u1 holds to rounding.
    Vector u = matvec(g, pair.v1);
    const double su = norm(u);
    for (double& x : u) {
      x /= su;
    }
    pair.u1 = std::move(u);
    pair.sigma1 = norm(matvec_transposed(g, pair.u1));

    double umax = 0.0;
    for (double x : pair.u1) {
      umax = std::max(umax, std::abs(x));
    }
    for (double x : pair.u1) {
      if (std::abs(x) > 1e-6 * umax) {
        if (x < 0.0) {
          for (double& y : pair.u1) y = -y;
          for (double& y : pair.v1) y = -y;
        }
        break;
      }
    }
  }

  if (!converged) {
    throw ConvergenceError("top_singular_pair: no convergence within max_iter", std::move(pair));
  }
  return pair;
}

}  // namespace zolab
