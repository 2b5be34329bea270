#include "zolab/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace zolab {

namespace {

void require_shape(const LossOracle& oracle, const Matrix& w) {
  if (w.rows() != oracle.rows() || w.cols() != oracle.cols()) {
    std::ostringstream os;
    os << "oracle expects " << oracle.rows() << "x" << oracle.cols() << " weights, got "
       << w.rows() << "x" << w.cols();
    throw ShapeError(os.str());
  }
}

// log(1 + exp(t)) without overflow.
double softplus(double t) {
  return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

double sigmoid(double t) {
  if (t >= 0.0) {
    return 1.0 / (1.0 + std::exp(-t));
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace

NoiseChannel::NoiseChannel(double sigma, Prng rng) : sigma_(sigma), rng_(std::move(rng)) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("noise sigma must be finite and non-negative");
  }
}

double NoiseChannel::sample() {
  if (sigma_ == 0.0) {
    return 0.0;
  }
  return sigma_ * rng_.gaussian();
}

double LinearOracle::loss(const Matrix& w) const {
  require_shape(*this, w);
  return frobenius_inner(c_, w);
}

Matrix LinearOracle::gradient(const Matrix& w) const {
  require_shape(*this, w);
  return c_;
}

QuadraticOracle::QuadraticOracle(Matrix target, Matrix curvature, Vector spectral_profile)
    : target_(std::move(target)), curvature_(std::move(curvature)),
      profile_(std::move(spectral_profile)) {
  if (target_.rows() != curvature_.rows() || target_.cols() != curvature_.cols()) {
    throw ShapeError("quadratic oracle: target and curvature shapes differ");
  }
  for (double h : curvature_.data()) {
    if (!(h > 0.0) || !std::isfinite(h)) {
      throw DomainError("quadratic oracle: curvature weights must be positive");
    }
    max_curvature_ = std::max(max_curvature_, h);
  }
}

double QuadraticOracle::loss(const Matrix& w) const {
  require_shape(*this, w);
  double s = 0.0;
  const auto wd = w.data();
  const auto td = target_.data();
  const auto hd = curvature_.data();
  for (std::size_t i = 0; i < wd.size(); ++i) {
    const double d = wd[i] - td[i];
    s += hd[i] * d * d;
  }
  return 0.5 * s;
}

Matrix QuadraticOracle::gradient(const Matrix& w) const {
  require_shape(*this, w);
  Matrix g(rows(), cols());
  const auto wd = w.data();
  const auto td = target_.data();
  const auto hd = curvature_.data();
  auto gd = g.data();
  for (std::size_t i = 0; i < wd.size(); ++i) {
    gd[i] = hd[i] * (wd[i] - td[i]);
  }
  return g;
}

LogisticOracle::LogisticOracle(Matrix features, Vector labels, Vector readout)
    : features_(std::move(features)), labels_(std::move(labels)), readout_(std::move(readout)) {
  if (labels_.size() != features_.rows() || features_.rows() == 0) {
    throw ShapeError("logistic oracle: one label per feature row required");
  }
  for (double y : labels_) {
    if (y != 1.0 && y != -1.0) {
      throw DomainError("logistic oracle: labels must be +1 or -1");
    }
  }
  double mean_sq = 0.0;
  for (std::size_t i = 0; i < features_.rows(); ++i) {
    mean_sq += norm_sq(features_.row(i));
  }
  mean_sq /= static_cast<double>(features_.rows());
  smoothness_ = 0.25 * norm_sq(readout_) * mean_sq;
}

double LogisticOracle::loss(const Matrix& w) const {
  require_shape(*this, w);
  // p^T W x_i = (W^T p) . x_i
  const Vector wtp = matvec_transposed(w, readout_);
  double s = 0.0;
  for (std::size_t i = 0; i < features_.rows(); ++i) {
    s += softplus(-labels_[i] * dot(wtp, features_.row(i)));
  }
  return s / static_cast<double>(features_.rows());
}

Matrix LogisticOracle::gradient(const Matrix& w) const {
  require_shape(*this, w);
  const Vector wtp = matvec_transposed(w, readout_);
  // dL/dW = p m^T with m = (1/n) sum_i -y_i sigmoid(-y_i s_i) x_i
  Vector m(cols(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(features_.rows());
  for (std::size_t i = 0; i < features_.rows(); ++i) {
    const double y = labels_[i];
    const double coeff = -y * sigmoid(-y * dot(wtp, features_.row(i))) * inv_n;
    axpy(coeff, features_.row(i), m);
  }
  return outer(readout_, m);
}

QuadraticOracle make_spectral_quadratic(const SpectralSpec& spec, const Matrix& initial_weight,
                                        Prng& rng) {
  const std::size_t d_out = initial_weight.rows();
  const std::size_t d_in = initial_weight.cols();
  const std::size_t n = std::min(d_out, d_in);
  if (n == 0) {
    throw ShapeError("make_spectral_quadratic: empty weight");
  }
  if (!(spec.rho > 0.0) || spec.rho > 1.0) {
    throw DomainError("make_spectral_quadratic: rho must lie in (0, 1]");
  }
  const double flat = 1.0 / static_cast<double>(n);
  if (spec.rho < flat * (1.0 - 1e-12)) {
    std::ostringstream os;
    os << "make_spectral_quadratic: rho " << spec.rho << " is below the flat-spectrum floor 1/"
       << n;
    throw DomainError(os.str());
  }
  if (!(spec.grad_norm > 0.0) || !(spec.curvature_max >= 1.0)) {
    throw DomainError("make_spectral_quadratic: need grad_norm > 0 and curvature_max >= 1");
  }

  const double total = spec.grad_norm * spec.grad_norm;
  Vector sigmas(n, 0.0);
  sigmas[0] = std::sqrt(spec.rho * total);
  if (n > 1) {
    const double tail = std::sqrt((1.0 - spec.rho) * total / static_cast<double>(n - 1));
    std::fill(sigmas.begin() + 1, sigmas.end(), tail);
  }

  const Matrix u = random_orthonormal_columns(rng, d_out, n);
  const Matrix v = random_orthonormal_columns(rng, d_in, n);
  Matrix g(d_out, d_in);
  for (std::size_t k = 0; k < n; ++k) {
    if (sigmas[k] != 0.0) {
      add_scaled_outer(g, sigmas[k], u.col(k), v.col(k));
    }
  }

  Matrix h(d_out, d_in, 1.0);
  if (spec.curvature_max > 1.0) {
    for (double& x : h.data()) {
      x = 1.0 + (spec.curvature_max - 1.0) * rng.uniform();
    }
  }
  // G = h .* (W_init - W*)  =>  W* = W_init - G ./ h
  Matrix target = initial_weight;
  for (std::size_t i = 0; i < target.size(); ++i) {
    target.data()[i] -= g.data()[i] / h.data()[i];
  }
  return QuadraticOracle(std::move(target), std::move(h), std::move(sigmas));
}

LogisticOracle make_logistic(std::size_t n, std::size_t d_out, std::size_t d_in, Prng& rng) {
  Matrix features = sample_gaussian(rng, n, d_in);
  Vector readout = sample_gaussian(rng, d_out);
  for (double& p : readout) {
    p /= std::sqrt(static_cast<double>(d_out));
  }
  const Vector teacher = sample_gaussian(rng, d_in);
  Vector labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = dot(teacher, features.row(i)) >= 0.0 ? 1.0 : -1.0;
  }
  return LogisticOracle(std::move(features), std::move(labels), std::move(readout));
}

LinearOracle make_linear(std::size_t d_out, std::size_t d_in, double grad_norm, Prng& rng) {
  Matrix c = sample_gaussian(rng, d_out, d_in);
  const double s = grad_norm / std::sqrt(frobenius_sq(c));
  for (double& x : c.data()) {
    x *= s;
  }
  return LinearOracle(std::move(c));
}

double clean_loss(const LossOracle& oracle, const LoraLayer& layer) {
  return oracle.loss(layer.dense_weight());
}

double evaluate(const LossOracle& oracle, const LoraLayer& layer, NoiseChannel& noise) {
  const double clean = clean_loss(oracle, layer);
  return clean + noise.sample();
}

Matrix dense_gradient(const LossOracle& oracle, const LoraLayer& layer) {
  return oracle.gradient(layer.dense_weight());
}

}  // namespace zolab
