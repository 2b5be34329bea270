#pragma once

#include <cstddef>
#include <memory>

#include "zolab/linalg.hpp"
#include "zolab/lora.hpp"

namespace zolab {

/// Scalar loss of a dense weight matrix with its exact gradient.
class LossOracle {
 public:
  virtual ~LossOracle() = default;

  virtual std::size_t rows() const = 0;
  virtual std::size_t cols() const = 0;
  virtual double loss(const Matrix& w) const = 0;
  /// dL/dW at w.
  virtual Matrix gradient(const Matrix& w) const = 0;
  /// Upper bound on the Lipschitz constant of the gradient (Frobenius norm).
  virtual double smoothness() const = 0;
};

/// Additive i.i.d. N(0, sigma^2) evaluation noise. sigma == 0 returns exactly 0
/// and consumes nothing from the stream.
class NoiseChannel {
 public:
  NoiseChannel(double sigma, Prng rng);

  double sigma() const noexcept { return sigma_; }
  double sample();

 private:
  double sigma_;
  Prng rng_;
};

/// L(W) = <c, W>.
class LinearOracle final : public LossOracle {
 public:
  explicit LinearOracle(Matrix c) : c_(std::move(c)) {}

  std::size_t rows() const override { return c_.rows(); }
  std::size_t cols() const override { return c_.cols(); }
  double loss(const Matrix& w) const override;
  Matrix gradient(const Matrix& w) const override;
  double smoothness() const override { return 0.0; }

  const Matrix& coefficients() const noexcept { return c_; }

 private:
  Matrix c_;
};

/// L(W) = 1/2 sum_ij h_ij (W_ij - W*_ij)^2 with weights h_ij >= 1.
class QuadraticOracle final : public LossOracle {
 public:
  /// Throws ShapeError on mismatched shapes, DomainError on a non-positive weight.
  QuadraticOracle(Matrix target, Matrix curvature, Vector spectral_profile = {});

  std::size_t rows() const override { return target_.rows(); }
  std::size_t cols() const override { return target_.cols(); }
  double loss(const Matrix& w) const override;
  Matrix gradient(const Matrix& w) const override;
  double smoothness() const override { return max_curvature_; }

  const Matrix& target() const noexcept { return target_; }
  const Matrix& curvature() const noexcept { return curvature_; }
  /// Designed singular values of the gradient at the construction point (may be empty).
  const Vector& spectral_profile() const noexcept { return profile_; }

 private:
  Matrix target_;
  Matrix curvature_;
  Vector profile_;
  double max_curvature_ = 0.0;
};

/// Mean logistic loss of a scalar readout:
///   L(W) = (1/n) sum_i log(1 + exp(-y_i p^T W x_i))
/// Full-batch, so both endpoints of any query see the same data.
class LogisticOracle final : public LossOracle {
 public:
  LogisticOracle(Matrix features, Vector labels, Vector readout);

  std::size_t rows() const override { return readout_.size(); }
  std::size_t cols() const override { return features_.cols(); }
  double loss(const Matrix& w) const override;
  Matrix gradient(const Matrix& w) const override;
  /// |p|^2 * mean_i |x_i|^2 / 4
  double smoothness() const override { return smoothness_; }

 private:
  Matrix features_;
  Vector labels_;
  Vector readout_;
  double smoothness_ = 0.0;
};

/// Construction parameters for make_spectral_quadratic.
struct SpectralSpec {
  double rho = 0.7;            ///< sigma_1^2 / |G|_F^2 at the initial point
  double grad_norm = 1.0;      ///< |G|_F at the initial point
  double curvature_max = 1.0;  ///< weights h_ij drawn uniformly from [1, curvature_max]
};

/// Quadratic whose gradient at `initial_weight` is U diag(s) V^T with random
/// orthonormal U, V, s_1^2 = rho |G|^2 and the remaining min(d_out, d_in) - 1
/// singular values equal. Requires 1/min(d_out, d_in) <= rho <= 1 (the top
/// value cannot be below a flat tail); otherwise DomainError.
QuadraticOracle make_spectral_quadratic(const SpectralSpec& spec, const Matrix& initial_weight,
                                        Prng& rng);

/// Gaussian features, readout p ~ N(0, 1/d_out), labels from a random teacher.
LogisticOracle make_logistic(std::size_t n, std::size_t d_out, std::size_t d_in, Prng& rng);

/// Gaussian coefficients scaled so that |c|_F = grad_norm.
LinearOracle make_linear(std::size_t d_out, std::size_t d_in, double grad_norm, Prng& rng);

/// Noiseless loss at the layer's represented dense weight.
double clean_loss(const LossOracle& oracle, const LoraLayer& layer);
/// Noisy loss: clean_loss plus one fresh draw from the channel.
double evaluate(const LossOracle& oracle, const LoraLayer& layer, NoiseChannel& noise);
/// Exact dL/dW at W = W0 + (gamma/r) B A.
Matrix dense_gradient(const LossOracle& oracle, const LoraLayer& layer);

}  // namespace zolab
