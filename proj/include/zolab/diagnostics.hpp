#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "zolab/lora.hpp"
#include "zolab/oracles.hpp"
#include "zolab/zo.hpp"

namespace zolab {

/// Inputs of the closed-form active FD-SNR.
struct SnrPrediction {
  ScalingMode mode;
  double alpha = 1.0;
  double mu = 1e-3;
  double sigma_xi = 1e-3;
  std::size_t r = 1;
  double g_norm = 1.0;  ///< |g_k| of the unscaled active gradient [G a_k ; G^T b_k]
  ProbeKind probe = ProbeKind::Gaussian;
  std::size_t q = 0;  ///< atom dimension; used only for unit-sphere probes
};

/// Active FD-SNR as a power ratio:
///   SNR = (gamma/r)^2 |g_k|^2 / (sigma^2 / (2 mu^2)) = 2 (gamma/r)^2 mu^2 |g_k|^2 / sigma^2
/// For unit-sphere probes the signal power carries an extra 1/q.
/// Throws DomainError when sigma_xi == 0.
double predict_snr(const SnrPrediction& p);

/// r_c = sqrt(2) alpha mu |g_k| / sigma, the naive rank at which SNR = 1.
double critical_rank(double alpha, double mu, double g_norm, double sigma_xi);

struct SnrEstimate {
  double value = 0.0;
  double std_error = 0.0;
  double signal_power = 0.0;  ///< variance over z of the clean numerator
  double noise_power = 0.0;   ///< mean square of the noise part of the numerator
};

/// Monte-Carlo active FD-SNR of atom k. Each of the n directions is evaluated
/// once without noise and once through a channel seeded from rng, so the clean
/// numerator c_i and the noise part o_i - c_i are both observed; the estimate
/// is Var(c) / mean((o - c)^2). Returns 0 at a zero-gradient point; throws
/// DomainError for n < 100 or sigma_xi == 0.
SnrEstimate empirical_snr(const LossOracle& oracle, const LoraLayer& layer, std::size_t k,
                          double mu, double sigma_xi, std::size_t n, const Prng& rng,
                          ProbeKind probe = ProbeKind::Gaussian);

struct FidelityEstimate {
  double mean_cosine = 0.0;  ///< MC mean of cos(g_hat, g)
  double std_error = 0.0;
  /// E[g_hat . g] / (|g| sqrt(E|g_hat|^2)), the moment form the closed-form
  /// approximation describes.
  double moment_cosine = 0.0;
};

/// Directional fidelity of atom k's two-point estimate against the analytic
/// active gradient, over n fresh (z, xi) draws. Throws DomainError when the
/// analytic gradient is zero.
FidelityEstimate directional_fidelity(const LossOracle& oracle, const LoraLayer& layer,
                                      std::size_t k, double mu, double sigma_xi, std::size_t n,
                                      const Prng& rng, ProbeKind probe = ProbeKind::Gaussian);

/// |g| / sqrt((q + 2)|g|^2 + sigma^2 q / (2 mu^2)) with g the scaled active gradient.
double predicted_cosine(double scaled_g_norm, std::size_t q, double mu, double sigma_xi);

/// MC mean |cos(e_1, z)| for isotropic Gaussian z in dimension q (~ sqrt(2 / (pi q))).
double cosine_floor(std::size_t q, std::size_t n, Prng& rng);

/// sigma_1^2 / |G|_F^2. Throws DomainError for a zero matrix.
double spectral_concentration(const Matrix& g, Prng& rng);

struct AlignmentRecord {
  std::uint64_t t = 0;
  std::size_t k = 0;
  double rho = 0.0;
  double cos2_b = 0.0;
  double cos2_a = 0.0;
  double beta = 0.0;
  double beta_gain_cum = 0.0;
};

/// cos^2(b_k, u_1), cos^2(a_k, v_1) and beta = their product.
/// Throws DomainError for a zero atom vector.
AlignmentRecord atom_alignment(const AtomView& view, const TopSingularPair& pair);

struct BoundCheck {
  double lhs = 0.0;  ///< |G a|^2 + |G^T b|^2
  double rhs = 0.0;  ///< rho beta |G|_F^2 (|a|^2 + |b|^2)
  double rho = 0.0;
  double beta = 0.0;
};

/// Both sides of the aligned-atom energy bound. A zero atom vector has cos^2 = 0.
BoundCheck structural_lower_bound_check(const Matrix& g, const AtomView& view, Prng& rng);

struct BlockEnergy {
  double mc_mean = 0.0;
  double std_error = 0.0;
  double closed_form = 0.0;  ///< (q / (d_out d_in)) |G|_F^2
};

/// Squared norm of G restricted to a uniformly random q-subset of its entries,
/// averaged over n subsets. Throws DomainError for q == 0 or q > d_out * d_in.
BlockEnergy random_block_energy(const Matrix& g, std::size_t q, std::size_t n, Prng& rng);

/// E[cos^2(b, u_1)] E[cos^2(a, v_1)] for isotropic b, a: 1 / (d_out d_in).
double alignment_random_null(std::size_t d_out, std::size_t d_in);

/// beta_gain(t) - beta_gain(t0) for every record with t >= t0, where
/// beta_gain = beta / random_null. Throws DomainError when no record has t == t0
/// (history shorter than one cycle).
std::vector<double> cumulative_alignment_gain(std::span<const AlignmentRecord> history,
                                              std::uint64_t t0, double random_null);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

/// Smallest x at which the piecewise log-log interpolation of y falls to
/// `level`. Returns NaN when y never crosses.
double crossing_point(std::span<const double> x, std::span<const double> y, double level);

}  // namespace zolab
