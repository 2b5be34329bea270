#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "zolab/lora.hpp"
#include "zolab/oracles.hpp"

namespace zolab {

enum class ScheduleKind { Cyclic, UniformRandom };

/// Active-atom sequence k(t): Cyclic gives t mod r, UniformRandom i.i.d. uniform on [0, r).
class AtomSchedule {
 public:
  static AtomSchedule cyclic(std::size_t r);
  static AtomSchedule uniform(std::size_t r, Prng rng);

  std::size_t next(std::uint64_t t);
  ScheduleKind kind() const noexcept { return kind_; }
  std::size_t rank() const noexcept { return r_; }

 private:
  AtomSchedule(ScheduleKind kind, std::size_t r, std::optional<Prng> rng);

  ScheduleKind kind_;
  std::size_t r_;
  std::optional<Prng> rng_;
};

/// How query directions are drawn: raw N(0, I) or normalized to the unit sphere.
enum class ProbeKind { Gaussian, UnitSphere };

Vector sample_direction(Prng& rng, std::size_t len, ProbeKind kind);

struct ZoEstimate {
  std::vector<std::size_t> atoms;  ///< active atom indices, in direction order
  Vector direction;                ///< concatenated [b_k ; a_k] blocks
  double numerator = 0.0;          ///< (l+ - l-) / (2 mu)
  Vector grad_estimate;            ///< numerator * direction
};

struct StepReport {
  std::uint64_t t = 0;
  std::size_t k = 0;  ///< first active atom
  double numerator = 0.0;
  double estimate_norm = 0.0;
  double loss_after = 0.0;  ///< clean loss after the update (not budgeted)
  double adapter_norm = 0.0;
};

/// Everything one zeroth-order optimizer run owns. Strictly sequential.
struct OptimizerState {
  /// Throws ConfigError unless mu > 0 and eta > 0 and the schedule rank matches the layer.
  OptimizerState(LoraLayer layer, AtomSchedule schedule, double mu, double eta,
                 NoiseChannel noise, Prng directions, ProbeKind probe = ProbeKind::Gaussian);

  LoraLayer layer;
  AtomSchedule schedule;
  double mu;
  double eta;
  std::uint64_t t = 0;
  NoiseChannel noise;
  Prng directions;
  ProbeKind probe;
  /// Noisy oracle evaluations consumed so far.
  std::uint64_t evaluations = 0;
};

/// [(gamma/r) G a_k ; (gamma/r) G^T b_k], the gradient of L with respect to atom k.
Vector analytic_active_gradient(const Matrix& g, const AtomView& view, double coefficient);

/// Two-point estimate for atom k along z: writes b_k + mu z_b, a_k + mu z_a, evaluates,
/// writes the minus endpoint, evaluates, then restores the original atom. Consumes
/// exactly two noisy evaluations. Throws ShapeError for a wrong-length z and
/// NumericError for a non-finite endpoint loss (the layer is restored first).
ZoEstimate two_point_estimate(OptimizerState& state, const LossOracle& oracle, std::size_t k,
                              std::span<const double> z);
/// Same for a set of atoms perturbed jointly; z has length atoms.size() * q.
ZoEstimate two_point_estimate(OptimizerState& state, const LossOracle& oracle,
                              std::span<const std::size_t> atoms, std::span<const double> z);

/// One alternating rank-1 step in whatever scaling mode the layer carries.
StepReport step_atom(OptimizerState& state, const LossOracle& oracle);
/// step_atom requiring TopologyAware scaling (AR1-ZO).
StepReport step_ar1zo(OptimizerState& state, const LossOracle& oracle);
/// step_atom requiring Canonical scaling (naive alternating baseline).
StepReport step_alt_naive(OptimizerState& state, const LossOracle& oracle);
/// One Gaussian direction over all r * q factor coordinates; SGD on every atom.
StepReport step_full_adapter(OptimizerState& state, const LossOracle& oracle);
/// Contiguous block of m atoms, blocks cycled in index order. Requires BlockAware(m).
StepReport step_block(OptimizerState& state, const LossOracle& oracle, std::size_t m);

/// (1/r) sum_k |grad_k L|^2 at the current point.
double coverage_average(const LoraLayer& layer, const LossOracle& oracle, double coefficient);

}  // namespace zolab
