#include "zolab/zo.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace zolab {

AtomSchedule::AtomSchedule(ScheduleKind kind, std::size_t r, std::optional<Prng> rng)
    : kind_(kind), r_(r), rng_(std::move(rng)) {
  if (r_ == 0) {
    throw ConfigError("atom schedule needs rank >= 1");
  }
}

AtomSchedule AtomSchedule::cyclic(std::size_t r) {
  return AtomSchedule(ScheduleKind::Cyclic, r, std::nullopt);
}

AtomSchedule AtomSchedule::uniform(std::size_t r, Prng rng) {
  return AtomSchedule(ScheduleKind::UniformRandom, r, std::move(rng));
}

std::size_t AtomSchedule::next(std::uint64_t t) {
  if (kind_ == ScheduleKind::Cyclic) {
    return static_cast<std::size_t>(t % r_);
  }
  return static_cast<std::size_t>(rng_->uniform_index(r_));
}

Vector sample_direction(Prng& rng, std::size_t len, ProbeKind kind) {
  return kind == ProbeKind::UnitSphere ? sample_unit(rng, len) : sample_gaussian(rng, len);
}

OptimizerState::OptimizerState(LoraLayer layer_, AtomSchedule schedule_, double mu_, double eta_,
                               NoiseChannel noise_, Prng directions_, ProbeKind probe_)
    : layer(std::move(layer_)), schedule(std::move(schedule_)), mu(mu_), eta(eta_),
      noise(std::move(noise_)), directions(std::move(directions_)), probe(probe_) {
  if (!(mu > 0.0) || !std::isfinite(mu)) {
    throw ConfigError("smoothing radius mu must be positive");
  }
  if (!(eta > 0.0) || !std::isfinite(eta)) {
    throw ConfigError("step size eta must be positive");
  }
  if (schedule.rank() != layer.rank()) {
    throw ConfigError("atom schedule rank does not match layer rank");
  }
}

Vector analytic_active_gradient(const Matrix& g, const AtomView& view, double coefficient) {
  if (g.rows() != view.b.size() || g.cols() != view.a.size()) {
    throw ShapeError("analytic_active_gradient: atom does not match gradient shape");
  }
  Vector out = matvec(g, view.a);
  const Vector ga = matvec_transposed(g, view.b);
  out.insert(out.end(), ga.begin(), ga.end());
  for (double& x : out) {
    x *= coefficient;
  }
  return out;
}

namespace {

void check_atoms(const LoraLayer& layer, std::span<const std::size_t> atoms) {
  if (atoms.empty()) {
    throw ShapeError("two_point_estimate: no active atoms");
  }
  std::vector<std::size_t> sorted(atoms.begin(), atoms.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ShapeError("two_point_estimate: duplicate active atom");
  }
  if (sorted.back() >= layer.rank()) {
    throw ShapeError("two_point_estimate: atom index out of range");
  }
}

// Writes original[i] + sign * mu * z-block i into the layer.
void write_endpoint(LoraLayer& layer, const std::vector<AtomView>& original,
                    std::span<const double> z, double step) {
  const std::size_t q = layer.atom_dim();
  for (std::size_t i = 0; i < original.size(); ++i) {
    AtomView v = original[i];
    const auto zi = z.subspan(i * q, q);
    axpy(step, zi.first(v.b.size()), v.b);
    axpy(step, zi.subspan(v.b.size()), v.a);
    layer.write_atom(v);
  }
}

void apply_update(LoraLayer& layer, std::span<const std::size_t> atoms,
                  std::span<const double> grad, double eta) {
  const std::size_t q = layer.atom_dim();
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    AtomView v = layer.atom(atoms[i]);
    const auto gi = grad.subspan(i * q, q);
    axpy(-eta, gi.first(v.b.size()), v.b);
    axpy(-eta, gi.subspan(v.b.size()), v.a);
    layer.write_atom(v);
  }
}

StepReport finish_step(OptimizerState& state, const LossOracle& oracle, const ZoEstimate& est) {
  apply_update(state.layer, est.atoms, est.grad_estimate, state.eta);
  StepReport report;
  report.t = state.t;
  report.k = est.atoms.front();
  report.numerator = est.numerator;
  report.estimate_norm = norm(est.grad_estimate);
  report.loss_after = clean_loss(oracle, state.layer);
  report.adapter_norm = adapter_norm(state.layer);
  ++state.t;
  return report;
}

StepReport step_on_atoms(OptimizerState& state, const LossOracle& oracle,
                         std::span<const std::size_t> atoms) {
  const Vector z =
      sample_direction(state.directions, atoms.size() * state.layer.atom_dim(), state.probe);
  const ZoEstimate est = two_point_estimate(state, oracle, atoms, z);
  return finish_step(state, oracle, est);
}

}  // namespace

ZoEstimate two_point_estimate(OptimizerState& state, const LossOracle& oracle,
                              std::span<const std::size_t> atoms, std::span<const double> z) {
  LoraLayer& layer = state.layer;
  check_atoms(layer, atoms);
  if (z.size() != atoms.size() * layer.atom_dim()) {
    std::ostringstream os;
    os << "two_point_estimate: direction length " << z.size() << ", expected "
       << atoms.size() * layer.atom_dim();
    throw ShapeError(os.str());
  }

  const Matrix b_before = layer.b();
  const Matrix a_before = layer.a();
  std::vector<AtomView> original;
  original.reserve(atoms.size());
  for (std::size_t k : atoms) {
    original.push_back(layer.atom(k));
  }

  write_endpoint(layer, original, z, state.mu);
  const double plus = evaluate(oracle, layer, state.noise);
  write_endpoint(layer, original, z, -state.mu);
  const double minus = evaluate(oracle, layer, state.noise);
  for (const auto& v : original) {
    layer.write_atom(v);
  }
  state.evaluations += 2;

  if (layer.b() != b_before || layer.a() != a_before) {
    throw std::logic_error("two_point_estimate: layer not restored");
  }
  if (!std::isfinite(plus) || !std::isfinite(minus)) {
    throw NumericError("two_point_estimate: non-finite loss at an endpoint");
  }

  ZoEstimate est;
  est.atoms.assign(atoms.begin(), atoms.end());
  est.direction.assign(z.begin(), z.end());
  est.numerator = (plus - minus) / (2.0 * state.mu);
  est.grad_estimate = scaled(est.numerator, z);
  return est;
}

ZoEstimate two_point_estimate(OptimizerState& state, const LossOracle& oracle, std::size_t k,
                              std::span<const double> z) {
  const std::size_t atoms[] = {k};
  return two_point_estimate(state, oracle, std::span<const std::size_t>(atoms), z);
}

StepReport step_atom(OptimizerState& state, const LossOracle& oracle) {
  const std::size_t atoms[] = {state.schedule.next(state.t)};
  return step_on_atoms(state, oracle, atoms);
}

StepReport step_ar1zo(OptimizerState& state, const LossOracle& oracle) {
  if (state.layer.mode().kind != ScalingMode::Kind::TopologyAware) {
    throw ConfigError("step_ar1zo requires topology_aware scaling, layer has " +
                      to_string(state.layer.mode()));
  }
  return step_atom(state, oracle);
}

StepReport step_alt_naive(OptimizerState& state, const LossOracle& oracle) {
  if (state.layer.mode().kind != ScalingMode::Kind::Canonical) {
    throw ConfigError("step_alt_naive requires canonical scaling, layer has " +
                      to_string(state.layer.mode()));
  }
  return step_atom(state, oracle);
}

StepReport step_full_adapter(OptimizerState& state, const LossOracle& oracle) {
  std::vector<std::size_t> atoms(state.layer.rank());
  for (std::size_t k = 0; k < atoms.size(); ++k) {
    atoms[k] = k;
  }
  return step_on_atoms(state, oracle, atoms);
}

StepReport step_block(OptimizerState& state, const LossOracle& oracle, std::size_t m) {
  const std::size_t r = state.layer.rank();
  if (m == 0 || r % m != 0) {
    std::ostringstream os;
    os << "step_block: block size " << m << " does not divide rank " << r;
    throw ConfigError(os.str());
  }
  const ScalingMode& mode = state.layer.mode();
  if (mode.kind != ScalingMode::Kind::BlockAware || mode.block != m) {
    throw ConfigError("step_block requires block_aware:" + std::to_string(m) + " scaling, layer has " +
                      to_string(mode));
  }
  const std::size_t n_blocks = r / m;
  std::size_t block = 0;
  if (state.schedule.kind() == ScheduleKind::Cyclic) {
    block = static_cast<std::size_t>(state.t % n_blocks);
  } else {
    block = state.schedule.next(state.t) / m;
  }
  std::vector<std::size_t> atoms(m);
  for (std::size_t i = 0; i < m; ++i) {
    atoms[i] = block * m + i;
  }
  return step_on_atoms(state, oracle, atoms);
}

double coverage_average(const LoraLayer& layer, const LossOracle& oracle, double coefficient) {
  const Matrix g = dense_gradient(oracle, layer);
  double total = 0.0;
  for (std::size_t k = 0; k < layer.rank(); ++k) {
    total += norm_sq(analytic_active_gradient(g, layer.atom(k), coefficient));
  }
  return total / static_cast<double>(layer.rank());
}

}  // namespace zolab
