#include "zolab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace zolab {

double predict_snr(const SnrPrediction& p) {
  if (!(p.sigma_xi > 0.0)) {
    throw DomainError("predict_snr: sigma_xi must be positive (SNR is infinite without noise)");
  }
  const double c = active_coefficient(p.mode, p.alpha, p.r);
  double snr = 2.0 * c * c * p.mu * p.mu * p.g_norm * p.g_norm / (p.sigma_xi * p.sigma_xi);
  if (p.probe == ProbeKind::UnitSphere) {
    if (p.q == 0) {
      throw DomainError("predict_snr: unit-sphere probes need the atom dimension q");
    }
    snr /= static_cast<double>(p.q);
  }
  return snr;
}

double critical_rank(double alpha, double mu, double g_norm, double sigma_xi) {
  if (!(sigma_xi > 0.0)) {
    throw DomainError("critical_rank: sigma_xi must be positive");
  }
  return std::sqrt(2.0) * alpha * mu * g_norm / sigma_xi;
}

namespace {

// Clean and noisy FD numerators of atom k along fresh directions, evaluated on
// the frozen-background matrix plus the perturbed active atom.
class AtomProber {
 public:
  AtomProber(const LossOracle& oracle, const LoraLayer& layer, std::size_t k, double mu,
             double sigma_xi, const Prng& rng, ProbeKind probe)
      : oracle_(oracle), view_(layer.atom(k)), frozen_(layer.dense_weight_without(k)),
        coefficient_(layer.coefficient()), mu_(mu), probe_(probe),
        directions_(rng.fork("directions")), noise_(sigma_xi, rng.fork("noise")),
        scratch_(frozen_) {
    if (!(mu > 0.0)) {
      throw DomainError("probe: mu must be positive");
    }
  }

  struct Sample {
    Vector z;
    double clean = 0.0;
    double observed = 0.0;
  };

  Sample draw() {
    Sample s;
    s.z = sample_direction(directions_, view_.dim(), probe_);
    const double plus = endpoint(s.z, mu_);
    const double minus = endpoint(s.z, -mu_);
    const double xi_plus = noise_.sample();
    const double xi_minus = noise_.sample();
    s.clean = (plus - minus) / (2.0 * mu_);
    s.observed = ((plus + xi_plus) - (minus + xi_minus)) / (2.0 * mu_);
    return s;
  }

 private:
  double endpoint(const Vector& z, double step) {
    const std::size_t d_out = view_.b.size();
    Vector b = view_.b;
    Vector a = view_.a;
    axpy(step, std::span<const double>(z).first(d_out), b);
    axpy(step, std::span<const double>(z).subspan(d_out), a);
    std::copy(frozen_.data().begin(), frozen_.data().end(), scratch_.data().begin());
    add_scaled_outer(scratch_, coefficient_, b, a);
    return oracle_.loss(scratch_);
  }

  const LossOracle& oracle_;
  AtomView view_;
  Matrix frozen_;
  double coefficient_;
  double mu_;
  ProbeKind probe_;
  Prng directions_;
  NoiseChannel noise_;
  Matrix scratch_;
};

Vector scaled_active_gradient(const LossOracle& oracle, const LoraLayer& layer, std::size_t k) {
  const Matrix g = dense_gradient(oracle, layer);
  return analytic_active_gradient(g, layer.atom(k), layer.coefficient());
}

}  // namespace

SnrEstimate empirical_snr(const LossOracle& oracle, const LoraLayer& layer, std::size_t k,
                          double mu, double sigma_xi, std::size_t n, const Prng& rng,
                          ProbeKind probe) {
  if (n < 100) {
    throw DomainError("empirical_snr: need at least 100 samples");
  }
  if (!(sigma_xi > 0.0)) {
    throw DomainError("empirical_snr: sigma_xi must be positive");
  }
  SnrEstimate out;
  if (norm_sq(scaled_active_gradient(oracle, layer, k)) == 0.0) {
    return out;
  }

  AtomProber prober(oracle, layer, k, mu, sigma_xi, rng, probe);
  Vector clean(n);
  Vector noise(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = prober.draw();
    clean[i] = s.clean;
    noise[i] = s.observed - s.clean;
  }

  const double nn = static_cast<double>(n);
  const double mean_c = std::accumulate(clean.begin(), clean.end(), 0.0) / nn;
  double m2 = 0.0;
  double m4 = 0.0;
  for (double c : clean) {
    const double d = c - mean_c;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  const double signal = m2 / (nn - 1.0);
  m4 /= nn;

  double noise_power = 0.0;
  double noise_sq2 = 0.0;
  for (double e : noise) {
    noise_power += e * e;
    noise_sq2 += e * e * e * e;
  }
  noise_power /= nn;
  noise_sq2 /= nn;

  out.signal_power = signal;
  out.noise_power = noise_power;
  out.value = signal / noise_power;
  // Delta method on the ratio of two independent moment estimates.
  const double var_signal = std::max(0.0, m4 - signal * signal) / nn;
  const double var_noise = std::max(0.0, noise_sq2 - noise_power * noise_power) / nn;
  out.std_error = out.value * std::sqrt(var_signal / (signal * signal) +
                                        var_noise / (noise_power * noise_power));
  return out;
}

FidelityEstimate directional_fidelity(const LossOracle& oracle, const LoraLayer& layer,
                                      std::size_t k, double mu, double sigma_xi, std::size_t n,
                                      const Prng& rng, ProbeKind probe) {
  if (n == 0) {
    throw DomainError("directional_fidelity: need at least one sample");
  }
  const Vector g = scaled_active_gradient(oracle, layer, k);
  const double g_norm = norm(g);
  if (g_norm == 0.0) {
    throw DomainError("directional_fidelity: analytic active gradient is zero");
  }

  AtomProber prober(oracle, layer, k, mu, sigma_xi, rng, probe);
  double sum = 0.0;
  double sum_sq = 0.0;
  double inner = 0.0;
  double energy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = prober.draw();
    const double zg = dot(s.z, g);
    const double zn = norm(s.z);
    double c = 0.0;
    if (s.observed != 0.0) {
      c = (s.observed > 0.0 ? zg : -zg) / (zn * g_norm);
    }
    sum += c;
    sum_sq += c * c;
    inner += s.observed * zg;
    energy += s.observed * s.observed * zn * zn;
  }
  const double nn = static_cast<double>(n);
  FidelityEstimate out;
  out.mean_cosine = sum / nn;
  const double var = n > 1 ? std::max(0.0, (sum_sq - nn * out.mean_cosine * out.mean_cosine) /
                                               (nn - 1.0))
                           : 0.0;
  out.std_error = std::sqrt(var / nn);
  out.moment_cosine = energy > 0.0 ? (inner / nn) / (g_norm * std::sqrt(energy / nn)) : 0.0;
  return out;
}

double predicted_cosine(double scaled_g_norm, std::size_t q, double mu, double sigma_xi) {
  const double qq = static_cast<double>(q);
  const double g2 = scaled_g_norm * scaled_g_norm;
  return scaled_g_norm / std::sqrt((qq + 2.0) * g2 + sigma_xi * sigma_xi * qq / (2.0 * mu * mu));
}

double cosine_floor(std::size_t q, std::size_t n, Prng& rng) {
  if (q == 0 || n == 0) {
    throw DomainError("cosine_floor: need q >= 1 and n >= 1");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vector z = sample_gaussian(rng, q);
    sum += std::abs(z[0]) / norm(z);
  }
  return sum / static_cast<double>(n);
}

double spectral_concentration(const Matrix& g, Prng& rng) {
  const double f = frobenius_sq(g);
  if (f == 0.0) {
    throw DomainError("spectral_concentration: zero matrix");
  }
  const auto pair = top_singular_pair(g, rng);
  return pair.sigma1 * pair.sigma1 / f;
}

namespace {

double cos2(std::span<const double> x, std::span<const double> unit) {
  const double nx = norm_sq(x);
  if (nx == 0.0) {
    return 0.0;
  }
  const double d = dot(x, unit);
  return std::min(1.0, d * d / (nx * norm_sq(unit)));
}

}  // namespace

AlignmentRecord atom_alignment(const AtomView& view, const TopSingularPair& pair) {
  if (norm_sq(view.b) == 0.0 || norm_sq(view.a) == 0.0) {
    throw DomainError("atom_alignment: atom vectors must be nonzero");
  }
  AlignmentRecord rec;
  rec.k = view.k;
  rec.cos2_b = cos2(view.b, pair.u1);
  rec.cos2_a = cos2(view.a, pair.v1);
  rec.beta = rec.cos2_b * rec.cos2_a;
  return rec;
}

BoundCheck structural_lower_bound_check(const Matrix& g, const AtomView& view, Prng& rng) {
  const double f = frobenius_sq(g);
  if (f == 0.0) {
    throw DomainError("structural_lower_bound_check: zero gradient");
  }
  const auto pair = top_singular_pair(g, rng);
  BoundCheck out;
  out.rho = pair.sigma1 * pair.sigma1 / f;
  out.beta = cos2(view.b, pair.u1) * cos2(view.a, pair.v1);
  out.lhs = norm_sq(matvec(g, view.a)) + norm_sq(matvec_transposed(g, view.b));
  out.rhs = out.rho * out.beta * f * (norm_sq(view.a) + norm_sq(view.b));
  return out;
}

BlockEnergy random_block_energy(const Matrix& g, std::size_t q, std::size_t n, Prng& rng) {
  const std::size_t total = g.size();
  if (q == 0 || q > total) {
    throw DomainError("random_block_energy: block size must lie in [1, d_out * d_in]");
  }
  if (n == 0) {
    throw DomainError("random_block_energy: need at least one sample");
  }
  std::vector<std::size_t> perm(total);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const auto data = g.data();
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    double e = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.uniform_index(total - i));
      std::swap(perm[i], perm[j]);
      e += data[perm[i]] * data[perm[i]];
    }
    sum += e;
    sum_sq += e * e;
  }
  const double nn = static_cast<double>(n);
  BlockEnergy out;
  out.mc_mean = sum / nn;
  const double var =
      n > 1 ? std::max(0.0, (sum_sq - nn * out.mc_mean * out.mc_mean) / (nn - 1.0)) : 0.0;
  out.std_error = std::sqrt(var / nn);
  out.closed_form = static_cast<double>(q) / static_cast<double>(total) * frobenius_sq(g);
  return out;
}

double alignment_random_null(std::size_t d_out, std::size_t d_in) {
  return 1.0 / (static_cast<double>(d_out) * static_cast<double>(d_in));
}

std::vector<double> cumulative_alignment_gain(std::span<const AlignmentRecord> history,
                                              std::uint64_t t0, double random_null) {
  if (!(random_null > 0.0)) {
    throw DomainError("cumulative_alignment_gain: random null must be positive");
  }
  const auto base = std::find_if(history.begin(), history.end(),
                                 [t0](const AlignmentRecord& r) { return r.t == t0; });
  if (base == history.end()) {
    throw DomainError("cumulative_alignment_gain: baseline step not in history (shorter than one cycle)");
  }
  const double base_gain = base->beta / random_null;
  std::vector<double> out;
  for (const auto& rec : history) {
    if (rec.t >= t0) {
      out.push_back(rec.beta / random_null - base_gain);
    }
  }
  return out;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DomainError("loglog_slope: need at least two paired points");
  }
  const double n = static_cast<double>(x.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
      throw DomainError("loglog_slope: values must be positive");
    }
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

double crossing_point(std::span<const double> x, std::span<const double> y, double level) {
  if (x.size() != y.size()) {
    throw DomainError("crossing_point: size mismatch");
  }
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    const double a = y[i] - level;
    const double b = y[i + 1] - level;
    if (a == 0.0) {
      return x[i];
    }
    if ((a > 0.0) != (b > 0.0) || b == 0.0) {
      const double lx0 = std::log(x[i]);
      const double lx1 = std::log(x[i + 1]);
      const double ly0 = std::log(y[i]);
      const double ly1 = std::log(y[i + 1]);
      const double frac = (std::log(level) - ly0) / (ly1 - ly0);
      return std::exp(lx0 + frac * (lx1 - lx0));
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace zolab
