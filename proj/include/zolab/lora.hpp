#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "json.hpp"
#include "zolab/linalg.hpp"

namespace zolab {

/// How the LoRA output coefficient gamma/r depends on the rank.
///
///   Canonical      gamma = alpha              (coefficient alpha / r)
///   SqrtRank       gamma = alpha * sqrt(r)    (coefficient alpha / sqrt(r))
///   TopologyAware  gamma = alpha * r          (coefficient alpha)
///   FixedGamma     gamma = fixed value
///   BlockAware(m)  gamma = alpha * r / m      (coefficient alpha / m)
struct ScalingMode {
  enum class Kind { Canonical, SqrtRank, TopologyAware, FixedGamma, BlockAware };

  Kind kind = Kind::Canonical;
  double fixed_gamma = 0.0;  ///< FixedGamma only
  std::size_t block = 1;     ///< BlockAware only

  static ScalingMode canonical() { return {Kind::Canonical}; }
  static ScalingMode sqrt_rank() { return {Kind::SqrtRank}; }
  static ScalingMode topology_aware() { return {Kind::TopologyAware}; }
  static ScalingMode fixed(double gamma) { return {Kind::FixedGamma, gamma}; }
  static ScalingMode block_aware(std::size_t m) { return {Kind::BlockAware, 0.0, m}; }

  bool operator==(const ScalingMode&) const = default;
};

/// "canonical", "sqrt_rank", "topology_aware", "fixed_gamma:<g>", "block_aware:<m>".
std::string to_string(const ScalingMode& mode);
ScalingMode parse_scaling_mode(std::string_view text);

/// gamma for the mode. Throws ConfigError for r == 0, alpha <= 0, a
/// non-positive fixed gamma, or BlockAware(m) with m == 0, m > r or m not dividing r.
double effective_gamma(const ScalingMode& mode, double alpha, std::size_t r);

/// gamma / r. TopologyAware returns alpha itself and BlockAware returns alpha / m,
/// so neither picks up rank-dependent rounding.
double active_coefficient(const ScalingMode& mode, double alpha, std::size_t r);

/// One matched atom (column k of B, row k of A), held by copy.
struct AtomView {
  std::size_t k = 0;
  Vector b;  ///< length d_out
  Vector a;  ///< length d_in

  std::size_t dim() const noexcept { return b.size() + a.size(); }
  bool operator==(const AtomView&) const = default;
};

/// [b ; a]
Vector flatten_atom(const AtomView& view);
/// Inverse of flatten_atom; throws ShapeError unless v.size() == d_out + d_in.
AtomView unflatten_atom(std::span<const double> v, std::size_t d_out, std::size_t d_in,
                        std::size_t k = 0);

enum class AtomInit {
  ZeroB,      ///< B = 0, A_kj ~ N(0, 1/d_in)
  UnitAtoms,  ///< every b_k and a_k an independent uniform random unit vector
};

struct ForwardParts {
  Vector base;    ///< W0 x
  Vector active;  ///< (gamma/r) b_k (a_k . x)
  Vector frozen;  ///< (gamma/r) sum_{j != k} b_j (a_j . x)
};

/// Frozen base matrix plus rank-r factors: W = W0 + (gamma/r) B A.
class LoraLayer {
 public:
  /// Throws ShapeError on inconsistent factor shapes, ConfigError for r == 0 or an
  /// invalid (mode, alpha, r) combination.
  LoraLayer(Matrix w0, Matrix b, Matrix a, double alpha, ScalingMode mode);

  /// Atom k is drawn from the substream rng.fork(k), so layers of different rank
  /// built from the same rng share their leading atoms exactly.
  static LoraLayer initialized(Matrix w0, std::size_t rank, double alpha, ScalingMode mode,
                               const Prng& rng, AtomInit init = AtomInit::ZeroB);

  std::size_t d_out() const noexcept { return w0_.rows(); }
  std::size_t d_in() const noexcept { return w0_.cols(); }
  std::size_t rank() const noexcept { return a_.rows(); }
  /// Atom coordinate dimension q = d_out + d_in.
  std::size_t atom_dim() const noexcept { return d_out() + d_in(); }
  double alpha() const noexcept { return alpha_; }
  const ScalingMode& mode() const noexcept { return mode_; }
  double gamma() const { return effective_gamma(mode_, alpha_, rank()); }
  double coefficient() const noexcept { return coefficient_; }

  const Matrix& w0() const noexcept { return w0_; }
  const Matrix& b() const noexcept { return b_; }
  const Matrix& a() const noexcept { return a_; }

  void set_mode(const ScalingMode& mode);

  Vector forward(std::span<const double> x) const;
  ForwardParts forward_decomposed(std::span<const double> x, std::size_t k) const;

  AtomView atom(std::size_t k) const;
  /// Replaces column view.k of B and row view.k of A; nothing else changes.
  void write_atom(const AtomView& view);

  /// (gamma/r) B A
  Matrix delta() const;
  /// W0 + (gamma/r) B A
  Matrix dense_weight() const;
  /// W0 + (gamma/r) sum_{j != k} b_j a_j^T
  Matrix dense_weight_without(std::size_t k) const;

  bool operator==(const LoraLayer&) const = default;

 private:
  void check_atom_index(std::size_t k) const;

  Matrix w0_;
  Matrix b_;
  Matrix a_;
  double alpha_;
  ScalingMode mode_;
  double coefficient_;
};

/// w += coefficient * b a^T
void add_scaled_outer(Matrix& w, double coefficient, std::span<const double> b,
                      std::span<const double> a);

/// |(gamma/r) B A|_F, the represented adapter scale.
double adapter_norm(const LoraLayer& layer);

/// {d_out, d_in, r, alpha, mode, w0, b, a}; matrices as flat row-major arrays.
nlohmann::json to_json(const LoraLayer& layer);
LoraLayer layer_from_json(const nlohmann::json& j);

}  // namespace zolab
