#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "support/oracles.hpp"
#include "zolab/zo.hpp"

using namespace zolab;
using testsupport::max_abs;
using testsupport::max_abs_diff;

namespace {

OptimizerState make_state(LoraLayer layer, double sigma = 0.0, double mu = 1e-3, double eta = 1e-3,
                          std::uint64_t seed = 1) {
  const Prng root(seed);
  const std::size_t r = layer.rank();
  return OptimizerState(std::move(layer), AtomSchedule::cyclic(r), mu, eta,
                        NoiseChannel(sigma, root.fork("noise")), root.fork("directions"));
}

LoraLayer unit_layer(std::size_t d_out, std::size_t d_in, std::size_t r, ScalingMode mode,
                     double alpha = 16.0, std::uint64_t seed = 3, bool zero_w0 = false) {
  Prng rng(seed);
  Matrix w0 = zero_w0 ? Matrix(d_out, d_in) : sample_gaussian(rng, d_out, d_in);
  return LoraLayer::initialized(std::move(w0), r, alpha, mode, Prng(seed).fork("layer"),
                                AtomInit::UnitAtoms);
}

// Loss as a function of atom k's flattened coordinates.
double atom_loss(const LossOracle& oracle, LoraLayer layer, std::size_t k, const Vector& coords) {
  layer.write_atom(unflatten_atom(coords, layer.d_out(), layer.d_in(), k));
  return clean_loss(oracle, layer);
}

class NanOracle final : public LossOracle {
 public:
  std::size_t rows() const override { return 2; }
  std::size_t cols() const override { return 2; }
  double loss(const Matrix&) const override { return std::numeric_limits<double>::quiet_NaN(); }
  Matrix gradient(const Matrix&) const override { return Matrix(2, 2); }
  double smoothness() const override { return 0.0; }
};

}  // namespace

TEST_SUITE("zo") {
  TEST_CASE("schedules") {
    AtomSchedule c = AtomSchedule::cyclic(4);
    for (std::uint64_t t = 0; t < 12; ++t) CHECK(c.next(t) == t % 4);
    AtomSchedule u = AtomSchedule::uniform(5, Prng(2));
    std::vector<int> counts(5);
    for (int t = 0; t < 50000; ++t) counts[u.next(t)]++;
    for (int n : counts) CHECK(std::abs(n - 10000) < 500);
    CHECK_THROWS_AS(AtomSchedule::cyclic(0), ConfigError);
  }

  TEST_CASE("state validation") {
    const LoraLayer l = unit_layer(2, 3, 2, ScalingMode::canonical());
    CHECK_THROWS_AS(make_state(l, 0.0, 0.0), ConfigError);
    CHECK_THROWS_AS(make_state(l, 0.0, 1e-3, -1.0), ConfigError);
    CHECK_THROWS_AS(OptimizerState(l, AtomSchedule::cyclic(3), 1e-3, 1e-3, NoiseChannel(0, Prng(1)), Prng(2)),
                    ConfigError);
  }

  TEST_CASE("analytic gradient special cases") {
    const AtomView v{0, {1, 0}, {0, 1, 0}};
    CHECK(max_abs(analytic_active_gradient(Matrix(2, 3), v, 1.0)) == 0.0);
    // Perfectly aligned rank-1: G = u v^T, b = u, a = v.
    Prng rng(1);
    const Vector u = sample_unit(rng, 4), w = sample_unit(rng, 3);
    const Vector g = analytic_active_gradient(outer(u, w), AtomView{0, u, w}, 1.0);
    Vector expect = u;
    expect.insert(expect.end(), w.begin(), w.end());
    CHECK(max_abs_diff(g, expect) < 1e-15);
    CHECK_THROWS_AS(analytic_active_gradient(Matrix(3, 3), v, 1.0), ShapeError);
  }

  TEST_CASE("analytic gradient matches coordinatewise central differences") {
    Prng rng(4);
    const Matrix w0 = sample_gaussian(rng, 4, 5);
    const QuadraticOracle quad(sample_gaussian(rng, 4, 5), Matrix(4, 5, 1.5));
    const LogisticOracle logi = make_logistic(30, 4, 5, rng);
    for (const LossOracle* oracle : {static_cast<const LossOracle*>(&quad), static_cast<const LossOracle*>(&logi)}) {
      for (int trial = 0; trial < 20; ++trial) {
        LoraLayer layer(w0, sample_gaussian(rng, 4, 3), sample_gaussian(rng, 3, 5), 0.7,
                        ScalingMode::sqrt_rank());
        const std::size_t k = rng.uniform_index(3);
        const Vector g = analytic_active_gradient(dense_gradient(*oracle, layer), layer.atom(k),
                                                  layer.coefficient());
        auto f = [&](const Vector& x) { return atom_loss(*oracle, layer, k, x); };
        const Vector fd = testsupport::central_diff(f, flatten_atom(layer.atom(k)), 1e-6);
        CHECK(max_abs_diff(fd, g) <= 1e-5 * max_abs(g));
      }
    }
  }

  TEST_CASE("both halves of the active gradient are nonzero on generic instances") {
    Prng rng(5);
    const Matrix g = sample_gaussian(rng, 4, 5);
    const LoraLayer l = unit_layer(4, 5, 2, ScalingMode::canonical());
    const Vector grad = analytic_active_gradient(g, l.atom(1), 1.0);
    CHECK(norm(std::span(grad).first(4)) > 0.0);
    CHECK(norm(std::span(grad).subspan(4)) > 0.0);
  }

  TEST_CASE("linear oracle numerator is exact") {
    Prng rng(6);
    const LinearOracle lin = make_linear(4, 6, 1.0, rng);
    for (double mu : {1e-1, 1e-3, 1e-6}) {
      // Zero base and B = 0: endpoint losses are O(mu), so rounding stays relative.
      const LoraLayer l = LoraLayer::initialized(Matrix(4, 6), 3, 16.0, ScalingMode::canonical(), Prng(2));
      auto state = make_state(l, 0.0, mu);
      const Vector z = sample_gaussian(rng, 10);
      const auto est = two_point_estimate(state, lin, 1, z);
      const Vector g = analytic_active_gradient(lin.coefficients(), state.layer.atom(1), state.layer.coefficient());
      CHECK(std::abs(est.numerator - dot(g, z)) <= 1e-12 * std::abs(dot(g, z)) + 1e-300);
      CHECK(est.grad_estimate == scaled(est.numerator, z));
      CHECK(est.atoms == std::vector<std::size_t>{1});
    }
  }

  TEST_CASE("quadratic numerator bias decays as mu squared") {
    Prng rng(7);
    const QuadraticOracle quad(sample_gaussian(rng, 3, 4), Matrix(3, 4, 1.0));
    const LoraLayer l = unit_layer(3, 4, 2, ScalingMode::topology_aware(), 1.0);
    const Vector z = sample_gaussian(rng, 7);
    const Vector g = analytic_active_gradient(dense_gradient(quad, l), l.atom(0), l.coefficient());
    std::vector<double> err;
    for (double mu : {2e-2, 1e-2, 5e-3, 2.5e-3}) {
      auto state = make_state(l, 0.0, mu);
      err.push_back(std::abs(two_point_estimate(state, quad, 0, z).numerator - dot(g, z)));
    }
    for (std::size_t i = 0; i + 1 < err.size(); ++i) {
      CHECK(std::log2(err[i] / err[i + 1]) == doctest::Approx(2.0).epsilon(0.05));
    }
  }

  TEST_CASE("numerator noise variance at fixed direction") {
    const double sigma = 1e-3, mu = 1e-3;
    Prng orng(8);
    const LinearOracle lin = make_linear(3, 3, 1.0, orng);
    const LoraLayer l = unit_layer(3, 3, 2, ScalingMode::canonical());
    auto state = make_state(l, sigma, mu);
    Prng rng(9);
    const Vector z = sample_gaussian(rng, 6);
    const std::size_t n = 10000;
    double s = 0, ss = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = two_point_estimate(state, lin, 0, z).numerator;
      s += x;
      ss += x * x;
    }
    const double var = (ss - s * s / n) / (n - 1);
    CHECK(var == doctest::Approx(sigma * sigma / (2 * mu * mu)).epsilon(0.05));
    CHECK(state.evaluations == 2 * n);
  }

  TEST_CASE("estimate restores the layer and checks shapes") {
    const LoraLayer l = unit_layer(3, 4, 3, ScalingMode::topology_aware());
    Prng rng(10);
    const LinearOracle lin = make_linear(3, 4, 1.0, rng);
    auto state = make_state(l, 1e-3);
    (void)two_point_estimate(state, lin, 2, sample_gaussian(rng, 7));
    CHECK(state.layer == l);
    CHECK_THROWS_AS(two_point_estimate(state, lin, 0, sample_gaussian(rng, 6)), ShapeError);
    CHECK_THROWS_AS(two_point_estimate(state, lin, 3, sample_gaussian(rng, 7)), ShapeError);

    LoraLayer tiny(Matrix(2, 2), Matrix(2, 1), Matrix(1, 2), 1.0, ScalingMode::canonical());
    auto s2 = make_state(tiny);
    CHECK_THROWS_AS(two_point_estimate(s2, NanOracle(), 0, Vector(4, 1.0)), NumericError);
    CHECK(s2.layer == tiny);
  }

  TEST_CASE("b-only direction gives a zero a-part estimate") {
    const LoraLayer l = unit_layer(3, 4, 2, ScalingMode::canonical());
    Prng rng(11);
    const LinearOracle lin = make_linear(3, 4, 1.0, rng);
    auto state = make_state(l);
    Vector z = sample_gaussian(rng, 7);
    std::fill(z.begin() + 3, z.end(), 0.0);
    const auto est = two_point_estimate(state, lin, 0, z);
    CHECK(max_abs(std::span(est.grad_estimate).subspan(3)) == 0.0);
    CHECK(max_abs(std::span(est.grad_estimate).first(3)) > 0.0);
  }

  TEST_CASE("frozen background cancels on a linear loss") {
    Prng rng(12);
    const LinearOracle lin = make_linear(8, 8, 1.0, rng);
    const Vector z = sample_gaussian(rng, 16);
    double ref = 0;
    for (std::size_t r : {1, 4, 16, 64}) {
      auto state = make_state(unit_layer(8, 8, r, ScalingMode::topology_aware()));
      const double num = two_point_estimate(state, lin, 0, z).numerator;
      if (r == 1) ref = num;
      CHECK(std::abs(num - ref) <= 1e-12 * std::abs(ref));
    }
  }

  TEST_CASE("naive numerator shrinks as 1/r") {
    Prng rng(13);
    const LinearOracle lin = make_linear(6, 5, 1.0, rng);
    const Vector z = sample_gaussian(rng, 11);
    auto s1 = make_state(unit_layer(6, 5, 1, ScalingMode::canonical()));
    const double n1 = two_point_estimate(s1, lin, 0, z).numerator;
    for (std::size_t r : {2, 4, 8, 64}) {
      auto s = make_state(unit_layer(6, 5, r, ScalingMode::canonical()));
      const double nr = two_point_estimate(s, lin, 0, z).numerator;
      CHECK(std::abs(nr - n1 / r) <= 1e-12 * std::abs(n1));
    }
  }

  TEST_CASE("steps: budget, isolation, schedule") {
    Prng rng(14);
    const QuadraticOracle quad = make_spectral_quadratic({0.6, 1.0, 2.0}, Matrix(5, 4), rng);
    auto state = make_state(unit_layer(5, 4, 4, ScalingMode::topology_aware(), 2.0, 3, true), 1e-4);
    const Matrix w0 = state.layer.w0();
    std::vector<int> touched(4, 0);
    for (int t = 0; t < 8; ++t) {
      const LoraLayer before = state.layer;
      const StepReport rep = step_ar1zo(state, quad);
      CHECK(rep.t == static_cast<std::uint64_t>(t));
      CHECK(rep.k == static_cast<std::size_t>(t % 4));
      for (std::size_t k = 0; k < 4; ++k) {
        if (k != rep.k) CHECK(state.layer.atom(k) == before.atom(k));
        else if (state.layer.atom(k) != before.atom(k)) touched[k]++;
      }
      CHECK(state.layer.w0() == w0);
      CHECK(rep.loss_after == clean_loss(quad, state.layer));
      CHECK(rep.adapter_norm == adapter_norm(state.layer));
    }
    CHECK(touched == std::vector<int>{2, 2, 2, 2});
    CHECK(state.evaluations == 16);
    CHECK(state.t == 8);
  }

  TEST_CASE("step mode checks") {
    Prng rng(15);
    const LinearOracle lin = make_linear(3, 3, 1.0, rng);
    auto naive = make_state(unit_layer(3, 3, 2, ScalingMode::canonical()));
    CHECK_THROWS_AS(step_ar1zo(naive, lin), ConfigError);
    auto ta = make_state(unit_layer(3, 3, 2, ScalingMode::topology_aware()));
    CHECK_THROWS_AS(step_alt_naive(ta, lin), ConfigError);
    CHECK_THROWS_AS(step_block(ta, lin, 2), ConfigError);
    auto blk = make_state(unit_layer(3, 3, 4, ScalingMode::block_aware(2)));
    CHECK_THROWS_AS(step_block(blk, lin, 3), ConfigError);
    CHECK_NOTHROW(step_block(blk, lin, 2));
  }

  TEST_CASE("zero gradient leaves the layer unchanged") {
    const LinearOracle zero(Matrix(3, 4));
    auto state = make_state(unit_layer(3, 4, 2, ScalingMode::topology_aware()));
    const LoraLayer before = state.layer;
    for (int i = 0; i < 4; ++i) step_ar1zo(state, zero);
    CHECK(state.layer == before);
  }

  TEST_CASE("rank one: naive, topology-aware, full adapter and block steps coincide") {
    Prng rng(16);
    const QuadraticOracle quad = make_spectral_quadratic({0.8, 1.0, 1.0}, Matrix(4, 3), rng);
    auto a = make_state(unit_layer(4, 3, 1, ScalingMode::topology_aware(), 1.0, 3, true), 1e-4);
    auto b = make_state(unit_layer(4, 3, 1, ScalingMode::canonical(), 1.0, 3, true), 1e-4);
    auto c = make_state(unit_layer(4, 3, 1, ScalingMode::canonical(), 1.0, 3, true), 1e-4);
    for (int t = 0; t < 20; ++t) {
      step_ar1zo(a, quad);
      step_alt_naive(b, quad);
      step_full_adapter(c, quad);
    }
    CHECK(a.layer.b() == b.layer.b());
    CHECK(a.layer.a() == b.layer.a());
    CHECK(c.layer.b() == b.layer.b());
    CHECK(c.layer.a() == b.layer.a());
  }

  TEST_CASE("block step reduces to full adapter at m = r and to AR1-ZO at m = 1") {
    Prng rng(17);
    const QuadraticOracle quad = make_spectral_quadratic({0.8, 1.0, 1.0}, Matrix(4, 3), rng);
    auto full = make_state(unit_layer(4, 3, 4, ScalingMode::canonical(), 2.0, 3, true), 1e-4);
    auto blk = make_state(unit_layer(4, 3, 4, ScalingMode::block_aware(4), 2.0, 3, true), 1e-4);
    auto ar1 = make_state(unit_layer(4, 3, 4, ScalingMode::topology_aware(), 2.0, 3, true), 1e-4);
    auto one = make_state(unit_layer(4, 3, 4, ScalingMode::block_aware(1), 2.0, 3, true), 1e-4);
    CHECK(blk.layer.coefficient() * 4 == 2.0);
    for (int t = 0; t < 12; ++t) {
      const auto f = step_full_adapter(full, quad);
      const auto b = step_block(blk, quad, 4);
      CHECK(f.numerator == b.numerator);
      const auto x = step_ar1zo(ar1, quad);
      const auto y = step_block(one, quad, 1);
      CHECK(x.numerator == y.numerator);
      CHECK(x.k == y.k);
    }
    CHECK(full.layer.b() == blk.layer.b());
    CHECK(ar1.layer.a() == one.layer.a());
  }

  TEST_CASE("block numerator is independent of r at fixed m") {
    Prng rng(18);
    const LinearOracle lin = make_linear(8, 8, 1.0, rng);
    const std::size_t m = 2;
    const Vector z = sample_gaussian(rng, m * 16);
    const std::size_t atoms[] = {0, 1};
    double ref = 0;
    for (std::size_t r : {4, 16, 64}) {
      auto state = make_state(unit_layer(8, 8, r, ScalingMode::block_aware(m)));
      const double num = two_point_estimate(state, lin, atoms, z).numerator;
      if (r == 4) ref = num;
      CHECK(std::abs(num - ref) <= 1e-12 * std::abs(ref));
    }
  }

  TEST_CASE("full adapter second moment on a linear loss") {
    Prng rng(19);
    const std::size_t r = 3;
    const LinearOracle lin = make_linear(4, 4, 1.0, rng);
    auto state = make_state(unit_layer(4, 4, r, ScalingMode::canonical(), 1.0), 0.0);
    const Matrix g = lin.coefficients();
    double grad_sq = 0;
    for (std::size_t k = 0; k < r; ++k) {
      grad_sq += norm_sq(analytic_active_gradient(g, state.layer.atom(k), state.layer.coefficient()));
    }
    std::vector<std::size_t> atoms(r);
    std::iota(atoms.begin(), atoms.end(), 0);
    const std::size_t n = 40000, dim = r * 8;
    double m2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      m2 += norm_sq(two_point_estimate(state, lin, atoms, sample_gaussian(rng, dim)).grad_estimate);
    }
    CHECK(m2 / n == doctest::Approx((dim + 2) * grad_sq).epsilon(0.05));
  }

  TEST_CASE("estimator is unbiased up to mu squared") {
    Prng rng(20);
    const QuadraticOracle quad(sample_gaussian(rng, 3, 3), Matrix(3, 3, 1.0));
    const LoraLayer l = unit_layer(3, 3, 2, ScalingMode::topology_aware(), 1.0);
    const Vector g = analytic_active_gradient(dense_gradient(quad, l), l.atom(1), l.coefficient());
    const std::size_t n = 100000, q = 6;
    std::vector<Vector> means;
    for (double mu : {4e-2, 2e-2, 1e-2}) {
      auto state = make_state(l, 0.0, mu);
      Prng dirs(21);
      Vector mean(q, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        axpy(1.0 / n, two_point_estimate(state, quad, 1, sample_gaussian(dirs, q)).grad_estimate, mean);
      }
      means.push_back(mean);
    }
    // Statistical agreement with the analytic gradient.
    const double se = std::sqrt((q + 2) * norm_sq(g) / n);
    CHECK(max_abs_diff(means.back(), g) < 5 * se);
    // Bias differences under common directions shrink by 4 per halving.
    Vector d1 = means[0], d2 = means[1];
    axpy(-1.0, means[1], d1);
    axpy(-1.0, means[2], d2);
    CHECK(norm(d1) / norm(d2) == doctest::Approx(4.0).epsilon(0.1));
  }

  TEST_CASE("coverage average") {
    Prng rng(22);
    const QuadraticOracle quad(sample_gaussian(rng, 4, 5), Matrix(4, 5, 1.0));
    const LoraLayer one = unit_layer(4, 5, 1, ScalingMode::topology_aware());
    const Vector g1 = analytic_active_gradient(dense_gradient(quad, one), one.atom(0), one.coefficient());
    CHECK(coverage_average(one, quad, one.coefficient()) == norm_sq(g1));
  }
}
