#include <cmath>
#include <numeric>

#include "doctest.h"
#include "support/oracles.hpp"
#include "zolab/diagnostics.hpp"
#include "zolab/oracles.hpp"

using namespace zolab;
using testsupport::max_abs;
using testsupport::max_abs_diff;

namespace {

LoraLayer layer_at(const Matrix& w0, std::size_t r = 2) {
  return LoraLayer(w0, Matrix(w0.rows(), r), Matrix(r, w0.cols()), 1.0, ScalingMode::canonical());
}

}  // namespace

TEST_SUITE("oracles") {
  TEST_CASE("noise channel") {
    Prng rng(1);
    NoiseChannel quiet(0.0, rng.fork("n"));
    for (int i = 0; i < 10; ++i) CHECK(quiet.sample() == 0.0);
    CHECK_THROWS_AS(NoiseChannel(-1.0, rng), ConfigError);

    NoiseChannel loud(1e-3, rng.fork("m"));
    const std::size_t n = 100000;
    std::vector<double> xs(n);
    for (auto& x : xs) x = loud.sample();
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    double var = 0, lag = 0;
    for (std::size_t i = 0; i < n; ++i) {
      var += (xs[i] - mean) * (xs[i] - mean);
      if (i + 1 < n) lag += (xs[i] - mean) * (xs[i + 1] - mean);
    }
    CHECK(std::abs(std::sqrt(var / (n - 1)) - 1e-3) < 0.03e-3);
    CHECK(std::abs(lag / var) < 0.05);
  }

  TEST_CASE("evaluate adds noise to the clean loss") {
    Prng rng(2);
    const Matrix w0 = sample_gaussian(rng, 3, 4);
    const LinearOracle lin = make_linear(3, 4, 1.0, rng);
    const LoraLayer layer = layer_at(w0);
    NoiseChannel quiet(0.0, rng);
    CHECK(evaluate(lin, layer, quiet) == clean_loss(lin, layer));
    CHECK(clean_loss(lin, layer) == frobenius_inner(lin.coefficients(), w0));
  }

  TEST_CASE("linear oracle") {
    Prng rng(3);
    const LinearOracle lin = make_linear(4, 5, 2.5, rng);
    CHECK(std::sqrt(frobenius_sq(lin.coefficients())) == doctest::Approx(2.5).epsilon(1e-12));
    const Matrix w = sample_gaussian(rng, 4, 5);
    CHECK(lin.gradient(w) == lin.coefficients());
    // Linearity: L(W + D) - L(W) = <c, D>, on a dyadic grid where rounding is exact.
    const LinearOracle grid(Matrix{{0.5, -1.0}, {2.0, 0.25}});
    const Matrix w1{{1.0, 2.0}, {3.0, 4.0}}, d{{0.5, 0.25}, {-1.0, 2.0}};
    CHECK(grid.loss(add(w1, d)) - grid.loss(w1) == frobenius_inner(grid.coefficients(), d));
  }

  TEST_CASE("quadratic oracle") {
    Prng rng(4);
    const Matrix target = sample_gaussian(rng, 3, 3);
    const QuadraticOracle q(target, Matrix(3, 3, 1.0));
    CHECK(q.loss(target) == 0.0);
    const Matrix w = sample_gaussian(rng, 3, 3);
    CHECK(max_abs_diff(q.gradient(w).data(), subtract(w, target).data()) < 1e-15);
    CHECK(q.loss(w) > 0.0);
    NoiseChannel quiet(0.0, rng);
    CHECK(evaluate(q, layer_at(target), quiet) == 0.0);
    CHECK_THROWS_AS(QuadraticOracle(target, Matrix(3, 3, 0.0)), DomainError);
    CHECK_THROWS_AS(QuadraticOracle(target, Matrix(2, 3, 1.0)), ShapeError);
  }

  TEST_CASE("quadratic smoothness bound holds") {
    Prng rng(5);
    SpectralSpec spec{0.5, 1.0, 4.0};
    const QuadraticOracle q = make_spectral_quadratic(spec, Matrix(5, 6), rng);
    CHECK(q.smoothness() <= 4.0);
    for (int i = 0; i < 200; ++i) {
      const Matrix x = sample_gaussian(rng, 5, 6), y = sample_gaussian(rng, 5, 6);
      const double num = std::sqrt(frobenius_sq(subtract(q.gradient(x), q.gradient(y))));
      const double den = std::sqrt(frobenius_sq(subtract(x, y)));
      CHECK(num / den <= q.smoothness() + 1e-9);
    }
  }

  TEST_CASE("spectral construction") {
    Prng rng(6);
    for (double rho : {0.7, 0.1, 1.0}) {
      const Matrix w = sample_gaussian(rng, 32, 32);
      const QuadraticOracle q = make_spectral_quadratic({rho, 1.5, 2.0}, w, rng);
      const Matrix g = q.gradient(w);
      CHECK(spectral_concentration(g, rng) == doctest::Approx(rho).epsilon(1e-6));
      CHECK(frobenius_sq(g) == doctest::Approx(1.5 * 1.5).epsilon(1e-10));
      if (rho == 1.0) {
        const auto svd = testsupport::jacobi_svd(g);
        CHECK(svd.s[1] < 1e-10);
      }
    }
    CHECK_THROWS_AS(make_spectral_quadratic({0.0, 1, 1}, Matrix(4, 4), rng), DomainError);
    CHECK_THROWS_AS(make_spectral_quadratic({1.5, 1, 1}, Matrix(4, 4), rng), DomainError);
    CHECK_THROWS_AS(make_spectral_quadratic({0.1, 1, 1}, Matrix(4, 4), rng), DomainError);
  }

  TEST_CASE("logistic gradient matches dense central differences") {
    Prng rng(7);
    const LogisticOracle lo = make_logistic(40, 3, 5, rng);
    const Matrix w = sample_gaussian(rng, 3, 5);
    const Matrix g = lo.gradient(w);
    auto f = [&](const Vector& x) { return lo.loss(Matrix(3, 5, x)); };
    const Vector fd = testsupport::central_diff(f, Vector(w.data().begin(), w.data().end()), 1e-5);
    CHECK(max_abs_diff(fd, g.data()) <= 1e-6 * max_abs(g.data()));
    CHECK(lo.smoothness() > 0.0);
    CHECK(lo.loss(w) > 0.0);
  }

  TEST_CASE("dense gradient at the represented weight") {
    Prng rng(8);
    const Matrix target = sample_gaussian(rng, 3, 4);
    const QuadraticOracle q(target, Matrix(3, 4, 1.0));
    LoraLayer layer(sample_gaussian(rng, 3, 4), sample_gaussian(rng, 3, 2), sample_gaussian(rng, 2, 4), 3.0,
                    ScalingMode::sqrt_rank());
    CHECK(max_abs_diff(dense_gradient(q, layer).data(),
                       subtract(layer.dense_weight(), target).data()) < 1e-14);
  }
}
