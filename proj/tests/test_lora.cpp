#include <cmath>

#include "doctest.h"
#include "support/oracles.hpp"
#include "zolab/lora.hpp"

using namespace zolab;
using testsupport::max_abs;
using testsupport::max_abs_diff;

namespace {

LoraLayer random_layer(Prng& rng, std::size_t d_out, std::size_t d_in, std::size_t r,
                       ScalingMode mode = ScalingMode::canonical(), double alpha = 2.0) {
  return LoraLayer(sample_gaussian(rng, d_out, d_in), sample_gaussian(rng, d_out, r),
                   sample_gaussian(rng, r, d_in), alpha, mode);
}

}  // namespace

TEST_SUITE("lora") {
  TEST_CASE("effective gamma per mode") {
    CHECK(effective_gamma(ScalingMode::topology_aware(), 16, 64) == 1024.0);
    CHECK(effective_gamma(ScalingMode::canonical(), 16, 1) == 16.0);
    CHECK(effective_gamma(ScalingMode::topology_aware(), 16, 1) == 16.0);
    CHECK(effective_gamma(ScalingMode::sqrt_rank(), 16, 64) == 128.0);
    CHECK(effective_gamma(ScalingMode::fixed(3.5), 16, 64) == 3.5);
    CHECK(effective_gamma(ScalingMode::block_aware(4), 2, 64) == 32.0);
    CHECK(active_coefficient(ScalingMode::block_aware(4), 2, 64) * 4 == 2.0);
  }

  TEST_CASE("active coefficient invariants") {
    for (std::size_t r : {1, 2, 3, 7, 64, 1000}) {
      CHECK(active_coefficient(ScalingMode::topology_aware(), 0.1, r) == 0.1);
      CHECK(active_coefficient(ScalingMode::canonical(), 16, r) > 0.0);
    }
    for (std::size_t r : {4, 12, 60, 64}) {
      for (std::size_t m : {1, 2, 4}) {
        if (r % m != 0) continue;
        const double c = active_coefficient(ScalingMode::block_aware(m), 0.3, r);
        CHECK(std::abs(c * m - 0.3) <= 1e-15);
      }
    }
  }

  TEST_CASE("invalid scaling configurations") {
    CHECK_THROWS_AS(effective_gamma(ScalingMode::block_aware(8), 1, 4), ConfigError);
    CHECK_THROWS_AS(effective_gamma(ScalingMode::block_aware(3), 1, 8), ConfigError);
    CHECK_THROWS_AS(effective_gamma(ScalingMode::block_aware(0), 1, 8), ConfigError);
    CHECK_THROWS_AS(effective_gamma(ScalingMode::canonical(), 1, 0), ConfigError);
    CHECK_THROWS_AS(effective_gamma(ScalingMode::canonical(), -1, 4), ConfigError);
    CHECK_THROWS_AS(effective_gamma(ScalingMode::fixed(0.0), 1, 4), ConfigError);
  }

  TEST_CASE("mode strings round trip") {
    for (const auto& m : {ScalingMode::canonical(), ScalingMode::sqrt_rank(),
                          ScalingMode::topology_aware(), ScalingMode::fixed(0.25),
                          ScalingMode::block_aware(4)}) {
      CHECK(parse_scaling_mode(to_string(m)) == m);
    }
    CHECK_THROWS_AS(parse_scaling_mode("linear"), ConfigError);
    CHECK_THROWS_AS(parse_scaling_mode("block_aware:x"), ConfigError);
  }

  TEST_CASE("forward") {
    Prng rng(1);
    const Matrix w0 = sample_gaussian(rng, 3, 4);
    const Vector x = sample_gaussian(rng, 4);
    for (const auto& mode : {ScalingMode::canonical(), ScalingMode::topology_aware()}) {
      LoraLayer zero(w0, Matrix(3, 2), sample_gaussian(rng, 2, 4), 16, mode);
      CHECK(zero.forward(x) == matvec(w0, x));
    }
    LoraLayer unit(Matrix(2, 2), Matrix{{1}, {0}}, Matrix{{1, 0}}, 1, ScalingMode::canonical());
    CHECK(unit.forward(Vector{1, 0}) == Vector{1, 0});

    const LoraLayer layer = random_layer(rng, 5, 6, 3, ScalingMode::sqrt_rank());
    const Vector xx = sample_gaussian(rng, 6);
    const Vector dense = matvec(layer.dense_weight(), xx);
    CHECK(max_abs_diff(layer.forward(xx), dense) < 1e-12 * std::max(1.0, max_abs(dense)));
    CHECK_THROWS_AS(layer.forward(Vector(5)), ShapeError);
  }

  TEST_CASE("modes coincide at rank one") {
    Prng rng(2);
    const LoraLayer base = random_layer(rng, 4, 3, 1, ScalingMode::canonical(), 16);
    const Vector x = sample_gaussian(rng, 3);
    for (const auto& mode : {ScalingMode::sqrt_rank(), ScalingMode::topology_aware()}) {
      LoraLayer l = base;
      l.set_mode(mode);
      CHECK(l.forward(x) == base.forward(x));
    }
  }

  TEST_CASE("forward decomposition recomposes") {
    Prng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t r = 1 + rng.uniform_index(5);
      const LoraLayer layer = random_layer(rng, 4, 5, r, ScalingMode::topology_aware(), 1.5);
      const Vector x = sample_gaussian(rng, 5);
      const std::size_t k = rng.uniform_index(r);
      const auto parts = layer.forward_decomposed(x, k);
      const Vector full = layer.forward(x);
      Vector sum = parts.base;
      axpy(1.0, parts.active, sum);
      axpy(1.0, parts.frozen, sum);
      REQUIRE(max_abs_diff(sum, full) <= 1e-12 * std::max(1.0, norm(full)));
      CHECK(parts.base == matvec(layer.w0(), x));
      if (r == 1) CHECK(max_abs(parts.frozen) == 0.0);
    }
    // x orthogonal to a_k kills the active part.
    LoraLayer l(Matrix(2, 2), Matrix{{1, 1}, {0, 1}}, Matrix{{1, 0}, {1, 1}}, 1, ScalingMode::canonical());
    CHECK(max_abs(l.forward_decomposed(Vector{0, 1}, 0).active) == 0.0);
    CHECK_THROWS_AS(l.forward_decomposed(Vector{0, 1}, 2), ShapeError);
  }

  TEST_CASE("atom read and write") {
    Prng rng(4);
    LoraLayer layer = random_layer(rng, 3, 4, 2);
    const LoraLayer before = layer;
    layer.write_atom(layer.atom(1));
    CHECK(layer == before);

    AtomView v = layer.atom(0);
    v.b = sample_gaussian(rng, 3);
    v.a = sample_gaussian(rng, 4);
    layer.write_atom(v);
    CHECK(layer.atom(1) == before.atom(1));
    CHECK(layer.atom(0) == v);
    CHECK(layer.w0() == before.w0());

    const Vector x = sample_gaussian(rng, 4);
    const Vector y = matvec(layer.dense_weight(), x);
    CHECK(max_abs_diff(layer.forward(x), y) < 1e-12 * std::max(1.0, max_abs(y)));
    CHECK_THROWS_AS(layer.atom(2), ShapeError);
    v.a.push_back(0.0);
    CHECK_THROWS_AS(layer.write_atom(v), ShapeError);
  }

  TEST_CASE("flatten and unflatten") {
    const AtomView v{0, {1, 2}, {3, 4, 5}};
    CHECK(flatten_atom(v) == Vector{1, 2, 3, 4, 5});
    CHECK(v.dim() == 5);
    CHECK(unflatten_atom(flatten_atom(v), 2, 3) == v);
    CHECK_THROWS_AS(unflatten_atom(Vector{1, 2}, 2, 3), ShapeError);
    Prng rng(5);
    const Vector x = sample_gaussian(rng, 9);
    CHECK(flatten_atom(unflatten_atom(x, 4, 5)) == x);
  }

  TEST_CASE("construction checks") {
    CHECK_THROWS_AS(LoraLayer(Matrix(2, 3), Matrix(2, 1), Matrix(1, 2), 1, ScalingMode::canonical()),
                    ShapeError);
    CHECK_THROWS_AS(LoraLayer(Matrix(2, 3), Matrix(2, 0), Matrix(0, 3), 1, ScalingMode::canonical()),
                    ConfigError);
    CHECK_THROWS_AS(LoraLayer(Matrix(2, 3), Matrix(2, 2), Matrix(2, 3), 1, ScalingMode::block_aware(4)),
                    ConfigError);
  }

  TEST_CASE("initialization") {
    Prng rng(6);
    const Matrix w0 = sample_gaussian(rng, 8, 32);
    const auto zero_b = LoraLayer::initialized(w0, 64, 16, ScalingMode::canonical(), rng);
    CHECK(max_abs(zero_b.b().data()) == 0.0);
    double ss = 0;
    for (double x : zero_b.a().data()) ss += x * x;
    CHECK(ss / (64.0 * 32.0) == doctest::Approx(1.0 / 32.0).epsilon(0.05));

    const auto unit = LoraLayer::initialized(w0, 4, 16, ScalingMode::canonical(), rng, AtomInit::UnitAtoms);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(norm(unit.atom(k).b) == doctest::Approx(1.0).epsilon(1e-14));
      CHECK(norm(unit.atom(k).a) == doctest::Approx(1.0).epsilon(1e-14));
    }
    // Leading atoms are shared across ranks.
    const auto bigger = LoraLayer::initialized(w0, 9, 16, ScalingMode::topology_aware(), rng, AtomInit::UnitAtoms);
    for (std::size_t k = 0; k < 4; ++k) CHECK(bigger.atom(k) == unit.atom(k));
  }

  TEST_CASE("json round trip") {
    Prng rng(7);
    const LoraLayer layer = random_layer(rng, 3, 2, 2, ScalingMode::block_aware(2), 0.5);
    const auto j = to_json(layer);
    CHECK(j.at("r") == 2);
    CHECK(j.at("mode") == "block_aware:2");
    CHECK(j.at("w0").size() == 6);
    CHECK(layer_from_json(j) == layer);
    auto bad = j;
    bad["b"] = nlohmann::json::array({1.0});
    CHECK_THROWS_AS(layer_from_json(bad), ConfigError);
  }

  TEST_CASE("adapter norm") {
    LoraLayer l(Matrix(2, 2), Matrix{{3}, {0}}, Matrix{{0, 4}}, 2, ScalingMode::canonical());
    CHECK(adapter_norm(l) == 24.0);
  }
}
