#include <catch2/catch_amalgamated.hpp>

#include "conduct/quadrature.hpp"
#include "conduct/rng.hpp"

using namespace conduct;

TEST_CASE("counter rng replays exactly and splits by key") {
  CounterRng a(derive_key({1, 2, 3}));
  CounterRng b(derive_key({1, 2, 3}));
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  CounterRng c(derive_key({1, 2, 4}));
  int same = 0;
  CounterRng a2(derive_key({1, 2, 3}));
  for (int i = 0; i < 100; ++i)
    if (a2.next_u64() == c.next_u64()) ++same;
  REQUIRE(same == 0);
}

TEST_CASE("uniforms live in [0,1) and normals have sane moments") {
  CounterRng r(42);
  double sum = 0, sum2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
    sum2 += u * u;
  }
  REQUIRE(std::abs(sum / n - 0.5) < 0.005);
  REQUIRE(std::abs(sum2 / n - 1.0 / 3.0) < 0.005);
  double nsum = 0, nsum2 = 0;
  for (int i = 0; i < n; ++i) {
    double z = r.normal();
    nsum += z;
    nsum2 += z * z;
  }
  REQUIRE(std::abs(nsum / n) < 0.01);
  REQUIRE(std::abs(nsum2 / n - 1.0) < 0.02);
}

TEST_CASE("gauss-hermite rule integrates normal moments exactly") {
  Quadrature q = Quadrature::gauss_hermite_normal(9);
  REQUIRE(q.size() == 9);
  REQUIRE((q.weights.array() > 0).all());
  REQUIRE(std::abs(q.weights.sum() - 1.0) < 1e-12);
  // moments 0..4 of N(0,1): 1, 0, 1, 0, 3
  const double m0 = q.weights.sum();
  const double m1 = q.nodes.dot(q.weights);
  const double m2 = q.nodes.array().square().matrix().dot(q.weights);
  const double m3 = q.nodes.array().cube().matrix().dot(q.weights);
  const double m4 = q.nodes.array().pow(4).matrix().dot(q.weights);
  REQUIRE(std::abs(m0 - 1.0) < 1e-10);
  REQUIRE(std::abs(m1) < 1e-10);
  REQUIRE(std::abs(m2 - 1.0) < 1e-10);
  REQUIRE(std::abs(m3) < 1e-10);
  REQUIRE(std::abs(m4 - 3.0) < 1e-10);
}

TEST_CASE("degenerate one-node rule is the mean") {
  Quadrature q = Quadrature::gauss_hermite_normal(1);
  REQUIRE(q.nodes(0) == 0.0);
  REQUIRE(q.weights(0) == 1.0);
  REQUIRE_THROWS_AS(Quadrature::gauss_hermite_normal(0), ConfigError);
}
