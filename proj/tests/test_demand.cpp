#include <catch2/catch_amalgamated.hpp>

#include "conduct/demand.hpp"
#include "conduct/rng.hpp"

using namespace conduct;

namespace {
const Quadrature kQuad = Quadrature::gauss_hermite_normal(9);

Eigen::VectorXd random_vector(CounterRng& rng, int n, double lo, double hi) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = lo + (hi - lo) * rng.uniform();
  return v;
}
}  // namespace

TEST_CASE("logit shares: closed-form spot values") {
  SECTION("single product at delta=0 splits the market with the outside good") {
    auto r = logit_shares(Eigen::VectorXd::Zero(1));
    REQUIRE(r.share(0) == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(r.outside == Catch::Approx(0.5).margin(1e-15));
  }
  SECTION("two zeros give thirds") {
    auto r = logit_shares(Eigen::VectorXd::Zero(2));
    REQUIRE(r.share(0) == Catch::Approx(1.0 / 3).margin(1e-15));
    REQUIRE(r.share(1) == Catch::Approx(1.0 / 3).margin(1e-15));
  }
  SECTION("(ln 2, 0) -> (1/2, 1/4, 1/4)") {
    Eigen::VectorXd d(2);
    d << std::log(2.0), 0.0;
    auto r = logit_shares(d);
    REQUIRE(r.share(0) == Catch::Approx(0.5).margin(1e-14));
    REQUIRE(r.share(1) == Catch::Approx(0.25).margin(1e-14));
    REQUIRE(r.outside == Catch::Approx(0.25).margin(1e-14));
  }
  SECTION("huge deltas do not overflow") {
    Eigen::VectorXd d(2);
    d << 800.0, 799.0;
    auto r = logit_shares(d);
    REQUIRE(std::isfinite(r.share(0)));
    REQUIRE(r.share.sum() + r.outside == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("rc shares collapse to logit when the heterogeneity vanishes") {
  CounterRng rng(101);
  Eigen::VectorXd delta = random_vector(rng, 8, -3, 2);
  Eigen::VectorXd x = random_vector(rng, 8, 0, 1);
  SECTION("sigma = 0") {
    auto rc = rc_shares(delta, x, 0.0, kQuad);
    auto lg = logit_shares(delta);
    REQUIRE((rc.share - lg.share).cwiseAbs().maxCoeff() < 1e-14);
  }
  SECTION("x = 0") {
    auto rc = rc_shares(delta, Eigen::VectorXd::Zero(8), 3.0, kQuad);
    auto lg = logit_shares(delta);
    REQUIRE((rc.share - lg.share).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rc shares match brute-force monte carlo integration") {
  CounterRng rng(202);
  Eigen::VectorXd delta = random_vector(rng, 5, -3, 1);
  Eigen::VectorXd x = random_vector(rng, 5, 0, 1);
  const double sigma = 3.0;
  auto quad_result = rc_shares(delta, x, sigma, kQuad);

  const int draws = 1000000;
  Eigen::VectorXd mc_mean = Eigen::VectorXd::Zero(5);
  Eigen::VectorXd mc_m2 = Eigen::VectorXd::Zero(5);
  CounterRng mc(303);
  for (int i = 0; i < draws; ++i) {
    const double v = mc.normal();
    auto s = logit_shares(delta + sigma * v * x);
    mc_mean += s.share;
    mc_m2 += s.share.cwiseProduct(s.share);
  }
  mc_mean /= draws;
  mc_m2 /= draws;
  for (int j = 0; j < 5; ++j) {
    const double se = std::sqrt((mc_m2(j) - mc_mean(j) * mc_mean(j)) / draws);
    REQUIRE(std::abs(quad_result.share(j) - mc_mean(j)) < 3.0 * se + 1e-12);
  }
}

TEST_CASE("share-price jacobian: logit closed form and sign structure") {
  DemandParams demand;  // alpha = 1, sigma = 0
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(2);
  Eigen::VectorXd x(2);
  x << 0.2, 0.8;
  Eigen::MatrixXd jac = share_price_jacobian(delta, x, demand, kQuad);
  REQUIRE(jac(0, 0) == Catch::Approx(-(1.0 / 3) * (2.0 / 3)).margin(1e-14));
  REQUIRE(jac(1, 1) == Catch::Approx(-(1.0 / 3) * (2.0 / 3)).margin(1e-14));
  REQUIRE(jac(0, 1) == Catch::Approx(1.0 / 9).margin(1e-14));
  REQUIRE(jac(1, 0) == Catch::Approx(1.0 / 9).margin(1e-14));
}

TEST_CASE("share-price jacobian matches central finite differences") {
  CounterRng rng(404);
  DemandParams demand;
  demand.sigma_x = 3.0;
  demand.alpha = 1.0;
  for (int rep = 0; rep < 5; ++rep) {
    const int J = 6;
    Eigen::VectorXd x = random_vector(rng, J, 0, 1);
    Eigen::VectorXd v = random_vector(rng, J, -2, 2);
    Eigen::VectorXd p = random_vector(rng, J, 1, 3);
    Eigen::VectorXd delta = v - demand.alpha * p;
    Eigen::MatrixXd jac = share_price_jacobian(delta, x, demand, kQuad);
    const double h = 1e-6;
    for (int k = 0; k < J; ++k) {
      Eigen::VectorXd dp = Eigen::VectorXd::Zero(J);
      dp(k) = h;
      Eigen::VectorXd up = rc_shares(v - demand.alpha * (p + dp), x, demand.sigma_x, kQuad).share;
      Eigen::VectorXd dn = rc_shares(v - demand.alpha * (p - dp), x, demand.sigma_x, kQuad).share;
      Eigen::VectorXd fd = (up - dn) / (2 * h);
      REQUIRE((fd - jac.col(k)).cwiseAbs().maxCoeff() < 1e-6);
    }
    // own effect dominates: column sums lie in (-alpha * s_k, 0)
    Eigen::VectorXd s = rc_shares(delta, x, demand.sigma_x, kQuad).share;
    for (int k = 0; k < J; ++k) {
      const double colsum = jac.col(k).sum();
      REQUIRE(colsum < 0.0);
      REQUIRE(colsum > -demand.alpha * s(k));
    }
  }
}

TEST_CASE("shares respond monotonically to mean utilities") {
  CounterRng rng(505);
  DemandParams demand;
  demand.sigma_x = 2.0;
  Eigen::VectorXd x = random_vector(rng, 5, 0, 1);
  Eigen::VectorXd delta = random_vector(rng, 5, -2, 1);
  auto base = rc_shares(delta, x, demand.sigma_x, kQuad);
  const double h = 1e-7;
  for (int j = 0; j < 5; ++j) {
    Eigen::VectorXd bump = delta;
    bump(j) += h;
    auto up = rc_shares(bump, x, demand.sigma_x, kQuad);
    REQUIRE(up.share(j) > base.share(j));
    for (int k = 0; k < 5; ++k)
      if (k != j) REQUIRE(up.share(k) < base.share(k));
  }
}

TEST_CASE("share inversion") {
  CounterRng rng(606);
  DemandParams demand;
  SECTION("logit roundtrip is exact") {
    Eigen::VectorXd delta = random_vector(rng, 7, -3, 2);
    auto s = logit_shares(delta);
    Eigen::VectorXd back = invert_shares(s.share, Eigen::VectorXd::Zero(7), demand, kQuad);
    REQUIRE((back - delta).cwiseAbs().maxCoeff() < 1e-13);
  }
  SECTION("rc roundtrip at sigma=3 within 1e-9") {
    demand.sigma_x = 3.0;
    for (int rep = 0; rep < 5; ++rep) {
      Eigen::VectorXd delta = random_vector(rng, 9, -4, 1);
      Eigen::VectorXd x = random_vector(rng, 9, 0, 1);
      auto s = rc_shares(delta, x, demand.sigma_x, kQuad);
      Eigen::VectorXd back = invert_shares(s.share, x, demand, kQuad);
      REQUIRE((back - delta).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
  SECTION("domain errors") {
    Eigen::VectorXd bad(2);
    bad << 0.6, 0.6;
    REQUIRE_THROWS_AS(invert_shares(bad, Eigen::VectorXd::Zero(2), demand, kQuad), DomainError);
    Eigen::VectorXd zero(2);
    zero << 0.0, 0.3;
    REQUIRE_THROWS_AS(invert_shares(zero, Eigen::VectorXd::Zero(2), demand, kQuad), DomainError);
  }
  SECTION("contraction updates shrink monotonically") {
    demand.sigma_x = 2.5;
    Eigen::VectorXd delta = random_vector(rng, 6, -3, 1);
    Eigen::VectorXd x = random_vector(rng, 6, 0, 1);
    auto target = rc_shares(delta, x, demand.sigma_x, kQuad);
    // instrumented contraction: replicate the map and watch the sup-norm
    Eigen::VectorXd cur = (target.share.array().log() - std::log(target.outside)).matrix();
    double last = 1e300;
    for (int it = 0; it < 50; ++it) {
      Eigen::VectorXd s = rc_shares(cur, x, demand.sigma_x, kQuad).share;
      Eigen::VectorXd update = target.share.array().log().matrix() - s.array().log().matrix();
      const double step = update.cwiseAbs().maxCoeff();
      REQUIRE(step <= last * (1 + 1e-12));
      last = step;
      cur += update;
      if (step < 1e-13) break;
    }
  }
}
