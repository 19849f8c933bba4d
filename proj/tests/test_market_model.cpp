#include <catch2/catch_amalgamated.hpp>
#include <map>

#include "conduct/market_model.hpp"

using namespace conduct;

namespace {
std::map<int, int> firm_counts(const std::vector<int>& firm_of) {
  std::map<int, int> c;
  for (int f : firm_of) c[f]++;
  return c;
}
}  // namespace

TEST_CASE("assign_firms splits J products into floor/ceil blocks") {
  CounterRng rng(7);
  SECTION("exact division: 36 over 4") {
    auto f = assign_firms(36, 4, rng);
    for (auto [firm, n] : firm_counts(f)) {
      (void)firm;
      REQUIRE(n == 9);
    }
  }
  SECTION("remainder: 36 over 5 gives four 7s and one 8") {
    auto f = assign_firms(36, 5, rng);
    auto counts = firm_counts(f);
    REQUIRE(counts.size() == 5);
    int sevens = 0, eights = 0, total = 0;
    for (auto [firm, n] : counts) {
      (void)firm;
      total += n;
      if (n == 7) ++sevens;
      if (n == 8) ++eights;
    }
    REQUIRE(total == 36);
    REQUIRE(sevens == 4);
    REQUIRE(eights == 1);
  }
  SECTION("singleton firms") {
    auto f = assign_firms(3, 3, rng);
    REQUIRE(firm_counts(f).size() == 3);
  }
  SECTION("bad counts") {
    REQUIRE_THROWS_AS(assign_firms(3, 4, rng), ConfigError);
    REQUIRE_THROWS_AS(assign_firms(3, 0, rng), ConfigError);
  }
  SECTION("deterministic given the seed") {
    CounterRng a(11), b(11);
    REQUIRE(assign_firms(36, 5, a) == assign_firms(36, 5, b));
  }
  SECTION("partition: every product in exactly one firm") {
    CounterRng a(13);
    auto f = assign_firms(35, 6, a);
    REQUIRE(f.size() == 35);
    for (int v : f) {
      REQUIRE(v >= 0);
      REQUIRE(v < 6);
    }
  }
}

TEST_CASE("effective_index merges the first F-F_c+1 firms") {
  // F=6, F_c=4: firms {0,1,2} merge, groups relabel to {0,1,2,3}
  std::vector<int> firm_of{0, 1, 2, 3, 4, 5};
  auto eff = effective_index(firm_of, 6, 4);
  REQUIRE(eff == std::vector<int>{0, 0, 0, 1, 2, 3});
  SECTION("identity when F_c=F") {
    REQUIRE(effective_index(firm_of, 6, 6) == firm_of);
  }
  SECTION("single group when F_c=1") {
    auto all = effective_index(firm_of, 6, 1);
    for (int g : all) REQUIRE(g == 0);
  }
  SECTION("distinct group count is F_c") {
    for (int fc = 1; fc <= 6; ++fc) {
      auto e = effective_index(firm_of, 6, fc);
      std::map<int, int> groups;
      for (int g : e) groups[g]++;
      REQUIRE(static_cast<int>(groups.size()) == fc);
    }
  }
  REQUIRE_THROWS_AS(effective_index(firm_of, 6, 7), ConfigError);
}

TEST_CASE("build_ownership matches the {1, phi, 0} pattern") {
  std::vector<int> firm_of{0, 0, 1, 2};  // firms 0,1 colluding; firm 2 alone
  std::vector<int> eff{0, 0, 0, 1};
  SECTION("phi=0 is the firm block indicator") {
    auto h = build_ownership(firm_of, {0.0, eff});
    Eigen::MatrixXd expect(4, 4);
    expect << 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1;
    REQUIRE((h.weights - expect).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("phi=1, F_c=1 is all ones") {
    std::vector<int> one(4, 0);
    auto h = build_ownership(firm_of, {1.0, one});
    REQUIRE((h.weights.array() == 1.0).all());
  }
  SECTION("phi=0.5 cross-firm colluding entries") {
    auto h = build_ownership(firm_of, {0.5, eff});
    REQUIRE(h.weights(0, 2) == 0.5);
    REQUIRE(h.weights(2, 0) == 0.5);
    REQUIRE(h.weights(0, 1) == 1.0);
    REQUIRE(h.weights(0, 3) == 0.0);
    REQUIRE(h.weights.diagonal().minCoeff() == 1.0);
    REQUIRE((h.weights - h.weights.transpose()).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("interpolation identity: H(phi) = B_firm + phi (B_eff - B_firm)") {
    auto b0 = build_ownership(firm_of, {0.0, eff});
    auto b1 = build_ownership(firm_of, {1.0, eff});
    for (double phi : {0.25, 0.5, 0.75}) {
      auto h = build_ownership(firm_of, {phi, eff});
      Eigen::MatrixXd blend = b0.weights + phi * (b1.weights - b0.weights);
      REQUIRE((h.weights - blend).cwiseAbs().maxCoeff() < 1e-15);
    }
  }
  SECTION("firm split across groups is rejected") {
    std::vector<int> bad{0, 1, 0, 1};  // firm 0 in two groups
    REQUIRE_THROWS_AS(build_ownership(firm_of, {0.5, bad}), StructuralError);
  }
}

TEST_CASE("config json roundtrip keeps every field") {
  MonteCarloConfig c;
  c.J = 24;
  c.F = 6;
  c.T = 50;
  c.phi = 0.3;
  c.F_c = 2;
  c.rho = -5.0;
  c.S = 10;
  c.master_seed = 987654321;
  c.demand.sigma_x = 3.0;
  c.iv_form = IvForm::DiffOrder3;
  nlohmann::json j = c;
  auto back = j.get<MonteCarloConfig>();
  REQUIRE(back.J == c.J);
  REQUIRE(back.F == c.F);
  REQUIRE(back.T == c.T);
  REQUIRE(back.phi == c.phi);
  REQUIRE(back.F_c == c.F_c);
  REQUIRE(back.rho == c.rho);
  REQUIRE(back.S == c.S);
  REQUIRE(back.master_seed == c.master_seed);
  REQUIRE(back.demand.sigma_x == c.demand.sigma_x);
  REQUIRE(back.iv_form == c.iv_form);
  REQUIRE((back.demand.beta - c.demand.beta).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("config json reports the missing field by name") {
  nlohmann::json j{{"J", 36}, {"F", 4}, {"T", 100}, {"phi", 0.0}, {"F_c", 3},
                   {"master_seed", 1}, {"iv_form", "SumOrder2"}};  // no S
  try {
    j.get<MonteCarloConfig>();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("\"S\"") != std::string::npos);
  }
}

TEST_CASE("shock params validate positive semidefiniteness") {
  ShockParams bad{0.04, 0.04, 0.1};  // the sd-reading of the DGP numbers: not PSD
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
  ShockParams good{0.2, 0.2, 0.1};
  Eigen::Matrix2d l = good.chol();
  Eigen::Matrix2d cov = l * l.transpose();
  REQUIRE(std::abs(cov(0, 0) - 0.2) < 1e-15);
  REQUIRE(std::abs(cov(1, 1) - 0.2) < 1e-15);
  REQUIRE(std::abs(cov(0, 1) - 0.1) < 1e-15);
}
