#pragma once

#include <Eigen/Dense>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "conduct/csv.hpp"
#include "conduct/market_model.hpp"
#include "conduct/nested_logit.hpp"
#include "conduct/rng.hpp"

namespace conduct {

/// Configuration of the nested-logit price-response study: one simulated
/// market, re-solved under a list of internalization degrees.
struct JacobianStudyConfig {
  int J = 60;
  int F = 6;
  int G = 3;
  double sigma_nest = 0.2;
  double alpha = 1.0;
  Eigen::Vector2d beta{-3.0, 7.0};   // intercept, attribute loading
  Eigen::Vector2d gamma{1.0, 6.5};   // cost intercept, attribute loading
  double xi_sd = 0.2;
  int colluding_firms = 3;           // the first firms share one effective group
  std::vector<double> phi_list{0.0, 0.2, 0.5, 0.8, 1.0};
  std::uint64_t seed = 20240613ULL;

  void validate() const {
    if (sigma_nest < 0.0 || sigma_nest >= 1.0) throw ConfigError("sigma_nest must be in [0,1)");
    if (J < 1 || F < 1 || F > J || G < 1) throw ConfigError("need J >= F >= 1 and G >= 1");
    if (colluding_firms < 1 || colluding_firms > F)
      throw ConfigError("colluding_firms must be in [1, F]");
  }
};

inline JacobianStudyConfig jacobian_config_from_json(const nlohmann::json& j) {
  JacobianStudyConfig c;
  if (j.contains("J")) c.J = j.at("J").get<int>();
  if (j.contains("F")) c.F = j.at("F").get<int>();
  if (j.contains("G")) c.G = j.at("G").get<int>();
  if (j.contains("sigma_nest")) c.sigma_nest = j.at("sigma_nest").get<double>();
  if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
  if (j.contains("beta")) {
    auto b = j.at("beta").get<std::vector<double>>();
    if (b.size() != 2) throw ConfigError("beta must have length 2");
    c.beta = Eigen::Vector2d(b[0], b[1]);
  }
  if (j.contains("gamma")) {
    auto g = j.at("gamma").get<std::vector<double>>();
    if (g.size() != 2) throw ConfigError("gamma must have length 2");
    c.gamma = Eigen::Vector2d(g[0], g[1]);
  }
  if (j.contains("xi_sd")) c.xi_sd = j.at("xi_sd").get<double>();
  if (j.contains("colluding_firms")) c.colluding_firms = j.at("colluding_firms").get<int>();
  if (j.contains("phi")) c.phi_list = j.at("phi").get<std::vector<double>>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

struct JacobianStudyMarket {
  std::vector<int> firm_of, group_of;
  Eigen::VectorXd x, xi, mc, mean_utility_ex_price;
};

/// Draws the market once (shared across phi values): x ~ U(0,1),
/// xi ~ N(0, xi_sd^2), firms in contiguous blocks, groups seeded at random,
/// products ordered by (firm, group).
inline JacobianStudyMarket draw_jacobian_market(const JacobianStudyConfig& cfg) {
  cfg.validate();
  CounterRng rng(derive_key({cfg.seed, 0xAC0B17, static_cast<std::uint64_t>(cfg.J)}));
  JacobianStudyMarket m;
  CounterRng firm_rng(derive_key({cfg.seed, 1, static_cast<std::uint64_t>(cfg.F)}));
  m.firm_of = assign_firms(cfg.J, cfg.F, firm_rng);
  m.group_of.resize(cfg.J);
  for (int j = 0; j < cfg.J; ++j) m.group_of[j] = static_cast<int>(rng.below(cfg.G));
  // order products by firm then group so the heatmap blocks are contiguous
  std::vector<int> order(cfg.J);
  for (int j = 0; j < cfg.J; ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return std::pair(m.firm_of[a], m.group_of[a]) < std::pair(m.firm_of[b], m.group_of[b]);
  });
  std::vector<int> firm_sorted(cfg.J), group_sorted(cfg.J);
  m.x.resize(cfg.J);
  m.xi.resize(cfg.J);
  for (int j = 0; j < cfg.J; ++j) {
    firm_sorted[j] = m.firm_of[order[j]];
    group_sorted[j] = m.group_of[order[j]];
  }
  m.firm_of = firm_sorted;
  m.group_of = group_sorted;
  for (int j = 0; j < cfg.J; ++j) m.x(j) = rng.uniform();
  for (int j = 0; j < cfg.J; ++j) m.xi(j) = cfg.xi_sd * rng.normal();
  m.mc = cfg.gamma(0) + (cfg.gamma(1) * m.x.array());
  m.mean_utility_ex_price = cfg.beta(0) + (cfg.beta(1) * m.x.array() + m.xi.array());
  return m;
}

struct JacobianStudyResult {
  double phi = 0.0;
  Eigen::VectorXd price;
  Eigen::MatrixXd jacobian;  // dp*/dx
};

inline JacobianStudyResult solve_jacobian_study(const JacobianStudyConfig& cfg,
                                                const JacobianStudyMarket& m, double phi) {
  std::vector<int> eff(cfg.J);
  for (int j = 0; j < cfg.J; ++j) {
    const int f = m.firm_of[j];
    eff[j] = f < cfg.colluding_firms ? 0 : f - cfg.colluding_firms + 1;
  }
  OwnershipMatrix h = build_ownership(m.firm_of, ConductSpec{phi, eff});
  NestedLogitParams nl{cfg.sigma_nest, m.group_of};
  NestedEquilibrium eq =
      solve_nested_prices(m.mc, m.mean_utility_ex_price, cfg.alpha, nl, h.weights);
  JacobianStudyResult r;
  r.phi = phi;
  r.price = eq.price;
  r.jacobian = nested_logit_price_jacobian(eq.price, m.mc, m.mean_utility_ex_price, cfg.alpha,
                                           cfg.beta(1), cfg.gamma(1), nl, h.weights);
  return r;
}

/// Matrix CSV with product/firm/group annotations in both header and rows.
inline void write_jacobian_csv(std::ostream& os, const JacobianStudyMarket& m,
                               const JacobianStudyResult& r) {
  os << "product";
  const int J = static_cast<int>(m.x.size());
  for (int k = 0; k < J; ++k)
    os << ",p" << k << "_f" << m.firm_of[k] << "_g" << m.group_of[k];
  os << '\n';
  for (int j = 0; j < J; ++j) {
    os << 'p' << j << "_f" << m.firm_of[j] << "_g" << m.group_of[j];
    for (int k = 0; k < J; ++k) os << ',' << format_g17(r.jacobian(j, k));
    os << '\n';
  }
}

}  // namespace conduct
