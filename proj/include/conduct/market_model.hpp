#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "conduct/errors.hpp"
#include "conduct/rng.hpp"

namespace conduct {

struct DemandParams {
  double alpha = 1.0;  // price enters utility as -alpha * p
  Eigen::VectorXd beta = (Eigen::VectorXd(2) << -4.5, 6.0).finished();  // intercept first
  double sigma_x = 0.0;  // sd of the random coefficient on x
  int quad_nodes = 9;

  void validate() const {
    if (sigma_x < 0) throw ConfigError("demand.sigma_x must be >= 0");
    if (quad_nodes < 1) throw ConfigError("demand.quad_nodes must be >= 1");
    if (beta.size() < 1) throw ConfigError("demand.beta must include an intercept");
  }
};

struct CostParams {
  Eigen::Vector3d gamma{2.0, 1.0, 0.2};  // intercept, attribute loading, cost shifter loading
};

struct ShockParams {
  double var_xi = 0.2;
  double var_omega = 0.2;
  double cov_xi_omega = 0.1;

  void validate() const {
    if (var_xi < 0 || var_omega < 0 || var_xi * var_omega < cov_xi_omega * cov_xi_omega)
      throw ConfigError("shock covariance matrix is not positive semidefinite");
  }

  /// Lower Cholesky factor of [[var_xi, cov], [cov, var_omega]].
  Eigen::Matrix2d chol() const {
    validate();
    Eigen::Matrix2d l = Eigen::Matrix2d::Zero();
    l(0, 0) = std::sqrt(var_xi);
    l(1, 0) = l(0, 0) > 0 ? cov_xi_omega / l(0, 0) : 0.0;
    l(1, 1) = std::sqrt(var_omega - l(1, 0) * l(1, 0));
    return l;
  }
};

/// Who internalizes whom: phi plus the product -> effective-firm map.
struct ConductSpec {
  double phi = 0.0;
  std::vector<int> effective_group;  // one entry per product

  void validate() const {
    if (phi < 0.0 || phi > 1.0) throw ConfigError("phi must lie in [0,1]");
  }
};

enum class IvForm { SumOrder2, SumOrder3, DiffOrder2, DiffOrder3 };

inline std::string to_string(IvForm f) {
  switch (f) {
    case IvForm::SumOrder2: return "SumOrder2";
    case IvForm::SumOrder3: return "SumOrder3";
    case IvForm::DiffOrder2: return "DiffOrder2";
    case IvForm::DiffOrder3: return "DiffOrder3";
  }
  return "?";
}

inline IvForm iv_form_from_string(const std::string& s) {
  if (s == "SumOrder2") return IvForm::SumOrder2;
  if (s == "SumOrder3") return IvForm::SumOrder3;
  if (s == "DiffOrder2") return IvForm::DiffOrder2;
  if (s == "DiffOrder3") return IvForm::DiffOrder3;
  throw ConfigError("unknown iv_form: " + s);
}

/// One Monte Carlo experiment cell.
struct MonteCarloConfig {
  int J = 36;
  int F = 4;
  int T = 100;
  double phi = 0.0;
  int F_c = 3;
  std::optional<double> rho;     // endogenous-attribute path when present
  bool trivariate_endo = false;  // footnote variant: (x, xi, omega) jointly normal
  int S = 100;
  std::uint64_t master_seed = 20240613ULL;
  DemandParams demand;
  CostParams cost;
  ShockParams shocks;
  IvForm iv_form = IvForm::SumOrder2;

  void validate() const {
    if (F < 1 || F > J) throw ConfigError("need 1 <= F <= J");
    if (F_c < 1 || F_c > F) throw ConfigError("need 1 <= F_c <= F");
    if (T < 1) throw ConfigError("need T >= 1");
    if (S < 1) throw ConfigError("need S >= 1");
    demand.validate();
    shocks.validate();
    if (trivariate_endo && !rho) throw ConfigError("trivariate_endo requires rho");
  }
};

/// One market's product-level arrays at equilibrium.
struct Market {
  int market_id = 0;
  std::vector<int> firm_id;
  std::vector<int> effective_firm_id;
  Eigen::VectorXd x;
  Eigen::VectorXd w;
  Eigen::VectorXd xi;
  Eigen::VectorXd omega;
  Eigen::VectorXd mc;
  Eigen::VectorXd price;
  Eigen::VectorXd share;
  double outside_share = 0.0;
  double market_size = 1.0;  // cancels in the FOCs; kept so the profit formula stays literal

  int J() const { return static_cast<int>(x.size()); }

  void validate() const {
    const auto n = x.size();
    if (w.size() != n || xi.size() != n || omega.size() != n || mc.size() != n ||
        price.size() != n || share.size() != n ||
        static_cast<Eigen::Index>(firm_id.size()) != n ||
        static_cast<Eigen::Index>(effective_firm_id.size()) != n)
      throw StructuralError("market arrays have inconsistent lengths");
    if ((share.array() <= 0).any()) throw DomainError("market shares must be positive");
    if (std::abs(share.sum() + outside_share - 1.0) > 1e-12)
      throw DomainError("shares plus outside share must sum to one");
    if (!mc.allFinite() || !price.allFinite()) throw NumericalError("non-finite mc or price");
  }
};

/// J x J conduct matrix with entries {1, phi, 0}.
struct OwnershipMatrix {
  Eigen::MatrixXd weights;
};

/// Random firm assignment: each firm owns floor(J/F) or ceil(J/F) products,
/// the surplus assigned to a seed-determined subset of firms.
inline std::vector<int> assign_firms(int J, int F, CounterRng& rng) {
  if (F < 1 || F > J) throw ConfigError("assign_firms: need 1 <= F <= J");
  const int base = J / F;
  const int extra = J - base * F;
  std::vector<int> counts(F, base);
  for (int f = 0; f < extra; ++f) counts[f] += 1;
  rng.shuffle(counts);
  std::vector<int> firm_of;
  firm_of.reserve(J);
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < counts[f]; ++c) firm_of.push_back(f);
  return firm_of;
}

/// Merge the first F - F_c + 1 firms into one effective entity; the rest keep
/// singleton groups, yielding F_c distinct groups.
inline std::vector<int> effective_index(const std::vector<int>& firm_of, int F, int F_c) {
  if (F_c < 1 || F_c > F) throw ConfigError("effective_index: need 1 <= F_c <= F");
  const int merged = F - F_c + 1;
  std::vector<int> eff(firm_of.size());
  for (std::size_t j = 0; j < firm_of.size(); ++j) {
    const int f = firm_of[j];
    eff[j] = f < merged ? 0 : f - merged + 1;
  }
  return eff;
}

inline OwnershipMatrix build_ownership(const std::vector<int>& firm_of, const ConductSpec& spec) {
  spec.validate();
  const int J = static_cast<int>(firm_of.size());
  if (static_cast<int>(spec.effective_group.size()) != J)
    throw StructuralError("ownership: firm and effective maps must cover the same products");
  // Effective groups must coarsen firms: one firm never splits across groups.
  std::vector<int> group_of_firm;
  for (int j = 0; j < J; ++j) {
    const int f = firm_of[j];
    if (f >= static_cast<int>(group_of_firm.size())) group_of_firm.resize(f + 1, -1);
    if (group_of_firm[f] == -1) group_of_firm[f] = spec.effective_group[j];
    else if (group_of_firm[f] != spec.effective_group[j])
      throw StructuralError("ownership: firm " + std::to_string(f) +
                            " is split across effective groups");
  }
  OwnershipMatrix h;
  h.weights.resize(J, J);
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < J; ++k) {
      if (firm_of[j] == firm_of[k]) h.weights(j, k) = 1.0;
      else if (spec.effective_group[j] == spec.effective_group[k]) h.weights(j, k) = spec.phi;
      else h.weights(j, k) = 0.0;
    }
  return h;
}

// ---------------------------------------------------------------------------
// JSON serialization of MonteCarloConfig; field names match the type fields.

inline void to_json(nlohmann::json& j, const MonteCarloConfig& c) {
  j = nlohmann::json{
      {"J", c.J},
      {"F", c.F},
      {"T", c.T},
      {"phi", c.phi},
      {"F_c", c.F_c},
      {"S", c.S},
      {"master_seed", c.master_seed},
      {"iv_form", to_string(c.iv_form)},
      {"demand",
       {{"alpha", c.demand.alpha},
        {"beta", std::vector<double>(c.demand.beta.data(), c.demand.beta.data() + c.demand.beta.size())},
        {"sigma_x", c.demand.sigma_x},
        {"quad_nodes", c.demand.quad_nodes}}},
      {"cost", {{"gamma", {c.cost.gamma(0), c.cost.gamma(1), c.cost.gamma(2)}}}},
      {"shocks",
       {{"var_xi", c.shocks.var_xi},
        {"var_omega", c.shocks.var_omega},
        {"cov_xi_omega", c.shocks.cov_xi_omega}}}};
  if (c.rho) j["rho"] = *c.rho;
  if (c.trivariate_endo) j["trivariate_endo"] = true;
}

template <typename T>
T require_field(const nlohmann::json& j, const std::string& key) {
  if (!j.contains(key)) throw ConfigError("missing field \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("field \"" + key + "\": " + e.what());
  }
}

inline void from_json(const nlohmann::json& j, MonteCarloConfig& c) {
  c.J = require_field<int>(j, "J");
  c.F = require_field<int>(j, "F");
  c.T = require_field<int>(j, "T");
  c.phi = require_field<double>(j, "phi");
  c.F_c = require_field<int>(j, "F_c");
  c.S = require_field<int>(j, "S");
  c.master_seed = require_field<std::uint64_t>(j, "master_seed");
  c.iv_form = iv_form_from_string(require_field<std::string>(j, "iv_form"));
  if (j.contains("rho")) c.rho = j.at("rho").get<double>();
  if (j.contains("trivariate_endo")) c.trivariate_endo = j.at("trivariate_endo").get<bool>();
  if (j.contains("demand")) {
    const auto& d = j.at("demand");
    c.demand.alpha = require_field<double>(d, "alpha");
    auto beta = require_field<std::vector<double>>(d, "beta");
    c.demand.beta = Eigen::Map<Eigen::VectorXd>(beta.data(), beta.size());
    if (d.contains("sigma_x")) c.demand.sigma_x = d.at("sigma_x").get<double>();
    if (d.contains("quad_nodes")) c.demand.quad_nodes = d.at("quad_nodes").get<int>();
  }
  if (j.contains("cost")) {
    auto g = require_field<std::vector<double>>(j.at("cost"), "gamma");
    if (g.size() != 3) throw ConfigError("cost.gamma must have length 3");
    c.cost.gamma = Eigen::Vector3d(g[0], g[1], g[2]);
  }
  if (j.contains("shocks")) {
    const auto& s = j.at("shocks");
    c.shocks.var_xi = require_field<double>(s, "var_xi");
    c.shocks.var_omega = require_field<double>(s, "var_omega");
    c.shocks.cov_xi_omega = require_field<double>(s, "cov_xi_omega");
  }
  c.validate();
}

}  // namespace conduct
