#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "conduct/errors.hpp"
#include "conduct/market_model.hpp"

namespace conduct {

/// Nested logit with the outside option alone in its own nest.
struct NestedLogitParams {
  double sigma_nest = 0.0;     // within-group correlation, in [0,1)
  std::vector<int> group;      // product -> group (outside option implicit)

  void validate(int J) const {
    if (sigma_nest < 0.0 || sigma_nest >= 1.0) throw DomainError("sigma_nest must be in [0,1)");
    if (static_cast<int>(group.size()) != J) throw StructuralError("group map must cover all products");
  }
};

struct NestedShares {
  Eigen::VectorXd share;      // s_j
  Eigen::VectorXd within;     // s_{j|g}
  double outside = 0.0;
};

inline int group_count(const std::vector<int>& group) {
  int g = 0;
  for (int v : group) g = std::max(g, v + 1);
  return g;
}

inline NestedShares nested_logit_shares(const Eigen::VectorXd& delta,
                                        const NestedLogitParams& params) {
  const int J = static_cast<int>(delta.size());
  params.validate(J);
  const double sig = params.sigma_nest;
  const int G = group_count(params.group);
  // log-domain inclusive values per group
  Eigen::VectorXd gmax = Eigen::VectorXd::Constant(G, -1e300);
  for (int j = 0; j < J; ++j)
    gmax(params.group[j]) = std::max(gmax(params.group[j]), delta(j) / (1.0 - sig));
  Eigen::VectorXd gsum = Eigen::VectorXd::Zero(G);
  for (int j = 0; j < J; ++j)
    gsum(params.group[j]) += std::exp(delta(j) / (1.0 - sig) - gmax(params.group[j]));
  NestedShares r;
  r.within.resize(J);
  Eigen::VectorXd log_incl(G);  // (1-sigma) * log D_g
  for (int g = 0; g < G; ++g) log_incl(g) = (1.0 - sig) * (gmax(g) + std::log(gsum(g)));
  const double m = std::max(0.0, log_incl.maxCoeff());
  double denom = std::exp(-m);  // the outside option's nest contributes 1
  Eigen::VectorXd incl(G);
  for (int g = 0; g < G; ++g) {
    incl(g) = std::exp(log_incl(g) - m);
    denom += incl(g);
  }
  r.share.resize(J);
  for (int j = 0; j < J; ++j) {
    const int g = params.group[j];
    r.within(j) = std::exp(delta(j) / (1.0 - sig) - gmax(g)) / gsum(g);
    r.share(j) = r.within(j) * incl(g) / denom;
  }
  r.outside = std::exp(-m) / denom;
  return r;
}

/// ds_k/ddelta_m for the nested logit (entry (k, m)).
inline Eigen::MatrixXd nested_share_jacobian_delta(const NestedShares& s,
                                                   const NestedLogitParams& params) {
  const int J = static_cast<int>(s.share.size());
  const double sig = params.sigma_nest;
  Eigen::MatrixXd jac(J, J);
  for (int k = 0; k < J; ++k)
    for (int m = 0; m < J; ++m) {
      if (params.group[k] == params.group[m]) {
        const double own = (k == m) ? 1.0 / (1.0 - sig) : 0.0;
        jac(k, m) = s.share(k) * (own - sig / (1.0 - sig) * s.within(m) - s.share(m));
      } else {
        jac(k, m) = -s.share(k) * s.share(m);
      }
    }
  return jac;
}

/// ds_{k|g}/ddelta_m (entry (k, m)); zero across groups.
inline Eigen::MatrixXd nested_within_jacobian_delta(const NestedShares& s,
                                                    const NestedLogitParams& params) {
  const int J = static_cast<int>(s.share.size());
  const double sig = params.sigma_nest;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(J, J);
  for (int k = 0; k < J; ++k)
    for (int m = 0; m < J; ++m)
      if (params.group[k] == params.group[m])
        jac(k, m) = s.within(k) * ((k == m ? 1.0 : 0.0) - s.within(m)) / (1.0 - sig);
  return jac;
}

/// The FOC system written as F(p) = 0 with
/// F_j = eta_j - (1-sigma)/alpha - sum_k H_jk eta_k w_jk,
/// w_jk = (1-sigma) s_k + sigma s_{k|g} 1{g(k)=g(j)}.
struct NestedFocParts {
  NestedShares shares;
  Eigen::MatrixXd w;  // w_jk
  Eigen::VectorXd f;  // residual
};

inline NestedFocParts nested_foc(const Eigen::VectorXd& price, const Eigen::VectorXd& mc,
                                 const Eigen::VectorXd& mean_utility_ex_price, double alpha,
                                 const NestedLogitParams& params,
                                 const Eigen::MatrixXd& ownership) {
  const int J = static_cast<int>(price.size());
  const double sig = params.sigma_nest;
  NestedFocParts parts;
  Eigen::VectorXd delta = mean_utility_ex_price - alpha * price;
  parts.shares = nested_logit_shares(delta, params);
  parts.w.resize(J, J);
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < J; ++k) {
      double w = (1.0 - sig) * parts.shares.share(k);
      if (params.group[k] == params.group[j]) w += sig * parts.shares.within(k);
      parts.w(j, k) = w;
    }
  Eigen::VectorXd eta = price - mc;
  parts.f = eta.array() - (1.0 - sig) / alpha -
            (ownership.cwiseProduct(parts.w) * eta).array();
  return parts;
}

namespace detail {

/// dF/dtheta for a perturbation with ddelta = c_delta * e_m, dmc = c_mc * e_m,
/// dp = c_p * e_m. Used for both dF/dp (c_p=1, c_delta=-alpha) and dF/dx
/// (c_delta=beta_x, c_mc=gamma_x).
inline Eigen::MatrixXd nested_foc_jacobian(const NestedFocParts& parts,
                                           const Eigen::VectorXd& eta,
                                           const NestedLogitParams& params,
                                           const Eigen::MatrixXd& ownership, double c_p,
                                           double c_delta, double c_mc) {
  const int J = static_cast<int>(eta.size());
  const double sig = params.sigma_nest;
  Eigen::MatrixXd ds = nested_share_jacobian_delta(parts.shares, params);
  Eigen::MatrixXd dw = nested_within_jacobian_delta(parts.shares, params);
  Eigen::MatrixXd jac(J, J);
  for (int j = 0; j < J; ++j) {
    for (int m = 0; m < J; ++m) {
      double a = 0.0;  // sum_k H_jk eta_k dw_jk/dtheta_m / c_delta
      for (int k = 0; k < J; ++k) {
        if (ownership(j, k) == 0.0) continue;
        double dwjk = (1.0 - sig) * ds(k, m);
        if (params.group[k] == params.group[j]) dwjk += sig * dw(k, m);
        a += ownership(j, k) * eta(k) * dwjk;
      }
      jac(j, m) = (c_p - c_mc) * ((j == m ? 1.0 : 0.0) - ownership(j, m) * parts.w(j, m)) -
                  c_delta * a;
    }
  }
  return jac;
}

}  // namespace detail

struct NestedEquilibrium {
  Eigen::VectorXd price;
  NestedShares shares;
  double foc_residual = 0.0;
  int iterations = 0;
};

/// Newton solve of the nested-logit FOC system using the analytic dF/dp.
inline NestedEquilibrium solve_nested_prices(const Eigen::VectorXd& mc,
                                             const Eigen::VectorXd& mean_utility_ex_price,
                                             double alpha, const NestedLogitParams& params,
                                             const Eigen::MatrixXd& ownership, double tol = 1e-12,
                                             int max_iter = 200) {
  const double sig = params.sigma_nest;
  Eigen::VectorXd p = mc.array() + (1.0 - sig) / alpha;
  NestedFocParts parts;
  double res = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    parts = nested_foc(p, mc, mean_utility_ex_price, alpha, params, ownership);
    res = parts.f.cwiseAbs().maxCoeff();
    if (res < tol) {
      NestedEquilibrium eq;
      eq.price = p;
      eq.shares = parts.shares;
      eq.foc_residual = res;
      eq.iterations = it;
      return eq;
    }
    Eigen::VectorXd eta = p - mc;
    Eigen::MatrixXd jf =
        detail::nested_foc_jacobian(parts, eta, params, ownership, 1.0, -alpha, 0.0);
    Eigen::VectorXd step = Eigen::PartialPivLU<Eigen::MatrixXd>(jf).solve(parts.f);
    if (!step.allFinite()) throw NumericalError("nested-logit Newton: singular dF/dp");
    // backtrack until the residual improves
    double lam = 1.0;
    for (int bt = 0; bt < 40; ++bt) {
      Eigen::VectorXd cand = p - lam * step;
      auto trial = nested_foc(cand, mc, mean_utility_ex_price, alpha, params, ownership);
      if (trial.f.cwiseAbs().maxCoeff() < res || lam < 1e-6) {
        p = cand;
        break;
      }
      lam *= 0.5;
    }
  }
  throw ConvergenceError("nested-logit price solve did not converge", res);
}

/// Implicit-function-theorem Jacobian dp*/dx at an equilibrium:
/// dp/dx = -[dF/dp]^{-1} [dF/dx], with x moving delta by beta_x per unit and
/// mc by gamma_x per unit. The sign is validated against finite-difference
/// re-solves in the test suite.
inline Eigen::MatrixXd nested_logit_price_jacobian(const Eigen::VectorXd& price,
                                                   const Eigen::VectorXd& mc,
                                                   const Eigen::VectorXd& mean_utility_ex_price,
                                                   double alpha, double beta_x, double gamma_x,
                                                   const NestedLogitParams& params,
                                                   const Eigen::MatrixXd& ownership) {
  NestedFocParts parts = nested_foc(price, mc, mean_utility_ex_price, alpha, params, ownership);
  Eigen::VectorXd eta = price - mc;
  Eigen::MatrixXd dfdp =
      detail::nested_foc_jacobian(parts, eta, params, ownership, 1.0, -alpha, 0.0);
  Eigen::MatrixXd dfdx =
      detail::nested_foc_jacobian(parts, eta, params, ownership, 0.0, beta_x, gamma_x);
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(dfdp);
  Eigen::MatrixXd jac = -lu.solve(dfdx);
  if (!jac.allFinite()) throw NumericalError("price-attribute Jacobian: singular dF/dp");
  return jac;
}

}  // namespace conduct
