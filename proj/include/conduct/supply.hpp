#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "conduct/demand.hpp"
#include "conduct/errors.hpp"
#include "conduct/market_model.hpp"
#include "conduct/quadrature.hpp"

namespace conduct {

struct SolveOptions {
  double tol = 1e-12;          // sup-norm price change
  int max_iter = 10000;
  int damp_after = 2000;       // switch to 0.5 damping if still cycling
  double foc_tol = 1e-10;      // residual gate on the returned equilibrium
  bool throw_on_failure = true;
};

struct EquilibriumResult {
  Eigen::VectorXd price;
  Eigen::VectorXd share;
  double outside_share = 0.0;
  int iterations = 0;
  double foc_residual = 0.0;
  bool converged = false;
};

namespace detail {

/// Gamma matrix alpha * sum_i w_i s_i s_i' of the share Jacobian split
/// ds/dp = -(alpha diag(s) - Gamma).
inline Eigen::MatrixXd gamma_matrix(const Eigen::MatrixXd& node_shares,
                                    const Eigen::VectorXd& weights, double alpha) {
  return alpha * (node_shares * weights.asDiagonal() * node_shares.transpose());
}

inline double foc_residual(const Eigen::VectorXd& price, const Eigen::VectorXd& mc,
                           const Eigen::VectorXd& share, const Eigen::MatrixXd& jac,
                           const Eigen::MatrixXd& ownership) {
  // FOC: p - mc = -[H o (ds/dp)']^{-1} s
  Eigen::MatrixXd a = ownership.cwiseProduct(jac.transpose());
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  Eigen::VectorXd res = (price - mc) + lu.solve(share);
  if (!res.allFinite()) throw NumericalError("singular ownership-weighted Jacobian");
  return res.cwiseAbs().maxCoeff();
}

}  // namespace detail

/// Bertrand-Nash prices under ownership matrix H via the Morrow-Skerlos
/// zeta fixed point: p <- mc + Lambda^{-1} [ (H o Gamma') (p - mc) + s ].
/// `mean_utility_ex_price` is delta + alpha * p, i.e. x'beta + xi.
inline EquilibriumResult solve_prices(const Eigen::VectorXd& mc,
                                      const Eigen::VectorXd& mean_utility_ex_price,
                                      const Eigen::VectorXd& x, const DemandParams& demand,
                                      const Quadrature& quad, const OwnershipMatrix& ownership,
                                      const SolveOptions& opts = {}) {
  if (!mc.allFinite()) throw DomainError("solve_prices: marginal costs must be finite");
  const double alpha = demand.alpha;
  const int J = static_cast<int>(mc.size());
  const int nodes = demand.sigma_x == 0.0 ? 1 : quad.size();
  EquilibriumResult out;
  Eigen::VectorXd p = mc.array() + 1.0 / alpha;
  Eigen::MatrixXd mu = Eigen::MatrixXd::Zero(J, nodes);
  Eigen::VectorXd wts = Eigen::VectorXd::Ones(1);
  if (demand.sigma_x != 0.0) {
    mu = demand.sigma_x * (x * quad.nodes.transpose());
    wts = quad.weights;
  }
  Eigen::VectorXd delta(J), util(J), s(J), zeta(J), p_next(J), margin(J);
  Eigen::MatrixXd shares(J, nodes), gamma(J, J);
  auto eval_shares = [&](const Eigen::VectorXd& price) {
    delta = mean_utility_ex_price - alpha * price;
    for (int i = 0; i < nodes; ++i) {
      util = delta + mu.col(i);
      const double m = std::max(0.0, util.maxCoeff());
      shares.col(i) = (util.array() - m).exp();
      shares.col(i) /= std::exp(-m) + shares.col(i).sum();
    }
    s.noalias() = shares * wts;
  };
  double change = 0.0;
  for (int it = 0; it < opts.max_iter; ++it) {
    eval_shares(p);
    gamma.noalias() = alpha * (shares * wts.asDiagonal() * shares.transpose());
    margin = p - mc;
    zeta.noalias() = ownership.weights.cwiseProduct(gamma.transpose()) * margin;
    zeta = (zeta + s).array() / (alpha * s.array());
    p_next = mc + zeta;
    if (!p_next.allFinite()) throw NumericalError("solve_prices: non-finite iterate");
    if (it >= opts.damp_after) p_next = 0.5 * (p + p_next);
    change = (p_next - p).cwiseAbs().maxCoeff();
    p.swap(p_next);
    out.iterations = it + 1;
    if (change < opts.tol) break;
  }
  eval_shares(p);
  gamma.noalias() = alpha * (shares * wts.asDiagonal() * shares.transpose());
  Eigen::MatrixXd jac = gamma;
  jac.diagonal() -= alpha * s;
  out.price = p;
  out.share = s;
  out.outside_share = 1.0 - s.sum();
  out.foc_residual = detail::foc_residual(p, mc, s, jac, ownership.weights);
  out.converged = change < opts.tol && out.foc_residual < opts.foc_tol &&
                  ((p - mc).array() > 0).all();
  if (!out.converged && opts.throw_on_failure)
    throw ConvergenceError("price fixed point did not converge", out.foc_residual);
  return out;
}

enum class ConductRegime { Competition, FullCollusion };

/// Closed-form logit markups: (1/alpha) * D / (D - sum of own-block exp(delta)),
/// with the block widened to the effective group under full collusion.
inline Eigen::VectorXd markup_logit_closed_form(const Eigen::VectorXd& delta,
                                                const std::vector<int>& firm_of,
                                                const std::vector<int>& effective_of,
                                                double alpha, ConductRegime regime) {
  const int J = static_cast<int>(delta.size());
  const double m = std::max(0.0, delta.maxCoeff());
  Eigen::VectorXd e = (delta.array() - m).exp();
  const double denom = std::exp(-m) + e.sum();  // scaled total D * e^{-m}
  Eigen::VectorXd markup(J);
  for (int j = 0; j < J; ++j) {
    double block = 0.0;
    for (int k = 0; k < J; ++k) {
      const bool own = firm_of[k] == firm_of[j];
      const bool partner = effective_of[k] == effective_of[j];
      if (own || (regime == ConductRegime::FullCollusion && partner)) block += e(k);
    }
    const double d = denom - block;
    if (d <= 0) throw DomainError("closed-form markup denominator <= 0");
    markup(j) = denom / (alpha * d);
  }
  return markup;
}

struct MarkupResult {
  Eigen::VectorXd markups;
  Eigen::VectorXd mc;
};

/// Invert the FOCs under conduct model H at the supplied demand parameters:
/// eta = -[H o (ds/dp)']^{-1} s, mc = p - eta. Shares are the observed ones;
/// delta is recovered by Berry inversion at those parameters.
inline MarkupResult recover_mc(const Eigen::VectorXd& price, const Eigen::VectorXd& observed_share,
                               const Eigen::VectorXd& x, const DemandParams& demand,
                               const Quadrature& quad, const OwnershipMatrix& ownership) {
  Eigen::VectorXd delta = invert_shares(observed_share, x, demand, quad);
  Eigen::MatrixXd jac = share_price_jacobian(delta, x, demand, quad);
  Eigen::MatrixXd a = ownership.weights.cwiseProduct(jac.transpose());
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  MarkupResult r;
  r.markups = -lu.solve(observed_share);
  if (!r.markups.allFinite()) throw NumericalError("recover_mc: singular system");
  r.mc = price - r.markups;
  return r;
}

}  // namespace conduct
