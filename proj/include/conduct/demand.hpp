#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "conduct/errors.hpp"
#include "conduct/market_model.hpp"
#include "conduct/quadrature.hpp"

namespace conduct {

struct ShareResult {
  Eigen::VectorXd share;
  double outside;
};

/// Plain logit choice probabilities. Max-subtraction keeps exp() in range even
/// when an optimizer wanders into delta ~ 1e3.
inline ShareResult logit_shares(const Eigen::VectorXd& delta) {
  const double m = std::max(0.0, delta.maxCoeff());
  Eigen::VectorXd e = (delta.array() - m).exp();
  const double denom = std::exp(-m) + e.sum();
  ShareResult r;
  r.share = e / denom;
  r.outside = std::exp(-m) / denom;
  return r;
}

/// Per-node share matrix: column i holds the logit shares at taste node i,
/// where the coefficient on x is shifted by sigma_x * nodes[i].
inline Eigen::MatrixXd node_share_matrix(const Eigen::VectorXd& delta, const Eigen::VectorXd& x,
                                         double sigma_x, const Quadrature& quad) {
  const int J = static_cast<int>(delta.size());
  const int I = quad.size();
  Eigen::MatrixXd shares(J, I);
  for (int i = 0; i < I; ++i) {
    Eigen::VectorXd d = delta + sigma_x * quad.nodes(i) * x;
    shares.col(i) = logit_shares(d).share;
  }
  return shares;
}

/// Random-coefficient logit shares, eq. mixture over quadrature nodes.
/// Reduces to logit_shares when sigma_x = 0.
inline ShareResult rc_shares(const Eigen::VectorXd& delta, const Eigen::VectorXd& x,
                             double sigma_x, const Quadrature& quad) {
  if (sigma_x < 0) throw DomainError("sigma_x must be >= 0");
  if (x.size() != delta.size()) throw DomainError("rc_shares: length mismatch");
  if (sigma_x == 0.0) return logit_shares(delta);
  Eigen::MatrixXd shares = node_share_matrix(delta, x, sigma_x, quad);
  ShareResult r;
  r.share = shares * quad.weights;
  r.outside = 1.0 - r.share.sum();
  return r;
}

/// J x J matrix of ds_j/dp_k. Logit: -alpha(diag(s) - s s'); RC: the
/// node-weighted mixture of the same kernel.
inline Eigen::MatrixXd share_price_jacobian(const Eigen::VectorXd& delta, const Eigen::VectorXd& x,
                                            const DemandParams& demand, const Quadrature& quad) {
  const double a = demand.alpha;
  if (demand.sigma_x == 0.0) {
    Eigen::VectorXd s = logit_shares(delta).share;
    Eigen::MatrixXd jac = a * (s * s.transpose());
    jac.diagonal() -= a * s;
    return jac;
  }
  Eigen::MatrixXd shares = node_share_matrix(delta, x, demand.sigma_x, quad);
  Eigen::MatrixXd jac = a * (shares * quad.weights.asDiagonal() * shares.transpose());
  jac.diagonal() -= a * (shares * quad.weights);
  return jac;
}

/// Berry inversion: the unique delta with predicted shares equal to S.
/// Logit is closed-form; otherwise the plain contraction
/// delta <- delta + log S - log s(delta), run to 1e-12 in sup norm.
/// The loop is allocation-free; it sits inside the GMM objective.
inline Eigen::VectorXd invert_shares(const Eigen::VectorXd& observed, const Eigen::VectorXd& x,
                                     const DemandParams& demand, const Quadrature& quad,
                                     double tol = 1e-12, int max_iter = 5000,
                                     const Eigen::VectorXd* warm_start = nullptr) {
  if ((observed.array() <= 0).any())
    throw DomainError("invert_shares: shares must be strictly positive");
  const double s0 = 1.0 - observed.sum();
  if (s0 <= 0) throw DomainError("invert_shares: shares sum to >= 1");
  Eigen::VectorXd log_obs = observed.array().log();
  if (demand.sigma_x == 0.0)
    return (log_obs.array() - std::log(s0)).matrix();
  Eigen::VectorXd delta = warm_start ? *warm_start
                                     : Eigen::VectorXd((log_obs.array() - std::log(s0)).matrix());
  const int J = static_cast<int>(observed.size());
  const int nodes = quad.size();
  Eigen::MatrixXd mu = demand.sigma_x * (x * quad.nodes.transpose());  // fixed across iterations
  const double mu_max = mu.maxCoeff();
  Eigen::MatrixXd exp_mu = mu.array().exp();
  Eigen::VectorXd util(J), e(J), s(J), exp_delta(J);
  double step = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    s.setZero();
    if (delta.maxCoeff() + mu_max < 600.0) {
      // exp-space fast path: J exps per iteration instead of J*nodes
      exp_delta = delta.array().exp();
      for (int i = 0; i < nodes; ++i) {
        e = exp_delta.cwiseProduct(exp_mu.col(i));
        s += (quad.weights(i) / (1.0 + e.sum())) * e;
      }
    } else {
      for (int i = 0; i < nodes; ++i) {
        util = delta + mu.col(i);
        const double m = std::max(0.0, util.maxCoeff());
        e = (util.array() - m).exp();
        s += (quad.weights(i) / (std::exp(-m) + e.sum())) * e;
      }
    }
    double worst = 0.0;
    for (int j = 0; j < J; ++j) {
      const double u = log_obs(j) - std::log(s(j));
      delta(j) += u;
      worst = std::max(worst, std::abs(u));
    }
    step = worst;
    if (step < tol) return delta;
  }
  throw ConvergenceError("share inversion did not converge", step);
}

}  // namespace conduct
