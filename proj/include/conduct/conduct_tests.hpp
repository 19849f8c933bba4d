#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "conduct/instruments.hpp"
#include "conduct/regression.hpp"
#include "conduct/stats.hpp"
#include "conduct/supply.hpp"

namespace conduct {

/// Rivers-Vuong model-selection outcome for a pair of fits.
struct RVResult {
  double q1 = 0.0;   // mean-SSR (or GMM objective) of the first model
  double q2 = 0.0;
  double sigma_hat = 0.0;
  double t_stat = std::numeric_limits<double>::quiet_NaN();
  double p_collusion = std::numeric_limits<double>::quiet_NaN();    // one-sided, H2: Q1 > Q2
  double p_competition = std::numeric_limits<double>::quiet_NaN();  // one-sided, H1: Q1 < Q2
  long long n = 0;
  long long n_clusters = 0;
  bool degenerate = false;
};

/// The first-stage comparison statistic: d_i = e1_i^2 - e2_i^2 regressed on a
/// constant; the intercept's t (HC1, or CR1 under clustering) is T_IV^RV.
/// Positive values favor the second model.
inline RVResult rv_from_residuals(const Eigen::VectorXd& e1, const Eigen::VectorXd& e2,
                                  const std::vector<int>* clusters = nullptr) {
  const Eigen::Index n = e1.size();
  RVResult out;
  out.n = n;
  out.q1 = e1.squaredNorm() / static_cast<double>(n);
  out.q2 = e2.squaredNorm() / static_cast<double>(n);
  Eigen::VectorXd d = e1.array().square() - e2.array().square();
  OlsOptions oo;
  oo.vcov_kind = clusters ? VcovKind::ClusterCR1 : VcovKind::HC1;
  oo.clusters = clusters;
  RegressionFit fit = ols(d, Eigen::MatrixXd::Ones(n, 1), oo);
  const double se = std::sqrt(fit.vcov(0, 0));
  out.sigma_hat = se * std::sqrt(static_cast<double>(n));  // sd of sqrt(n)(Q1-Q2)
  if (clusters) {
    int g = 0;
    detail::dense_cluster_codes(*clusters, g);
    out.n_clusters = g;
  }
  const double scale = std::abs(out.q1) + std::abs(out.q2);
  if (!(out.sigma_hat > 1e-14 * std::max(1.0, scale))) {
    out.degenerate = true;
    return out;
  }
  out.t_stat = fit.coef(0) / se;
  out.p_collusion = 1.0 - normal_cdf(out.t_stat);
  out.p_competition = normal_cdf(out.t_stat);
  return out;
}

/// Result of the IV-based conduct test plus the two first-stage F statistics.
struct IvConductResult {
  RVResult rv;
  FTestResult fstat_comp;
  FTestResult fstat_coll;
};

/// T_IV^RV: two first-stage price regressions (competition and collusion
/// instrument sets) compared through the squared-residual difference.
inline IvConductResult t_iv_rv(const Eigen::VectorXd& price, const Eigen::MatrixXd& x_exog,
                               const InstrumentMatrix& z_comp, const InstrumentMatrix& z_coll,
                               const FirstStageOptions& opts = {}) {
  IvConductResult out;
  RegressionFit f1 = first_stage(price, x_exog, z_comp.values, opts);
  RegressionFit f2 = first_stage(price, x_exog, z_coll.values, opts);
  out.fstat_comp = *f1.excluded_f;
  out.fstat_coll = *f2.excluded_f;
  out.rv = rv_from_residuals(f1.residuals, f2.residuals, opts.clusters);
  return out;
}

// ---------------------------------------------------------------------------
// Demand estimation

struct GmmDemandFit {
  double alpha_hat = 0.0;
  Eigen::VectorXd beta_hat;
  std::optional<double> sigma_x_hat;
  double objective = 0.0;
  int quad_nodes = 9;
  int inversion_failures = 0;
  bool converged = true;
};

namespace detail {

struct StackedPanel {
  Eigen::VectorXd x, price, share_log_ratio;  // log(s_j) - log(s_0)
  std::vector<std::pair<long long, int>> slices;  // per market: offset, J
};

inline StackedPanel stack_markets(std::span<const Market> markets) {
  long long n = 0;
  for (const auto& m : markets) n += m.J();
  StackedPanel p;
  p.x.resize(n);
  p.price.resize(n);
  p.share_log_ratio.resize(n);
  long long at = 0;
  for (const auto& m : markets) {
    p.slices.emplace_back(at, m.J());
    p.x.segment(at, m.J()) = m.x;
    p.price.segment(at, m.J()) = m.price;
    p.share_log_ratio.segment(at, m.J()) =
        m.share.array().log() - std::log(m.outside_share);
    at += m.J();
  }
  return p;
}

/// GMM objective n * g' W g with g = Z'xi/n and W = (Z'Z/n)^{-1}.
inline double gmm_objective(const Eigen::MatrixXd& z, const Eigen::VectorXd& xi,
                            const Eigen::LDLT<Eigen::MatrixXd>& ztz_ldlt) {
  const double n = static_cast<double>(z.rows());
  Eigen::VectorXd g = z.transpose() * xi / n;
  return n * g.dot(ztz_ldlt.solve(g) * n);  // W = n (Z'Z)^{-1} applied to g
}

}  // namespace detail

/// Linear IV-GMM for the logit model: delta_jt = log S_jt - log S_0t regressed
/// on (1, x, -p) with instruments (1, x, z); weight (Z'Z/n)^{-1} (i.e. 2SLS).
inline GmmDemandFit estimate_demand_logit(std::span<const Market> markets,
                                          const Eigen::MatrixXd& z_excl) {
  detail::StackedPanel p = detail::stack_markets(markets);
  const Eigen::Index n = p.x.size();
  Eigen::MatrixXd x_exog(n, 2);
  x_exog << Eigen::VectorXd::Ones(n), p.x;
  Eigen::MatrixXd x_endog = -p.price;
  RegressionFit fit = tsls(p.share_log_ratio, x_exog, x_endog, z_excl);
  GmmDemandFit out;
  out.beta_hat = fit.coef.head(2);
  out.alpha_hat = fit.coef(2);
  Eigen::MatrixXd zfull(n, 2 + z_excl.cols());
  zfull << x_exog, z_excl;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(zfull.transpose() * zfull);
  out.objective = detail::gmm_objective(zfull, fit.residuals, ldlt);
  return out;
}

struct RcEstimationOptions {
  double sigma_lo = 0.0;
  double sigma_hi = 20.0;
  int grid_points = 41;
  double tol = 1e-3;  // width of the final golden-section bracket
};

/// Nested-fixed-point estimation of (alpha, beta, sigma_x): an outer 1-D
/// search over sigma_x with the Berry contraction inside and the linear
/// parameters concentrated out by IV-GMM at each trial point.
inline GmmDemandFit estimate_demand_rc(std::span<const Market> markets,
                                       const Eigen::MatrixXd& z_excl, const Quadrature& quad,
                                       const RcEstimationOptions& opts = {}) {
  detail::StackedPanel p = detail::stack_markets(markets);
  const Eigen::Index n = p.x.size();
  Eigen::MatrixXd x_exog(n, 2);
  x_exog << Eigen::VectorXd::Ones(n), p.x;
  Eigen::MatrixXd zfull(n, 2 + z_excl.cols());
  zfull << x_exog, z_excl;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(zfull.transpose() * zfull);
  if (ldlt.info() != Eigen::Success) throw NumericalError("instrument Gram matrix is singular");

  std::vector<Eigen::VectorXd> delta_warm(markets.size());
  int failures = 0;
  GmmDemandFit best;

  auto objective = [&](double sigma, GmmDemandFit* fit_out) -> double {
    Eigen::VectorXd delta(n);
    DemandParams dp;
    dp.sigma_x = sigma;
    for (std::size_t t = 0; t < markets.size(); ++t) {
      const auto [at, J] = p.slices[t];
      try {
        Eigen::VectorXd d = invert_shares(
            markets[t].share, markets[t].x, dp, quad, 1e-12, 5000,
            delta_warm[t].size() == J ? &delta_warm[t] : nullptr);
        delta_warm[t] = d;
        delta.segment(at, J) = d;
      } catch (const ConvergenceError&) {
        ++failures;
        return std::numeric_limits<double>::infinity();
      }
    }
    RegressionFit fit = tsls(delta, x_exog, Eigen::MatrixXd(-p.price), z_excl);
    const double q = detail::gmm_objective(zfull, fit.residuals, ldlt);
    if (fit_out) {
      fit_out->beta_hat = fit.coef.head(2);
      fit_out->alpha_hat = fit.coef(2);
      fit_out->sigma_x_hat = sigma;
      fit_out->objective = q;
    }
    return q;
  };

  // coarse grid, then golden-section refinement in the bracketing interval
  const double step = (opts.sigma_hi - opts.sigma_lo) / (opts.grid_points - 1);
  double best_sigma = opts.sigma_lo;
  double best_q = std::numeric_limits<double>::infinity();
  for (int i = 0; i < opts.grid_points; ++i) {
    const double s = opts.sigma_lo + i * step;
    const double q = objective(s, nullptr);
    if (q < best_q) {
      best_q = q;
      best_sigma = s;
    }
  }
  if (!std::isfinite(best_q))
    throw NumericalError("rc estimation: share inversion failed at every grid point");

  double lo = std::max(opts.sigma_lo, best_sigma - step);
  double hi = std::min(opts.sigma_hi, best_sigma + step);
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - gr * (hi - lo), b = lo + gr * (hi - lo);
  double fa = objective(a, nullptr), fb = objective(b, nullptr);
  while (hi - lo > opts.tol) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - gr * (hi - lo);
      fa = objective(a, nullptr);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + gr * (hi - lo);
      fb = objective(b, nullptr);
    }
  }
  double s_star = 0.5 * (lo + hi);
  if (objective(s_star, &best) > best_q) {
    // guard against a grid point beating the refined bracket (flat objectives)
    objective(best_sigma, &best);
  }
  best.quad_nodes = quad.size();
  best.inversion_failures = failures;
  return best;
}

// ---------------------------------------------------------------------------
// Markup-based benchmark test

using OwnershipBuilder = std::function<OwnershipMatrix(const Market&)>;

/// T_markup^RV: recover markups under each conduct model at the estimated
/// demand, residualize p - eta on the (deliberately short) cost regressors
/// (1, x), and compare the GMM objectives built from the excluded instruments.
/// sigma_hat is the delta-method plug-in over the per-observation influence
/// terms (clusters summed first when supplied); the two-step demand-estimation
/// correction is intentionally omitted.
inline RVResult t_markup_rv(std::span<const Market> markets, const DemandParams& demand,
                            const Quadrature& quad, const OwnershipBuilder& model1,
                            const OwnershipBuilder& model2, const Eigen::MatrixXd& z_excl,
                            const std::vector<int>* clusters = nullptr) {
  detail::StackedPanel p = detail::stack_markets(markets);
  const Eigen::Index n = p.x.size();
  Eigen::MatrixXd cost_x(n, 2);
  cost_x << Eigen::VectorXd::Ones(n), p.x;

  Eigen::MatrixXd omega_hat(n, 2);
  for (int m = 0; m < 2; ++m) {
    Eigen::VectorXd eta(n);
    for (std::size_t t = 0; t < markets.size(); ++t) {
      const auto [at, J] = p.slices[t];
      OwnershipMatrix h = (m == 0 ? model1 : model2)(markets[t]);
      eta.segment(at, J) =
          recover_mc(markets[t].price, markets[t].share, markets[t].x, demand, quad, h).markups;
    }
    RegressionFit fit = ols(p.price - eta, cost_x);
    omega_hat.col(m) = fit.residuals;
  }

  Eigen::LDLT<Eigen::MatrixXd> ldlt(z_excl.transpose() * z_excl);
  if (ldlt.info() != Eigen::Success) throw NumericalError("t_markup_rv: singular weight matrix");
  const double dn = static_cast<double>(n);
  Eigen::VectorXd g1 = z_excl.transpose() * omega_hat.col(0) / dn;
  Eigen::VectorXd g2 = z_excl.transpose() * omega_hat.col(1) / dn;
  Eigen::VectorXd wg1 = ldlt.solve(g1) * dn;  // W g with W = n (Z'Z)^{-1}
  Eigen::VectorXd wg2 = ldlt.solve(g2) * dn;
  RVResult out;
  out.n = n;
  out.q1 = g1.dot(wg1);
  out.q2 = g2.dot(wg2);

  Eigen::VectorXd psi = 2.0 * (z_excl * wg1).cwiseProduct(omega_hat.col(0)) -
                        2.0 * (z_excl * wg2).cwiseProduct(omega_hat.col(1));
  const double psi_bar = psi.mean();
  double var = 0.0;
  if (clusters) {
    int g_count = 0;
    std::vector<int> codes = detail::dense_cluster_codes(*clusters, g_count);
    Eigen::VectorXd sums = Eigen::VectorXd::Zero(g_count);
    for (Eigen::Index i = 0; i < n; ++i) sums(codes[i]) += psi(i) - psi_bar;
    var = sums.squaredNorm() / dn;
    out.n_clusters = g_count;
  } else {
    var = (psi.array() - psi_bar).square().sum() / dn;
  }
  out.sigma_hat = std::sqrt(var);
  const double scale = std::abs(out.q1) + std::abs(out.q2);
  if (!(out.sigma_hat > 1e-14 * std::max(1.0, scale))) {
    out.degenerate = true;
    return out;
  }
  out.t_stat = std::sqrt(dn) * (out.q1 - out.q2) / out.sigma_hat;
  out.p_collusion = 1.0 - normal_cdf(out.t_stat);
  out.p_competition = normal_cdf(out.t_stat);
  return out;
}

}  // namespace conduct
