#pragma once

#include <Eigen/Dense>
#include <limits>
#include <optional>
#include <unordered_map>
#include <vector>

#include "conduct/errors.hpp"

namespace conduct {

enum class VcovKind { Classical, HC1, ClusterCR1 };

struct FTestResult {
  double value = 0.0;
  int df_num = 0;
  long long df_den = 0;
};

struct RegressionFit {
  Eigen::VectorXd coef;       // aligned with the input columns; dropped columns get 0
  std::vector<int> kept;      // retained column indices, in input order
  std::vector<int> dropped;   // collinear columns removed by the later-column policy
  Eigen::VectorXd residuals;
  double ssr = 0.0;
  double mean_ssr = 0.0;
  long long dof = 0;          // n - #kept - absorbed_dof
  VcovKind vcov_kind = VcovKind::Classical;
  Eigen::MatrixXd vcov;       // #kept x #kept, ordered like `kept`
  std::optional<FTestResult> excluded_f;
};

namespace detail {

struct ThinQr {
  Eigen::MatrixXd q;  // n x k, orthonormal
  Eigen::MatrixXd r;  // k x k, upper triangular
  std::vector<int> kept, dropped;
};

/// Gram-Schmidt (with one re-orthogonalization pass) that walks columns left
/// to right and drops any column numerically spanned by the ones before it.
inline ThinQr qr_drop_collinear(const Eigen::MatrixXd& x, double tol = 1e-9) {
  const Eigen::Index n = x.rows(), k = x.cols();
  ThinQr out;
  out.q.resize(n, k);
  out.r = Eigen::MatrixXd::Zero(k, k);
  Eigen::Index kk = 0;
  for (Eigen::Index j = 0; j < k; ++j) {
    Eigen::VectorXd v = x.col(j);
    const double vnorm = v.norm();
    Eigen::VectorXd rj = Eigen::VectorXd::Zero(kk);
    if (kk > 0) {
      Eigen::VectorXd r1 = out.q.leftCols(kk).transpose() * v;
      v -= out.q.leftCols(kk) * r1;
      Eigen::VectorXd r2 = out.q.leftCols(kk).transpose() * v;
      v -= out.q.leftCols(kk) * r2;
      rj = r1 + r2;
    }
    const double unorm = v.norm();
    if (unorm <= tol * std::max(vnorm, 1e-300)) {
      out.dropped.push_back(static_cast<int>(j));
      continue;
    }
    out.q.col(kk) = v / unorm;
    out.r.col(kk).head(kk) = rj;
    out.r(kk, kk) = unorm;
    out.kept.push_back(static_cast<int>(j));
    ++kk;
  }
  out.q.conservativeResize(n, kk);
  out.r.conservativeResize(kk, kk);
  return out;
}

inline std::vector<int> dense_cluster_codes(const std::vector<int>& ids, int& n_clusters) {
  std::unordered_map<int, int> codes;
  std::vector<int> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto [it, fresh] = codes.try_emplace(ids[i], static_cast<int>(codes.size()));
    (void)fresh;
    out[i] = it->second;
  }
  n_clusters = static_cast<int>(codes.size());
  return out;
}

}  // namespace detail

struct OlsOptions {
  VcovKind vcov_kind = VcovKind::Classical;
  const std::vector<int>* clusters = nullptr;  // required for ClusterCR1
  long long absorbed_dof = 0;                  // fixed-effect levels already swept out
  double drop_tol = 1e-9;
};

/// Least squares with a drop-later-columns collinearity policy and
/// classical / HC1 / CR1 covariance.
inline RegressionFit ols(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                         const OlsOptions& opts = {}) {
  const Eigen::Index n = y.size();
  if (x.rows() != n) throw DomainError("ols: row mismatch");
  RegressionFit fit;
  fit.vcov_kind = opts.vcov_kind;
  detail::ThinQr qr = detail::qr_drop_collinear(x, opts.drop_tol);
  fit.kept = qr.kept;
  fit.dropped = qr.dropped;
  const Eigen::Index k = static_cast<Eigen::Index>(qr.kept.size());
  fit.coef = Eigen::VectorXd::Zero(x.cols());
  Eigen::VectorXd beta(k);
  if (k > 0) {
    beta = qr.r.triangularView<Eigen::Upper>().solve(qr.q.transpose() * y);
    for (Eigen::Index i = 0; i < k; ++i) fit.coef(qr.kept[i]) = beta(i);
  }
  Eigen::MatrixXd xk(n, k);
  for (Eigen::Index i = 0; i < k; ++i) xk.col(i) = x.col(qr.kept[i]);
  fit.residuals = k > 0 ? Eigen::VectorXd(y - xk * beta) : y;
  fit.ssr = fit.residuals.squaredNorm();
  fit.mean_ssr = fit.ssr / static_cast<double>(n);
  fit.dof = static_cast<long long>(n) - k - opts.absorbed_dof;
  if (fit.dof < 1) throw DomainError("ols: no residual degrees of freedom");
  if (k == 0) return fit;

  Eigen::MatrixXd rinv = qr.r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(k, k));
  Eigen::MatrixXd xtx_inv = rinv * rinv.transpose();
  switch (opts.vcov_kind) {
    case VcovKind::Classical:
      fit.vcov = (fit.ssr / static_cast<double>(fit.dof)) * xtx_inv;
      break;
    case VcovKind::HC1: {
      Eigen::MatrixXd xe = xk.array().colwise() * fit.residuals.array();
      Eigen::MatrixXd meat = xe.transpose() * xe;
      fit.vcov = xtx_inv * meat * xtx_inv * (static_cast<double>(n) / fit.dof);
      break;
    }
    case VcovKind::ClusterCR1: {
      if (!opts.clusters || static_cast<Eigen::Index>(opts.clusters->size()) != n)
        throw ConfigError("cluster ids required for CR1 covariance");
      int g_count = 0;
      std::vector<int> codes = detail::dense_cluster_codes(*opts.clusters, g_count);
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(g_count, k);
      for (Eigen::Index i = 0; i < n; ++i)
        sums.row(codes[i]) += fit.residuals(i) * xk.row(i);
      Eigen::MatrixXd meat = sums.transpose() * sums;
      const double factor = g_count > 1
                                ? (static_cast<double>(g_count) / (g_count - 1)) *
                                      ((static_cast<double>(n) - 1) / fit.dof)
                                : 1.0;
      fit.vcov = xtx_inv * meat * xtx_inv * factor;
      break;
    }
  }
  return fit;
}

/// Classical Wald F from nested SSRs: ((SSR_r - SSR_u)/q) / (SSR_u / dof_u).
inline FTestResult excluded_f(const RegressionFit& unrestricted, const RegressionFit& restricted,
                              int q) {
  FTestResult f;
  f.df_num = q;
  f.df_den = unrestricted.dof;
  if (q == 0) {
    f.value = std::numeric_limits<double>::quiet_NaN();
    return f;
  }
  if (unrestricted.ssr <= 0.0) {
    f.value = std::numeric_limits<double>::infinity();  // perfect fit flagged as infinite F
    return f;
  }
  f.value = ((restricted.ssr - unrestricted.ssr) / q) /
            (unrestricted.ssr / static_cast<double>(unrestricted.dof));
  return f;
}

// ---------------------------------------------------------------------------
// Fixed-effect absorption

struct FixedEffectSpec {
  std::vector<std::vector<int>> ids;  // one dense id column per absorbed effect
};

struct AbsorbResult {
  Eigen::MatrixXd data;      // demeaned columns
  long long absorbed_dof = 0;
  int sweeps = 0;
};

/// Within-transformation by alternating projections until the largest column
/// change falls below tol. absorbed_dof counts L_1 + sum_{k>1} (L_k - 1),
/// the usual connected-design convention.
inline AbsorbResult absorb_fe(const Eigen::MatrixXd& data, const FixedEffectSpec& fe,
                              double tol = 1e-10, int max_sweeps = 10000) {
  AbsorbResult out;
  out.data = data;
  if (fe.ids.empty()) return out;
  const Eigen::Index n = data.rows();
  std::vector<int> levels;
  for (const auto& col : fe.ids) {
    if (static_cast<Eigen::Index>(col.size()) != n)
      throw DomainError("absorb_fe: id column length mismatch");
    int g_count = 0;
    detail::dense_cluster_codes(col, g_count);
    levels.push_back(g_count);
  }
  std::vector<std::vector<int>> codes(fe.ids.size());
  for (std::size_t f = 0; f < fe.ids.size(); ++f) {
    int g_count = 0;
    codes[f] = detail::dense_cluster_codes(fe.ids[f], g_count);
  }
  out.absorbed_dof = levels[0];
  for (std::size_t f = 1; f < levels.size(); ++f) out.absorbed_dof += levels[f] - 1;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (std::size_t f = 0; f < codes.size(); ++f) {
      const int g_count = levels[f];
      Eigen::MatrixXd means = Eigen::MatrixXd::Zero(g_count, out.data.cols());
      Eigen::VectorXd counts = Eigen::VectorXd::Zero(g_count);
      for (Eigen::Index i = 0; i < n; ++i) {
        means.row(codes[f][i]) += out.data.row(i);
        counts(codes[f][i]) += 1.0;
      }
      means.array().colwise() /= counts.array();
      for (Eigen::Index i = 0; i < n; ++i) {
        out.data.row(i) -= means.row(codes[f][i]);
        max_change = std::max(max_change, means.row(codes[f][i]).cwiseAbs().maxCoeff());
      }
    }
    out.sweeps = sweep + 1;
    if (max_change < tol) return out;
  }
  throw ConvergenceError("fixed-effect absorption did not converge", tol);
}

// ---------------------------------------------------------------------------
// First-stage price regression with an excluded-instrument F statistic

struct FirstStageOptions {
  const FixedEffectSpec* fe = nullptr;
  const std::vector<int>* clusters = nullptr;
  bool robust_f = false;  // Wald form from the HC1/CR1 vcov instead of classical
};

/// Regression of price on [X_exog, Z] (within-transformed when FE are given),
/// with excluded_f testing that the Z block is jointly zero.
inline RegressionFit first_stage(const Eigen::VectorXd& price, const Eigen::MatrixXd& x_exog,
                                 const Eigen::MatrixXd& z, const FirstStageOptions& opts = {}) {
  const Eigen::Index n = price.size();
  Eigen::MatrixXd stacked(n, 1 + x_exog.cols() + z.cols());
  stacked.col(0) = price;
  if (x_exog.cols() > 0) stacked.middleCols(1, x_exog.cols()) = x_exog;
  if (z.cols() > 0) stacked.rightCols(z.cols()) = z;
  long long absorbed = 0;
  if (opts.fe && !opts.fe->ids.empty()) {
    AbsorbResult a = absorb_fe(stacked, *opts.fe);
    stacked = std::move(a.data);
    absorbed = a.absorbed_dof;
  }
  Eigen::VectorXd y = stacked.col(0);
  Eigen::MatrixXd xz = stacked.rightCols(x_exog.cols() + z.cols());
  Eigen::MatrixXd xr = stacked.middleCols(1, x_exog.cols());

  OlsOptions oo;
  oo.vcov_kind = opts.clusters ? VcovKind::ClusterCR1
                               : (opts.robust_f ? VcovKind::HC1 : VcovKind::Classical);
  oo.clusters = opts.clusters;
  oo.absorbed_dof = absorbed;
  RegressionFit unrestricted = ols(y, xz, oo);

  // exclusions actually identified: kept columns belonging to the Z block
  std::vector<int> z_kept;
  for (std::size_t i = 0; i < unrestricted.kept.size(); ++i)
    if (unrestricted.kept[i] >= static_cast<int>(x_exog.cols()))
      z_kept.push_back(static_cast<int>(i));
  const int q = static_cast<int>(z_kept.size());

  if (opts.robust_f || opts.clusters) {
    FTestResult f;
    f.df_num = q;
    f.df_den = unrestricted.dof;
    if (q == 0) {
      f.value = std::numeric_limits<double>::quiet_NaN();
    } else {
      Eigen::VectorXd theta(q);
      Eigen::MatrixXd v(q, q);
      for (int a = 0; a < q; ++a) {
        theta(a) = unrestricted.coef(unrestricted.kept[z_kept[a]]);
        for (int b = 0; b < q; ++b) v(a, b) = unrestricted.vcov(z_kept[a], z_kept[b]);
      }
      f.value = theta.dot(Eigen::PartialPivLU<Eigen::MatrixXd>(v).solve(theta)) / q;
    }
    unrestricted.excluded_f = f;
  } else {
    OlsOptions ro = oo;
    RegressionFit restricted = ols(y, xr, ro);
    unrestricted.excluded_f = excluded_f(unrestricted, restricted, q);
  }
  return unrestricted;
}

// ---------------------------------------------------------------------------
// Two-stage least squares

/// 2SLS of y on [X_exog, X_endog] with instruments [X_exog, Z]; equivalently
/// one-step GMM with weight (Z'Z)^{-1}.
inline RegressionFit tsls(const Eigen::VectorXd& y, const Eigen::MatrixXd& x_exog,
                          const Eigen::MatrixXd& x_endog, const Eigen::MatrixXd& z,
                          const FixedEffectSpec* fe = nullptr) {
  if (z.cols() < x_endog.cols()) throw ConfigError("tsls: fewer instruments than endogenous columns");
  Eigen::Index n = y.size();
  Eigen::MatrixXd stacked(n, 1 + x_exog.cols() + x_endog.cols() + z.cols());
  stacked.col(0) = y;
  stacked.middleCols(1, x_exog.cols()) = x_exog;
  stacked.middleCols(1 + x_exog.cols(), x_endog.cols()) = x_endog;
  stacked.rightCols(z.cols()) = z;
  long long absorbed = 0;
  if (fe && !fe->ids.empty()) {
    AbsorbResult a = absorb_fe(stacked, *fe);
    stacked = std::move(a.data);
    absorbed = a.absorbed_dof;
  }
  Eigen::VectorXd yy = stacked.col(0);
  Eigen::MatrixXd x(n, x_exog.cols() + x_endog.cols());
  x << stacked.middleCols(1, x_exog.cols()), stacked.middleCols(1 + x_exog.cols(), x_endog.cols());
  Eigen::MatrixXd zfull(n, x_exog.cols() + z.cols());
  zfull << stacked.middleCols(1, x_exog.cols()), stacked.rightCols(z.cols());

  detail::ThinQr qz = detail::qr_drop_collinear(zfull);
  Eigen::MatrixXd xhat = qz.q * (qz.q.transpose() * x);
  detail::ThinQr qx = detail::qr_drop_collinear(xhat);
  if (static_cast<Eigen::Index>(qx.kept.size()) < x.cols())
    throw ConfigError("tsls: under-identified (projected design is rank deficient)");
  Eigen::VectorXd beta =
      qx.r.triangularView<Eigen::Upper>().solve(qx.q.transpose() * yy);

  RegressionFit fit;
  fit.coef = beta;
  fit.kept.resize(x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) fit.kept[i] = static_cast<int>(i);
  fit.residuals = yy - x * beta;
  fit.ssr = fit.residuals.squaredNorm();
  fit.mean_ssr = fit.ssr / static_cast<double>(n);
  fit.dof = static_cast<long long>(n) - x.cols() - absorbed;
  Eigen::MatrixXd rinv =
      qx.r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(x.cols(), x.cols()));
  fit.vcov = (fit.ssr / std::max<long long>(fit.dof, 1)) * rinv * rinv.transpose();
  return fit;
}

}  // namespace conduct
