#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "conduct/conduct_tests.hpp"
#include "conduct/demand.hpp"
#include "conduct/instruments.hpp"
#include "conduct/market_model.hpp"
#include "conduct/quadrature.hpp"
#include "conduct/rng.hpp"
#include "conduct/stats.hpp"
#include "conduct/supply.hpp"

namespace conduct {

/// Runs fn(0..n-1) across a small worker pool; results must be written into
/// pre-sized slots so the reduction is independent of completion order.
inline void parallel_for(long long n, int threads, const std::function<void(long long)>& fn) {
  threads = std::max(1, threads);
  if (threads == 1 || n <= 1) {
    for (long long i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<long long> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int w = 0; w < std::min<long long>(threads, n); ++w)
    pool.emplace_back([&] {
      for (long long i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace detail {

/// Key component covering exactly the fields that shape the raw draws, so
/// conduct-only parameters (phi, F_c, iv form, sigma_x) share streams.
inline std::uint64_t dgp_draw_hash(const MonteCarloConfig& c) {
  return derive_key({static_cast<std::uint64_t>(c.J), static_cast<std::uint64_t>(c.T),
                     hash_double(c.shocks.var_xi), hash_double(c.shocks.var_omega),
                     hash_double(c.shocks.cov_xi_omega), hash_double(c.rho ? *c.rho : -0.0),
                     static_cast<std::uint64_t>(c.rho.has_value()),
                     static_cast<std::uint64_t>(c.trivariate_endo)});
}

constexpr std::uint64_t kTagAttrs = 0xA77A5;
constexpr std::uint64_t kTagFirms = 0xF1235;

}  // namespace detail

/// One market of the data-generating process, deterministic in
/// (master_seed, draw-relevant config, replicate, market).
inline Market gen_market(const MonteCarloConfig& cfg, int replicate, int market_index,
                         const Quadrature& quad, bool throw_on_failure = true) {
  const int J = cfg.J;
  CounterRng attrs(derive_key({cfg.master_seed, detail::kTagAttrs, detail::dgp_draw_hash(cfg),
                               static_cast<std::uint64_t>(replicate),
                               static_cast<std::uint64_t>(market_index)}));
  Market m;
  m.market_id = market_index;
  m.x.resize(J);
  m.w.resize(J);
  m.xi.resize(J);
  m.omega.resize(J);
  for (int j = 0; j < J; ++j) m.x(j) = attrs.uniform();
  for (int j = 0; j < J; ++j) m.w(j) = attrs.uniform();
  if (cfg.trivariate_endo) {
    // footnote variant: (x, xi, omega) jointly normal, x used unscaled
    const double r = *cfg.rho;
    Eigen::Matrix3d cov;
    cov << 0.2, r, 0.0, r, 0.2, 0.1, 0.0, 0.1, 0.2;
    Eigen::LLT<Eigen::Matrix3d> llt(cov);
    if (llt.info() != Eigen::Success)
      throw ConfigError("trivariate endogeneity: covariance not PSD for rho");
    Eigen::Matrix3d l = llt.matrixL();
    for (int j = 0; j < J; ++j) {
      Eigen::Vector3d zdraw(attrs.normal(), attrs.normal(), attrs.normal());
      Eigen::Vector3d v = l * zdraw;
      m.x(j) = v(0);
      m.xi(j) = v(1);
      m.omega(j) = v(2);
    }
  } else {
    const Eigen::Matrix2d l = cfg.shocks.chol();
    for (int j = 0; j < J; ++j) {
      Eigen::Vector2d zdraw(attrs.normal(), attrs.normal());
      Eigen::Vector2d v = l * zdraw;
      m.xi(j) = v(0);
      m.omega(j) = v(1);
    }
    if (cfg.rho) {
      // endogenous attribute: correlate with xi, then min-max rescale per
      // market so the support stays [0,1] for any rho
      Eigen::VectorXd unscaled = m.x - *cfg.rho * m.xi;
      const double lo = unscaled.minCoeff(), hi = unscaled.maxCoeff();
      m.x = (unscaled.array() - lo) / (hi - lo);
    }
  }

  CounterRng firms(derive_key({cfg.master_seed, detail::kTagFirms, static_cast<std::uint64_t>(cfg.J),
                               static_cast<std::uint64_t>(cfg.F),
                               static_cast<std::uint64_t>(replicate)}));
  m.firm_id = assign_firms(cfg.J, cfg.F, firms);
  m.effective_firm_id = effective_index(m.firm_id, cfg.F, cfg.F_c);
  ConductSpec conduct{cfg.phi, m.effective_firm_id};
  OwnershipMatrix ownership = build_ownership(m.firm_id, conduct);

  m.mc = cfg.cost.gamma(0) + (cfg.cost.gamma(1) * m.x.array() + cfg.cost.gamma(2) * m.w.array() +
                              m.omega.array());
  Eigen::VectorXd v = cfg.demand.beta(0) +
                      (cfg.demand.beta(1) * m.x.array() + m.xi.array());
  SolveOptions sopts;
  sopts.throw_on_failure = throw_on_failure;
  EquilibriumResult eq = solve_prices(m.mc, v, m.x, cfg.demand, quad, ownership, sopts);
  m.price = eq.price;
  m.share = eq.share;
  m.outside_share = eq.outside_share;
  if (eq.converged) m.validate();
  return m;
}

/// Per-replicate statistics; NaN marks quantities that were not computed and
/// the flags say why.
struct ReplicateResult {
  int replicate_index = 0;
  double fstat_comp = std::numeric_limits<double>::quiet_NaN();
  double fstat_coll = std::numeric_limits<double>::quiet_NaN();
  double t_iv = std::numeric_limits<double>::quiet_NaN();
  double p_h2 = std::numeric_limits<double>::quiet_NaN();
  double t_markup = std::numeric_limits<double>::quiet_NaN();
  double abs_err_alpha_comp = std::numeric_limits<double>::quiet_NaN();
  double abs_err_alpha_coll = std::numeric_limits<double>::quiet_NaN();
  double abs_err_sigma_comp = std::numeric_limits<double>::quiet_NaN();
  double abs_err_sigma_coll = std::numeric_limits<double>::quiet_NaN();
  double median_outside_share = std::numeric_limits<double>::quiet_NaN();
  bool equilibrium_converged = true;
  bool degenerate_iv = false;
};

struct RunOptions {
  bool with_estimation = true;   // demand fits per instrument set
  bool with_markup_test = true;  // the benchmark statistic
  int threads = 1;
};

inline ReplicateResult run_replicate(const MonteCarloConfig& cfg, int replicate,
                                     const Quadrature& quad, const RunOptions& opts) {
  ReplicateResult r;
  r.replicate_index = replicate;
  std::vector<Market> markets;
  markets.reserve(cfg.T);
  std::vector<double> outside;
  for (int t = 0; t < cfg.T; ++t) {
    Market m = gen_market(cfg, replicate, t, quad, /*throw_on_failure=*/false);
    if (!m.price.allFinite() || (m.share.array() <= 0).any() ||
        ((m.price - m.mc).array() <= 0).any()) {
      r.equilibrium_converged = false;
      return r;
    }
    outside.push_back(m.outside_share);
    markets.push_back(std::move(m));
  }
  r.median_outside_share = median(outside);

  auto [z_comp, z_coll] = iv_set_for_test(markets, cfg.iv_form);
  detail::StackedPanel panel = detail::stack_markets(markets);
  const Eigen::Index n = panel.x.size();
  Eigen::MatrixXd x_exog(n, 2);
  x_exog << Eigen::VectorXd::Ones(n), panel.x;

  IvConductResult iv = t_iv_rv(panel.price, x_exog, z_comp, z_coll);
  r.fstat_comp = iv.fstat_comp.value;
  r.fstat_coll = iv.fstat_coll.value;
  r.degenerate_iv = iv.rv.degenerate;
  if (!iv.rv.degenerate) {
    r.t_iv = iv.rv.t_stat;
    r.p_h2 = iv.rv.p_collusion;
  }

  const bool rc = cfg.demand.sigma_x > 0;
  if (opts.with_estimation) {
    try {
      if (rc) {
        GmmDemandFit f1 = estimate_demand_rc(markets, z_comp.values, quad);
        GmmDemandFit f2 = estimate_demand_rc(markets, z_coll.values, quad);
        r.abs_err_alpha_comp = std::abs(f1.alpha_hat - cfg.demand.alpha);
        r.abs_err_alpha_coll = std::abs(f2.alpha_hat - cfg.demand.alpha);
        r.abs_err_sigma_comp = std::abs(*f1.sigma_x_hat - cfg.demand.sigma_x);
        r.abs_err_sigma_coll = std::abs(*f2.sigma_x_hat - cfg.demand.sigma_x);
      } else {
        GmmDemandFit f1 = estimate_demand_logit(markets, z_comp.values);
        GmmDemandFit f2 = estimate_demand_logit(markets, z_coll.values);
        r.abs_err_alpha_comp = std::abs(f1.alpha_hat - cfg.demand.alpha);
        r.abs_err_alpha_coll = std::abs(f2.alpha_hat - cfg.demand.alpha);
      }
    } catch (const std::exception&) {
      // estimation failures leave NaNs; the cell reports fewer contributing draws
    }
  }

  if (opts.with_markup_test) {
    try {
      InstrumentMatrix z_demand = demand_ivs(markets, cfg.iv_form);
      DemandParams est = cfg.demand;
      if (rc) {
        GmmDemandFit f = estimate_demand_rc(markets, z_demand.values, quad);
        est.alpha = f.alpha_hat;
        est.sigma_x = *f.sigma_x_hat;
      } else {
        GmmDemandFit f = estimate_demand_logit(markets, z_demand.values);
        est.alpha = f.alpha_hat;
        est.sigma_x = 0.0;
      }
      auto model = [&](double phi) {
        return [phi](const Market& m) {
          return build_ownership(m.firm_id, ConductSpec{phi, m.effective_firm_id});
        };
      };
      RVResult t = t_markup_rv(markets, est, quad, model(0.0), model(1.0), z_demand.values);
      if (!t.degenerate) r.t_markup = t.t_stat;
    } catch (const std::exception&) {
    }
  }
  return r;
}

/// Medians across converged replicates of one experiment cell.
struct CellSummary {
  MonteCarloConfig config;
  int n_replicates = 0;
  int n_converged = 0;
  bool unreliable = false;
  double med_fstat_comp = std::numeric_limits<double>::quiet_NaN();
  double med_fstat_coll = std::numeric_limits<double>::quiet_NaN();
  double share_fstat2_gt_fstat1 = std::numeric_limits<double>::quiet_NaN();
  double med_t_iv = std::numeric_limits<double>::quiet_NaN();
  double med_p_h2 = std::numeric_limits<double>::quiet_NaN();
  double med_t_markup = std::numeric_limits<double>::quiet_NaN();
  double med_abs_err_alpha_comp = std::numeric_limits<double>::quiet_NaN();
  double med_abs_err_alpha_coll = std::numeric_limits<double>::quiet_NaN();
  double med_abs_err_sigma_comp = std::numeric_limits<double>::quiet_NaN();
  double med_abs_err_sigma_coll = std::numeric_limits<double>::quiet_NaN();
  double med_outside_share = std::numeric_limits<double>::quiet_NaN();
  std::vector<ReplicateResult> replicates;
};

inline CellSummary run_cell(const MonteCarloConfig& cfg, const Quadrature& quad,
                            const RunOptions& opts) {
  cfg.validate();
  CellSummary cell;
  cell.config = cfg;
  cell.n_replicates = cfg.S;
  cell.replicates.resize(cfg.S);
  parallel_for(cfg.S, opts.threads, [&](long long s) {
    cell.replicates[s] = run_replicate(cfg, static_cast<int>(s), quad, opts);
  });

  std::vector<double> f1, f2, tiv, ph2, tmk, ea1, ea2, es1, es2, s0;
  int converged = 0, both_f = 0, f2_gt = 0;
  for (const auto& r : cell.replicates) {
    if (!r.equilibrium_converged) continue;
    ++converged;
    f1.push_back(r.fstat_comp);
    f2.push_back(r.fstat_coll);
    tiv.push_back(r.t_iv);
    ph2.push_back(r.p_h2);
    tmk.push_back(r.t_markup);
    ea1.push_back(r.abs_err_alpha_comp);
    ea2.push_back(r.abs_err_alpha_coll);
    es1.push_back(r.abs_err_sigma_comp);
    es2.push_back(r.abs_err_sigma_coll);
    s0.push_back(r.median_outside_share);
    if (std::isfinite(r.fstat_comp) && std::isfinite(r.fstat_coll)) {
      ++both_f;
      if (r.fstat_coll > r.fstat_comp) ++f2_gt;
    }
  }
  cell.n_converged = converged;
  cell.unreliable = converged < static_cast<int>(0.8 * cfg.S);
  cell.med_fstat_comp = median(f1);
  cell.med_fstat_coll = median(f2);
  cell.med_t_iv = median(tiv);
  cell.med_p_h2 = median(ph2);
  cell.med_t_markup = median(tmk);
  cell.med_abs_err_alpha_comp = median(ea1);
  cell.med_abs_err_alpha_coll = median(ea2);
  cell.med_abs_err_sigma_comp = median(es1);
  cell.med_abs_err_sigma_coll = median(es2);
  cell.med_outside_share = median(s0);
  if (both_f > 0) cell.share_fstat2_gt_fstat1 = static_cast<double>(f2_gt) / both_f;
  return cell;
}

// ---------------------------------------------------------------------------
// Grid driver and CSV emission

inline std::string format_sig6(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

inline const char* kCellCsvHeader =
    "J,F,T,phi,F_c,rho,sigma_x,S,master_seed,iv_form,n_converged,unreliable,"
    "med_fstat_comp,med_fstat_coll,share_fstat2_gt_fstat1,med_t_iv,med_p_h2,med_t_markup,"
    "med_abs_err_alpha_comp,med_abs_err_alpha_coll,med_abs_err_sigma_comp,"
    "med_abs_err_sigma_coll,med_outside_share";

inline void write_cell_csv_row(std::ostream& os, const CellSummary& c) {
  const auto& k = c.config;
  os << k.J << ',' << k.F << ',' << k.T << ',' << format_sig6(k.phi) << ',' << k.F_c << ','
     << (k.rho ? format_sig6(*k.rho) : "") << ',' << format_sig6(k.demand.sigma_x) << ',' << k.S
     << ',' << k.master_seed << ',' << to_string(k.iv_form) << ',' << c.n_converged << ','
     << (c.unreliable ? 1 : 0) << ',' << format_sig6(c.med_fstat_comp) << ','
     << format_sig6(c.med_fstat_coll) << ',' << format_sig6(c.share_fstat2_gt_fstat1) << ','
     << format_sig6(c.med_t_iv) << ',' << format_sig6(c.med_p_h2) << ','
     << format_sig6(c.med_t_markup) << ',' << format_sig6(c.med_abs_err_alpha_comp) << ','
     << format_sig6(c.med_abs_err_alpha_coll) << ',' << format_sig6(c.med_abs_err_sigma_comp)
     << ',' << format_sig6(c.med_abs_err_sigma_coll) << ',' << format_sig6(c.med_outside_share)
     << '\n';
}

inline std::string cell_identity(const MonteCarloConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << c.J << '|' << c.F << '|' << c.T << '|' << c.phi << '|' << c.F_c << '|'
     << (c.rho ? *c.rho : std::numeric_limits<double>::quiet_NaN()) << '|' << c.trivariate_endo
     << '|' << c.S << '|' << c.master_seed << '|' << c.demand.sigma_x << '|'
     << to_string(c.iv_form);
  return os.str();
}

/// Runs every cell and streams one CSV row per cell in input order.
inline std::vector<CellSummary> run_grid(std::span<const MonteCarloConfig> cells,
                                         const RunOptions& opts, std::ostream& csv) {
  std::set<std::string> seen;
  for (const auto& c : cells) {
    c.validate();
    if (!seen.insert(cell_identity(c)).second)
      throw ConfigError("duplicate cell in grid: " + cell_identity(c));
  }
  std::vector<CellSummary> out;
  csv << kCellCsvHeader << '\n';
  for (const auto& c : cells) {
    Quadrature quad = Quadrature::gauss_hermite_normal(c.demand.quad_nodes);
    out.push_back(run_cell(c, quad, opts));
    write_cell_csv_row(csv, out.back());
  }
  return out;
}

}  // namespace conduct
