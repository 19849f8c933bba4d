#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "conduct/conduct_tests.hpp"
#include "conduct/csv.hpp"
#include "conduct/errors.hpp"
#include "conduct/regression.hpp"

namespace conduct {

/// Product-market panel read from a user CSV. Rows keep file order; markets
/// are indexed by first appearance.
struct Dataset {
  std::vector<std::string> market_id, product_id, firm_id;
  Eigen::VectorXd price;
  std::optional<Eigen::VectorXd> share;
  std::map<std::string, Eigen::VectorXd> numeric;            // attribute / cost columns
  std::map<std::string, std::vector<std::string>> text;      // categorical columns
  std::vector<int> market_code;                               // dense, by first appearance
  std::vector<std::vector<int>> market_rows;

  long long n() const { return static_cast<long long>(price.size()); }

  const Eigen::VectorXd& numeric_column(const std::string& name) const {
    auto it = numeric.find(name);
    if (it == numeric.end()) throw SchemaError("no numeric column \"" + name + "\"");
    return it->second;
  }
  const std::vector<std::string>& text_column(const std::string& name) const {
    auto it = text.find(name);
    if (it == text.end()) throw SchemaError("no column \"" + name + "\"");
    return it->second;
  }

  std::vector<int> dense_codes(const std::string& column) const {
    const auto& col = text_column(column);
    std::map<std::string, int> seen;
    std::vector<int> out(col.size());
    for (std::size_t i = 0; i < col.size(); ++i)
      out[i] = seen.try_emplace(col[i], static_cast<int>(seen.size())).first->second;
    return out;
  }
};

/// Loads a dataset; every column other than the id/price/share columns is kept
/// both as text and, when parseable, as numbers.
inline Dataset load_dataset(const CsvTable& t, bool require_share = false) {
  Dataset d;
  const int c_market = t.column("market_id");
  const int c_product = t.column("product_id");
  const int c_firm = t.column("firm_id");
  const int c_price = t.column("price");
  if (c_market < 0 || c_product < 0 || c_firm < 0 || c_price < 0)
    throw SchemaError("dataset needs columns market_id, product_id, firm_id, price");
  const int c_share = t.column("share");
  if (require_share && c_share < 0)
    throw SchemaError("this command needs a share column (the conduct test itself does not)");
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  if (n == 0) throw SchemaError("dataset has no rows");
  d.price.resize(n);
  if (c_share >= 0) d.share = Eigen::VectorXd(n);
  std::map<std::string, int> market_codes;
  std::set<std::pair<std::string, std::string>> keys;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = t.rows[i];
    d.market_id.push_back(row[c_market]);
    d.product_id.push_back(row[c_product]);
    d.firm_id.push_back(row[c_firm]);
    if (!keys.emplace(row[c_market], row[c_product]).second)
      throw SchemaError("duplicate (market_id, product_id): (" + row[c_market] + ", " +
                        row[c_product] + ")");
    d.price(i) = parse_double(row[c_price], "price");
    if (d.price(i) <= 0) throw SchemaError("non-positive price in market " + row[c_market]);
    if (c_share >= 0) (*d.share)(i) = parse_double(row[c_share], "share");
    const int code =
        market_codes.try_emplace(row[c_market], static_cast<int>(market_codes.size())).first->second;
    d.market_code.push_back(code);
    if (code == static_cast<int>(d.market_rows.size())) d.market_rows.emplace_back();
    d.market_rows[code].push_back(static_cast<int>(i));
  }
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    const int ci = static_cast<int>(c);
    if (ci == c_market || ci == c_product || ci == c_firm || ci == c_price || ci == c_share)
      continue;
    std::vector<std::string> col(n);
    bool all_numeric = true;
    Eigen::VectorXd vals(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      col[i] = t.rows[i][c];
      if (all_numeric) {
        try {
          vals(i) = parse_double(col[i], t.header[c]);
        } catch (const SchemaError&) {
          all_numeric = false;
        }
      }
    }
    if (all_numeric) d.numeric.emplace(t.header[c], std::move(vals));
    d.text.emplace(t.header[c], std::move(col));
  }
  if (d.share) {
    if ((d.share->array() <= 0).any()) throw SchemaError("shares must be positive");
    for (const auto& rows : d.market_rows) {
      double sum = 0;
      for (int r : rows) sum += (*d.share)(r);
      if (sum >= 1.0) throw SchemaError("market shares sum to >= 1 in market " +
                                        d.market_id[rows.front()]);
    }
  }
  return d;
}

inline void write_dataset_csv(std::ostream& os, const Dataset& d,
                              const std::vector<std::string>& numeric_cols) {
  os << "market_id,product_id,firm_id,price";
  if (d.share) os << ",share";
  for (const auto& c : numeric_cols) os << ',' << c;
  os << '\n';
  for (long long i = 0; i < d.n(); ++i) {
    os << csv_escape(d.market_id[i]) << ',' << csv_escape(d.product_id[i]) << ','
       << csv_escape(d.firm_id[i]) << ',' << format_g17(d.price(i));
    if (d.share) os << ',' << format_g17((*d.share)(i));
    for (const auto& c : numeric_cols) os << ',' << format_g17(d.numeric_column(c)(i));
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Conduct hypotheses

struct ConductHypothesis {
  std::string name;
  std::map<std::string, std::string> firm_to_group;
};

inline std::vector<ConductHypothesis> load_hypotheses(const nlohmann::json& j) {
  std::vector<ConductHypothesis> out;
  if (!j.contains("hypotheses") || !j.at("hypotheses").is_array())
    throw ConfigError("hypothesis file needs a top-level \"hypotheses\" array");
  for (const auto& h : j.at("hypotheses")) {
    ConductHypothesis c;
    c.name = require_field<std::string>(h, "name");
    if (!h.contains("groups") || !h.at("groups").is_object())
      throw ConfigError("hypothesis \"" + c.name + "\" needs a \"groups\" object");
    for (const auto& [firm, group] : h.at("groups").items())
      c.firm_to_group[firm] = group.get<std::string>();
    out.push_back(std::move(c));
  }
  if (out.size() < 2) throw ConfigError("need at least two hypotheses for pairwise tests");
  return out;
}

/// Effective-group code per row under a hypothesis; unknown firms are an error
/// naming the offending id.
inline std::vector<int> hypothesis_groups(const Dataset& d, const ConductHypothesis& h) {
  std::map<std::string, int> codes;
  std::vector<int> out(d.n());
  for (long long i = 0; i < d.n(); ++i) {
    auto it = h.firm_to_group.find(d.firm_id[i]);
    if (it == h.firm_to_group.end())
      throw SchemaError("hypothesis \"" + h.name + "\" does not map firm \"" + d.firm_id[i] +
                        "\"");
    out[i] = codes.try_emplace(it->second, static_cast<int>(codes.size())).first->second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Empirical instrument construction (sums over own-group products, optionally
// restricted to products sharing listed category values)

struct EmpiricalIvSpec {
  std::vector<std::string> attr_cols;                    // numeric attributes
  bool count_iv = true;                                  // include the constant's sum
  std::vector<std::vector<std::string>> interactions;    // category-column combos; {} always included
  int sum_order = 1;                                     // 1..3
  bool differentiation = false;                          // distance IVs instead of sums
};

inline InstrumentMatrix empirical_ivs(const Dataset& d, const std::vector<int>& group,
                                      const EmpiricalIvSpec& spec) {
  InstrumentMatrix out;
  const long long n = d.n();
  std::vector<std::vector<std::string>> combos;
  combos.emplace_back();  // the plain own-group sum
  for (const auto& c : spec.interactions) combos.push_back(c);

  std::vector<std::pair<std::string, const Eigen::VectorXd*>> attrs;
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  if (spec.count_iv) attrs.emplace_back("count", &ones);
  for (const auto& a : spec.attr_cols) attrs.emplace_back(a, &d.numeric_column(a));

  // cell key per combo: market x group x category values
  std::vector<Eigen::MatrixXd> blocks;
  for (const auto& combo : combos) {
    std::vector<std::string> cell(n);
    for (long long i = 0; i < n; ++i) {
      std::string key = std::to_string(d.market_code[i]) + '|' + std::to_string(group[i]);
      for (const auto& col : combo) key += '|' + d.text_column(col)[i];
      cell[i] = std::move(key);
    }
    std::map<std::string, std::vector<int>> members;
    for (long long i = 0; i < n; ++i) members[cell[i]].push_back(static_cast<int>(i));

    std::string combo_tag;
    for (const auto& col : combo) combo_tag += "_" + col;
    for (const auto& [aname, avals] : attrs) {
      if (spec.differentiation) {
        // per-market attribute sd, distance kinds up to the configured order
        std::vector<DiffKind> kinds{DiffKind::Local, DiffKind::Quadratic};
        if (spec.sum_order >= 3) kinds.push_back(DiffKind::Cubic);
        if (aname == "count") continue;  // distances of a constant are zero
        Eigen::VectorXd sd_of_market(d.market_rows.size());
        for (std::size_t mkt = 0; mkt < d.market_rows.size(); ++mkt) {
          const auto& rows = d.market_rows[mkt];
          double mean = 0;
          for (int r : rows) mean += (*avals)(r);
          mean /= rows.size();
          double ss = 0;
          for (int r : rows) ss += ((*avals)(r) - mean) * ((*avals)(r) - mean);
          sd_of_market(mkt) = rows.size() > 1 ? std::sqrt(ss / (rows.size() - 1)) : 0.0;
        }
        for (DiffKind k : kinds) {
          Eigen::VectorXd col = Eigen::VectorXd::Zero(n);
          for (const auto& [key, rows] : members) {
            (void)key;
            for (int j : rows)
              for (int kk : rows) {
                if (kk == j) continue;
                const double dist = (*avals)(kk) - (*avals)(j);
                switch (k) {
                  case DiffKind::Local:
                    col(j) += std::abs(dist) < sd_of_market(d.market_code[j]) ? 1.0 : 0.0;
                    break;
                  case DiffKind::Quadratic: col(j) += dist * dist; break;
                  case DiffKind::Cubic: col(j) += dist * dist * dist; break;
                }
              }
          }
          blocks.push_back(col);
          out.labels.push_back("diff_" + to_string(k) + "_" + aname + combo_tag);
        }
      } else {
        const int max_order = aname == "count" ? 1 : spec.sum_order;
        for (int r = 1; r <= max_order; ++r) {
          Eigen::VectorXd col = Eigen::VectorXd::Zero(n);
          for (const auto& [key, rows] : members) {
            (void)key;
            double total = 0;
            for (int i : rows) total += std::pow((*avals)(i), r);
            for (int i : rows) col(i) = total - std::pow((*avals)(i), r);
          }
          blocks.push_back(col);
          out.labels.push_back("sum_" + std::to_string(r) + "_" + aname + combo_tag);
        }
      }
    }
  }
  out.values.resize(n, static_cast<Eigen::Index>(blocks.size()));
  for (std::size_t c = 0; c < blocks.size(); ++c) out.values.col(c) = blocks[c];
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Pairwise hypothesis testing (the empirical workflow)

struct PairwiseOptions {
  EmpiricalIvSpec iv;
  std::vector<std::string> exog_cols;  // first-stage regressors besides the IVs
  std::vector<std::string> fe_cols;
  std::optional<std::string> cluster_col;
};

struct PairwiseResult {
  std::vector<std::string> names;
  std::vector<std::vector<RVResult>> cells;  // cells[r][c], diagonal unused
  std::vector<double> fstats;                // excluded-F per hypothesis's first stage

  /// entry (r, c): positive favors the row hypothesis; antisymmetric.
  double t(int r, int c) const { return cells[r][c].t_stat; }
};

inline PairwiseResult run_pairwise(const Dataset& d,
                                   const std::vector<ConductHypothesis>& hypotheses,
                                   const PairwiseOptions& opts) {
  const long long n = d.n();
  Eigen::MatrixXd x_exog(n, opts.exog_cols.size());
  for (std::size_t c = 0; c < opts.exog_cols.size(); ++c)
    x_exog.col(c) = d.numeric_column(opts.exog_cols[c]);

  FixedEffectSpec fe;
  for (const auto& col : opts.fe_cols) fe.ids.push_back(d.dense_codes(col));
  std::vector<int> clusters;
  FirstStageOptions fso;
  if (!fe.ids.empty()) fso.fe = &fe;
  if (opts.cluster_col) {
    clusters = d.dense_codes(*opts.cluster_col);
    fso.clusters = &clusters;
  }
  // Without fixed effects the first stage still needs an intercept.
  Eigen::MatrixXd x_design;
  if (fe.ids.empty()) {
    x_design.resize(n, x_exog.cols() + 1);
    x_design << Eigen::VectorXd::Ones(n), x_exog;
  } else {
    x_design = x_exog;
  }

  PairwiseResult out;
  std::vector<Eigen::VectorXd> residuals;
  for (const auto& h : hypotheses) {
    out.names.push_back(h.name);
    InstrumentMatrix z = empirical_ivs(d, hypothesis_groups(d, h), opts.iv);
    RegressionFit fit = first_stage(d.price, x_design, z.values, fso);
    residuals.push_back(fit.residuals);
    out.fstats.push_back(fit.excluded_f ? fit.excluded_f->value
                                        : std::numeric_limits<double>::quiet_NaN());
  }
  const int H = static_cast<int>(hypotheses.size());
  out.cells.assign(H, std::vector<RVResult>(H));
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < H; ++c) {
      if (r == c) continue;
      // column hypothesis on the competition side, row on the collusion side:
      // positive favors the row model (Table-style orientation)
      out.cells[r][c] = rv_from_residuals(residuals[c], residuals[r],
                                          fso.clusters ? &clusters : nullptr);
    }
  return out;
}

inline void write_pairwise_matrix_csv(std::ostream& os, const PairwiseResult& p) {
  os << "hypothesis";
  for (const auto& nm : p.names) os << ',' << csv_escape(nm);
  os << '\n';
  for (std::size_t r = 0; r < p.names.size(); ++r) {
    os << csv_escape(p.names[r]);
    for (std::size_t c = 0; c < p.names.size(); ++c) {
      os << ',';
      if (r != c && !p.cells[r][c].degenerate) os << format_g17(p.cells[r][c].t_stat);
    }
    os << '\n';
  }
}

inline void write_pairwise_long_csv(std::ostream& os, const PairwiseResult& p) {
  os << "row,col,t,p_collusion,p_competition,degenerate\n";
  for (std::size_t r = 0; r < p.names.size(); ++r)
    for (std::size_t c = 0; c < p.names.size(); ++c) {
      if (r == c) continue;
      const RVResult& v = p.cells[r][c];
      os << csv_escape(p.names[r]) << ',' << csv_escape(p.names[c]) << ','
         << (v.degenerate ? "" : format_g17(v.t_stat)) << ','
         << (v.degenerate ? "" : format_g17(v.p_collusion)) << ','
         << (v.degenerate ? "" : format_g17(v.p_competition)) << ','
         << (v.degenerate ? 1 : 0) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Demand estimation on a dataset (logit, optional one-attribute random
// coefficient on the first attribute column)

struct DatasetEstimateOptions {
  std::vector<std::string> attr_cols;
  int sum_order = 2;
  bool rc = false;
  int quad_nodes = 9;
};

struct DatasetDemandFit {
  Eigen::VectorXd beta;  // intercept + attribute loadings
  double alpha = 0.0;
  std::optional<double> sigma_x;
  double objective = 0.0;
  std::vector<std::string> beta_names;
};

inline DatasetDemandFit estimate_dataset_demand(const Dataset& d,
                                                const DatasetEstimateOptions& opts) {
  if (!d.share) throw SchemaError("estimation needs a share column");
  if (opts.attr_cols.empty()) throw ConfigError("estimation needs at least one attribute column");
  const long long n = d.n();
  // delta = log s_j - log s_0 per market
  Eigen::VectorXd delta(n);
  for (const auto& rows : d.market_rows) {
    double inside = 0;
    for (int r : rows) inside += (*d.share)(r);
    const double s0 = 1.0 - inside;
    for (int r : rows) delta(r) = std::log((*d.share)(r)) - std::log(s0);
  }
  Eigen::MatrixXd x_exog(n, 1 + opts.attr_cols.size());
  x_exog.col(0) = Eigen::VectorXd::Ones(n);
  for (std::size_t c = 0; c < opts.attr_cols.size(); ++c)
    x_exog.col(1 + c) = d.numeric_column(opts.attr_cols[c]);

  // own+other sums over the observed firm index per attribute
  std::vector<int> firm_groups;
  {
    std::map<std::string, int> codes;
    for (long long i = 0; i < n; ++i)
      firm_groups.push_back(
          codes.try_emplace(d.firm_id[i], static_cast<int>(codes.size())).first->second);
  }
  EmpiricalIvSpec ivspec;
  ivspec.attr_cols = opts.attr_cols;
  ivspec.count_iv = false;
  ivspec.sum_order = opts.sum_order;
  InstrumentMatrix z_own = empirical_ivs(d, firm_groups, ivspec);
  // other-firm sums: market totals minus own-inclusive sums
  Eigen::MatrixXd z_other = z_own.values;
  {
    int col = 0;
    for (const auto& a : opts.attr_cols)
      for (int r = 1; r <= opts.sum_order; ++r, ++col) {
        const Eigen::VectorXd& v = d.numeric_column(a);
        Eigen::VectorXd pow_v = v.array().pow(r);
        Eigen::VectorXd totals(n);
        for (const auto& rows : d.market_rows) {
          double tot = 0;
          for (int i : rows) tot += pow_v(i);
          for (int i : rows) totals(i) = tot;
        }
        z_other.col(col) = totals - pow_v - z_own.values.col(col);
      }
  }
  Eigen::MatrixXd z(n, z_own.values.cols() + z_other.cols());
  z << z_own.values, z_other;

  DatasetDemandFit fit;
  fit.beta_names.push_back("intercept");
  for (const auto& a : opts.attr_cols) fit.beta_names.push_back(a);
  if (!opts.rc) {
    RegressionFit f = tsls(delta, x_exog, Eigen::MatrixXd(-d.price), z);
    fit.beta = f.coef.head(x_exog.cols());
    fit.alpha = f.coef(x_exog.cols());
    Eigen::MatrixXd zfull(n, x_exog.cols() + z.cols());
    zfull << x_exog, z;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(zfull.transpose() * zfull);
    fit.objective = detail::gmm_objective(zfull, f.residuals, ldlt);
    return fit;
  }

  // one random coefficient on the first attribute column
  Quadrature quad = Quadrature::gauss_hermite_normal(opts.quad_nodes);
  const Eigen::VectorXd& rc_x = d.numeric_column(opts.attr_cols[0]);
  Eigen::MatrixXd zfull(n, x_exog.cols() + z.cols());
  zfull << x_exog, z;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(zfull.transpose() * zfull);
  std::vector<Eigen::VectorXd> warm(d.market_rows.size());
  auto objective = [&](double sigma, DatasetDemandFit* out) {
    Eigen::VectorXd dl(n);
    DemandParams dp;
    dp.sigma_x = sigma;
    for (std::size_t mkt = 0; mkt < d.market_rows.size(); ++mkt) {
      const auto& rows = d.market_rows[mkt];
      Eigen::VectorXd s(rows.size()), xv(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        s(i) = (*d.share)(rows[i]);
        xv(i) = rc_x(rows[i]);
      }
      Eigen::VectorXd dd;
      try {
        dd = invert_shares(s, xv, dp, quad, 1e-12, 5000,
                           warm[mkt].size() == static_cast<Eigen::Index>(rows.size())
                               ? &warm[mkt]
                               : nullptr);
      } catch (const ConvergenceError&) {
        return std::numeric_limits<double>::infinity();
      }
      warm[mkt] = dd;
      for (std::size_t i = 0; i < rows.size(); ++i) dl(rows[i]) = dd(i);
    }
    RegressionFit f = tsls(dl, x_exog, Eigen::MatrixXd(-d.price), z);
    const double q = detail::gmm_objective(zfull, f.residuals, ldlt);
    if (out) {
      out->beta = f.coef.head(x_exog.cols());
      out->alpha = f.coef(x_exog.cols());
      out->sigma_x = sigma;
      out->objective = q;
    }
    return q;
  };
  double best_q = std::numeric_limits<double>::infinity(), best_s = 0;
  const double lo_b = 0.0, hi_b = 20.0, step = 0.5;
  for (double s = lo_b; s <= hi_b + 1e-9; s += step) {
    const double q = objective(s, nullptr);
    if (q < best_q) {
      best_q = q;
      best_s = s;
    }
  }
  if (!std::isfinite(best_q)) throw NumericalError("rc estimation failed at every sigma");
  double lo = std::max(lo_b, best_s - step), hi = std::min(hi_b, best_s + step);
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - gr * (hi - lo), b = lo + gr * (hi - lo);
  double fa = objective(a, nullptr), fb = objective(b, nullptr);
  while (hi - lo > 1e-3) {
    if (fa < fb) {
      hi = b; b = a; fb = fa;
      a = hi - gr * (hi - lo);
      fa = objective(a, nullptr);
    } else {
      lo = a; a = b; fa = fb;
      b = lo + gr * (hi - lo);
      fb = objective(b, nullptr);
    }
  }
  objective(0.5 * (lo + hi), &fit);
  return fit;
}

}  // namespace conduct
