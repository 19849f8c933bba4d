// Command-line front end: Monte Carlo grids, conduct tests on CSV data,
// demand estimation, and the nested-logit price-response study.
//
// Exit codes: 0 ok, 1 runtime/convergence failure, 2 usage/config error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <thread>

#include "conduct/dataset.hpp"
#include "conduct/jacobian_study.hpp"
#include "conduct/simulate.hpp"

namespace {

using namespace conduct;

nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON in ") + path + ": " + e.what());
  }
}

/// A config file holds either one cell, {"cells": [...]}, or
/// {"base": {...}, "sweep": {"phi": [...], "F_c": [...], "rho": [...]}}.
std::vector<MonteCarloConfig> parse_cells(const nlohmann::json& j) {
  std::vector<MonteCarloConfig> cells;
  if (j.contains("cells")) {
    for (const auto& c : j.at("cells")) cells.push_back(c.get<MonteCarloConfig>());
  } else if (j.contains("base")) {
    MonteCarloConfig base = j.at("base").get<MonteCarloConfig>();
    std::vector<double> phis{base.phi};
    std::vector<int> fcs{base.F_c};
    std::vector<std::optional<double>> rhos{base.rho};
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      if (s.contains("phi")) phis = s.at("phi").get<std::vector<double>>();
      if (s.contains("F_c")) fcs = s.at("F_c").get<std::vector<int>>();
      if (s.contains("rho")) {
        rhos.clear();
        for (double r : s.at("rho").get<std::vector<double>>()) rhos.emplace_back(r);
      }
    }
    for (int fc : fcs)
      for (double phi : phis)
        for (const auto& rho : rhos) {
          MonteCarloConfig c = base;
          c.phi = phi;
          c.F_c = fc;
          c.rho = rho;
          cells.push_back(c);
        }
  } else {
    cells.push_back(j.get<MonteCarloConfig>());
  }
  if (cells.empty()) throw ConfigError("config contains no cells");
  return cells;
}

/// Export one replicate of a cell in the dataset CSV schema, plus the
/// observed/suspected hypothesis pair, so `conduct test` can re-run the same
/// statistic from flat files.
void export_cell_dataset(const MonteCarloConfig& cfg, const std::string& data_path,
                         const std::string& hypo_path) {
  Quadrature quad = Quadrature::gauss_hermite_normal(cfg.demand.quad_nodes);
  std::ofstream os(data_path);
  if (!os) throw ConfigError("cannot write " + data_path);
  os << "market_id,product_id,firm_id,price,share,x,w,suspected_group_id\n";
  for (int t = 0; t < cfg.T; ++t) {
    Market m = gen_market(cfg, 0, t, quad);
    for (int p = 0; p < m.J(); ++p)
      os << 'm' << t << ",j" << p << ",f" << m.firm_id[p] << ',' << format_g17(m.price(p)) << ','
         << format_g17(m.share(p)) << ',' << format_g17(m.x(p)) << ',' << format_g17(m.w(p))
         << ",g" << m.effective_firm_id[p] << '\n';
  }
  // hypothesis file: observed firms vs the suspected grouping
  Market m0 = gen_market(cfg, 0, 0, quad);
  nlohmann::json observed, suspected;
  for (int p = 0; p < m0.J(); ++p) {
    observed["f" + std::to_string(m0.firm_id[p])] = "f" + std::to_string(m0.firm_id[p]);
    suspected["f" + std::to_string(m0.firm_id[p])] = "g" + std::to_string(m0.effective_firm_id[p]);
  }
  nlohmann::json h{{"hypotheses",
                    {{{"name", "observed"}, {"groups", observed}},
                     {{"name", "suspected"}, {"groups", suspected}}}}};
  std::ofstream hs(hypo_path);
  hs << h.dump(2) << '\n';
}

int cmd_simulate(const std::string& config_path, const std::string& output,
                 std::optional<std::uint64_t> seed, int threads, bool allow_partial,
                 const std::string& export_data) {
  auto cells = parse_cells(load_json(config_path));
  if (seed)
    for (auto& c : cells) c.master_seed = *seed;
  RunOptions opts;
  opts.threads = threads;
  std::ostringstream csv;
  auto summaries = run_grid(cells, opts, csv);
  std::ofstream os(output);
  if (!os) throw ConfigError("cannot write " + output);
  os << csv.str();
  if (!export_data.empty()) {
    std::filesystem::path base(export_data);
    export_cell_dataset(cells.front(), base.string(),
                        (base.parent_path() / (base.stem().string() + "_hypotheses.json")).string());
  }
  bool any_unreliable = false;
  for (const auto& s : summaries)
    if (s.unreliable) {
      any_unreliable = true;
      std::cerr << "cell " << cell_identity(s.config) << " unreliable: only " << s.n_converged
                << '/' << s.config.S << " replicates converged\n";
    }
  if (any_unreliable && !allow_partial) return 1;
  return 0;
}

EmpiricalIvSpec iv_spec_from_flags(const std::vector<std::string>& attrs, bool count_iv,
                                   const std::vector<std::string>& interact,
                                   const std::string& iv_form) {
  EmpiricalIvSpec spec;
  spec.attr_cols = attrs;
  spec.count_iv = count_iv;
  for (const auto& combo : interact) {
    std::vector<std::string> cols;
    std::stringstream ss(combo);
    std::string item;
    while (std::getline(ss, item, ',')) cols.push_back(item);
    spec.interactions.push_back(cols);
  }
  if (iv_form == "sum1") spec.sum_order = 1;
  else if (iv_form == "sum2") spec.sum_order = 2;
  else if (iv_form == "sum3") spec.sum_order = 3;
  else if (iv_form == "diff2") { spec.differentiation = true; spec.sum_order = 2; }
  else if (iv_form == "diff3") { spec.differentiation = true; spec.sum_order = 3; }
  else throw ConfigError("unknown --iv-form " + iv_form +
                         " (expected sum1|sum2|sum3|diff2|diff3)");
  return spec;
}

int cmd_test(const std::string& data_path, const std::string& hypo_path, const std::string& output,
             const std::string& long_output, const std::vector<std::string>& attrs,
             const std::vector<std::string>& exog, const std::vector<std::string>& interact,
             const std::vector<std::string>& fe, const std::string& cluster, bool count_iv,
             const std::string& iv_form) {
  Dataset d = load_dataset(read_csv_file(data_path));
  auto hypotheses = load_hypotheses(load_json(hypo_path));
  PairwiseOptions opts;
  opts.iv = iv_spec_from_flags(attrs, count_iv, interact, iv_form);
  opts.exog_cols = exog;
  opts.fe_cols = fe;
  if (!cluster.empty()) opts.cluster_col = cluster;
  PairwiseResult p = run_pairwise(d, hypotheses, opts);
  std::ofstream os(output);
  if (!os) throw ConfigError("cannot write " + output);
  write_pairwise_matrix_csv(os, p);
  if (!long_output.empty()) {
    std::ofstream ls(long_output);
    write_pairwise_long_csv(ls, p);
  }
  return 0;
}

int cmd_estimate(const std::string& data_path, const std::string& output,
                 const std::vector<std::string>& attrs, bool rc, int sum_order) {
  Dataset d = load_dataset(read_csv_file(data_path), /*require_share=*/true);
  DatasetEstimateOptions opts;
  opts.attr_cols = attrs;
  opts.rc = rc;
  opts.sum_order = sum_order;
  DatasetDemandFit fit = estimate_dataset_demand(d, opts);
  std::ofstream os(output);
  if (!os) throw ConfigError("cannot write " + output);
  os << "parameter,value\n";
  os << "alpha," << format_g17(fit.alpha) << '\n';
  for (Eigen::Index i = 0; i < fit.beta.size(); ++i)
    os << "beta_" << fit.beta_names[i] << ',' << format_g17(fit.beta(i)) << '\n';
  if (fit.sigma_x) os << "sigma_x," << format_g17(*fit.sigma_x) << '\n';
  os << "objective," << format_g17(fit.objective) << '\n';
  return 0;
}

int cmd_jacobian(const std::string& config_path, const std::string& outdir,
                 const std::vector<double>& phi_override) {
  JacobianStudyConfig cfg;
  if (!config_path.empty()) cfg = jacobian_config_from_json(load_json(config_path));
  if (!phi_override.empty()) cfg.phi_list = phi_override;
  cfg.validate();
  std::filesystem::create_directories(outdir);
  JacobianStudyMarket m = draw_jacobian_market(cfg);
  for (double phi : cfg.phi_list) {
    JacobianStudyResult r = solve_jacobian_study(cfg, m, phi);
    std::ostringstream name;
    name << "jacobian_phi_" << phi << ".csv";
    std::ofstream os(std::filesystem::path(outdir) / name.str());
    write_jacobian_csv(os, m, r);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bertrand-Nash market simulator and Rivers-Vuong conduct tests"};
  app.require_subcommand(1);
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  app.add_option("--threads", threads, "worker threads for replicate loops");

  // simulate
  auto* sim = app.add_subcommand("simulate", "run Monte Carlo cells from a JSON config");
  std::string sim_config, sim_output = "cells.csv", sim_export;
  std::uint64_t sim_seed = 0;
  bool sim_has_seed = false, allow_partial = false;
  sim->add_option("--config", sim_config, "JSON config (cell, cells, or base+sweep)")->required();
  sim->add_option("--output", sim_output, "summary CSV path");
  auto* seed_opt = sim->add_option("--seed", sim_seed, "override master_seed in every cell");
  sim->add_flag("--allow-partial", allow_partial, "exit 0 even if a cell is unreliable");
  sim->add_option("--export-data", sim_export,
                  "also write replicate 0 of the first cell as a dataset CSV (plus hypotheses)");

  // test
  auto* tst = app.add_subcommand("test", "pairwise conduct tests on a dataset CSV");
  std::string t_data, t_hypo, t_output = "pairwise.csv", t_long, t_cluster, t_ivform = "sum1";
  std::vector<std::string> t_attrs, t_exog, t_interact, t_fe;
  bool t_no_count = false;
  tst->add_option("--data", t_data, "dataset CSV")->required();
  tst->add_option("--hypotheses", t_hypo, "hypothesis JSON")->required();
  tst->add_option("--output", t_output, "matrix CSV path");
  tst->add_option("--long", t_long, "long-format CSV path");
  tst->add_option("--attrs", t_attrs, "numeric attribute columns for the IVs")->delimiter(',');
  tst->add_option("--exog", t_exog, "exogenous regressors (default: none beyond intercept/FE)")
      ->delimiter(',');
  tst->add_option("--interact", t_interact,
                  "category column (or comma pair) to interact the sums with; repeatable");
  tst->add_option("--fe", t_fe, "fixed-effect column; repeatable");
  tst->add_option("--cluster", t_cluster, "cluster column for the RV variance");
  tst->add_flag("--no-count-iv", t_no_count, "drop the product-count (constant-sum) IV");
  tst->add_option("--iv-form", t_ivform, "sum1|sum2|sum3|diff2|diff3 (default sum1)");

  // estimate
  auto* est = app.add_subcommand("estimate", "demand estimation on a dataset CSV (needs shares)");
  std::string e_data, e_output = "demand_fit.csv";
  std::vector<std::string> e_attrs;
  bool e_rc = false;
  int e_order = 2;
  est->add_option("--data", e_data, "dataset CSV")->required();
  est->add_option("--output", e_output, "fit CSV path");
  est->add_option("--attrs", e_attrs, "attribute columns (RC attaches to the first)")
      ->delimiter(',')->required();
  est->add_flag("--rc", e_rc, "estimate a random coefficient on the first attribute");
  est->add_option("--iv-order", e_order, "summation IV order for own/other sums (default 2)");

  // jacobian
  auto* jac = app.add_subcommand("jacobian", "nested-logit price-response matrices, one CSV per phi");
  std::string j_config, j_outdir = "jacobians";
  std::vector<double> j_phi;
  jac->add_option("--config", j_config, "JSON config (defaults replicate the built-in study)");
  jac->add_option("--output-dir", j_outdir, "output directory");
  jac->add_option("--phi", j_phi, "override the phi list")->delimiter(',');

  try {
    app.parse(argc, argv);
    sim_has_seed = seed_opt->count() > 0;
    if (sim->parsed())
      return cmd_simulate(sim_config, sim_output,
                          sim_has_seed ? std::optional<std::uint64_t>(sim_seed) : std::nullopt,
                          threads, allow_partial, sim_export);
    if (tst->parsed())
      return cmd_test(t_data, t_hypo, t_output, t_long, t_attrs, t_exog, t_interact, t_fe,
                      t_cluster, !t_no_count, t_ivform);
    if (est->parsed()) return cmd_estimate(e_data, e_output, e_attrs, e_rc, e_order);
    if (jac->parsed()) return cmd_jacobian(j_config, j_outdir, j_phi);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << '\n';
    return 2;
  } catch (const DomainError& e) {
    std::cerr << "domain error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
