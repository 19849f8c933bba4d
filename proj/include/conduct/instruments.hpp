#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "conduct/errors.hpp"
#include "conduct/market_model.hpp"

namespace conduct {

enum class IndexMode { ObservedFirm, SuspectedGroup };
enum class SummationScope { OwnSide, OtherSide };

struct InstrumentMatrix {
  Eigen::MatrixXd values;           // rows follow the stacked product-market order
  std::vector<std::string> labels;  // family_order_mode

  void validate() const {
    if (!values.allFinite()) throw NumericalError("instrument matrix has non-finite entries");
    if (static_cast<Eigen::Index>(labels.size()) != values.cols())
      throw StructuralError("instrument labels out of sync with columns");
  }
};

namespace detail {

inline const std::vector<int>& group_ids(const Market& m, IndexMode mode) {
  return mode == IndexMode::ObservedFirm ? m.firm_id : m.effective_firm_id;
}

inline std::string mode_tag(IndexMode mode) {
  return mode == IndexMode::ObservedFirm ? "observed" : "suspected";
}

inline long long total_products(std::span<const Market> markets) {
  long long n = 0;
  for (const auto& m : markets) n += m.J();
  return n;
}

}  // namespace detail

/// BLP summation instruments: per product j, the sum of x^r over the products
/// in j's group (own side, excluding j) or outside it (other side).
inline InstrumentMatrix summation_ivs(std::span<const Market> markets, IndexMode mode,
                                      SummationScope scope, const std::vector<int>& orders) {
  InstrumentMatrix out;
  out.values.resize(detail::total_products(markets), orders.size());
  for (std::size_t c = 0; c < orders.size(); ++c)
    out.labels.push_back("sum_" + std::to_string(orders[c]) + "_" + detail::mode_tag(mode) +
                         (scope == SummationScope::OtherSide ? "_other" : ""));
  long long row = 0;
  for (const auto& m : markets) {
    const auto& gid = detail::group_ids(m, mode);
    for (std::size_t c = 0; c < orders.size(); ++c) {
      Eigen::VectorXd xr = m.x.array().pow(orders[c]);
      const double total = xr.sum();
      // per-group sums
      const int G = 1 + *std::max_element(gid.begin(), gid.end());
      Eigen::VectorXd gsum = Eigen::VectorXd::Zero(G);
      for (int j = 0; j < m.J(); ++j) gsum(gid[j]) += xr(j);
      for (int j = 0; j < m.J(); ++j) {
        const double own_excl = gsum(gid[j]) - xr(j);
        out.values(row + j, c) =
            scope == SummationScope::OwnSide ? own_excl : total - xr(j) - own_excl;
      }
    }
    row += m.J();
  }
  out.validate();
  return out;
}

enum class DiffKind { Local, Quadratic, Cubic };

inline std::string to_string(DiffKind k) {
  switch (k) {
    case DiffKind::Local: return "local";
    case DiffKind::Quadratic: return "quadratic";
    case DiffKind::Cubic: return "cubic";
  }
  return "?";
}

/// Differentiation instruments: local counts 1(|x_k - x_j| < sd_t(x)) and
/// distance sums (x_k - x_j)^2, (x_k - x_j)^3, scoped like summation_ivs.
inline InstrumentMatrix differentiation_ivs(std::span<const Market> markets, IndexMode mode,
                                            SummationScope scope,
                                            const std::vector<DiffKind>& kinds) {
  InstrumentMatrix out;
  out.values.resize(detail::total_products(markets), kinds.size());
  for (std::size_t c = 0; c < kinds.size(); ++c)
    out.labels.push_back("diff_" + to_string(kinds[c]) + "_" + detail::mode_tag(mode) +
                         (scope == SummationScope::OtherSide ? "_other" : ""));
  long long row = 0;
  for (const auto& m : markets) {
    const int J = m.J();
    if (J < 2) throw DomainError("differentiation IVs need J >= 2 per market");
    const double mean = m.x.mean();
    const double sd = std::sqrt((m.x.array() - mean).square().sum() / (J - 1));
    const auto& gid = detail::group_ids(m, mode);
    for (int j = 0; j < J; ++j) {
      for (std::size_t c = 0; c < kinds.size(); ++c) {
        double acc = 0.0;
        for (int k = 0; k < J; ++k) {
          if (k == j) continue;
          const bool in_group = gid[k] == gid[j];
          if ((scope == SummationScope::OwnSide) != in_group) continue;
          const double d = m.x(k) - m.x(j);
          switch (kinds[c]) {
            case DiffKind::Local: acc += std::abs(d) < sd ? 1.0 : 0.0; break;
            case DiffKind::Quadratic: acc += d * d; break;
            case DiffKind::Cubic: acc += d * d * d; break;
          }
        }
        out.values(row + j, c) = acc;
      }
    }
    row += J;
  }
  out.validate();
  return out;
}

namespace detail {

inline InstrumentMatrix build_family(std::span<const Market> markets, IvForm form, IndexMode mode,
                                     SummationScope scope) {
  switch (form) {
    case IvForm::SumOrder2: return summation_ivs(markets, mode, scope, {1, 2});
    case IvForm::SumOrder3: return summation_ivs(markets, mode, scope, {1, 2, 3});
    case IvForm::DiffOrder2:
      return differentiation_ivs(markets, mode, scope, {DiffKind::Local, DiffKind::Quadratic});
    case IvForm::DiffOrder3:
      return differentiation_ivs(markets, mode, scope,
                                 {DiffKind::Local, DiffKind::Quadratic, DiffKind::Cubic});
  }
  throw ConfigError("unknown iv_form");
}

}  // namespace detail

/// The test's two instrument sets: z_comp from the observed firm index,
/// z_coll from the suspected effective-firm index, same family and orders.
inline std::pair<InstrumentMatrix, InstrumentMatrix> iv_set_for_test(
    std::span<const Market> markets, IvForm form) {
  return {detail::build_family(markets, form, IndexMode::ObservedFirm, SummationScope::OwnSide),
          detail::build_family(markets, form, IndexMode::SuspectedGroup, SummationScope::OwnSide)};
}

/// Excluded instruments for demand estimation: observed-index own- and
/// other-firm sets of the matching family, stacked column-wise.
inline InstrumentMatrix demand_ivs(std::span<const Market> markets, IvForm form) {
  InstrumentMatrix own =
      detail::build_family(markets, form, IndexMode::ObservedFirm, SummationScope::OwnSide);
  InstrumentMatrix other =
      detail::build_family(markets, form, IndexMode::ObservedFirm, SummationScope::OtherSide);
  InstrumentMatrix out;
  out.values.resize(own.values.rows(), own.values.cols() + other.values.cols());
  out.values << own.values, other.values;
  out.labels = own.labels;
  out.labels.insert(out.labels.end(), other.labels.begin(), other.labels.end());
  out.validate();
  return out;
}

}  // namespace conduct
