#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "conduct/errors.hpp"

namespace conduct {

/// Quadrature rule transformed to integrate against the standard normal
/// density: integral f(v) dPhi(v) ~= sum_i weights[i] * f(nodes[i]).
struct Quadrature {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;

  int size() const { return static_cast<int>(nodes.size()); }

  /// Gauss-Hermite rule via Golub-Welsch, rescaled from weight exp(-t^2) to
  /// the standard normal (v = sqrt(2) t, w /= sqrt(pi)).
  static Quadrature gauss_hermite_normal(int n) {
    if (n < 1) throw ConfigError("quadrature node count must be >= 1");
    if (n == 1) {
      Quadrature q;
      q.nodes = Eigen::VectorXd::Zero(1);
      q.weights = Eigen::VectorXd::Ones(1);
      return q;
    }
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) {
      const double b = std::sqrt(i / 2.0);
      jac(i, i - 1) = b;
      jac(i - 1, i) = b;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jac);
    if (es.info() != Eigen::Success) throw NumericalError("Gauss-Hermite eigensolve failed");
    Quadrature q;
    q.nodes = std::numbers::sqrt2 * es.eigenvalues();
    q.weights = es.eigenvectors().row(0).transpose().array().square();
    q.weights /= q.weights.sum();  // exact mass 1 instead of sqrt(pi) rounding
    return q;
  }
};

}  // namespace conduct
