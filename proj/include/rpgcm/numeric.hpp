#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace rpgcm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Relative pivot threshold below which a symmetric factorization is
/// declared singular. Determinants of near-singular information matrices
/// are reported as -inf instead of noise.
inline constexpr double kPivotTol = 1e-12;

/// log det of a symmetric nonnegative-definite matrix via LDLT,
/// -inf when any pivot falls under the relative threshold.
inline double log_det_psd(const MatrixXd& m, double pivot_tol = kPivotTol) {
  if (m.rows() == 0) return 0.0;
  Eigen::LDLT<MatrixXd> ldlt(m);
  if (ldlt.info() != Eigen::Success) return kNegInf;
  VectorXd d = ldlt.vectorD();
  double dmax = d.maxCoeff();
  if (!(dmax > 0.0)) return kNegInf;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!(d[i] > pivot_tol * dmax)) return kNegInf;
    acc += std::log(d[i]);
  }
  return acc;
}

/// Smallest eigenvalue of a symmetric matrix (used by definiteness checks).
inline double min_eigenvalue(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

/// Largest entrywise deviation of a from b, scaled by the larger magnitude.
inline double relative_deviation(const MatrixXd& a, const MatrixXd& b) {
  double scale = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  if (scale == 0.0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

/// Euclidean projection onto the probability simplex {w >= 0, sum w = 1}.
inline VectorXd project_simplex(VectorXd v) {
  const Eigen::Index n = v.size();
  VectorXd s = v;
  std::sort(s.data(), s.data() + n, std::greater<double>());
  double cumsum = 0.0, theta = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    cumsum += s[i];
    double t = (cumsum - 1.0) / static_cast<double>(i + 1);
    if (s[i] - t > 0.0) theta = t;
  }
  for (Eigen::Index i = 0; i < n; ++i) v[i] = std::max(v[i] - theta, 0.0);
  return v;
}

}  // namespace rpgcm
