#pragma once

#include <Eigen/Dense>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "rpgcm/model.hpp"
#include "rpgcm/numeric.hpp"

// Item-level marginal moment structure of the longitudinal count model:
// the stacked mean vector mu, the n x n covariance V, the derivative matrix
// D, and the closed-form inverse of V. Everything here materializes dense
// n x n matrices and exists as a desk-scale oracle for the J- and
// p-dimensional production path in information.hpp.

namespace rpgcm {

/// Items presented per time point, with per-item easiness. Blocks may be
/// empty (n_j = 0), the response vector segment is then void.
struct ItemLayout {
  VectorXd times;
  std::vector<int> counts;
  std::vector<VectorXd> easiness;  // one vector per time block, length counts[j]

  static ItemLayout common(VectorXd times, std::vector<int> counts, double sigma) {
    ItemLayout l;
    l.times = std::move(times);
    l.counts = std::move(counts);
    l.easiness.reserve(l.counts.size());
    for (int c : l.counts) l.easiness.push_back(VectorXd::Constant(std::max(c, 0), sigma));
    l.check();
    return l;
  }

  int blocks() const { return static_cast<int>(counts.size()); }

  int total() const { return std::accumulate(counts.begin(), counts.end(), 0); }

  void check() const {
    if (static_cast<Eigen::Index>(counts.size()) != times.size())
      throw std::invalid_argument("layout: one item count per time point required");
    for (Eigen::Index j = 1; j < times.size(); ++j)
      if (!(times[j] > times[j - 1]))
        throw std::invalid_argument("layout: times must be strictly increasing");
    int n = 0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
      if (counts[j] < 0) throw std::invalid_argument("layout: item counts must be nonnegative");
      if (easiness[j].size() != counts[j])
        throw std::invalid_argument("layout: easiness block sizes must match item counts");
      for (Eigen::Index k = 0; k < easiness[j].size(); ++k)
        if (!(easiness[j][k] > 0.0))
          throw std::invalid_argument("layout: every easiness must be positive");
      n += counts[j];
    }
    if (n <= 0) throw std::invalid_argument("layout: total number of items must be positive");
  }
};

/// mu, V and D for one test person. Rows of D are mu_jk * f_beta(t_j).
struct MomentSet {
  VectorXd mu;  // stacked block means, length n
  MatrixXd V;   // n x n marginal covariance
  MatrixXd D;   // n x p derivative of mu with respect to beta
  ItemLayout layout;
};

/// Marginal moments per the mixed-effects covariance structure:
/// diag entries tau*mu^2 + mu, within-block tau*mu*mu', cross-block
/// rho*tau*mu*mu'.
inline MomentSet assemble_moments(const ModelSpec& model, const ItemLayout& layout,
                                  double tau, double rho) {
  layout.check();
  if (!(tau >= 0.0)) throw std::invalid_argument("tau must be nonnegative");
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in [0,1]");

  const int n = layout.total();
  const int p = model.dim();
  MomentSet ms;
  ms.layout = layout;
  ms.mu.resize(n);
  ms.D.resize(n, p);

  int row = 0;
  std::vector<int> offsets(layout.counts.size());
  for (int j = 0; j < layout.blocks(); ++j) {
    offsets[j] = row;
    if (layout.counts[j] == 0) continue;
    VectorXd f = gradient(model, layout.times[j]);
    for (int k = 0; k < layout.counts[j]; ++k, ++row) {
      double m = mean_response(model, layout.easiness[j][k], layout.times[j]);
      ms.mu[row] = m;
      ms.D.row(row) = m * f.transpose();
    }
  }

  // V = diag(mu) + (1-rho) tau blockdiag(mu_j mu_j^T) + rho tau mu mu^T
  ms.V = rho * tau * ms.mu * ms.mu.transpose();
  for (int j = 0; j < layout.blocks(); ++j) {
    int c = layout.counts[j];
    if (c == 0) continue;
    auto muj = ms.mu.segment(offsets[j], c);
    ms.V.block(offsets[j], offsets[j], c, c) += (1.0 - rho) * tau * muj * muj.transpose();
  }
  ms.V.diagonal() += ms.mu;
  return ms;
}

/// Closed-form inverse of V: block diagonal of C_j^{-1} minus a rank-one
/// term driven by the total mean responses mu_j. and the weights
/// u_j = mu_j. / (1 + (1-rho) tau mu_j.).
inline MatrixXd v_inverse_closed_form(const MomentSet& ms, double tau, double rho) {
  const int n = static_cast<int>(ms.mu.size());
  for (int i = 0; i < n; ++i)
    if (!(ms.mu[i] > 0.0)) throw std::invalid_argument("all means must be positive");

  MatrixXd inv = MatrixXd::Zero(n, n);
  VectorXd a(n);
  double u_sum = 0.0;
  int row = 0;
  for (int j = 0; j < ms.layout.blocks(); ++j) {
    int c = ms.layout.counts[j];
    if (c == 0) continue;
    auto muj = ms.mu.segment(row, c);
    double mdot = muj.sum();
    double denom = 1.0 + (1.0 - rho) * tau * mdot;
    inv.block(row, row, c, c) =
        MatrixXd(muj.cwiseInverse().asDiagonal()) -
        ((1.0 - rho) * tau / denom) * MatrixXd::Ones(c, c);
    a.segment(row, c).setConstant(1.0 / denom);
    u_sum += mdot / denom;
    row += c;
  }
  inv -= (rho * tau / (1.0 + rho * tau * u_sum)) * a * a.transpose();
  return inv;
}

/// D^T V^{-1} D by generic dense factorization of V. Deliberately
/// independent of the closed-form inverse; this is the oracle the
/// structured representations are verified against.
inline MatrixXd individual_quasi_info_bruteforce(const MomentSet& ms) {
  Eigen::LLT<MatrixXd> llt(ms.V);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("covariance matrix is not positive definite");
  return ms.D.transpose() * llt.solve(ms.D);
}

}  // namespace rpgcm
