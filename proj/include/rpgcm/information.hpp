#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "rpgcm/model.hpp"
#include "rpgcm/moments.hpp"
#include "rpgcm/numeric.hpp"

// Standardized (per item) quasi-information M_Q(xi) and the D-criterion,
// computed entirely in J- and p-dimensional quantities. The n x n
// covariance of moments.hpp never appears here.

namespace rpgcm {

/// The full local-optimality context: time points, total item count,
/// common easiness, dispersion scale, intraclass correlation, and the
/// log mean ability model.
struct DesignProblem {
  VectorXd times;
  int n = 0;          // total items per person
  double sigma = 1.0; // common easiness (optimal by Loewner monotonicity)
  double tau = 0.0;   // random effect variance
  double rho = 0.0;   // intraclass correlation
  ModelSpec model;

  int J() const { return static_cast<int>(times.size()); }
  int p() const { return model.dim(); }
  double a() const { return static_cast<double>(n) * tau; }  // size related scale per subject

  void check() const {
    if (times.size() == 0) throw std::invalid_argument("times must be nonempty");
    for (Eigen::Index j = 1; j < times.size(); ++j)
      if (!(times[j] > times[j - 1]))
        throw std::invalid_argument("times must be strictly increasing");
    if (n < 1) throw std::invalid_argument("n must be a positive integer");
    if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
    if (!(tau >= 0.0)) throw std::invalid_argument("tau must be nonnegative");
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in [0,1]");
    model.check();
    if (model.dim() > J())
      throw std::invalid_argument("model dimension p exceeds the number of time points J");
    if (model.kind == ModelKind::Unstructured) {
      if (model.grid.size() != times.size())
        throw std::invalid_argument("unstructured model requires p = J");
      for (Eigen::Index j = 0; j < times.size(); ++j)
        if (!same_time(model.grid[j], times[j]))
          throw std::invalid_argument("unstructured model grid must equal the problem times");
    }
  }

  /// Per-item mean responses mu_j = sigma * exp(eta(t_j)).
  VectorXd mean_responses() const {
    VectorXd mu(J());
    for (int j = 0; j < J(); ++j) mu[j] = mean_response(model, sigma, times[j]);
    return mu;
  }
};

/// Approximate design: weights on the simplex.
struct Design {
  VectorXd weights;

  static Design normalized(VectorXd w) {
    for (Eigen::Index j = 0; j < w.size(); ++j)
      if (!(w[j] >= 0.0)) throw std::invalid_argument("weights must be nonnegative");
    double s = w.sum();
    if (!(s > 0.0)) throw std::invalid_argument("weights must not all vanish");
    w /= s;
    return Design{std::move(w)};
  }

  void check() const {
    for (Eigen::Index j = 0; j < weights.size(); ++j)
      if (!(weights[j] >= 0.0)) throw std::invalid_argument("weights must be nonnegative");
    if (std::abs(weights.sum() - 1.0) > 1e-12)
      throw std::invalid_argument("weights must sum to one");
  }
};

/// M_Q(xi) with its log determinant, the weighting vector u_j(w_j) and the
/// leading term M(xi).
struct QuasiInfo {
  MatrixXd matrix;  // M_Q(xi)
  double logdet;    // -inf when singular
  VectorXd u;       // u_j(w_j)
  MatrixXd core;    // M(xi) = F^T U F
};

/// Bound problem with the quantities every criterion evaluation needs:
/// regression matrix, mean responses, and the intercept vector when one
/// exists. Immutable after construction; criterion evaluations are pure.
class ProblemEval {
 public:
  explicit ProblemEval(DesignProblem pr) : problem_(std::move(pr)) {
    problem_.check();
    mu_ = problem_.mean_responses();
    F_ = regression_matrix(problem_.model, problem_.times).F;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(F_);
    full_rank_ = qr.rank() == F_.cols();
    intercept_ = intercept_vector({F_});
  }

  const DesignProblem& problem() const { return problem_; }
  const MatrixXd& F() const { return F_; }
  const VectorXd& mu() const { return mu_; }
  bool full_rank() const { return full_rank_; }
  const std::optional<VectorXd>& intercept() const { return intercept_; }
  int J() const { return problem_.J(); }
  int p() const { return problem_.p(); }

  /// u_j(w) = mu_j w / (1 + (1 - rho) n tau mu_j w); zero at w = 0.
  double u(int j, double w) const {
    if (w == 0.0) return 0.0;
    double mw = mu_[j] * w;
    return mw / (1.0 + (1.0 - problem_.rho) * problem_.a() * mw);
  }

  /// Analytic derivative mu_j / (1 + (1 - rho) n tau mu_j w)^2.
  double du(int j, double w) const {
    double d = 1.0 + (1.0 - problem_.rho) * problem_.a() * mu_[j] * w;
    return mu_[j] / (d * d);
  }

  /// Second derivative of u_j, used by the Newton polish of the optimizer.
  double ddu(int j, double w) const {
    double b = (1.0 - problem_.rho) * problem_.a();
    double d = 1.0 + b * mu_[j] * w;
    return -2.0 * b * mu_[j] * mu_[j] / (d * d * d);
  }

  VectorXd u_vector(const VectorXd& w) const {
    VectorXd v(J());
    for (int j = 0; j < J(); ++j) v[j] = u(j, w[j]);
    return v;
  }

  /// Leading term M(xi) = F^T U(xi) F.
  MatrixXd core(const VectorXd& w) const {
    return F_.transpose() * u_vector(w).asDiagonal() * F_;
  }

  /// Full standardized quasi-information of a design.
  QuasiInfo quasi(const VectorXd& w) const {
    QuasiInfo q;
    q.u = u_vector(w);
    q.core = F_.transpose() * q.u.asDiagonal() * F_;
    q.matrix = q.core;
    double rnt = problem_.rho * problem_.a();
    if (rnt > 0.0) {
      VectorXd v = F_.transpose() * q.u;
      q.matrix -= (rnt / (1.0 + rnt * q.u.sum())) * v * v.transpose();
    }
    q.logdet = log_det_psd(q.matrix);
    return q;
  }

  /// log det M_Q(xi). Uses the intercept shortcut
  /// log det M - log(1 + rho n tau 1'U1) when F c = 1_J, the general
  /// determinant-lemma form otherwise; -inf sentinel on singularity so
  /// simplex optimizers can evaluate boundary points.
  double criterion(const VectorXd& w) const {
    VectorXd uv = u_vector(w);
    MatrixXd M = F_.transpose() * uv.asDiagonal() * F_;
    double rnt = problem_.rho * problem_.a();
    if (rnt == 0.0) return log_det_psd(M);
    double S = uv.sum();
    if (intercept_) {
      double ld = log_det_psd(M);
      return ld == kNegInf ? kNegInf : ld - std::log1p(rnt * S);
    }
    Eigen::LDLT<MatrixXd> ldlt(M);
    if (ldlt.info() != Eigen::Success) return kNegInf;
    VectorXd d = ldlt.vectorD();
    double dmax = d.maxCoeff();
    if (!(dmax > 0.0)) return kNegInf;
    double ld = 0.0;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if (!(d[i] > kPivotTol * dmax)) return kNegInf;
      ld += std::log(d[i]);
    }
    VectorXd v = F_.transpose() * uv;
    // 1'(U - U F M^{-1} F^T U)1 >= 0 because U^(1/2) F M^{-1} F^T U^(1/2)
    // is a projection; clamp roundoff.
    double rem = std::max(S - v.dot(ldlt.solve(v)), 0.0);
    return ld - std::log1p(rnt * S) + std::log1p(rnt * rem);
  }

 private:
  DesignProblem problem_;
  MatrixXd F_;
  VectorXd mu_;
  bool full_rank_ = false;
  std::optional<VectorXd> intercept_;
};

inline double u_weight(const DesignProblem& pr, int j, double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("weight must lie in [0,1]");
  if (w == 0.0) return 0.0;
  double mu = mean_response(pr.model, pr.sigma, pr.times[j]);
  double mw = mu * w;
  return mw / (1.0 + (1.0 - pr.rho) * pr.a() * mw);
}

inline double u_weight_derivative(const DesignProblem& pr, int j, double w) {
  double mu = mean_response(pr.model, pr.sigma, pr.times[j]);
  double d = 1.0 + (1.0 - pr.rho) * pr.a() * mu * w;
  return mu / (d * d);
}

inline MatrixXd core_matrix(const DesignProblem& pr, const Design& xi) {
  xi.check();
  return ProblemEval(pr).core(xi.weights);
}

inline QuasiInfo quasi_info(const DesignProblem& pr, const Design& xi) {
  xi.check();
  return ProblemEval(pr).quasi(xi.weights);
}

/// Intercept representation (M(xi)^{-1} + rho n tau c c^T)^{-1}. Requires
/// F c = 1_J and a nonsingular M(xi); this is the alternate algebraic route
/// against which quasi_info is cross-checked.
inline QuasiInfo quasi_info_intercept_form(const DesignProblem& pr, const Design& xi,
                                           const VectorXd& c) {
  xi.check();
  ProblemEval ev(pr);
  if ((ev.F() * c - VectorXd::Ones(ev.J())).cwiseAbs().maxCoeff() > 1e-8)
    throw std::invalid_argument("c does not satisfy F c = 1_J");
  QuasiInfo q;
  q.u = ev.u_vector(xi.weights);
  q.core = ev.F().transpose() * q.u.asDiagonal() * ev.F();
  if (log_det_psd(q.core) == kNegInf)
    throw std::invalid_argument("M(xi) is singular; use quasi_info for this design");
  MatrixXd inner = q.core.inverse() + pr.rho * pr.a() * c * c.transpose();
  q.matrix = inner.inverse();
  q.logdet = log_det_psd(q.matrix);
  return q;
}

inline double d_criterion(const DesignProblem& pr, const Design& xi) {
  xi.check();
  return ProblemEval(pr).criterion(xi.weights);
}

/// Individual quasi-information D^T V^{-1} D of one test person through the
/// structured representation: F^T U F minus the rank-one correction, with
/// u_j driven by the total mean response of block j. Valid for empty blocks
/// and heterogeneous easiness; never materializes V.
inline MatrixXd individual_quasi_info(const ModelSpec& model, const ItemLayout& layout,
                                      double tau, double rho) {
  layout.check();
  if (!(tau >= 0.0)) throw std::invalid_argument("tau must be nonnegative");
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in [0,1]");
  MatrixXd F = regression_matrix(model, layout.times).F;
  const int J = layout.blocks();
  VectorXd u(J);
  for (int j = 0; j < J; ++j) {
    double mdot = 0.0;
    for (Eigen::Index k = 0; k < layout.easiness[j].size(); ++k)
      mdot += mean_response(model, layout.easiness[j][k], layout.times[j]);
    u[j] = mdot / (1.0 + (1.0 - rho) * tau * mdot);
  }
  MatrixXd M = F.transpose() * u.asDiagonal() * F;
  if (rho * tau > 0.0) {
    VectorXd v = F.transpose() * u;
    M -= (rho * tau / (1.0 + rho * tau * u.sum())) * v * v.transpose();
  }
  return M;
}

}  // namespace rpgcm
