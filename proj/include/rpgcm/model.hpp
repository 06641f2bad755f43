#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpgcm/numeric.hpp"

namespace rpgcm {

/// exp() arguments above this overflow double; mean responses are computed
/// in the log domain and only exponentiated at the end.
inline constexpr double kLogMeanMax = 690.0;

inline bool same_time(double a, double b) {
  return std::abs(a - b) <= 1e-9 * std::max({1.0, std::abs(a), std::abs(b)});
}

/// Fixed catalog of regression functions for the linear-predictor model:
/// constant, identity, integer power of t, and dummy coding of a grid point.
struct BasisFn {
  enum class Kind { Constant, Identity, Power, Dummy };
  Kind kind = Kind::Constant;
  double param = 0.0;  // exponent for Power, reference time for Dummy

  static BasisFn constant() { return {Kind::Constant, 0.0}; }
  static BasisFn identity() { return {Kind::Identity, 0.0}; }
  static BasisFn power(double k) { return {Kind::Power, k}; }
  static BasisFn dummy(double t_ref) { return {Kind::Dummy, t_ref}; }

  double operator()(double t) const {
    switch (kind) {
      case Kind::Constant: return 1.0;
      case Kind::Identity: return t;
      case Kind::Power: return std::pow(t, param);
      case Kind::Dummy: return same_time(t, param) ? 1.0 : 0.0;
    }
    return 0.0;
  }

  std::string name() const {
    switch (kind) {
      case Kind::Constant: return "constant";
      case Kind::Identity: return "identity";
      case Kind::Power: {
        std::ostringstream os;
        os << "power:" << param;
        return os.str();
      }
      case Kind::Dummy: {
        std::ostringstream os;
        os << "dummy:" << param;
        return os.str();
      }
    }
    return "?";
  }
};

enum class ModelKind { Unstructured, LinearPredictor, ExponentialSaturation };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Unstructured: return "unstructured";
    case ModelKind::LinearPredictor: return "linear_predictor";
    case ModelKind::ExponentialSaturation: return "exponential_saturation";
  }
  return "?";
}

/// Log mean ability curve eta(t, beta): which curve family is in force plus
/// its parameter vector. The unstructured (anova type) variant carries the
/// time grid its dummy coding is defined on.
struct ModelSpec {
  ModelKind kind = ModelKind::ExponentialSaturation;
  VectorXd beta;
  std::vector<BasisFn> basis;  // LinearPredictor only
  VectorXd grid;               // Unstructured only

  static ModelSpec unstructured(VectorXd beta, VectorXd grid) {
    ModelSpec m;
    m.kind = ModelKind::Unstructured;
    m.beta = std::move(beta);
    m.grid = std::move(grid);
    m.check();
    return m;
  }

  static ModelSpec linear(std::vector<BasisFn> basis, VectorXd beta) {
    ModelSpec m;
    m.kind = ModelKind::LinearPredictor;
    m.basis = std::move(basis);
    m.beta = std::move(beta);
    m.check();
    return m;
  }

  static ModelSpec exponential_saturation(VectorXd beta) {
    ModelSpec m;
    m.kind = ModelKind::ExponentialSaturation;
    m.beta = std::move(beta);
    m.check();
    return m;
  }

  /// Straight line eta = beta1 + beta2 t.
  static ModelSpec straight_line(double b1, double b2) {
    VectorXd b(2);
    b << b1, b2;
    return linear({BasisFn::constant(), BasisFn::identity()}, std::move(b));
  }

  int dim() const { return static_cast<int>(beta.size()); }

  void check() const {
    for (Eigen::Index i = 0; i < beta.size(); ++i)
      if (!std::isfinite(beta[i]))
        throw std::invalid_argument("model.beta must be finite");
    switch (kind) {
      case ModelKind::Unstructured:
        if (grid.size() != beta.size())
          throw std::invalid_argument(
              "unstructured model requires one beta per grid time point (p = J)");
        for (Eigen::Index j = 1; j < grid.size(); ++j)
          if (!(grid[j] > grid[j - 1]))
            throw std::invalid_argument("unstructured model grid must be strictly increasing");
        break;
      case ModelKind::LinearPredictor:
        if (basis.empty() || static_cast<Eigen::Index>(basis.size()) != beta.size())
          throw std::invalid_argument(
              "linear predictor requires one beta per basis function");
        break;
      case ModelKind::ExponentialSaturation:
        if (beta.size() != 3)
          throw std::invalid_argument("exponential saturation model has p = 3 parameters");
        break;
    }
  }

  /// Soft diagnostics: conditions that do not invalidate the model but
  /// change its qualitative behavior.
  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (kind == ModelKind::ExponentialSaturation) {
      if (!(beta[1] > 0.0)) w.push_back("beta2 <= 0: curve is not increasing in t");
      if (!(beta[2] > 0.0)) w.push_back("beta3 <= 0: curve is not increasing in t");
    }
    return w;
  }

  /// Index of t in the unstructured grid; throws when t is off the grid
  /// (dummy coding is only defined on the grid).
  int grid_index(double t) const {
    for (Eigen::Index j = 0; j < grid.size(); ++j)
      if (same_time(t, grid[j])) return static_cast<int>(j);
    std::ostringstream os;
    os << "t = " << t << " is not a grid point of the unstructured model";
    throw std::domain_error(os.str());
  }
};

/// eta(t, beta), the log mean ability at time t.
inline double eta(const ModelSpec& m, double t) {
  double v = 0.0;
  switch (m.kind) {
    case ModelKind::Unstructured:
      v = m.beta[m.grid_index(t)];
      break;
    case ModelKind::LinearPredictor:
      for (std::size_t i = 0; i < m.basis.size(); ++i) v += m.beta[static_cast<Eigen::Index>(i)] * m.basis[i](t);
      break;
    case ModelKind::ExponentialSaturation:
      v = m.beta[0] - m.beta[1] * std::exp(-m.beta[2] * t);
      break;
  }
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << "eta is not finite at t = " << t << " for the " << to_string(m.kind) << " model";
    throw std::domain_error(os.str());
  }
  return v;
}

/// Marginal mean response mu = sigma * exp(eta(t, beta)) of one item of
/// easiness sigma at time t. Computed in the log domain; values beyond
/// double range raise instead of saturating.
inline double mean_response(const ModelSpec& m, double sigma, double t) {
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  double lm = std::log(sigma) + eta(m, t);
  if (lm > kLogMeanMax)
    throw std::overflow_error(
        "mean response overflows double precision; evaluate criteria on the log scale");
  return std::exp(lm);
}

/// Gradient f_beta(t) of eta(t, beta) with respect to beta.
inline VectorXd gradient(const ModelSpec& m, double t) {
  VectorXd g(m.dim());
  switch (m.kind) {
    case ModelKind::Unstructured:
      g.setZero();
      g[m.grid_index(t)] = 1.0;
      break;
    case ModelKind::LinearPredictor:
      for (std::size_t i = 0; i < m.basis.size(); ++i) g[static_cast<Eigen::Index>(i)] = m.basis[i](t);
      break;
    case ModelKind::ExponentialSaturation: {
      double e = std::exp(-m.beta[2] * t);
      g << 1.0, -e, m.beta[1] * t * e;
      break;
    }
  }
  return g;
}

/// Essential regression matrix: rows are f_beta(t_j) for all J time points.
struct RegressionMatrix {
  MatrixXd F;
  Eigen::Index rows() const { return F.rows(); }
  Eigen::Index cols() const { return F.cols(); }
};

inline RegressionMatrix regression_matrix(const ModelSpec& m, const VectorXd& times) {
  for (Eigen::Index j = 1; j < times.size(); ++j)
    if (!(times[j] > times[j - 1]))
      throw std::invalid_argument("times must be strictly increasing");
  MatrixXd F(times.size(), m.dim());
  for (Eigen::Index j = 0; j < times.size(); ++j) F.row(j) = gradient(m, times[j]).transpose();
  if (!F.allFinite())
    throw std::domain_error("model.basis must be finite at every time point");
  return {std::move(F)};
}

/// Least-squares solution c of F c = 1_J when the residual vanishes
/// (the intercept condition of the design theory); absent otherwise.
/// Absence is a valid result, not an error.
inline std::optional<VectorXd> intercept_vector(const RegressionMatrix& reg,
                                                double tol = 1e-8) {
  const MatrixXd& F = reg.F;
  if (F.rows() == 0 || F.cols() == 0) return std::nullopt;
  Eigen::ColPivHouseholderQR<MatrixXd> qr(F);
  if (qr.rank() < F.cols()) return std::nullopt;
  VectorXd c = qr.solve(VectorXd::Ones(F.rows()));
  double resid = (F * c - VectorXd::Ones(F.rows())).cwiseAbs().maxCoeff();
  if (resid > tol) return std::nullopt;
  return c;
}

}  // namespace rpgcm
