#pragma once

#include <random>

#include "rpgcm/design.hpp"
#include "rpgcm/information.hpp"
#include "rpgcm/model.hpp"
#include "rpgcm/moments.hpp"

// Deterministic generators and independent oracles shared by the test
// suites. The oracles (finite differences, dense inversion) must stay
// independent of the implementation paths they check.

namespace testsupport {

using namespace rpgcm;

using Urng = std::mt19937_64;

inline double runif(Urng& g, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(g);
}

inline int rint(Urng& g, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(g);
}

inline VectorXd increasing_times(Urng& g, int J) {
  VectorXd t(J);
  double cur = runif(g, -1.0, 1.0);
  for (int j = 0; j < J; ++j) {
    t[j] = cur;
    cur += runif(g, 0.3, 1.5);
  }
  return t;
}

/// Random model of any variant with moderate parameter values, so means
/// stay in a well-conditioned range.
inline ModelSpec random_model(Urng& g, const VectorXd& times, bool require_intercept = false) {
  int J = static_cast<int>(times.size());
  int which = require_intercept ? rint(g, 0, 2) : rint(g, 0, 3);
  switch (which) {
    case 0: {  // unstructured (intercept implicit when saturated)
      VectorXd beta(J);
      for (int j = 0; j < J; ++j) beta[j] = runif(g, -1.0, 2.0);
      return ModelSpec::unstructured(beta, times);
    }
    case 1: {  // straight line
      return ModelSpec::straight_line(runif(g, -1.0, 1.5), runif(g, -0.8, 0.8));
    }
    case 2: {  // exponential saturation
      VectorXd beta(3);
      beta << runif(g, 0.5, 3.0), runif(g, 0.5, 2.5), runif(g, 0.2, 2.0);
      if (J < 3) return ModelSpec::straight_line(runif(g, -1.0, 1.5), runif(g, -0.8, 0.8));
      return ModelSpec::exponential_saturation(beta);
    }
    default: {  // linear predictor without intercept
      std::vector<BasisFn> basis = {BasisFn::identity()};
      VectorXd beta(1);
      beta << runif(g, -0.6, 0.6);
      return ModelSpec::linear(std::move(basis), beta);
    }
  }
}

/// Layout with heterogeneous per-item easiness.
inline ItemLayout random_layout(Urng& g, const VectorXd& times, int n_max,
                                bool allow_empty = true) {
  int J = static_cast<int>(times.size());
  std::vector<int> counts(J, 0);
  int total = 0;
  for (int j = 0; j < J; ++j) {
    counts[j] = rint(g, allow_empty ? 0 : 1, std::max(1, n_max / J));
    total += counts[j];
  }
  if (total == 0) counts[rint(g, 0, J - 1)] = 1;
  ItemLayout l;
  l.times = times;
  l.counts = counts;
  for (int j = 0; j < J; ++j) {
    VectorXd s(counts[j]);
    for (int k = 0; k < counts[j]; ++k) s[k] = runif(g, 0.5, 2.0);
    l.easiness.push_back(s);
  }
  l.check();
  return l;
}

inline Design random_design(Urng& g, int J, double floor = 0.02) {
  VectorXd w(J);
  for (int j = 0; j < J; ++j) w[j] = floor + runif(g, 0.0, 1.0);
  return Design::normalized(w);
}

/// Central finite difference of eta with respect to beta component k.
inline double eta_fd(const ModelSpec& m, double t, int k, double rel_step = 1e-5) {
  double h = rel_step * std::max(1.0, std::abs(m.beta[k]));
  ModelSpec up = m, dn = m;
  up.beta[k] += h;
  dn.beta[k] -= h;
  return (eta(up, t) - eta(dn, t)) / (2.0 * h);
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

}  // namespace testsupport
