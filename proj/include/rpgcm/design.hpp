#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpgcm/information.hpp"
#include "rpgcm/numeric.hpp"
#include "rpgcm/parallel.hpp"

// Locally D_Q-optimal designs: simplex optimization of the criterion,
// equivalence-theorem certification, efficiencies, the two-point closed
// forms, exact-design rounding and one-parameter sweeps.

namespace rpgcm {

struct OptimOptions {
  enum class Method { Auto, Grid, SimplexSolver, ClosedForm };
  Method method = Method::Auto;
  double certificate_tol = 1e-6;  // slack tolerance of the equivalence certificate
  double support_tol = 1e-6;      // weights above this count as support points
  int grid_steps = 100;           // coarse lattice resolution 1/grid_steps
  int max_ascent = 4000;
  int max_newton = 80;
  unsigned threads = 0;
};

enum class OptimMethod { Grid, SimplexSolver, ClosedForm };

inline const char* to_string(OptimMethod m) {
  switch (m) {
    case OptimMethod::Grid: return "grid";
    case OptimMethod::SimplexSolver: return "simplex_solver";
    case OptimMethod::ClosedForm: return "closed_form";
  }
  return "?";
}

/// Optimization failure. When a better design than the incumbent is known
/// (non-certifiable problems where the grid probe found an improvement),
/// it travels with the error.
class OptimizeError : public std::runtime_error {
 public:
  explicit OptimizeError(const std::string& msg, std::optional<Design> better = {})
      : std::runtime_error(msg), better_(std::move(better)) {}
  const std::optional<Design>& better() const { return better_; }

 private:
  std::optional<Design> better_;
};

struct OptimResult {
  Design design;
  double criterion = kNegInf;
  VectorXd certificate;        // per-j slack, LHS minus RHS of the equivalence condition
  double max_violation = 0.0;  // max_j slack_j (or probe improvement when no certificate)
  bool certified = false;
  OptimMethod method = OptimMethod::SimplexSolver;
  int iterations = 0;
  std::string note;
};

namespace detail {

/// Gradient data of the criterion for the two certifiable cases
/// (rho = 0, or an intercept vector exists). grad_j equals
/// u'_j(w_j) (f_j' M^{-1} f_j - r) with r the rank-one correction factor,
/// which is exactly the left-hand side of the equivalence condition.
struct CertDerivs {
  bool ok = false;
  VectorXd grad;
  VectorXd q;   // f_j' M^{-1} f_j
  double r = 0.0;
  MatrixXd K;   // F M^{-1} F', only when requested
};

inline CertDerivs cert_derivs(const ProblemEval& ev, const VectorXd& w, bool need_K) {
  CertDerivs d;
  const int J = ev.J();
  VectorXd uv = ev.u_vector(w);
  MatrixXd M = ev.F().transpose() * uv.asDiagonal() * ev.F();
  Eigen::LDLT<MatrixXd> ldlt(M);
  if (ldlt.info() != Eigen::Success) return d;
  VectorXd piv = ldlt.vectorD();
  if (!(piv.minCoeff() > kPivotTol * piv.maxCoeff())) return d;
  MatrixXd G = ldlt.solve(ev.F().transpose());  // p x J, columns M^{-1} f_j
  d.q.resize(J);
  for (int j = 0; j < J; ++j) d.q[j] = ev.F().row(j).dot(G.col(j));
  double rnt = ev.problem().rho * ev.problem().a();
  d.r = rnt > 0.0 ? rnt / (1.0 + rnt * uv.sum()) : 0.0;
  d.grad.resize(J);
  for (int j = 0; j < J; ++j) d.grad[j] = ev.du(j, w[j]) * (d.q[j] - d.r);
  if (need_K) d.K = ev.F() * G;
  d.ok = true;
  return d;
}

inline bool certifiable(const ProblemEval& ev) {
  return ev.problem().rho * ev.problem().a() == 0.0 || ev.intercept().has_value();
}

/// Central finite-difference gradient of the criterion, for the
/// non-certifiable case (0 < rho < 1 without an intercept).
inline VectorXd fd_gradient(const ProblemEval& ev, const VectorXd& w) {
  const int J = ev.J();
  VectorXd g(J);
  for (int j = 0; j < J; ++j) {
    double h = 1e-7 * std::max(w[j], 1e-2);
    VectorXd wp = w, wm = w;
    wp[j] += h;
    wm[j] = std::max(w[j] - h, 0.0);
    double fp = ev.criterion(wp), fm = ev.criterion(wm);
    g[j] = (fp - fm) / (wp[j] - wm[j]);
  }
  return g;
}

/// Projected gradient ascent with Armijo backtracking. Returns the number
/// of iterations spent; w is updated in place.
inline int ascent(const ProblemEval& ev, VectorXd& w, int maxit) {
  bool analytic = certifiable(ev);
  double f = ev.criterion(w);
  int pulls = 0;
  while (f == kNegInf && pulls++ < 60) {  // pull boundary starts inside
    w = 0.5 * w + 0.5 * VectorXd::Constant(w.size(), 1.0 / static_cast<double>(w.size()));
    f = ev.criterion(w);
  }
  if (f == kNegInf) return pulls;
  double step = 1.0;
  int it = 0;
  for (; it < maxit; ++it) {
    VectorXd g;
    if (analytic) {
      CertDerivs d = cert_derivs(ev, w, false);
      if (!d.ok) break;
      g = d.grad;
    } else {
      g = fd_gradient(ev, w);
    }
    double gs = g.cwiseAbs().maxCoeff();
    if (!(gs > 0.0) || !std::isfinite(gs)) break;
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt) {
      VectorXd cand = project_simplex(w + (step / gs) * g);
      VectorXd dir = cand - w;
      double fc = ev.criterion(cand);
      if (fc > f + 1e-4 * g.dot(dir) && fc > f) {
        w = cand;
        f = fc;
        step = std::min(step * 1.5, 1e6);
        moved = dir.cwiseAbs().maxCoeff() > 1e-13;
        break;
      }
      step *= 0.5;
      if (step < 1e-16) break;
    }
    if (!moved) break;
  }
  return it + pulls;
}

/// Active-set Newton on the stationarity system grad_j = lambda on the
/// support, sum of weights = 1. Drives support slacks to machine precision
/// so equivalence certificates come out far below tolerance. Only valid in
/// the certifiable cases.
inline int newton_polish(const ProblemEval& ev, VectorXd& w, const OptimOptions& opt) {
  const int J = ev.J();
  const double activity = 1e-10;
  int total_it = 0;
  // Newton steps are not ascent steps; keep the best design seen and fall
  // back to it if a step degrades the criterion or lands on a singular point
  double best_crit = ev.criterion(w);
  if (best_crit == kNegInf) return 0;
  VectorXd best_w = w;
  for (int outer = 0; outer < 12; ++outer) {
    std::vector<int> S;
    for (int j = 0; j < J; ++j)
      if (w[j] > activity) S.push_back(j);
    if (static_cast<int>(S.size()) < 1) break;
    bool stationary = false;
    for (int it = 0; it < opt.max_newton; ++it, ++total_it) {
      CertDerivs d = cert_derivs(ev, w, true);
      if (!d.ok) {
        w = best_w;
        return total_it;
      }
      const int s = static_cast<int>(S.size());
      double lambda = 0.0;
      for (int j : S) lambda += w[j] * d.grad[j];
      double scale = std::max(1.0, std::abs(lambda));
      double res = std::abs(w.sum() - 1.0) * scale;
      for (int j : S) res = std::max(res, std::abs(d.grad[j] - lambda));
      if (res <= 1e-12 * scale) {
        stationary = true;
        break;
      }
      // H_jk = d_jk u''_j (q_j - r) - u'_j u'_k (K_jk^2 - r^2)
      MatrixXd A = MatrixXd::Zero(s + 1, s + 1);
      VectorXd rhs(s + 1);
      for (int a = 0; a < s; ++a) {
        int j = S[a];
        double duj = ev.du(j, w[j]);
        for (int b = 0; b < s; ++b) {
          int k = S[b];
          double kk = d.K(j, k);
          A(a, b) = -duj * ev.du(k, w[k]) * (kk * kk - d.r * d.r);
        }
        A(a, a) += ev.ddu(j, w[j]) * (d.q[j] - d.r);
        A(a, s) = -1.0;
        A(s, a) = 1.0;
        rhs[a] = -(d.grad[j] - lambda);
      }
      rhs[s] = 1.0 - w.sum();
      Eigen::PartialPivLU<MatrixXd> lu(A);
      VectorXd delta = lu.solve(rhs);
      if (!delta.allFinite()) {
        w = best_w;
        return total_it;
      }
      double alpha = 1.0;
      for (int a = 0; a < s; ++a)
        if (delta[a] < 0.0 && w[S[a]] + alpha * delta[a] < 0.0)
          alpha = std::min(alpha, -w[S[a]] / delta[a]);
      for (int a = 0; a < s; ++a) w[S[a]] = std::max(w[S[a]] + alpha * delta[a], 0.0);
      lambda += alpha * delta[s];
      double crit = ev.criterion(w / w.sum());
      if (crit == kNegInf || crit < best_crit - 1e-7 * std::max(1.0, std::abs(best_crit))) {
        w = best_w;
        return total_it;
      }
      if (crit > best_crit) {
        best_crit = crit;
        best_w = w;
      }
      bool dropped = false;
      for (auto itS = S.begin(); itS != S.end();) {
        if (w[*itS] <= activity) {
          w[*itS] = 0.0;
          itS = S.erase(itS);
          dropped = true;
        } else {
          ++itS;
        }
      }
      if (dropped) break;  // support changed, restart with the new active set
    }
    if (!stationary) continue;
    // off-support check: reinstate any point with a positive slack
    CertDerivs d = cert_derivs(ev, w, false);
    if (!d.ok) break;
    double rhsval = w.dot(d.grad);
    int worst = -1;
    double worst_slack = 1e-11 * std::max(1.0, std::abs(rhsval));
    for (int j = 0; j < J; ++j) {
      if (w[j] > activity) continue;
      double slack = d.grad[j] - rhsval;
      if (slack > worst_slack) {
        worst_slack = slack;
        worst = j;
      }
    }
    if (worst < 0) break;
    double seed = 1e-4;
    for (int j : S) seed = std::min(seed, 0.5 * w[j]);
    w[worst] = seed;
    w /= w.sum();
    total_it += ascent(ev, w, 200);
  }
  return total_it;
}

inline double lattice_point_count(int J, int m) {
  double c = 1.0;
  for (int i = 1; i < J; ++i) c *= static_cast<double>(m + i) / static_cast<double>(i);
  return c;
}

/// Determinant of a packed lower-triangle symmetric matrix
/// (index (i,j), i >= j, at i(i+1)/2 + j). Nonpositive pivots yield a
/// nonpositive return value, which callers treat as singular.
inline double det_packed(const double* a, int p) {
  if (p == 1) return a[0];
  if (p == 2) return a[0] * a[2] - a[1] * a[1];
  if (p == 3)
    return a[0] * (a[2] * a[5] - a[4] * a[4]) - a[1] * (a[1] * a[5] - a[4] * a[3]) +
           a[3] * (a[1] * a[4] - a[2] * a[3]);
  double L[64];
  double det = 1.0;
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[i * (i + 1) / 2 + j];
      for (int k = 0; k < j; ++k) s -= L[i * (i + 1) / 2 + k] * L[j * (j + 1) / 2 + k];
      if (i == j) {
        if (!(s > 0.0)) return -1.0;
        det *= s;
        L[i * (i + 1) / 2 + j] = std::sqrt(s);
      } else {
        L[i * (i + 1) / 2 + j] = s / L[j * (j + 1) / 2 + j];
      }
    }
  }
  return det;
}

}  // namespace detail

/// Per-point slack of the equivalence condition (left side minus right
/// side), equal to the directional derivative of the criterion toward the
/// one-point design at t_j. All slacks <= 0 certify local D_Q-optimality;
/// equality holds on support points.
inline VectorXd sensitivity(const ProblemEval& ev, const Design& xi) {
  xi.check();
  if (!detail::certifiable(ev))
    throw std::runtime_error(
        "equivalence certificate requires rho = 0 or an intercept vector (F c = 1); "
        "use grid verification for this problem");
  detail::CertDerivs d = detail::cert_derivs(ev, xi.weights, false);
  if (!d.ok) throw std::runtime_error("M(xi) is singular; sensitivity is undefined");
  double rhs = xi.weights.dot(d.grad);
  return d.grad.array() - rhs;
}

inline VectorXd sensitivity(const DesignProblem& pr, const Design& xi) {
  return sensitivity(ProblemEval(pr), xi);
}

/// Best point of the weight lattice with step 1/m. Scans the entire
/// simplex lattice; used by certificate-soundness checks and as the
/// fallback verification when no equivalence certificate applies.
struct LatticeResult {
  double best_criterion = kNegInf;
  double improvement = kNegInf;  // best_criterion - incumbent
  std::vector<int> best_counts;
  long double points = 0;
};

inline LatticeResult lattice_scan(const ProblemEval& ev, double incumbent, int m,
                                  unsigned threads = 0) {
  const int J = ev.J();
  const int p = ev.p();
  const double rnt = ev.problem().rho * ev.problem().a();
  LatticeResult out;
  out.points = static_cast<long double>(detail::lattice_point_count(J, m));
  if (J == 1) {
    out.best_criterion = ev.criterion(VectorXd::Ones(1));
    out.improvement = out.best_criterion - incumbent;
    out.best_counts = {m};
    return out;
  }

  const bool fast = (rnt == 0.0 || ev.intercept().has_value()) && p <= 8 &&
                    std::isfinite(incumbent) && incumbent > -600.0;

  // u_j(k/m) tables and packed outer products f_j f_j'
  const int P = p * (p + 1) / 2;
  std::vector<double> utab(static_cast<std::size_t>(J) * (m + 1));
  for (int j = 0; j < J; ++j)
    for (int k = 0; k <= m; ++k)
      utab[static_cast<std::size_t>(j) * (m + 1) + k] =
          ev.u(j, static_cast<double>(k) / static_cast<double>(m));
  std::vector<double> G(static_cast<std::size_t>(J) * P);
  for (int j = 0; j < J; ++j)
    for (int i = 0; i < p; ++i)
      for (int l = 0; l <= i; ++l)
        G[static_cast<std::size_t>(j) * P + i * (i + 1) / 2 + l] = ev.F()(j, i) * ev.F()(j, l);

  struct Best {
    double ratio = -1.0;        // det(M)/(1 + rnt S), fast path
    double crit = kNegInf;      // slow path
    std::vector<int> counts;
  };

  unsigned nt = thread_budget(threads ? threads : 0);
  nt = std::max(1u, std::min<unsigned>(nt, static_cast<unsigned>(m + 1)));
  std::vector<Best> bests(nt);

  auto worker = [&](std::size_t tid) {
    Best& best = bests[tid];
    std::vector<int> counts(J, 0);
    std::vector<double> Mstack(static_cast<std::size_t>(J + 1) * P, 0.0);
    std::vector<double> Sstack(J + 1, 0.0);
    std::vector<double> leaf(P);

    auto eval_fast = [&](const double* Mp, double S) {
      double det = detail::det_packed(Mp, p);
      if (!(det > 0.0)) return;
      double ratio = det / (1.0 + rnt * S);
      if (ratio > best.ratio ||
          (ratio == best.ratio && !best.counts.empty() && counts < best.counts)) {
        best.ratio = ratio;
        best.counts = counts;
      }
    };
    auto eval_slow = [&](void) {
      VectorXd w(J);
      for (int j = 0; j < J; ++j) w[j] = static_cast<double>(counts[j]) / m;
      double c = ev.criterion(w);
      if (c > best.crit || (c == best.crit && !best.counts.empty() && counts < best.counts)) {
        best.crit = c;
        best.counts = counts;
      }
    };

    // depth-first over compositions of m into J parts, accumulating the
    // packed information partial sums level by level
    std::function<void(int, int)> rec = [&](int lvl, int rem) {
      const double* Mp = &Mstack[static_cast<std::size_t>(lvl) * P];
      if (lvl == J - 2) {
        for (int k = 0; k <= rem; ++k) {
          counts[lvl] = k;
          counts[lvl + 1] = rem - k;
          if (fast) {
            double ua = utab[static_cast<std::size_t>(lvl) * (m + 1) + k];
            double ub = utab[static_cast<std::size_t>(lvl + 1) * (m + 1) + rem - k];
            for (int i = 0; i < P; ++i)
              leaf[i] = Mp[i] + ua * G[static_cast<std::size_t>(lvl) * P + i] +
                        ub * G[static_cast<std::size_t>(lvl + 1) * P + i];
            eval_fast(leaf.data(), Sstack[lvl] + ua + ub);
          } else {
            eval_slow();
          }
        }
        return;
      }
      double* Mn = &Mstack[static_cast<std::size_t>(lvl + 1) * P];
      for (int k = 0; k <= rem; ++k) {
        counts[lvl] = k;
        double uk = utab[static_cast<std::size_t>(lvl) * (m + 1) + k];
        for (int i = 0; i < P; ++i) Mn[i] = Mp[i] + uk * G[static_cast<std::size_t>(lvl) * P + i];
        Sstack[lvl + 1] = Sstack[lvl] + uk;
        rec(lvl + 1, rem - k);
      }
    };

    // interleaved top-level assignment keeps the workers balanced
    for (int k0 = static_cast<int>(tid); k0 <= m; k0 += static_cast<int>(nt)) {
      counts[0] = k0;
      double u0 = utab[k0];
      double* M1 = &Mstack[P];
      for (int i = 0; i < P; ++i) M1[i] = u0 * G[i];
      Sstack[1] = u0;
      if (J == 2) {
        counts[1] = m - k0;
        if (fast) {
          double ub = utab[static_cast<std::size_t>(1) * (m + 1) + m - k0];
          for (int i = 0; i < P; ++i) leaf[i] = M1[i] + ub * G[static_cast<std::size_t>(1) * P + i];
          eval_fast(leaf.data(), Sstack[1] + ub);
        } else {
          eval_slow();
        }
      } else {
        rec(1, m - k0);
      }
    }
  };

  std::vector<std::thread> pool;
  for (unsigned t = 1; t < nt; ++t) pool.emplace_back(worker, t);
  worker(0);
  for (auto& th : pool) th.join();

  const Best* winner = nullptr;
  for (const Best& b : bests) {
    if (b.counts.empty()) continue;
    if (!winner) {
      winner = &b;
      continue;
    }
    double lhs = fast ? b.ratio : b.crit;
    double rhs = fast ? winner->ratio : winner->crit;
    if (lhs > rhs || (lhs == rhs && b.counts < winner->counts)) winner = &b;
  }
  if (winner) {
    out.best_counts = winner->counts;
    out.best_criterion = fast ? std::log(winner->ratio) : winner->crit;
    out.improvement = out.best_criterion - incumbent;
  }
  return out;
}

namespace detail {

/// Exhaustive criterion evaluation over a windowed sub-lattice
/// (lo_j <= k_j <= hi_j, sum k_j = m).
inline void windowed_best(const ProblemEval& ev, int m, const std::vector<int>& lo,
                          const std::vector<int>& hi, double& best_crit,
                          std::vector<int>& best_counts) {
  const int J = ev.J();
  std::vector<int> counts(J, 0);
  std::vector<int> min_tail(J + 1, 0), max_tail(J + 1, 0);
  for (int j = J - 1; j >= 0; --j) {
    min_tail[j] = min_tail[j + 1] + lo[j];
    max_tail[j] = max_tail[j + 1] + hi[j];
  }
  std::function<void(int, int)> rec = [&](int lvl, int rem) {
    if (lvl == J) {
      if (rem != 0) return;
      VectorXd w(J);
      for (int j = 0; j < J; ++j) w[j] = static_cast<double>(counts[j]) / m;
      double c = ev.criterion(w);
      if (c > best_crit) {
        best_crit = c;
        best_counts = counts;
      }
      return;
    }
    int kmin = std::max(lo[lvl], rem - max_tail[lvl + 1]);
    int kmax = std::min(hi[lvl], rem - min_tail[lvl + 1]);
    for (int k = kmin; k <= kmax; ++k) {
      counts[lvl] = k;
      rec(lvl + 1, rem - k);
    }
  };
  rec(0, m);
}

/// Nested grid refinement: coarse lattice, then two x10 refinements in a
/// window around the incumbent.
inline VectorXd grid_search(const ProblemEval& ev, const OptimOptions& opt, int& iterations) {
  const int J = ev.J();
  int m = opt.grid_steps;
  std::vector<int> lo(J, 0), hi(J, m);
  double best = kNegInf;
  std::vector<int> counts;
  windowed_best(ev, m, lo, hi, best, counts);
  iterations += static_cast<int>(std::min(detail::lattice_point_count(J, m), 1e9));
  if (counts.empty()) counts.assign(J, 0);
  for (int round = 0; round < 2; ++round) {
    int mf = m * 10;
    for (int j = 0; j < J; ++j) {
      lo[j] = std::max(0, counts[j] * 10 - 20);
      hi[j] = std::min(mf, counts[j] * 10 + 20);
    }
    best = kNegInf;
    std::vector<int> fine;
    windowed_best(ev, mf, lo, hi, best, fine);
    counts = fine.empty() ? std::vector<int>(J, 0) : fine;
    m = mf;
  }
  VectorXd w(J);
  for (int j = 0; j < J; ++j) w[j] = static_cast<double>(counts[j]) / m;
  return w;
}

}  // namespace detail

/// Saturated two-point closed form: w1* = sqrt(a2+1)/(sqrt(a1+1)+sqrt(a2+1))
/// with a_j = n tau mu_j. Independent of the correlation rho.
inline Design two_point_closed_form(double a1, double a2) {
  if (!(a1 >= 0.0 && a2 >= 0.0)) throw std::invalid_argument("a1, a2 must be nonnegative");
  double s1 = std::sqrt(a1 + 1.0), s2 = std::sqrt(a2 + 1.0);
  VectorXd w(2);
  w << s2 / (s1 + s2), s1 / (s1 + s2);
  return Design{w};
}

/// Efficiency of the design (w1, 1-w1) in the saturated two-point model.
inline double two_point_efficiency(double a1, double a2, double rho, double w1) {
  if (!(w1 > 0.0 && w1 < 1.0)) throw std::invalid_argument("w1 must lie strictly in (0,1)");
  double w2 = 1.0 - w1;
  double num = std::pow(std::sqrt((a1 + 1.0) * (a2 + 1.0)) + 1.0, 2) - rho * rho * a1 * a2;
  double den = (a1 + 1.0 / w1) * (a2 + 1.0 / w2) - rho * rho * a1 * a2;
  return std::sqrt(num / den);
}

enum class GainLimit { PlusInfinity, MinusInfinity };

/// Exact limits of the uniform design's efficiency in the saturated
/// two-point model as the gain beta2 - beta1 tends to +/- infinity.
/// Exposed as explicit limit evaluations, not numeric extrapolation.
inline double two_point_uniform_efficiency_limit(double a1, double rho, GainLimit which) {
  if (which == GainLimit::PlusInfinity) {
    double b = (1.0 - rho * rho) * a1;
    return std::sqrt((b + 1.0) / (b + 2.0));
  }
  return std::sqrt(0.5 + std::sqrt(a1 + 1.0) / (a1 + 2.0));  // rho drops out
}

/// Critical correlation above which the two-point design (1/2, 0, 1/2) is
/// optimal in the straight-line model with constant mean (J = 3, t = 0,1,2,
/// slope 0). Below the small-response threshold 2(sqrt(2)-1) the two-point
/// design is optimal for every rho, so the critical value is 0.
inline double rho_crit_straight_line(double a1) {
  if (!(a1 >= 0.0)) throw std::invalid_argument("a1 must be nonnegative");
  if (a1 <= 2.0 * (std::sqrt(2.0) - 1.0)) return 0.0;
  return 1.0 - 2.0 * (std::cbrt(2.0 + a1) - 1.0) / a1;
}

/// Efficient rounding of n w_j to integer item counts summing to n:
/// floors plus a largest-fractional-part top-up, ties toward earlier
/// time points.
inline std::vector<int> round_to_exact(const Design& xi, int n) {
  xi.check();
  if (n < 1) throw std::invalid_argument("n must be a positive integer");
  const int J = static_cast<int>(xi.weights.size());
  std::vector<int> counts(J);
  std::vector<std::pair<double, int>> frac(J);
  int used = 0;
  for (int j = 0; j < J; ++j) {
    double exact = static_cast<double>(n) * xi.weights[j];
    counts[j] = static_cast<int>(std::floor(exact));
    frac[j] = {exact - counts[j], j};
    used += counts[j];
  }
  std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int i = 0; i < n - used; ++i) counts[frac[i % J].second] += 1;
  return counts;
}

inline OptimResult optimize(const DesignProblem& pr, OptimOptions opt = {});

namespace detail {

inline OptimResult finish(const ProblemEval& ev, VectorXd w, OptimMethod method,
                          int iterations, const OptimOptions& opt) {
  OptimResult res;
  for (Eigen::Index j = 0; j < w.size(); ++j) w[j] = std::max(w[j], 0.0);
  w /= w.sum();
  res.design = Design{w};
  res.criterion = ev.criterion(w);
  res.method = method;
  res.iterations = iterations;
  if (res.criterion == kNegInf)
    throw OptimizeError(
        "criterion is singular at the computed design: the model is numerically "
        "unidentifiable at this parameter value");
  if (certifiable(ev)) {
    res.certificate = sensitivity(ev, res.design);
    res.max_violation = res.certificate.maxCoeff();
    res.certified = res.max_violation <= opt.certificate_tol;
    if (!res.certified) {
      std::ostringstream os;
      os << "equivalence certificate not satisfied (max slack " << res.max_violation << ")";
      res.note = os.str();
    }
    return res;
  }
  // no certificate available: verify on the coarse lattice, refined x10
  // around the incumbent. Every criterion evaluation goes through the full
  // determinant-lemma form here, so the scans carry a point budget: full
  // lattice when affordable, otherwise a window around the incumbent whose
  // radius shrinks with the dimension.
  const double slow_budget = 2e5;
  auto window_radius = [&](int J, int want) {
    int r = want;
    while (r > 1 && std::pow(2.0 * r + 1.0, J - 1) > slow_budget) r /= 2;
    return r;
  };
  int m = opt.grid_steps;
  double probe_best = kNegInf;
  std::vector<int> probe_counts;
  if (lattice_point_count(ev.J(), m) <= slow_budget) {
    LatticeResult lr = lattice_scan(ev, res.criterion, m, opt.threads);
    probe_best = lr.best_criterion;
    probe_counts = lr.best_counts;
  } else {
    int r = window_radius(ev.J(), 10);
    std::vector<int> lo(ev.J()), hi(ev.J());
    for (int j = 0; j < ev.J(); ++j) {
      int c = static_cast<int>(std::lround(w[j] * m));
      lo[j] = std::max(0, c - r);
      hi[j] = std::min(m, c + r);
    }
    windowed_best(ev, m, lo, hi, probe_best, probe_counts);
  }
  if (!probe_counts.empty()) {
    int mf = m * 10;
    int r = window_radius(ev.J(), 20);
    std::vector<int> lo(ev.J()), hi(ev.J());
    for (int j = 0; j < ev.J(); ++j) {
      lo[j] = std::max(0, probe_counts[j] * 10 - r);
      hi[j] = std::min(mf, probe_counts[j] * 10 + r);
    }
    std::vector<int> fine;
    double fine_best = probe_best;
    windowed_best(ev, mf, lo, hi, fine_best, fine);
    if (fine_best > probe_best) {
      probe_best = fine_best;
      probe_counts = fine;
      m = mf;
    }
  }
  res.max_violation = probe_best - res.criterion;
  res.certified = res.max_violation <= 1e-8;
  res.note = "verified by grid probe (no equivalence certificate for 0 < rho < 1 "
             "without an intercept)";
  if (!res.certified) {
    VectorXd bw(ev.J());
    for (int j = 0; j < ev.J(); ++j) bw[j] = static_cast<double>(probe_counts[j]) / m;
    std::ostringstream os;
    os << "grid probe found an improvement of " << res.max_violation
       << " over the returned design";
    throw OptimizeError(os.str(), Design{bw});
  }
  return res;
}

}  // namespace detail

/// Locally D_Q-optimal design. J <= 3 uses nested grid refinement, larger J
/// a projected-ascent simplex solver with a deterministic restart set
/// (uniform plus one vertex-leaning start per time point); both are
/// followed by an active-set Newton polish and certified by the
/// equivalence theorem where it applies, by grid probe otherwise.
inline OptimResult optimize(const DesignProblem& pr, OptimOptions opt) {
  pr.check();
  ProblemEval ev(pr);
  const int J = ev.J();
  const int p = ev.p();

  if (!ev.full_rank()) {
    if (J == p) {
      // Parameter-degenerate saturated model: the optimum depends on the
      // model only through the mean responses, so route through the
      // unstructured model with matched means. The criterion of the
      // original parameterization is singular everywhere, which is
      // reported as -inf alongside the limit weights.
      DesignProblem eq = pr;
      eq.model = ModelSpec::unstructured((ev.mu() / pr.sigma).array().log(), pr.times);
      OptimResult r = optimize(eq, opt);
      r.criterion = kNegInf;
      r.note = "regression matrix is rank deficient at this beta; weights are the "
               "saturated mean-response equivalence limit";
      return r;
    }
    throw OptimizeError(
        "regression matrix is rank deficient: the criterion is singular for every design");
  }

  if (J == 1) {
    OptimResult res;
    res.design = Design{VectorXd::Ones(1)};
    res.criterion = ev.criterion(res.design.weights);
    res.certificate = VectorXd::Zero(1);
    res.certified = true;
    res.method = OptimMethod::ClosedForm;
    return res;
  }

  using Method = OptimOptions::Method;
  Method m = opt.method;
  if (m == Method::Auto) m = J <= 3 ? Method::Grid : Method::SimplexSolver;

  if (m == Method::ClosedForm) {
    if (!(J == 2 && p == 2))
      throw OptimizeError("closed form requires a saturated two-point problem (J = p = 2)");
    VectorXd mu = ev.mu();
    Design xi = two_point_closed_form(pr.a() * mu[0], pr.a() * mu[1]);
    return detail::finish(ev, xi.weights, OptimMethod::ClosedForm, 0, opt);
  }

  if (m == Method::Grid) {
    int iterations = 0;
    VectorXd w = detail::grid_search(ev, opt, iterations);
    int polish_it = detail::ascent(ev, w, 400);
    if (detail::certifiable(ev)) polish_it += detail::newton_polish(ev, w, opt);
    return detail::finish(ev, w, OptimMethod::Grid, iterations + polish_it, opt);
  }

  // simplex solver: deterministic restarts, best-by-criterion merge with a
  // lexicographic tie-break
  std::vector<VectorXd> starts;
  starts.push_back(VectorXd::Constant(J, 1.0 / J));
  for (int j = 0; j < J; ++j) {
    VectorXd s = VectorXd::Constant(J, 0.1 / (J - 1));
    s[j] = 0.9;
    starts.push_back(s);
  }
  struct Run {
    VectorXd w;
    double crit = kNegInf;
    int iters = 0;
  };
  std::vector<Run> runs(starts.size());
  parallel_for(
      starts.size(),
      [&](std::size_t i) {
        VectorXd w = starts[i];
        int it = detail::ascent(ev, w, opt.max_ascent);
        if (detail::certifiable(ev)) it += detail::newton_polish(ev, w, opt);
        runs[i] = {w, ev.criterion(w), it};
      },
      opt.threads);
  int best = 0, total_it = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    total_it += runs[i].iters;
    if (runs[i].crit > runs[best].crit + 1e-12) {
      best = static_cast<int>(i);
    } else if (std::abs(runs[i].crit - runs[best].crit) <= 1e-12) {
      for (int j = 0; j < J; ++j) {
        if (runs[i].w[j] < runs[best].w[j] - 1e-12) {
          best = static_cast<int>(i);
          break;
        }
        if (runs[i].w[j] > runs[best].w[j] + 1e-12) break;
      }
    }
  }
  return detail::finish(ev, runs[best].w, OptimMethod::SimplexSolver, total_it, opt);
}

struct EfficiencyReport {
  Design design;
  OptimResult reference;
  double efficiency = 0.0;
  std::string note;
};

/// D_Q-efficiency of a candidate design: p-th root of the determinant ratio
/// against the locally optimal reference.
inline EfficiencyReport efficiency(const DesignProblem& pr, const Design& xi,
                                   OptimOptions opt = {}) {
  pr.check();
  xi.check();
  if (xi.weights.size() != pr.times.size())
    throw std::invalid_argument("candidate design must have one weight per time point");
  ProblemEval ev(pr);
  double phi = ev.criterion(xi.weights);
  OptimResult ref = optimize(pr, opt);
  EfficiencyReport rep;
  rep.design = xi;
  rep.reference = std::move(ref);
  if (phi == kNegInf) {
    rep.efficiency = 0.0;
    rep.note = "candidate design is singular under this problem (criterion -inf)";
    return rep;
  }
  rep.efficiency = std::exp((phi - rep.reference.criterion) / static_cast<double>(ev.p()));
  return rep;
}

/// One-parameter sweep specification: `steps` intervals from `from` to
/// `to` inclusive (steps = 0 evaluates the single value `from`).
struct SweepSpec {
  std::string parameter;
  double from = 0.0;
  double to = 0.0;
  int steps = 0;

  std::vector<double> values() const {
    if (steps < 0) throw std::invalid_argument("sweep.steps must be nonnegative");
    std::vector<double> v;
    if (steps == 0) {
      v.push_back(from);
      return v;
    }
    for (int i = 0; i <= steps; ++i)
      v.push_back(from + (to - from) * static_cast<double>(i) / static_cast<double>(steps));
    return v;
  }
};

enum class CurveMode { OptimalWeights, CandidateEfficiency, RhoCrit };

struct CurveRow {
  double value = 0.0;
  bool ok = false;
  std::string error;
  VectorXd weights;
  double criterion = kNegInf;
  double efficiency = 0.0;
  double rho_crit = 0.0;
  bool certified = false;
};

struct CurveTable {
  CurveMode mode = CurveMode::OptimalWeights;
  int J = 0;
  std::vector<CurveRow> rows;
};

inline DesignProblem apply_sweep_value(DesignProblem pr, const std::string& param, double v) {
  if (param == "rho") {
    pr.rho = v;
  } else if (param == "tau") {
    pr.tau = v;
  } else if (param == "sigma") {
    pr.sigma = v;
  } else if (param.rfind("beta", 0) == 0) {
    int k = std::stoi(param.substr(4));
    if (k < 1 || k > pr.model.dim())
      throw std::invalid_argument("sweep parameter " + param + " is out of range");
    pr.model.beta[k - 1] = v;
  } else {
    throw std::invalid_argument("unknown sweep parameter: " + param +
                                " (expected betaK, rho, tau, sigma, or a1)");
  }
  return pr;
}

/// Row-per-value sweep of certified optimal weights (or candidate
/// efficiencies, or the critical correlation when sweeping a1). Row
/// failures are recorded and the sweep continues.
inline CurveTable weight_curve(const DesignProblem& tmpl, const SweepSpec& sweep,
                               const std::optional<Design>& candidate = {},
                               OptimOptions opt = {}) {
  CurveTable table;
  std::vector<double> values = sweep.values();
  table.rows.resize(values.size());
  if (sweep.parameter == "a1") {
    table.mode = CurveMode::RhoCrit;
    for (std::size_t i = 0; i < values.size(); ++i) {
      CurveRow& row = table.rows[i];
      row.value = values[i];
      try {
        row.rho_crit = rho_crit_straight_line(values[i]);
        row.ok = true;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
    return table;
  }
  table.mode = candidate ? CurveMode::CandidateEfficiency : CurveMode::OptimalWeights;
  table.J = tmpl.J();
  OptimOptions row_opt = opt;
  row_opt.threads = 1;  // rows are the parallel unit
  parallel_for(
      values.size(),
      [&](std::size_t i) {
        CurveRow& row = table.rows[i];
        row.value = values[i];
        try {
          DesignProblem pr = apply_sweep_value(tmpl, sweep.parameter, values[i]);
          OptimResult res = optimize(pr, row_opt);
          row.weights = res.design.weights;
          row.criterion = res.criterion;
          row.certified = res.certified;
          if (candidate) {
            double phi = ProblemEval(pr).criterion(candidate->weights);
            row.efficiency = phi == kNegInf
                                 ? 0.0
                                 : std::exp((phi - res.criterion) / static_cast<double>(pr.p()));
          }
          row.ok = true;
        } catch (const std::exception& e) {
          row.error = e.what();
        }
      },
      opt.threads);
  return table;
}

}  // namespace rpgcm
