#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpgcm/information.hpp"
#include "rpgcm/moments.hpp"
#include "rpgcm/parallel.hpp"

// Data generation from the longitudinal count model (multivariate gamma
// effects + conditional Poisson) and maximum quasi-likelihood estimation by
// modified Fisher scoring.

namespace rpgcm {

/// Deterministic xoshiro256++ generator seeded through splitmix64.
/// Per-person substreams are derived by counter so person-level parallelism
/// is reproducible bit-exactly regardless of the thread count.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::uint64_t x = seed ^ (0x9E3779B97F4A7C15ULL * (stream + 0x632BE59BD9B4E019ULL));
    for (int i = 0; i < 4; ++i) s_[i] = splitmix(x);
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  Rng substream(std::uint64_t index) const { return Rng(s_[0] ^ s_[3], index + 1); }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform on [0,1) with 53 random bits.
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double unit_pos() {
    double u;
    do {
      u = unit();
    } while (u <= 0.0);
    return u;
  }

  /// Standard normal by the Marsaglia polar method.
  double normal() {
    for (;;) {
      double u = 2.0 * unit() - 1.0;
      double v = 2.0 * unit() - 1.0;
      double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
    }
  }

  /// Gamma(shape, scale) by Marsaglia-Tsang squeeze sampling, valid for all
  /// positive shapes via the boost G(k) = G(k+1) U^{1/k} for k < 1.
  /// Nonpositive shape is the degenerate point mass at zero.
  double gamma(double shape, double scale) {
    if (!(shape > 0.0)) return 0.0;
    if (shape < 1.0) return gamma(shape + 1.0, scale) * std::pow(unit_pos(), 1.0 / shape);
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / (3.0 * std::sqrt(d));
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      double u = unit_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
    }
  }

  /// Poisson(mean): product-of-uniforms inversion below mean 10, Hoermann's
  /// PTRS transformed rejection above.
  long poisson(double mean) {
    if (!(mean > 0.0)) return 0;
    if (mean < 10.0) {
      const double limit = std::exp(-mean);
      long k = 0;
      double prod = unit_pos();
      while (prod > limit) {
        ++k;
        prod *= unit_pos();
      }
      return k;
    }
    const double b = 0.931 + 2.53 * std::sqrt(mean);
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    const double log_mean = std::log(mean);
    for (;;) {
      double u = unit() - 0.5;
      double v = unit_pos();
      double us = 0.5 - std::abs(u);
      double kf = std::floor((2.0 * a / us + b) * u + mean + 0.43);
      if (us >= 0.07 && v <= vr) return static_cast<long>(kf);
      if (kf < 0.0 || (us < 0.013 && v > us)) continue;
      if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
          kf * log_mean - mean - std::lgamma(kf + 1.0))
        return static_cast<long>(kf);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  std::uint64_t s_[4];
};

/// Random effect configuration. The gamma shapes alpha0 = rho/tau and
/// alpha = (1-rho)/tau satisfy alpha0 + alpha = 1/tau, so E(Lambda) = 1,
/// Var(Lambda) = tau and cov = rho tau. tau = 0 degenerates to the fixed
/// effect model with Lambda identically one.
struct EffectConfig {
  double tau = 0.0;
  double rho = 0.0;

  void check() const {
    if (!(tau >= 0.0)) throw std::invalid_argument("tau must be nonnegative");
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in [0,1]");
  }
  double alpha0() const { return tau > 0.0 ? rho / tau : 0.0; }
  double alpha() const { return tau > 0.0 ? (1.0 - rho) / tau : 0.0; }
};

/// One draw of the person effect vector Lambda = Gamma_0 + Gamma_j, with a
/// shared permanent effect and independent time effects. A shape of zero is
/// the point mass at zero, covering rho = 0 and rho = 1 exactly.
inline VectorXd draw_effects(const EffectConfig& cfg, int J, Rng& rng) {
  cfg.check();
  VectorXd lambda(J);
  if (cfg.tau == 0.0) {
    lambda.setOnes();
    return lambda;
  }
  double g0 = rng.gamma(cfg.alpha0(), cfg.tau);
  for (int j = 0; j < J; ++j) lambda[j] = g0 + rng.gamma(cfg.alpha(), cfg.tau);
  return lambda;
}

struct SimDataset {
  Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> responses;  // N x n
  ItemLayout layout;
  ModelSpec truth;
  EffectConfig effects;
  std::uint64_t seed = 0;

  int persons() const { return static_cast<int>(responses.rows()); }
};

/// Simulates N persons: each draws its effect vector, then independent
/// Poisson counts with intensity Lambda_j mu_jk per item. Persons are
/// independent and generated on per-person substreams.
inline SimDataset simulate(const ModelSpec& truth, const ItemLayout& layout,
                           const EffectConfig& cfg, int N, std::uint64_t seed,
                           unsigned threads = 0) {
  layout.check();
  cfg.check();
  if (N < 1) throw std::invalid_argument("N must be a positive integer");
  const int n = layout.total();
  const int J = layout.blocks();
  VectorXd mu(n);
  {
    int row = 0;
    for (int j = 0; j < J; ++j)
      for (int k = 0; k < layout.counts[j]; ++k, ++row)
        mu[row] = mean_response(truth, layout.easiness[j][k], layout.times[j]);
  }
  SimDataset ds;
  ds.responses.resize(N, n);
  ds.layout = layout;
  ds.truth = truth;
  ds.effects = cfg;
  ds.seed = seed;
  Rng base(seed);
  parallel_for(
      static_cast<std::size_t>(N),
      [&](std::size_t i) {
        Rng rng = base.substream(i);
        VectorXd lambda = draw_effects(cfg, J, rng);
        int row = 0;
        for (int j = 0; j < J; ++j)
          for (int k = 0; k < layout.counts[j]; ++k, ++row)
            ds.responses(static_cast<Eigen::Index>(i), row) = rng.poisson(lambda[j] * mu[row]);
      },
      threads);
  return ds;
}

/// Dataset export: person,time_index,item_index,count (1-based indices,
/// comma separated, LF line endings). Lossless round trip.
inline void write_dataset_csv(const SimDataset& ds, std::ostream& os) {
  os << "person,time_index,item_index,count\n";
  for (int i = 0; i < ds.persons(); ++i) {
    int row = 0;
    for (int j = 0; j < ds.layout.blocks(); ++j)
      for (int k = 0; k < ds.layout.counts[j]; ++k, ++row)
        os << (i + 1) << ',' << (j + 1) << ',' << (k + 1) << ',' << ds.responses(i, row) << '\n';
  }
}

struct CsvDataset {
  int persons = 0;
  std::vector<int> counts;  // items per time index
  Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> responses;
};

inline CsvDataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("dataset CSV is empty");
  // tolerate trailing CR from foreign writers
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "person,time_index,item_index,count")
    throw std::runtime_error("dataset CSV header must be person,time_index,item_index,count");
  struct Cell {
    int person, time, item;
    long count;
  };
  std::vector<Cell> cells;
  int max_person = 0, max_time = 0;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Cell c;
    char sep1, sep2, sep3;
    std::istringstream ls(line);
    if (!(ls >> c.person >> sep1 >> c.time >> sep2 >> c.item >> sep3 >> c.count) ||
        sep1 != ',' || sep2 != ',' || sep3 != ',')
      throw std::runtime_error("dataset CSV parse error at line " + std::to_string(lineno));
    if (c.person < 1 || c.time < 1 || c.item < 1 || c.count < 0)
      throw std::runtime_error("dataset CSV has invalid indices at line " + std::to_string(lineno));
    max_person = std::max(max_person, c.person);
    max_time = std::max(max_time, c.time);
    cells.push_back(c);
  }
  if (cells.empty()) throw std::runtime_error("dataset CSV contains no observations");
  CsvDataset out;
  out.persons = max_person;
  out.counts.assign(max_time, 0);
  for (const Cell& c : cells)
    out.counts[c.time - 1] = std::max(out.counts[c.time - 1], c.item);
  std::vector<int> offset(max_time, 0);
  int n = 0;
  for (int j = 0; j < max_time; ++j) {
    offset[j] = n;
    n += out.counts[j];
  }
  out.responses.setConstant(max_person, n, -1);
  for (const Cell& c : cells) {
    long& slot = out.responses(c.person - 1, offset[c.time - 1] + c.item - 1);
    if (slot >= 0) throw std::runtime_error("dataset CSV repeats a (person,time,item) cell");
    slot = c.count;
  }
  if ((out.responses.array() < 0).any())
    throw std::runtime_error("dataset CSV is missing (person,time,item) cells");
  return out;
}

/// Maximum quasi-likelihood fit.
struct MqlFit {
  VectorXd beta_hat;
  int iterations = 0;
  bool converged = false;
  double score_norm = std::numeric_limits<double>::infinity();
  MatrixXd quasi_info_at_fit;  // per-person D' V^{-1} D at beta_hat
  std::vector<double> score_trace;  // score norm per accepted iteration
  std::string message;
};

namespace detail {

/// Starting value: smoothed log block means regressed on the model
/// structure, used to seed the effect-free Poisson fit.
inline VectorXd heuristic_start(const VectorXd& ybar, const ItemLayout& layout,
                                const ModelSpec& shape) {
  const int J = layout.blocks();
  std::vector<int> nonempty;
  VectorXd logmean(J);
  int row = 0;
  for (int j = 0; j < J; ++j) {
    double total = 0.0, denom = 0.0;
    for (int k = 0; k < layout.counts[j]; ++k, ++row) {
      total += ybar[row];
      denom += layout.easiness[j][k];
    }
    if (layout.counts[j] > 0) {
      logmean[j] = std::log(std::max(total, 0.25) / denom);
      nonempty.push_back(j);
    } else {
      logmean[j] = 0.0;
    }
  }
  switch (shape.kind) {
    case ModelKind::Unstructured:
      return logmean;
    case ModelKind::LinearPredictor: {
      MatrixXd F(nonempty.size(), shape.dim());
      VectorXd y(nonempty.size());
      for (std::size_t r = 0; r < nonempty.size(); ++r) {
        F.row(static_cast<Eigen::Index>(r)) = gradient(shape, layout.times[nonempty[r]]).transpose();
        y[static_cast<Eigen::Index>(r)] = logmean[nonempty[r]];
      }
      return F.colPivHouseholderQr().solve(y);
    }
    case ModelKind::ExponentialSaturation: {
      VectorXd b(3);
      double ymax = logmean[nonempty.back()], ymin = logmean[nonempty.front()];
      b[0] = ymax + 0.05;
      b[1] = std::max(b[0] - ymin, 0.1);
      b[2] = 1.0;
      if (nonempty.size() >= 3) {
        int mid = nonempty[nonempty.size() / 2];
        double ta = layout.times[nonempty.front()], tb = layout.times[mid];
        double ra = b[0] - ymin, rb = std::max(b[0] - logmean[mid], 1e-8);
        double est = std::log(ra / rb) / (tb - ta);
        if (std::isfinite(est)) b[2] = std::min(std::max(est, 1e-3), 10.0);
      }
      return b;
    }
  }
  return VectorXd::Zero(shape.dim());
}

struct ScoreState {
  VectorXd score;
  MatrixXd info;
  double norm = std::numeric_limits<double>::infinity();
  bool valid = false;
};

inline ScoreState score_at(const VectorXd& beta, const VectorXd& ybar,
                           const ItemLayout& layout, ModelSpec model, double tau, double rho) {
  ScoreState st;
  model.beta = beta;
  try {
    MomentSet ms = assemble_moments(model, layout, tau, rho);
    Eigen::LLT<MatrixXd> llt(ms.V);
    if (llt.info() != Eigen::Success) return st;
    MatrixXd A = llt.solve(ms.D);  // V^{-1} D
    st.info = ms.D.transpose() * A;
    st.score = A.transpose() * (ybar - ms.mu);
    st.norm = st.score.norm();
    st.valid = st.score.allFinite() && st.info.allFinite();
  } catch (const std::exception&) {
    st.valid = false;
  }
  return st;
}

}  // namespace detail

/// Modified Fisher scoring for the generalized estimating equation
/// D' V^{-1} (Ybar - mu) = 0. tau and rho are treated as known. Steps are
/// halved (up to 10 times) when they increase the score norm. beta_init
/// defaults to the effect-free Poisson fit.
inline MqlFit mql_fit_mean(const VectorXd& ybar, int persons, const ItemLayout& layout,
                           const ModelSpec& shape, double tau, double rho,
                           std::optional<VectorXd> beta_init = {}) {
  (void)persons;  // the averaged estimating equation does not depend on N
  layout.check();
  if (!(tau >= 0.0)) throw std::invalid_argument("tau must be nonnegative");
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in [0,1]");

  // a zero observed total in an unstructured block has no finite estimate
  std::string degenerate;
  if (shape.kind == ModelKind::Unstructured) {
    int row = 0;
    for (int j = 0; j < layout.blocks(); ++j) {
      double total = 0.0;
      for (int k = 0; k < layout.counts[j]; ++k, ++row) total += ybar[row];
      if (layout.counts[j] > 0 && total <= 0.0) {
        degenerate = "zero observed count at time index " + std::to_string(j + 1) +
                     ": the unstructured log mean is unbounded below";
        break;
      }
    }
  }

  auto run = [&](VectorXd beta, double tau_run, double rho_run, int maxit, MqlFit& fit) {
    detail::ScoreState st = detail::score_at(beta, ybar, layout, shape, tau_run, rho_run);
    if (st.valid) fit.score_trace.push_back(st.norm);
    for (int it = 0; it < maxit; ++it) {
      if (!st.valid) {
        fit.message = "moment assembly failed during scoring";
        break;
      }
      fit.iterations += 1;
      if (st.norm <= 1e-8) {
        fit.converged = true;
        break;
      }
      Eigen::LDLT<MatrixXd> ldlt(st.info);
      VectorXd piv = ldlt.vectorD();
      if (ldlt.info() != Eigen::Success || !(piv.minCoeff() > kPivotTol * piv.maxCoeff()))
        throw std::runtime_error("singular quasi-information during Fisher scoring");
      VectorXd delta = ldlt.solve(st.score);
      double scale = 1.0;
      detail::ScoreState best;
      double best_scale = 0.0;
      for (int half = 0; half <= 10; ++half) {
        detail::ScoreState cand =
            detail::score_at(beta + scale * delta, ybar, layout, shape, tau_run, rho_run);
        if (cand.valid && (!best.valid || cand.norm < best.norm)) {
          best = cand;
          best_scale = scale;
        }
        if (cand.valid && cand.norm < st.norm) break;
        scale *= 0.5;
      }
      if (!best.valid) {
        fit.message = "no admissible scoring step";
        break;
      }
      double step_norm = (best_scale * delta).cwiseAbs().maxCoeff();
      beta += best_scale * delta;
      st = best;
      fit.score_trace.push_back(st.norm);
      if (beta.cwiseAbs().maxCoeff() > 100.0) {
        fit.message = "estimate diverged";
        break;
      }
      if (step_norm <= 1e-10) {
        fit.converged = st.norm <= 1e-6;
        break;
      }
    }
    fit.beta_hat = beta;
    fit.score_norm = st.norm;
    if (st.valid) fit.quasi_info_at_fit = st.info;
    return fit;
  };

  MqlFit fit;
  VectorXd beta0;
  if (beta_init) {
    if (beta_init->size() != shape.dim())
      throw std::invalid_argument("beta_init has the wrong dimension");
    beta0 = *beta_init;
  } else {
    MqlFit warm;
    run(detail::heuristic_start(ybar, layout, shape), 0.0, 0.0, 60, warm);
    beta0 = warm.beta_hat;
  }
  fit = MqlFit{};
  run(beta0, tau, rho, 100, fit);
  if (!degenerate.empty()) {
    fit.converged = false;
    fit.message = degenerate;
  }
  return fit;
}

inline MqlFit mql_fit(const SimDataset& data, const ModelSpec& shape, double tau, double rho,
                      std::optional<VectorXd> beta_init = {}) {
  VectorXd ybar = data.responses.cast<double>().colwise().mean();
  return mql_fit_mean(ybar, data.persons(), data.layout, shape, tau, rho, std::move(beta_init));
}

/// Inverse sample covariance of replicated estimates, for comparison with
/// N n M_Q(xi). Requires at least 200 converged replicates.
inline MatrixXd empirical_information(const std::vector<MqlFit>& fits) {
  std::vector<const MqlFit*> ok;
  for (const MqlFit& f : fits)
    if (f.converged) ok.push_back(&f);
  if (ok.size() < 200)
    throw std::invalid_argument("at least 200 converged replicates are required");
  const int p = static_cast<int>(ok.front()->beta_hat.size());
  VectorXd mean = VectorXd::Zero(p);
  for (const MqlFit* f : ok) mean += f->beta_hat;
  mean /= static_cast<double>(ok.size());
  MatrixXd cov = MatrixXd::Zero(p, p);
  for (const MqlFit* f : ok) {
    VectorXd d = f->beta_hat - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(ok.size() - 1);
  return cov.inverse();
}

}  // namespace rpgcm
