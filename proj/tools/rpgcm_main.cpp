// Command line front end: parses a JSON problem configuration, dispatches
// to the design and simulation operations, and emits machine-readable
// results. Exit codes: 0 ok, 2 config error, 3 optimization failure,
// 4 dataset I/O failure, 5 estimator non-convergence.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "config.hpp"
#include "rpgcm/design.hpp"
#include "rpgcm/simulate.hpp"

namespace {

using namespace rpgcm;
using cli::Config;
using cli::ConfigError;
using cli::IoError;
using nlohmann::json;

constexpr int kExitConfig = 2;
constexpr int kExitOptimize = 3;
constexpr int kExitIo = 4;
constexpr int kExitNoConverge = 5;

std::string fmt6(double v) {
  if (v == kNegInf) return "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fmt_vec(const VectorXd& v) {
  std::ostringstream os;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    os << fmt6(v[i]);
  }
  return os.str();
}

json json_number(double v) {
  if (v == kNegInf) return nullptr;  // JSON has no -inf; null marks singularity
  return v;
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_path;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_out = true) {
  cmd->add_option("-c,--config", args.config_path, "JSON problem configuration")->required();
  cmd->add_option("--set", args.overrides,
                  "key=value override applied after parsing (repeatable)");
  if (with_out)
    cmd->add_option("-o,--out", args.out_path,
                    "write the JSON result document here ('-' for stdout)");
}

Config load(const CommonArgs& args) {
  json doc = cli::load_json_file(args.config_path);
  for (const std::string& s : args.overrides) cli::apply_override(doc, s);
  return cli::parse_config(doc);
}

void emit_json(const CommonArgs& args, const json& doc) {
  if (args.out_path.empty()) return;
  if (args.out_path == "-") {
    std::cout << doc.dump(2) << "\n";
    return;
  }
  std::ofstream out(args.out_path);
  if (!out) throw IoError("cannot write output file: " + args.out_path);
  out << doc.dump(2) << "\n";
}

void print_problem_line(const Config& cfg) {
  const DesignProblem& pr = cfg.problem;
  std::cout << "problem: model=" << to_string(pr.model.kind) << " J=" << pr.J()
            << " p=" << pr.p() << " n=" << pr.n << " sigma=" << fmt6(pr.sigma)
            << " tau=" << fmt6(pr.tau) << " rho=" << fmt6(pr.rho) << "\n";
  for (const std::string& w : pr.model.warnings()) std::cout << "note: " << w << "\n";
}

json result_base(const Config& cfg, const char* command) {
  json doc = cfg.resolved;
  doc["result"] = json::object();
  doc["result"]["command"] = command;
  return doc;
}

int cmd_optimize(const CommonArgs& args) {
  Config cfg = load(args);
  print_problem_line(cfg);
  OptimResult res = optimize(cfg.problem);
  std::cout << "method: " << to_string(res.method) << "  iterations: " << res.iterations
            << "\n";
  std::cout << "criterion: " << fmt6(res.criterion) << "\n";
  std::cout << "weights: " << fmt_vec(res.design.weights) << "\n";
  if (res.certificate.size() > 0)
    std::cout << "slacks: " << fmt_vec(res.certificate) << "\n";
  std::cout << "max violation: " << fmt6(res.max_violation) << "\n";
  std::cout << "certified: " << (res.certified ? "yes" : "no") << "\n";
  std::vector<int> rounded = round_to_exact(res.design, cfg.problem.n);
  std::cout << "rounded (n=" << cfg.problem.n << "):";
  for (int c : rounded) std::cout << ' ' << c;
  std::cout << "\n";
  if (!res.note.empty()) std::cout << "note: " << res.note << "\n";

  json doc = result_base(cfg, "optimize");
  doc["weights"] = cli::from_vector(res.design.weights);  // re-readable as a candidate
  json& r = doc["result"];
  r["criterion"] = json_number(res.criterion);
  r["weights"] = cli::from_vector(res.design.weights);
  r["slacks"] = cli::from_vector(res.certificate);
  r["max_violation"] = res.max_violation;
  r["certified"] = res.certified;
  r["method"] = to_string(res.method);
  r["iterations"] = res.iterations;
  r["rounded"] = {{"n", cfg.problem.n}, {"counts", rounded}};
  if (!res.note.empty()) r["note"] = res.note;

  if (cfg.weights) {
    double phi = d_criterion(cfg.problem, *cfg.weights);
    double eff =
        phi == kNegInf ? 0.0 : std::exp((phi - res.criterion) / cfg.problem.p());
    std::cout << "candidate efficiency: " << fmt6(eff) << "\n";
    r["candidate"] = {{"weights", cli::from_vector(cfg.weights->weights)},
                      {"criterion", json_number(phi)},
                      {"efficiency", eff}};
  }
  emit_json(args, doc);
  return 0;
}

int cmd_sensitivity(const CommonArgs& args) {
  Config cfg = load(args);
  if (!cfg.weights) throw ConfigError("sensitivity requires weights in the config");
  print_problem_line(cfg);
  VectorXd slack = sensitivity(cfg.problem, *cfg.weights);
  double maxv = slack.maxCoeff();
  double crit = d_criterion(cfg.problem, *cfg.weights);
  std::cout << "criterion: " << fmt6(crit) << "\n";
  std::cout << "slacks: " << fmt_vec(slack) << "\n";
  std::cout << "max violation: " << fmt6(maxv) << "\n";
  std::cout << "certified: " << (maxv <= 1e-6 ? "yes" : "no") << "\n";
  json doc = result_base(cfg, "sensitivity");
  json& r = doc["result"];
  r["criterion"] = json_number(crit);
  r["slacks"] = cli::from_vector(slack);
  r["max_violation"] = maxv;
  r["certified"] = maxv <= 1e-6;
  emit_json(args, doc);
  return 0;
}

int cmd_efficiency(const CommonArgs& args) {
  Config cfg = load(args);
  if (!cfg.weights) throw ConfigError("efficiency requires weights in the config");
  print_problem_line(cfg);
  EfficiencyReport rep = efficiency(cfg.problem, *cfg.weights);
  std::cout << "candidate weights: " << fmt_vec(rep.design.weights) << "\n";
  std::cout << "optimal weights: " << fmt_vec(rep.reference.design.weights) << "\n";
  std::cout << "efficiency: " << fmt6(rep.efficiency) << "\n";
  if (!rep.note.empty()) std::cout << "note: " << rep.note << "\n";
  json doc = result_base(cfg, "efficiency");
  json& r = doc["result"];
  r["efficiency"] = rep.efficiency;
  r["candidate_criterion"] = json_number(d_criterion(cfg.problem, *cfg.weights));
  r["optimal_weights"] = cli::from_vector(rep.reference.design.weights);
  r["optimal_criterion"] = json_number(rep.reference.criterion);
  if (!rep.note.empty()) r["note"] = rep.note;
  emit_json(args, doc);
  return 0;
}

int cmd_round(const CommonArgs& args) {
  Config cfg = load(args);
  if (!cfg.weights) throw ConfigError("round requires weights in the config");
  std::vector<int> counts = round_to_exact(*cfg.weights, cfg.problem.n);
  std::cout << "counts (n=" << cfg.problem.n << "):";
  for (int c : counts) std::cout << ' ' << c;
  std::cout << "\n";
  json doc = result_base(cfg, "round");
  doc["result"]["counts"] = counts;
  doc["result"]["n"] = cfg.problem.n;
  emit_json(args, doc);
  return 0;
}

int cmd_curve(const CommonArgs& args) {
  Config cfg = load(args);
  if (!cfg.sweep) throw ConfigError("curve requires a sweep block in the config");
  CurveTable table = weight_curve(cfg.problem, *cfg.sweep, cfg.weights);

  std::ostream* os = &std::cout;
  std::ofstream file;
  if (!args.out_path.empty() && args.out_path != "-") {
    file.open(args.out_path);
    if (!file) throw IoError("cannot write output file: " + args.out_path);
    os = &file;
  }
  *os << "# config: " << cfg.resolved.dump() << "\n";
  *os << cfg.sweep->parameter;
  switch (table.mode) {
    case CurveMode::OptimalWeights:
      for (int j = 1; j <= table.J; ++j) *os << ",w" << j;
      *os << ",criterion,certified";
      break;
    case CurveMode::CandidateEfficiency:
      *os << ",efficiency,criterion";
      break;
    case CurveMode::RhoCrit:
      *os << ",rho_crit";
      break;
  }
  *os << ",error\n";
  char buf[64];
  auto num = [&buf](double v) -> std::string {
    if (v == kNegInf) return "-inf";
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
  };
  for (const CurveRow& row : table.rows) {
    *os << num(row.value);
    switch (table.mode) {
      case CurveMode::OptimalWeights: {
        for (int j = 0; j < table.J; ++j)
          *os << ',' << (row.ok ? num(row.weights[j]) : "");
        *os << ',' << (row.ok ? num(row.criterion) : "");
        *os << ',' << (row.ok ? (row.certified ? "1" : "0") : "");
        break;
      }
      case CurveMode::CandidateEfficiency:
        *os << ',' << (row.ok ? num(row.efficiency) : "");
        *os << ',' << (row.ok ? num(row.criterion) : "");
        break;
      case CurveMode::RhoCrit:
        *os << ',' << (row.ok ? num(row.rho_crit) : "");
        break;
    }
    std::string err = row.error;
    for (char& c : err)
      if (c == ',' || c == '\n') c = ';';
    *os << ',' << err << "\n";
  }
  return 0;
}

int cmd_simulate(const CommonArgs& args) {
  Config cfg = load(args);
  if (!cfg.sim) throw ConfigError("simulate requires a sim block in the config");
  std::vector<int> counts;
  if (cfg.counts) {
    counts = *cfg.counts;
  } else if (cfg.weights) {
    counts = round_to_exact(*cfg.weights, cfg.problem.n);
  } else {
    throw ConfigError("simulate requires counts or weights in the config");
  }
  ItemLayout layout = ItemLayout::common(cfg.problem.times, counts, cfg.problem.sigma);
  EffectConfig effects{cfg.problem.tau, cfg.problem.rho};
  SimDataset ds = simulate(cfg.problem.model, layout, effects, cfg.sim->N, cfg.sim->seed);
  if (args.out_path.empty() || args.out_path == "-") {
    write_dataset_csv(ds, std::cout);
  } else {
    std::ofstream out(args.out_path, std::ios::binary);
    if (!out) throw IoError("cannot write dataset file: " + args.out_path);
    write_dataset_csv(ds, out);
    if (!out) throw IoError("failed while writing dataset file: " + args.out_path);
    std::cout << "dataset: " << args.out_path << "  persons=" << ds.persons()
              << " items=" << layout.total() << " seed=" << cfg.sim->seed << "\n";
  }
  return 0;
}

int cmd_estimate(const CommonArgs& args, const std::string& data_path) {
  Config cfg = load(args);
  CsvDataset data;
  {
    std::ifstream in(data_path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file: " + data_path);
    try {
      data = read_dataset_csv(in);
    } catch (const std::exception& e) {
      throw IoError(e.what());
    }
  }
  if (static_cast<Eigen::Index>(data.counts.size()) != cfg.problem.times.size())
    throw IoError("dataset has " + std::to_string(data.counts.size()) +
                  " time indices but the config has " +
                  std::to_string(cfg.problem.times.size()) + " time points");
  ItemLayout layout = ItemLayout::common(cfg.problem.times, data.counts, cfg.problem.sigma);
  VectorXd ybar = data.responses.cast<double>().colwise().mean();
  MqlFit fit = mql_fit_mean(ybar, data.persons, layout, cfg.problem.model, cfg.problem.tau,
                            cfg.problem.rho, cfg.beta_init);

  VectorXd se = VectorXd::Constant(fit.beta_hat.size(), std::nan(""));
  if (fit.quasi_info_at_fit.size() > 0) {
    MatrixXd total = static_cast<double>(data.persons) * fit.quasi_info_at_fit;
    Eigen::LDLT<MatrixXd> ldlt(total);
    if (ldlt.info() == Eigen::Success) {
      MatrixXd inv = ldlt.solve(MatrixXd::Identity(total.rows(), total.cols()));
      se = inv.diagonal().cwiseMax(0.0).cwiseSqrt();
    }
  }
  std::cout << "persons: " << data.persons << "\n";
  std::cout << "beta_hat: " << fmt_vec(fit.beta_hat) << "\n";
  std::cout << "se: " << fmt_vec(se) << "\n";
  std::cout << "iterations: " << fit.iterations << "  score_norm: " << fmt6(fit.score_norm)
            << "\n";
  std::cout << "converged: " << (fit.converged ? "yes" : "no") << "\n";
  if (!fit.message.empty()) std::cout << "note: " << fit.message << "\n";

  json doc = result_base(cfg, "estimate");
  json& r = doc["result"];
  r["persons"] = data.persons;
  r["beta_hat"] = cli::from_vector(fit.beta_hat);
  r["se"] = cli::from_vector(se);
  r["iterations"] = fit.iterations;
  r["score_norm"] = fit.score_norm;
  r["converged"] = fit.converged;
  if (!fit.message.empty()) r["note"] = fit.message;
  emit_json(args, doc);
  return fit.converged ? 0 : kExitNoConverge;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"locally D-optimal test allocation for longitudinal count models"};
  app.require_subcommand(1);

  CommonArgs a_opt, a_sens, a_eff, a_round, a_curve, a_sim, a_est;
  std::string data_path;

  add_common(app.add_subcommand("optimize", "compute certified optimal weights"), a_opt);
  add_common(app.add_subcommand("sensitivity", "equivalence certificate of a candidate design"),
             a_sens);
  add_common(app.add_subcommand("efficiency", "efficiency of a candidate design"), a_eff);
  add_common(app.add_subcommand("round", "round weights to integer item counts"), a_round);
  add_common(app.add_subcommand("curve", "one-parameter sweep, CSV output"), a_curve);
  add_common(app.add_subcommand("simulate", "generate a dataset, CSV output"), a_sim);
  CLI::App* est = app.add_subcommand("estimate", "maximum quasi-likelihood fit of a dataset");
  add_common(est, a_est);
  est->add_option("-d,--data", data_path, "dataset CSV (person,time_index,item_index,count)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? kExitConfig : 0;
  }

  try {
    if (app.got_subcommand("optimize")) return cmd_optimize(a_opt);
    if (app.got_subcommand("sensitivity")) return cmd_sensitivity(a_sens);
    if (app.got_subcommand("efficiency")) return cmd_efficiency(a_eff);
    if (app.got_subcommand("round")) return cmd_round(a_round);
    if (app.got_subcommand("curve")) return cmd_curve(a_curve);
    if (app.got_subcommand("simulate")) return cmd_simulate(a_sim);
    if (app.got_subcommand("estimate")) return cmd_estimate(a_est, data_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const OptimizeError& e) {
    std::cerr << "optimization error: " << e.what() << "\n";
    if (e.better())
      std::cerr << "better design found: " << fmt_vec(e.better()->weights) << "\n";
    return kExitOptimize;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOptimize;
  }
  return 0;
}
