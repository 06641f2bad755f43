#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rpgcm/design.hpp"
#include "rpgcm/information.hpp"
#include "rpgcm/model.hpp"

// JSON problem configuration for the command line tool. One document
// describes the whole run; --set overrides are applied to the parsed
// document before validation so every output can embed the fully resolved
// configuration.

namespace rpgcm::cli {

using nlohmann::json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SimBlock {
  int N = 0;
  std::uint64_t seed = 0;
};

struct Config {
  DesignProblem problem;
  std::optional<Design> weights;
  std::optional<std::vector<int>> counts;
  std::optional<SweepSpec> sweep;
  std::optional<SimBlock> sim;
  std::optional<VectorXd> beta_init;
  json resolved;
};

inline VectorXd to_vector(const json& arr, const std::string& field) {
  if (!arr.is_array() || arr.empty())
    throw ConfigError(field + " must be a nonempty array of numbers");
  VectorXd v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) throw ConfigError(field + " must contain only numbers");
    v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
  }
  return v;
}

inline json from_vector(const VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

inline BasisFn parse_basis(const std::string& name, const VectorXd& times) {
  if (name == "constant") return BasisFn::constant();
  if (name == "identity") return BasisFn::identity();
  if (name.rfind("power:", 0) == 0) {
    try {
      return BasisFn::power(std::stod(name.substr(6)));
    } catch (const std::exception&) {
      throw ConfigError("model.basis: bad power exponent in '" + name + "'");
    }
  }
  if (name.rfind("dummy:", 0) == 0) {
    int idx = 0;
    try {
      idx = std::stoi(name.substr(6));
    } catch (const std::exception&) {
      throw ConfigError("model.basis: bad dummy index in '" + name + "'");
    }
    if (idx < 1 || idx > static_cast<int>(times.size()))
      throw ConfigError("model.basis: dummy index out of range in '" + name + "'");
    return BasisFn::dummy(times[idx - 1]);
  }
  throw ConfigError("model.basis: unknown basis '" + name +
                    "' (catalog: constant, identity, power:K, dummy:J)");
}

inline ModelSpec parse_model(const json& m, const VectorXd& times) {
  if (!m.is_object()) throw ConfigError("model must be an object");
  if (!m.contains("variant") || !m["variant"].is_string())
    throw ConfigError("model.variant must be a string");
  std::string variant = m["variant"].get<std::string>();
  if (!m.contains("beta")) throw ConfigError("model.beta is required");
  VectorXd beta = to_vector(m["beta"], "model.beta");
  try {
    if (variant == "unstructured") return ModelSpec::unstructured(beta, times);
    if (variant == "exponential_saturation") return ModelSpec::exponential_saturation(beta);
    if (variant == "linear_predictor") {
      if (!m.contains("basis") || !m["basis"].is_array())
        throw ConfigError("model.basis is required for the linear predictor");
      std::vector<BasisFn> basis;
      for (const json& b : m["basis"]) {
        if (!b.is_string()) throw ConfigError("model.basis entries must be strings");
        basis.push_back(parse_basis(b.get<std::string>(), times));
      }
      return ModelSpec::linear(std::move(basis), beta);
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  throw ConfigError("model.variant must be one of unstructured, linear_predictor, "
                    "exponential_saturation");
}

inline json model_to_json(const ModelSpec& m) {
  json j;
  j["variant"] = to_string(m.kind);
  j["beta"] = from_vector(m.beta);
  if (m.kind == ModelKind::LinearPredictor) {
    json basis = json::array();
    for (const BasisFn& b : m.basis) basis.push_back(b.name());
    j["basis"] = basis;
  }
  return j;
}

inline double require_number(const json& j, const std::string& field, double defval,
                             bool required) {
  if (!j.contains(field)) {
    if (required) throw ConfigError(field + " is required");
    return defval;
  }
  if (!j[field].is_number()) throw ConfigError(field + " must be a number");
  return j[field].get<double>();
}

inline Config parse_config(json doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  Config cfg;
  if (!doc.contains("times")) throw ConfigError("times is required");
  VectorXd times = to_vector(doc["times"], "times");
  if (!doc.contains("model")) throw ConfigError("model is required");

  cfg.problem.times = times;
  cfg.problem.model = parse_model(doc["model"], times);
  double n = require_number(doc, "n", 0, true);
  if (n != std::floor(n) || n < 1) throw ConfigError("n must be a positive integer");
  cfg.problem.n = static_cast<int>(n);
  cfg.problem.sigma = require_number(doc, "sigma", 1.0, false);
  cfg.problem.tau = require_number(doc, "tau", 0.0, false);
  cfg.problem.rho = require_number(doc, "rho", 0.0, false);
  try {
    cfg.problem.check();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  if (doc.contains("weights")) {
    VectorXd w = to_vector(doc["weights"], "weights");
    if (w.size() != times.size())
      throw ConfigError("weights must have one entry per time point");
    try {
      cfg.weights = Design::normalized(w);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("weights: ") + e.what());
    }
  }
  if (doc.contains("counts")) {
    if (!doc["counts"].is_array() ||
        doc["counts"].size() != static_cast<std::size_t>(times.size()))
      throw ConfigError("counts must have one entry per time point");
    std::vector<int> counts;
    int total = 0;
    for (const json& c : doc["counts"]) {
      if (!c.is_number_integer() || c.get<int>() < 0)
        throw ConfigError("counts must be nonnegative integers");
      counts.push_back(c.get<int>());
      total += counts.back();
    }
    if (total != cfg.problem.n)
      throw ConfigError("counts must sum to n");
    cfg.counts = counts;
  }
  if (doc.contains("sweep")) {
    const json& s = doc["sweep"];
    if (!s.is_object()) throw ConfigError("sweep must be an object");
    for (auto it = s.begin(); it != s.end(); ++it)
      if (it.key() != "parameter" && it.key() != "from" && it.key() != "to" &&
          it.key() != "steps")
        throw ConfigError("sweep has unknown field '" + it.key() + "'");
    if (!s.contains("parameter") || !s["parameter"].is_string())
      throw ConfigError("sweep must name exactly one parameter (a string)");
    SweepSpec sw;
    sw.parameter = s["parameter"].get<std::string>();
    sw.from = require_number(s, "from", 0.0, true);
    sw.to = require_number(s, "to", sw.from, false);
    double steps = require_number(s, "steps", 0.0, false);
    if (steps != std::floor(steps) || steps < 0)
      throw ConfigError("sweep.steps must be a nonnegative integer");
    sw.steps = static_cast<int>(steps);
    cfg.sweep = sw;
  }
  if (doc.contains("sim")) {
    const json& s = doc["sim"];
    if (!s.is_object()) throw ConfigError("sim must be an object");
    double N = require_number(s, "N", 0, true);
    if (N != std::floor(N) || N < 1) throw ConfigError("sim.N must be a positive integer");
    SimBlock blk;
    blk.N = static_cast<int>(N);
    double seed = require_number(s, "seed", 0, false);
    if (seed < 0 || seed != std::floor(seed)) throw ConfigError("sim.seed must be a nonnegative integer");
    blk.seed = static_cast<std::uint64_t>(seed);
    cfg.sim = blk;
  }
  if (doc.contains("beta_init")) {
    VectorXd b = to_vector(doc["beta_init"], "beta_init");
    if (b.size() != cfg.problem.model.beta.size())
      throw ConfigError("beta_init must match the model dimension");
    cfg.beta_init = b;
  }

  // resolved document: defaults expanded, derived model serialization
  json resolved = doc;
  resolved["model"] = model_to_json(cfg.problem.model);
  resolved["times"] = from_vector(cfg.problem.times);
  resolved["n"] = cfg.problem.n;
  resolved["sigma"] = cfg.problem.sigma;
  resolved["tau"] = cfg.problem.tau;
  resolved["rho"] = cfg.problem.rho;
  if (cfg.weights) resolved["weights"] = from_vector(cfg.weights->weights);
  cfg.resolved = resolved;
  return cfg;
}

/// Applies one `key=value` override to the parsed document. Keys are dot
/// paths; numeric components index arrays ("model.beta.2=1.5").
inline void apply_override(json& doc, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  std::string key = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;  // bare strings are allowed
  }
  json* node = &doc;
  std::istringstream path(key);
  std::string comp;
  std::vector<std::string> comps;
  while (std::getline(path, comp, '.')) comps.push_back(comp);
  if (comps.empty()) throw ConfigError("--set has an empty key");
  for (std::size_t i = 0; i + 1 < comps.size(); ++i) {
    const std::string& c = comps[i];
    bool numeric = !c.empty() && c.find_first_not_of("0123456789") == std::string::npos;
    if (numeric && node->is_array()) {
      std::size_t idx = std::stoul(c);
      if (idx >= node->size())
        throw ConfigError("--set " + key + ": index out of range at '" + c + "'");
      node = &(*node)[idx];
    } else if (node->is_object() || node->is_null()) {
      node = &(*node)[c];
    } else {
      throw ConfigError("--set " + key + ": cannot descend into '" + c + "'");
    }
  }
  const std::string& last = comps.back();
  if (node->is_array()) {
    std::size_t idx;
    try {
      idx = std::stoul(last);
    } catch (const std::exception&) {
      throw ConfigError("--set " + key + ": expected array index, got '" + last + "'");
    }
    if (idx >= node->size()) throw ConfigError("--set " + key + ": index out of range");
    (*node)[idx] = parsed;
  } else {
    (*node)[last] = parsed;
  }
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return doc;
}

}  // namespace rpgcm::cli
