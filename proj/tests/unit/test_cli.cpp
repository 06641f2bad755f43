#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

// End-to-end checks of the command line tool. The binary path comes from
// the RPGCM_CLI environment variable set by the test harness.

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr interleaved
};

std::string cli_path() {
  const char* p = std::getenv("RPGCM_CLI");
  REQUIRE(p != nullptr);
  return p;
}

RunResult run_cli(const std::string& args) {
  std::string cmd = cli_path() + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  RunResult res;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (std::fgets(buf.data(), buf.size(), pipe)) res.output += buf.data();
  int status = pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

fs::path scratch_dir() {
  fs::path dir = fs::temp_directory_path() / "rpgcm_cli_tests";
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const std::string& name, const json& doc) {
  fs::path p = scratch_dir() / name;
  std::ofstream out(p);
  out << doc.dump(2);
  return p;
}

json table1_config() {
  return json{{"model", {{"variant", "exponential_saturation"}, {"beta", {3, 2, 1}}}},
              {"times", {0, 1, 2}},
              {"n", 120},
              {"sigma", 1.0},
              {"tau", 1.0},
              {"rho", 0.9}};
}

}  // namespace

TEST_CASE("optimize reproduces the three-point reference table in JSON", "[cli]") {
  fs::path cfg = write_config("t1.json", table1_config());
  fs::path out = scratch_dir() / "t1_out.json";
  RunResult r = run_cli("optimize -c " + cfg.string() + " -o " + out.string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("certified: yes") != std::string::npos);

  std::ifstream in(out);
  json doc = json::parse(in);
  auto w = doc["result"]["weights"];
  CHECK(std::abs(w[0].get<double>() - 0.510) < 0.002);
  CHECK(std::abs(w[1].get<double>() - 0.273) < 0.002);
  CHECK(std::abs(w[2].get<double>() - 0.217) < 0.002);
  CHECK(doc["result"]["certified"].get<bool>());
  CHECK(doc["result"]["rounded"]["counts"] == json({61, 33, 26}));
  // provenance: the resolved problem travels with the result
  CHECK(doc["rho"].get<double>() == 0.9);
  CHECK(doc["model"]["variant"] == "exponential_saturation");
}

TEST_CASE("optimize with a candidate also reports its efficiency", "[cli]") {
  json cfg = table1_config();
  cfg["weights"] = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  fs::path p = write_config("cand.json", cfg);
  fs::path out = scratch_dir() / "cand_out.json";
  RunResult r = run_cli("optimize -c " + p.string() + " -o " + out.string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("candidate efficiency:") != std::string::npos);
  std::ifstream in(out);
  json doc = json::parse(in);
  double eff = doc["result"]["candidate"]["efficiency"].get<double>();
  CHECK(eff > 0.9);
  CHECK(eff < 1.0);
  // the optimal weights overwrite the candidate in the emitted config block
  CHECK(std::abs(doc["weights"][0].get<double>() - 0.510) < 0.002);
}

TEST_CASE("optimize output re-reads as a candidate with efficiency one", "[cli]") {
  fs::path cfg = write_config("t1rt.json", table1_config());
  fs::path out = scratch_dir() / "t1rt_out.json";
  REQUIRE(run_cli("optimize -c " + cfg.string() + " -o " + out.string()).exit_code == 0);
  fs::path eff_out = scratch_dir() / "t1rt_eff.json";
  RunResult r = run_cli("efficiency -c " + out.string() + " -o " + eff_out.string());
  REQUIRE(r.exit_code == 0);
  std::ifstream in(eff_out);
  json doc = json::parse(in);
  CHECK(std::abs(doc["result"]["efficiency"].get<double>() - 1.0) <= 1e-6);
}

TEST_CASE("config validation exits 2 and names the field", "[cli]") {
  fs::path cfg = write_config("bad_rho.json", table1_config());
  RunResult r = run_cli("optimize -c " + cfg.string() + " --set rho=1.2");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("rho must lie in [0,1]") != std::string::npos);

  json noweights = table1_config();
  fs::path cfg2 = write_config("now.json", noweights);
  RunResult r2 = run_cli("efficiency -c " + cfg2.string());
  CHECK(r2.exit_code == 2);
  CHECK(r2.output.find("weights") != std::string::npos);

  json multi = table1_config();
  multi["sweep"] = {{"parameter", "beta2"}, {"from", 0}, {"to", 1}, {"steps", 2},
                    {"second", "rho"}};
  fs::path cfg3 = write_config("multi.json", multi);
  RunResult r3 = run_cli("curve -c " + cfg3.string());
  CHECK(r3.exit_code == 2);
  CHECK(r3.output.find("sweep") != std::string::npos);
}

TEST_CASE("set overrides reach nested fields", "[cli]") {
  fs::path cfg = write_config("ovr.json", table1_config());
  fs::path out = scratch_dir() / "ovr_out.json";
  RunResult r = run_cli("optimize -c " + cfg.string() + " --set model.beta.1=0.5 -o " +
                        out.string());
  REQUIRE(r.exit_code == 0);
  std::ifstream in(out);
  json doc = json::parse(in);
  CHECK(doc["model"]["beta"][1].get<double>() == 0.5);
  // Table 2(b) column for beta2 = 0.5
  CHECK(std::abs(doc["result"]["weights"][0].get<double>() - 0.376) < 0.002);
}

TEST_CASE("curve emits one CSV row per sweep value", "[cli]") {
  json cfg = table1_config();
  cfg["sweep"] = {{"parameter", "beta2"}, {"from", 2.0}, {"to", 2.0}, {"steps", 0}};
  fs::path p = write_config("curve0.json", cfg);
  RunResult r = run_cli("curve -c " + p.string());
  REQUIRE(r.exit_code == 0);
  int rows = 0;
  std::istringstream is(r.output);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty() && line[0] != '#' && line.find("beta2,") != 0) ++rows;
  CHECK(rows == 1);
  CHECK(r.output.find("# config:") != std::string::npos);

  cfg["sweep"] = {{"parameter", "a1"}, {"from", 120.0}, {"to", 120.0}, {"steps", 0}};
  fs::path p2 = write_config("curve_rc.json", cfg);
  RunResult r2 = run_cli("curve -c " + p2.string());
  REQUIRE(r2.exit_code == 0);
  CHECK(r2.output.find("rho_crit") != std::string::npos);
  CHECK(r2.output.find("0.934") != std::string::npos);
}

TEST_CASE("simulate is reproducible and estimate closes the loop", "[cli]") {
  json cfg = table1_config();
  cfg["counts"] = {61, 33, 26};
  cfg["sim"] = {{"N", 200}, {"seed", 777}};
  fs::path p = write_config("sim.json", cfg);
  fs::path d1 = scratch_dir() / "d1.csv";
  fs::path d2 = scratch_dir() / "d2.csv";
  REQUIRE(run_cli("simulate -c " + p.string() + " -o " + d1.string()).exit_code == 0);
  // a capped thread budget must not change the draw
  {
    std::string cmd = "env RPGCM_THREADS=1 " + cli_path() + " simulate -c " + p.string() +
                      " -o " + d2.string() + " > /dev/null 2>&1";
    REQUIRE(std::system(cmd.c_str()) == 0);
  }

  std::ifstream f1(d1, std::ios::binary), f2(d2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);  // identical bytes from identical seeds
  CHECK(s1.find("person,time_index,item_index,count\n") == 0);
  CHECK(s1.find('\r') == std::string::npos);  // LF endings

  fs::path est_out = scratch_dir() / "est.json";
  RunResult est = run_cli("estimate -c " + p.string() + " -d " + d1.string() + " -o " +
                          est_out.string());
  REQUIRE(est.exit_code == 0);
  std::ifstream in(est_out);
  json doc = json::parse(in);
  REQUIRE(doc["result"]["converged"].get<bool>());
  auto bh = doc["result"]["beta_hat"];
  auto se = doc["result"]["se"];
  for (int k = 0; k < 3; ++k) {
    double truth = json{3.0, 2.0, 1.0}[k].get<double>();
    REQUIRE(std::abs(bh[k].get<double>() - truth) <= 4.0 * se[k].get<double>());
  }
}

TEST_CASE("estimate exits 4 on dataset problems and 5 on non-convergence", "[cli]") {
  json cfg = table1_config();
  fs::path p = write_config("est_err.json", cfg);
  RunResult missing = run_cli("estimate -c " + p.string() + " -d /nonexistent.csv");
  CHECK(missing.exit_code == 4);

  fs::path empty = scratch_dir() / "empty.csv";
  std::ofstream(empty).close();
  RunResult r = run_cli("estimate -c " + p.string() + " -d " + empty.string());
  CHECK(r.exit_code == 4);
  CHECK(r.output.find("empty") != std::string::npos);

  // all-zero block in an unstructured model: beta still printed, exit 5
  json un = json{{"model", {{"variant", "unstructured"}, {"beta", {0.5, 0.5}}}},
            {"times", {0, 1}}, {"n", 3}, {"sigma", 1.0}, {"tau", 0.0}, {"rho", 0.0}};
  fs::path pun = write_config("un.json", un);
  fs::path ds = scratch_dir() / "zero.csv";
  {
    std::ofstream out(ds);
    out << "person,time_index,item_index,count\n";
    for (int person = 1; person <= 4; ++person) {
      out << person << ",1,1," << 2 + person % 2 << "\n";
      out << person << ",1,2," << 1 + person % 3 << "\n";
      out << person << ",2,1,0\n";
    }
  }
  RunResult r5 = run_cli("estimate -c " + pun.string() + " -d " + ds.string());
  CHECK(r5.exit_code == 5);
  CHECK(r5.output.find("beta_hat:") != std::string::npos);
  CHECK(r5.output.find("converged: no") != std::string::npos);
}

TEST_CASE("unresolvable optimization exits 3", "[cli]") {
  // beta2 = 0 with J > p leaves the criterion singular for every design
  json cfg = table1_config();
  cfg["model"]["beta"] = {3.0, 0.0, 1.0};
  cfg["times"] = {0, 1, 2, 3};
  fs::path p = write_config("rankdef.json", cfg);
  RunResult r = run_cli("optimize -c " + p.string());
  CHECK(r.exit_code == 3);
  CHECK(r.output.find("rank deficient") != std::string::npos);
}

TEST_CASE("two-point weight sweep reaches its analytic endpoints", "[cli]") {
  // unstructured two-point problem with a1 = 100 (n tau = 1); the optimal
  // initial weight runs from 1/(sqrt(a1+1)+1) up to 1 across the gain range
  json cfg = {{"model", {{"variant", "unstructured"}, {"beta", {std::log(100.0), 0.0}}}},
              {"times", {0, 1}},
              {"n", 1},
              {"sigma", 1.0},
              {"tau", 1.0},
              {"rho", 0.5},
              {"sweep", {{"parameter", "beta2"}, {"from", std::log(100.0) - 25},
                         {"to", std::log(100.0) + 25}, {"steps", 2}}}};
  fs::path p = write_config("fig1.json", cfg);
  RunResult r = run_cli("curve -c " + p.string());
  REQUIRE(r.exit_code == 0);
  std::istringstream is(r.output);
  std::string line;
  std::vector<double> w1;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("beta2,", 0) == 0) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    std::getline(ls, cell, ',');
    w1.push_back(std::stod(cell));
  }
  REQUIRE(w1.size() == 3);
  CHECK(std::abs(w1.front() - 1.0 / (std::sqrt(101.0) + 1.0)) < 1e-3);
  CHECK(w1.back() > 0.999);
}

TEST_CASE("round command prints the exact design", "[cli]") {
  json cfg = table1_config();
  cfg["weights"] = {0.510, 0.273, 0.217};
  fs::path p = write_config("round.json", cfg);
  RunResult r = run_cli("round -c " + p.string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("61 33 26") != std::string::npos);
}

TEST_CASE("sensitivity command certifies a candidate", "[cli]") {
  json cfg = table1_config();
  cfg["weights"] = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  fs::path p = write_config("sens.json", cfg);
  RunResult r = run_cli("sensitivity -c " + p.string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("certified: no") != std::string::npos);  // uniform is not optimal here
}
