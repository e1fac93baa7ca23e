// ===========================================================================
// ltn-ctrl: command-line front end for the data-driven LTN control pipeline.
//
// Subcommands:
//   collect      draw a random excitation dataset and write dataset.json
//   check-data   print per-node data ranks and the richness verdict
//   synthesize   solve the gain synthesis SDP for a recorded dataset
//   closed-loop  simulate recorded gains on a system and write trace.csv
//   case-study   collect + synthesize + simulate one bundled scenario run
//   export-sdp   write the data-space SDP for a dataset as portable JSON
//
// Exit codes: 0 success, 1 validation error, 2 infeasible synthesis,
// 3 numerical failure. Unknown flags are rejected with usage text.
//
// All artifacts land in one directory per run together with manifest.json
// (config, config hash, seeds, versions); reruns with identical
// configuration rewrite the same directory byte for byte.
// ===========================================================================

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <ltn/closed_loop.hpp>
#include <ltn/common.hpp>
#include <ltn/data_pipeline.hpp>
#include <ltn/lmi_synthesis.hpp>
#include <ltn/ltn_model.hpp>
#include <ltn/scenarios.hpp>
#include <ltn/sdp.hpp>
#include <ltn/sdp_solver.hpp>

namespace {

using ltn::Box;
using ltn::cat;
using ltn::DataMatrices;
using ltn::DataSet;
using ltn::DisturbanceSpec;
using ltn::LtnSystem;
using ltn::Mat;
using ltn::RunConfig;
using ltn::Vec;
using ltn::VertexMode;

constexpr const char* kToolVersion = "1.0.0";
constexpr const char* kSolverBackend = "interior-point";

enum ExitCode : int {
  kOk = 0,
  kValidation = 1,
  kInfeasible = 2,
  kNumerical = 3,
};

struct CliError {
  int code;
  std::string what;
};

// LTN_SOLVER selects the SDP backend; only the built-in one exists, so any
// other value is a configuration mistake and must not silently fall through.
void check_solver_env() {
  const char* env = std::getenv("LTN_SOLVER");
  if (env == nullptr || *env == '\0' ||
      std::string_view(env) == kSolverBackend)
    return;
  throw CliError{kValidation,
                 cat("LTN_SOLVER='", env, "' is not a known backend; only '",
                     kSolverBackend, "' is available")};
}

// ---------------------------------------------------------------------------
// Run directories and the manifest

// FNV-1a, stable across platforms and builds (std::hash is not).
std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string config_hash(const RunConfig& cfg) {
  std::ostringstream os;
  os << std::hex << fnv1a(cfg.to_json().dump());
  return os.str();
}

std::filesystem::path make_run_dir(const RunConfig& cfg,
                                   const std::string& command) {
  const std::string stem =
      !cfg.scenario.empty()
          ? cfg.scenario
          : (cfg.system_file.empty()
                 ? std::string("run")
                 : std::filesystem::path(cfg.system_file).stem().string());
  const std::filesystem::path base =
      cfg.out_dir.empty() ? std::filesystem::path("runs")
                          : std::filesystem::path(cfg.out_dir);
  const auto dir =
      base / cat(command, "-", stem, "-", cfg.controller, "-",
                 config_hash(cfg).substr(0, 8));
  std::filesystem::create_directories(dir);
  return dir;
}

void write_text(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path);
  ltn::check(out.good(), cat("cannot write '", path.string(), "'"));
  out << body;
}

void write_manifest(const std::filesystem::path& dir, const RunConfig& cfg,
                    const std::string& command,
                    const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = cfg.to_json();
  j["config_hash"] = config_hash(cfg);
  j["seeds"] = {{"data", cfg.seed_data},
                {"init", cfg.seed_init},
                {"noise", cfg.seed_noise},
                {"system", cfg.seed_system}};
  j["solver"] = kSolverBackend;
  j["versions"] = {
      {"ltn-ctrl", kToolVersion},
      {"eigen", cat(EIGEN_WORLD_VERSION, ".", EIGEN_MAJOR_VERSION, ".",
                    EIGEN_MINOR_VERSION)},
      {"cli11", CLI11_VERSION},
      {"json", cat(NLOHMANN_JSON_VERSION_MAJOR, ".",
                   NLOHMANN_JSON_VERSION_MINOR, ".",
                   NLOHMANN_JSON_VERSION_PATCH)}};
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = *it;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Flag resolution

Vec parse_reference(const std::string& text) {
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      vals.push_back(std::stod(item, &used));
      ltn::check(used == item.size(), "trailing characters");
    } catch (const std::exception&) {
      throw CliError{kValidation,
                     cat("--reference entry '", item, "' is not a number")};
    }
  }
  if (vals.empty())
    throw CliError{kValidation, "--reference must list at least one value"};
  return Eigen::Map<const Vec>(vals.data(),
                               static_cast<Eigen::Index>(vals.size()));
}

// "alpha=0.9728,s=0.3984" -> (alpha, s).
std::pair<double, double> parse_system_meta(const std::string& text) {
  double alpha = -1.0, s = -1.0;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw CliError{kValidation,
                     cat("--system-meta entry '", item, "' is not key=value")};
    const std::string key = item.substr(0, eq);
    double val = 0.0;
    try {
      val = std::stod(item.substr(eq + 1));
    } catch (const std::exception&) {
      throw CliError{kValidation,
                     cat("--system-meta value in '", item, "' is not a number")};
    }
    if (key == "alpha")
      alpha = val;
    else if (key == "s")
      s = val;
    else
      throw CliError{kValidation, cat("--system-meta key '", key,
                                      "' is not one of alpha, s")};
  }
  if (alpha < 0.0 || s <= 0.0)
    throw CliError{kValidation,
                   "--system-meta must provide alpha=A,s=S with s > 0"};
  return {alpha, s};
}

// Scenario (or raw system) resolved into everything a run needs.
struct Resolved {
  LtnSystem sys;
  Box x_box{0.0, 1.0};
  Box u_box{0.0, 1.0};
  int td = 0;
  DisturbanceSpec collect_noise = DisturbanceSpec::none();
  Vec r;    // simulation reference (may be empty for collect/check paths)
  Vec phi;  // arousal readout, empty for every other source
};

Resolved resolve(const RunConfig& cfg) {
  Resolved out;
  if (cfg.scenario == "rodent") {
    const ltn::RodentScenario sc = ltn::rodent_scenario();
    out.sys = sc.system;
    out.x_box = sc.x_box;
    out.u_box = sc.u_box;
    out.td = cfg.td > 0 ? cfg.td : sc.T_d;
    // Short collections rail out at the full input box; the documented short
    // profile narrows it so in-band samples survive.
    if (out.td < sc.T_d) out.u_box = Box{0.0, 1.0};
    out.r = sc.r;
  } else if (cfg.scenario == "arousal") {
    const ltn::ArousalScenario sc = ltn::arousal_scenario(cfg.seed_system);
    out.sys = sc.system;
    out.x_box = sc.x_box;
    out.u_box = sc.u_box;
    out.td = cfg.td > 0 ? cfg.td : sc.T_d;
    out.collect_noise = sc.collection_noise;
    out.phi = sc.phi;
    out.r = ltn::arousal_target(sc).r;
  } else {
    ltn::check(!cfg.system_file.empty(),
               "either a scenario name or --system FILE is required");
    out.sys = ltn::load_system(cfg.system_file);
    out.x_box = Box{0.0, out.sys.state_cap()};
    out.u_box = Box{0.0, 1.0};
    out.td = cfg.td > 0 ? cfg.td : 200;
  }
  if (!cfg.reference.empty()) {
    out.r = Eigen::Map<const Vec>(cfg.reference.data(),
                                  static_cast<Eigen::Index>(
                                      cfg.reference.size()));
    ltn::check(out.r.size() == out.sys.n,
               cat("--reference has ", out.r.size(), " entries; the system has ",
                   out.sys.n, " states"));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces

ltn::SdpSettings cli_solver_settings() {
  ltn::SdpSettings st;
  st.time_limit_sec = 3600.0;  // n=15 scenario solves take minutes
  return st;
}

void require_rich(const DataMatrices& dm) {
  const auto rep = ltn::check_richness(dm);
  if (!rep.pass)
    throw CliError{kValidation, rep.describe(dm.n, dm.m)};
}

ltn::SynthesisRun synthesize_gains(const DataMatrices& dm,
                                   const RunConfig& cfg) {
  const VertexMode mode = cfg.vertex_mode == "full" ? VertexMode::full
                                                    : VertexMode::reduced;
  const auto st = cli_solver_settings();
  return cfg.controller == "ff"
             ? ltn::run_ff_synthesis_condensed(dm, mode, st)
             : ltn::run_integral_synthesis_condensed(dm, mode, st);
}

[[noreturn]] void throw_synthesis_failure(const ltn::SynthesisRun& run) {
  const auto status = run.solution.status;
  const int code = (status == ltn::SdpStatus::numerical_failure ||
                    status == ltn::SdpStatus::timeout)
                       ? kNumerical
                       : kInfeasible;
  throw CliError{code, cat("synthesis failed: ", run.failure)};
}

// Collects at seed, seed+1, ... until the dataset is rich. Keeps the scan
// deterministic and recorded so reruns reproduce the same dataset bytes.
std::pair<DataSet, std::uint64_t> collect_rich(const Resolved& rs,
                                               std::uint64_t seed0) {
  for (std::uint64_t seed = seed0; seed < seed0 + 1000; ++seed) {
    DataSet ds = ltn::collect_random_dataset(rs.sys, rs.td, rs.x_box,
                                             rs.u_box, seed,
                                             rs.collect_noise);
    const DataMatrices dm =
        ltn::build_data_matrices(ds, rs.sys.alpha, rs.sys.s);
    if (ltn::check_richness(dm).pass) return {std::move(ds), seed};
  }
  throw CliError{kValidation,
                 cat("no rich dataset found with T_d = ", rs.td,
                     " within 1000 seeds from ", seed0,
                     "; increase --td or change the excitation boxes")};
}

Vec draw_x0(const Resolved& rs, std::uint64_t seed) {
  ltn::Rng rng(seed);
  return rng.uniform_vec(rs.sys.n, 0.0, rs.sys.state_cap());
}

nlohmann::json run_metrics(const ltn::ClosedLoopTrace& tr,
                           const Resolved& rs, const RunConfig& cfg) {
  nlohmann::json j = ltn::steady_state_metrics(tr, 0.25, cfg.tol).to_json();
  const int T = tr.horizon();
  j["final_eps_inf"] = tr.eps.row(T).lpNorm<Eigen::Infinity>();
  j["settled"] = tr.eps.row(T).lpNorm<Eigen::Infinity>() <= cfg.tol;
  if (rs.phi.size() > 0) {
    j["arousal_level_final"] =
        ltn::arousal_level(rs.phi, tr.x.row(T).transpose());
    j["arousal_level_target"] = ltn::arousal_level(rs.phi, rs.r);
  }
  return j;
}

void write_trace(const std::filesystem::path& path,
                 const ltn::ClosedLoopTrace& tr) {
  std::ofstream out(path);
  ltn::check(out.good(), cat("cannot write '", path.string(), "'"));
  tr.write_csv(out);
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_collect(const RunConfig& cfg) {
  const Resolved rs = resolve(cfg);
  Resolved collect_rs = rs;
  if (cfg.disturbance != "none" || cfg.scenario.empty())
    collect_rs.collect_noise = DisturbanceSpec::parse(cfg.disturbance);
  const DataSet ds =
      ltn::collect_random_dataset(collect_rs.sys, collect_rs.td,
                                  collect_rs.x_box, collect_rs.u_box,
                                  cfg.seed_data, collect_rs.collect_noise);
  const DataMatrices dm =
      ltn::build_data_matrices(ds, rs.sys.alpha, rs.sys.s);
  const auto rich = ltn::check_richness(dm);

  const auto dir = make_run_dir(cfg, "collect");
  ltn::save_dataset(ds, (dir / "dataset.json").string());
  ltn::save_system(rs.sys, (dir / "system.json").string());
  write_manifest(dir, cfg, "collect",
                 {{"richness_pass", rich.pass}, {"T_d", collect_rs.td}});
  std::cout << "dataset: " << (dir / "dataset.json").string() << "\n"
            << rich.describe(dm.n, dm.m) << "\n";
  return kOk;
}

int cmd_check_data(const RunConfig& cfg, const std::string& dataset_file,
                   const std::string& system_meta) {
  double alpha = 0.0, s = 0.0;
  if (!system_meta.empty()) {
    std::tie(alpha, s) = parse_system_meta(system_meta);
  } else {
    const Resolved rs = resolve(cfg);
    alpha = rs.sys.alpha;
    s = rs.sys.s;
  }
  const DataSet ds = ltn::load_dataset(dataset_file);
  const DataMatrices dm = ltn::build_data_matrices(ds, alpha, s);
  const auto rich = ltn::check_richness(dm);
  for (int i = 0; i < dm.n; ++i) {
    int in_band = 0;
    for (int k = 0; k < dm.T_d; ++k)
      if (!dm.sat_mask(i, k)) ++in_band;
    std::cout << "node " << i + 1 << ": rank " << dm.node_ranks[i] << "/"
              << dm.n + dm.m << ", in-band samples " << in_band << "/"
              << dm.T_d << "\n";
  }
  std::cout << rich.describe(dm.n, dm.m) << "\n";
  return rich.pass ? kOk : kValidation;
}

int cmd_synthesize(const RunConfig& cfg, const std::string& dataset_file,
                   const std::string& system_meta) {
  double alpha = 0.0, s = 0.0;
  if (!system_meta.empty()) {
    std::tie(alpha, s) = parse_system_meta(system_meta);
  } else {
    const Resolved rs = resolve(cfg);
    alpha = rs.sys.alpha;
    s = rs.sys.s;
  }
  const DataSet ds = ltn::load_dataset(dataset_file);
  const DataMatrices dm = ltn::build_data_matrices(ds, alpha, s);
  require_rich(dm);
  const ltn::SynthesisRun run = synthesize_gains(dm, cfg);
  if (!run.ok) throw_synthesis_failure(run);

  const auto dir = make_run_dir(cfg, "synthesize");
  ltn::save_synthesis_result(run.result, (dir / "result.json").string());
  write_manifest(dir, cfg, "synthesize",
                 {{"dataset", dataset_file},
                  {"gamma", run.result.gamma},
                  {"solver_status", run.result.solver_status}});
  std::cout << "result: " << (dir / "result.json").string() << "\n"
            << "controller " << run.result.controller_kind << ", gamma "
            << run.result.gamma << ", solver " << run.result.solver_status
            << "\n";
  return kOk;
}

int cmd_closed_loop(const RunConfig& cfg, const std::string& result_file,
                    const std::string& dataset_file) {
  const Resolved rs = resolve(cfg);
  ltn::check(rs.r.size() == rs.sys.n,
             "closed-loop needs a reference: pass --reference or a scenario");
  const ltn::SynthesisResult res = ltn::load_synthesis_result(result_file);
  const bool integral = res.controller_kind == "integral";
  if ((cfg.controller == "integral") != integral)
    throw CliError{kValidation,
                   cat("--controller ", cfg.controller, " but '", result_file,
                       "' holds ", res.controller_kind, " gains")};

  const Vec x0 = draw_x0(rs, cfg.seed_init);
  const DisturbanceSpec dist = DisturbanceSpec::parse(cfg.disturbance);
  ltn::ClosedLoopTrace tr;
  if (integral) {
    const auto ctl = ltn::integral_controller(res, rs.r);
    tr = ltn::run_closed_loop(rs.sys, ctl, x0, cfg.horizon, dist,
                              cfg.seed_noise);
    if (!dataset_file.empty()) {
      const DataSet ds = ltn::load_dataset(dataset_file);
      const DataMatrices dm =
          ltn::build_data_matrices(ds, rs.sys.alpha, rs.sys.s);
      const auto eq = ltn::integral_equilibrium(dm, res, rs.r);
      ltn::attach_lyapunov(tr, res.P_bar, eq.xi_star);
    }
  } else {
    const auto ctl = ltn::feedforward_controller(res, rs.r);
    tr = ltn::run_closed_loop(rs.sys, ctl, x0, cfg.horizon, dist,
                              cfg.seed_noise);
    ltn::attach_lyapunov(tr, res.P_bar);
  }

  const auto dir = make_run_dir(cfg, "closed-loop");
  write_trace(dir / "trace.csv", tr);
  const nlohmann::json metrics = run_metrics(tr, rs, cfg);
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  write_manifest(dir, cfg, "closed-loop", {{"result", result_file}});
  std::cout << "trace: " << (dir / "trace.csv").string() << "\n"
            << "final eps_inf " << metrics.at("final_eps_inf").get<double>()
            << ", settling_time " << metrics.at("settling_time").get<int>()
            << "\n";
  return kOk;
}

int cmd_case_study(const RunConfig& cfg) {
  const Resolved rs = resolve(cfg);
  const auto [ds, seed_used] = collect_rich(rs, cfg.seed_data);
  const DataMatrices dm =
      ltn::build_data_matrices(ds, rs.sys.alpha, rs.sys.s);
  const ltn::SynthesisRun run = synthesize_gains(dm, cfg);
  if (!run.ok) throw_synthesis_failure(run);

  const Vec x0 = draw_x0(rs, cfg.seed_init);
  const DisturbanceSpec dist = DisturbanceSpec::parse(cfg.disturbance);
  ltn::ClosedLoopTrace tr;
  if (cfg.controller == "integral") {
    const auto ctl = ltn::integral_controller(run.result, rs.r);
    tr = ltn::run_closed_loop(rs.sys, ctl, x0, cfg.horizon, dist,
                              cfg.seed_noise);
    const auto eq = ltn::integral_equilibrium(dm, run.result, rs.r);
    ltn::attach_lyapunov(tr, run.result.P_bar, eq.xi_star);
  } else {
    const auto ctl = ltn::feedforward_controller(run.result, rs.r);
    tr = ltn::run_closed_loop(rs.sys, ctl, x0, cfg.horizon, dist,
                              cfg.seed_noise);
    ltn::attach_lyapunov(tr, run.result.P_bar);
  }

  const auto dir = make_run_dir(cfg, "case-study");
  ltn::save_system(rs.sys, (dir / "system.json").string());
  ltn::save_dataset(ds, (dir / "dataset.json").string());
  ltn::save_synthesis_result(run.result, (dir / "result.json").string());
  write_trace(dir / "trace.csv", tr);
  const nlohmann::json metrics = run_metrics(tr, rs, cfg);
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  write_manifest(dir, cfg, "case-study",
                 {{"seed_data_used", seed_used},
                  {"T_d", rs.td},
                  {"gamma", run.result.gamma},
                  {"solver_status", run.result.solver_status}});
  std::cout << "run dir: " << dir.string() << "\n"
            << "gamma " << run.result.gamma << ", final eps_inf "
            << metrics.at("final_eps_inf").get<double>() << ", settling_time "
            << metrics.at("settling_time").get<int>() << "\n";
  if (rs.phi.size() > 0)
    std::cout << "arousal level: target "
              << metrics.at("arousal_level_target").get<double>() << ", final "
              << metrics.at("arousal_level_final").get<double>() << "\n";
  return kOk;
}

int cmd_export_sdp(const RunConfig& cfg, const std::string& dataset_file,
                   const std::string& system_meta) {
  double alpha = 0.0, s = 0.0;
  if (!system_meta.empty()) {
    std::tie(alpha, s) = parse_system_meta(system_meta);
  } else {
    const Resolved rs = resolve(cfg);
    alpha = rs.sys.alpha;
    s = rs.sys.s;
  }
  const DataSet ds = ltn::load_dataset(dataset_file);
  const DataMatrices dm = ltn::build_data_matrices(ds, alpha, s);
  require_rich(dm);
  const VertexMode mode = cfg.vertex_mode == "full" ? VertexMode::full
                                                    : VertexMode::reduced;
  const ltn::SdpProblem prog =
      cfg.controller == "ff"
          ? ltn::assemble_ff_program(dm, alpha, mode)
          : ltn::assemble_integral_program(dm, alpha, mode);

  const auto dir = make_run_dir(cfg, "export-sdp");
  ltn::save_sdp_problem(prog, (dir / "program.json").string());
  write_manifest(dir, cfg, "export-sdp", {{"dataset", dataset_file}});
  std::cout << "program: " << (dir / "program.json").string() << "\n"
            << prog.variables().size() << " variables, "
            << prog.psd_constraints().size() << " psd blocks, "
            << prog.equality_constraints().size() << " equality constraints\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Flag wiring

void add_scenario_flags(CLI::App* sub, RunConfig& cfg) {
  sub->add_option("--scenario", cfg.scenario,
                  "bundled scenario: rodent | arousal");
  sub->add_option("--system", cfg.system_file, "system JSON file");
}

void add_synthesis_flags(CLI::App* sub, RunConfig& cfg) {
  sub->add_option("--controller", cfg.controller, "ff | integral")
      ->check(CLI::IsMember({"ff", "integral"}));
  sub->add_option("--vertex-mode", cfg.vertex_mode, "full | reduced")
      ->check(CLI::IsMember({"full", "reduced"}));
}

void add_sim_flags(CLI::App* sub, RunConfig& cfg) {
  sub->add_option("--horizon", cfg.horizon, "simulation steps");
  sub->add_option("--tol", cfg.tol, "settling tolerance (infinity norm)");
  sub->add_option("--seed-init", cfg.seed_init, "initial-state seed");
  sub->add_option("--seed-noise", cfg.seed_noise, "disturbance seed");
  sub->add_option("--disturbance", cfg.disturbance,
                  "uniform:LO:HI | none (simulation disturbance)");
  sub->add_option("--reference", "comma-separated reference vector");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"data-driven stabilization of linear-threshold networks"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string dataset_file, result_file, system_meta, reference_text;

  CLI::App* collect = app.add_subcommand(
      "collect", "draw a random excitation dataset");
  add_scenario_flags(collect, cfg);
  collect->add_option("--td", cfg.td, "samples to collect (0: scenario default)");
  collect->add_option("--seed-data", cfg.seed_data, "collection seed");
  collect->add_option("--disturbance", cfg.disturbance,
                      "uniform:LO:HI | none (collection noise override)");
  collect->add_option("--out", cfg.out_dir, "output directory root");

  CLI::App* check = app.add_subcommand(
      "check-data", "per-node rank report for a recorded dataset");
  check->add_option("--dataset", dataset_file, "dataset JSON")->required();
  check->add_option("--system-meta", system_meta,
                    "alpha=A,s=S when no scenario/system is given");
  add_scenario_flags(check, cfg);

  CLI::App* synth = app.add_subcommand(
      "synthesize", "solve the gain synthesis SDP for a dataset");
  synth->add_option("--dataset", dataset_file, "dataset JSON")->required();
  synth->add_option("--system-meta", system_meta,
                    "alpha=A,s=S when no scenario/system is given");
  add_scenario_flags(synth, cfg);
  add_synthesis_flags(synth, cfg);
  synth->add_option("--out", cfg.out_dir, "output directory root");

  CLI::App* loop = app.add_subcommand(
      "closed-loop", "simulate recorded gains on a system");
  loop->add_option("--result", result_file, "synthesis result JSON")
      ->required();
  loop->add_option("--dataset", dataset_file,
                   "dataset JSON (enables the Lyapunov column for integral "
                   "gains)");
  add_scenario_flags(loop, cfg);
  loop->add_option("--controller", cfg.controller,
                   "ff | integral (must match the recorded gains)")
      ->check(CLI::IsMember({"ff", "integral"}));
  add_sim_flags(loop, cfg);
  loop->add_option("--out", cfg.out_dir, "output directory root");

  CLI::App* study = app.add_subcommand(
      "case-study", "bundled collect + synthesize + simulate run");
  study->add_option("name", cfg.scenario, "rodent | arousal")->required();
  add_synthesis_flags(study, cfg);
  study->add_option("--td", cfg.td, "samples to collect (0: scenario default)");
  study->add_option("--seed-data", cfg.seed_data,
                    "collection seed (scanned upward until the data are rich)");
  add_sim_flags(study, cfg);
  study->add_option("--out", cfg.out_dir, "output directory root");

  CLI::App* exp = app.add_subcommand(
      "export-sdp", "write the data-space SDP for a dataset as JSON");
  exp->add_option("--dataset", dataset_file, "dataset JSON")->required();
  exp->add_option("--system-meta", system_meta,
                  "alpha=A,s=S when no scenario/system is given");
  add_scenario_flags(exp, cfg);
  add_synthesis_flags(exp, cfg);
  exp->add_option("--out", cfg.out_dir, "output directory root");

  // --reference lands in cfg.reference; registered on the sim subcommands.
  for (CLI::App* sub : {loop, study}) {
    if (CLI::Option* opt = sub->get_option_no_throw("--reference"))
      opt->each([&cfg](const std::string& text) {
        const Vec r = parse_reference(text);
        cfg.reference.assign(r.data(), r.data() + r.size());
      });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidation;
  }

  try {
    check_solver_env();
    cfg.validate();
    if (collect->parsed()) return cmd_collect(cfg);
    if (check->parsed()) return cmd_check_data(cfg, dataset_file, system_meta);
    if (synth->parsed()) return cmd_synthesize(cfg, dataset_file, system_meta);
    if (loop->parsed()) return cmd_closed_loop(cfg, result_file, dataset_file);
    if (study->parsed()) return cmd_case_study(cfg);
    if (exp->parsed()) return cmd_export_sdp(cfg, dataset_file, system_meta);
    return kValidation;
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
}
