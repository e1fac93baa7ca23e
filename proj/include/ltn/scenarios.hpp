#pragma once

// ===========================================================================
// Case-study definitions: the identified rodent firing-rate network and the
// seeded arousal-regulation family, plus the run configuration shared by the
// command-line pipeline. Constants are embedded verbatim from the identified
// model; everything else is a documented default.
// ===========================================================================

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ltn/common.hpp"
#include "ltn/data_pipeline.hpp"
#include "ltn/ltn_model.hpp"

namespace ltn {

// ===========================================================================
// Rodent firing-rate network (PFC excitatory / A1 inhibitory circuit)

// Identified 4-state, 5-input circuit; the state cap s/(1-alpha) is 14.647.
inline LtnSystem rodent_system() {
  LtnSystem sys;
  sys.n = 4;
  sys.m = 5;
  sys.alpha = 0.9728;
  sys.s = 0.3984;
  sys.W.resize(4, 4);
  sys.W << 0.0, 0.0427, -0.0122, 0.0,        //
      0.0084, 0.0, -0.0003, -0.0009,         //
      0.0421, 0.0334, 0.0, 0.0,              //
      0.1031, 0.0114, -0.0036, 0.0;
  sys.B.resize(4, 5);
  sys.B << 0.0114, -0.0005, -0.0749, -0.0017, 0.0,  //
      -0.0270, 0.0015, 0.2107, 0.0, 0.0,            //
      -0.6332, 0.0044, -0.2840, 0.0, 0.0358,        //
      -0.7236, 0.0162, 0.5482, 0.0, 0.0207;
  return sys;
}

struct RodentScenario {
  LtnSystem system = rodent_system();
  Vec r;                        // default reference, inside the state box
  Box x_box{0.0, 14.647};       // collection ranges
  Box u_box{0.0, 10.0};
  int T_d = 250;
  DisturbanceSpec disturbance = DisturbanceSpec::uniform(0.0, 0.2);
};

inline RodentScenario rodent_scenario() {
  RodentScenario sc;
  sc.r = (Vec(4) << 8.26, 4.42, 10.99, 6.95).finished();
  return sc;
}

// ===========================================================================
// Arousal regulation (seeded EEG-band family)
//
// 15 EEG spectral states, one scalar input (audio feedback volume). The
// readout a_rou = phi^T x maps states to an arousal level; phi is drawn
// nonnegative and scaled so the level spans [0, 100] over the state box
// [0, 1]^15 (a_rou(0) = 0, a_rou(cap * ones) = 100). Draws are resampled
// until louder feedback lowers arousal (phi^T B < 0).

struct ArousalDraw {
  LtnSystem system;  // n=15, m=1; W, B entries uniform on [-0.5, 0.5]
  Vec phi;           // readout weights, nonnegative, sum = 100
  int resamples = 0;  // draws discarded before the sign constraint held
};

inline ArousalDraw arousal_system(std::uint64_t seed, int resample_cap = 1000) {
  check(resample_cap >= 1, "arousal_system: resample_cap must be >= 1");
  Rng rng(seed);
  ArousalDraw draw;
  draw.system.n = 15;
  draw.system.m = 1;
  draw.system.alpha = 0.7;
  draw.system.s = 0.3;
  for (int attempt = 0; attempt < resample_cap; ++attempt) {
    draw.system.W = rng.uniform_mat(15, 15, -0.5, 0.5);
    draw.system.B = rng.uniform_mat(15, 1, -0.5, 0.5);
    const Vec raw = rng.uniform_vec(15, 0.0, 1.0);
    draw.phi = 100.0 * raw / raw.sum();
    if (draw.phi.dot(draw.system.B.col(0)) < 0.0) {
      draw.resamples = attempt;
      return draw;
    }
  }
  throw std::runtime_error(
      cat("arousal_system: no draw with phi^T B < 0 within ", resample_cap,
          " attempts (seed ", seed, ")"));
}

struct ArousalScenario {
  LtnSystem system;
  Vec phi;
  int resamples = 0;
  // Collection boxes sit near the noise scale on purpose. Nodes whose W row
  // and B entry lean negative only produce in-band samples when the noise
  // kick outweighs the drift from W x + B u, so u_hi much above the noise
  // amplitude starves those rows; u_hi below it drowns the input's effect on
  // z in noise. These defaults keep every node's mask count comfortably
  // above n + m across seeds.
  Box x_box{0.0, 0.02};
  Box u_box{0.0, 0.05};
  int T_d = 400;
  // Collection noise is part of the design here: with one input, noise-free
  // data pin the integral program to an infeasible rank-one Z U.
  DisturbanceSpec collection_noise = DisturbanceSpec::uniform(0.0, 0.02);
};

inline ArousalScenario arousal_scenario(std::uint64_t seed,
                                        int resample_cap = 1000) {
  ArousalDraw draw = arousal_system(seed, resample_cap);
  ArousalScenario sc;
  sc.system = std::move(draw.system);
  sc.phi = std::move(draw.phi);
  sc.resamples = draw.resamples;
  return sc;
}

inline double arousal_level(const Vec& phi, const Vec& x) {
  check(phi.size() == x.size(), "arousal_level: dimension mismatch");
  return phi.dot(x);
}

// Steady state of the plant under a constant scalar volume, iterated from
// the fully activated state. The origin is also a fixed point (the clamp
// zeroes an all-zero drive), so starting activated selects the branch the
// tensed-up narrative lives on.
inline Vec steady_state_under_volume(const LtnSystem& sys, double volume,
                                     int max_iter = 200000,
                                     double tol = 1e-13) {
  check(sys.m == 1, "steady_state_under_volume: needs a scalar input");
  const Vec bu = sys.B.col(0) * volume;
  Vec x = Vec::Constant(sys.n, sys.state_cap());
  for (int it = 0; it < max_iter; ++it) {
    const Vec next =
        sys.alpha * x + threshold_clamp(sys.W * x + bu, sys.s);
    const double step = (next - x).lpNorm<Eigen::Infinity>();
    x = next;
    if (step <= tol) return x;
  }
  throw std::runtime_error(
      cat("steady_state_under_volume: no settle within ", max_iter,
          " iterations (volume ", volume, ")"));
}

struct ArousalTarget {
  Vec r;              // interior-lifted steady-state pattern
  double volume = 0;  // constant volume whose steady state generated r
  double level = 0;   // arousal level of that steady state (before the lift)
};

// Target pattern near a given arousal level (percent), taken from the
// plant's steady-state curve: with one input the reachable equilibria form a
// one-parameter family indexed by the constant volume, so any pattern off
// that curve leaves a permanent offset no controller can remove. Mirrors the
// calibration-trial narrative: sweep the volume, take the resting pattern
// whose level lands nearest the request. The curve is discontinuous where
// the plant jumps activation branches, so the achieved level can differ from
// the request; callers read .level. Rail-bound entries are lifted to the
// interior margin the integral controller requires, which moves the level by
// at most margin * sum(phi) = 0.01 percent.
inline ArousalTarget arousal_target(const ArousalScenario& sc,
                                    double level = 50.0,
                                    double volume_cap = 32.0,
                                    double interior_margin = 1e-4) {
  check(level > 0.0 && level < 100.0,
        cat("arousal_target: level ", level, " must be inside (0, 100)"));
  check(volume_cap > 0.0, "arousal_target: volume_cap must be positive");
  const double cap = sc.system.state_cap();

  // Some volumes sit in open-loop limit cycles and never settle; those are
  // not calibration points and the sweep skips them.
  const auto level_at = [&](double u) -> double {
    try {
      return arousal_level(sc.phi,
                           steady_state_under_volume(sc.system, u, 20000));
    } catch (const std::runtime_error&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  constexpr int kGrid = 1024;
  double best_u = std::numeric_limits<double>::quiet_NaN();
  double best_level = std::numeric_limits<double>::quiet_NaN();
  for (int k = 0; k <= kGrid; ++k) {
    const double u = volume_cap * k / kGrid;
    const double lv = level_at(u);
    if (std::isnan(lv)) continue;
    if (std::isnan(best_u) ||
        std::abs(lv - level) < std::abs(best_level - level)) {
      best_u = u;
      best_level = lv;
    }
  }
  check(!std::isnan(best_u),
        cat("arousal_target: no volume in [0, ", volume_cap,
            "] gives a settled resting state"));

  ArousalTarget out;
  out.volume = best_u;
  out.level = best_level;
  const Vec eq = steady_state_under_volume(sc.system, best_u, 20000);
  out.r = eq.cwiseMax(interior_margin).cwiseMin(cap - interior_margin);
  return out;
}

// ===========================================================================
// Run configuration (shared by the CLI and batch plumbing)

struct RunConfig {
  std::string scenario;         // "rodent" | "arousal" | "" with system_file
  std::string system_file;      // explicit system JSON when no scenario
  std::string controller = "ff";        // "ff" | "integral"
  std::string vertex_mode = "reduced";  // "reduced" | "full"
  int td = 0;                   // 0: scenario default
  std::uint64_t seed_data = 1;
  std::uint64_t seed_init = 1;
  std::uint64_t seed_noise = 1;
  std::uint64_t seed_system = 1;  // arousal family draw
  int horizon = 2000;
  double tol = 1e-2;            // settling tolerance for metrics
  std::string disturbance = "none";  // "none" | "uniform:LO:HI"
  std::string out_dir;
  std::vector<double> reference;  // empty: scenario default

  void validate() const {
    check(scenario.empty() || scenario == "rodent" || scenario == "arousal",
          cat("config: unknown scenario '", scenario, "'"));
    check(controller == "ff" || controller == "integral",
          cat("config: controller must be ff or integral, got '", controller,
              "'"));
    check(vertex_mode == "reduced" || vertex_mode == "full",
          cat("config: vertex-mode must be reduced or full, got '",
              vertex_mode, "'"));
    check(td >= 0, "config: td must be nonnegative");
    check(horizon >= 1, "config: horizon must be positive");
    check(tol > 0.0, "config: tol must be positive");
    DisturbanceSpec::parse(disturbance);  // throws on malformed text
    for (double v : reference)
      check(std::isfinite(v), "config: reference entries must be finite");
  }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    j["scenario"] = scenario;
    j["system_file"] = system_file;
    j["controller"] = controller;
    j["vertex_mode"] = vertex_mode;
    j["td"] = td;
    j["seed_data"] = seed_data;
    j["seed_init"] = seed_init;
    j["seed_noise"] = seed_noise;
    j["seed_system"] = seed_system;
    j["horizon"] = horizon;
    j["tol"] = tol;
    j["disturbance"] = disturbance;
    j["out_dir"] = out_dir;
    j["reference"] = reference;
    return j;
  }
};

}  // namespace ltn
