#pragma once

// Discrete-time linear-threshold network model
//
//   x(t+1) = alpha*x(t) + [ W*x(t) + B*u(t) + w(t) ]_0^s
//
// where [.]_0^s clamps componentwise to [0, s]. For alpha in [0,1) and any
// bounded input the state box [0, s/(1-alpha)]^n is forward invariant.

#include <cstdint>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>

#include "json.hpp"
#include "ltn/common.hpp"

namespace ltn {

struct LtnSystem {
  int n = 0;  // states
  int m = 0;  // inputs
  double alpha = 0.0;
  double s = 1.0;
  Mat W;  // n x n
  Mat B;  // n x m

  // Upper edge of the invariant state box.
  [[nodiscard]] double state_cap() const { return s / (1.0 - alpha); }

  void validate() const {
    check(n >= 1, "LtnSystem: n must be >= 1");
    check(m >= 1, "LtnSystem: m must be >= 1");
    check(alpha >= 0.0 && alpha < 1.0,
          cat("LtnSystem: alpha must lie in [0,1), got ", alpha));
    check(s > 0.0, cat("LtnSystem: s must be positive, got ", s));
    check(W.rows() == n && W.cols() == n,
          cat("LtnSystem: W must be ", n, "x", n, ", got ", W.rows(), "x",
              W.cols()));
    check(B.rows() == n && B.cols() == m,
          cat("LtnSystem: B must be ", n, "x", m, ", got ", B.rows(), "x",
              B.cols()));
    check(W.allFinite() && B.allFinite(), "LtnSystem: W/B must be finite");
  }
};

// Componentwise clamp to [0, s]. Idempotent, exact at the rails.
[[nodiscard]] inline Vec threshold_clamp(const Vec& v, double s) {
  return v.cwiseMax(0.0).cwiseMin(s);
}

[[nodiscard]] inline Vec step(const LtnSystem& sys, const Vec& x,
                              const Vec& u) {
  return sys.alpha * x + threshold_clamp(sys.W * x + sys.B * u, sys.s);
}

[[nodiscard]] inline Vec step_with_disturbance(const LtnSystem& sys,
                                               const Vec& x, const Vec& u,
                                               const Vec& w) {
  return sys.alpha * x + threshold_clamp(sys.W * x + sys.B * u + w, sys.s);
}

// ---------------------------------------------------------------------------
// Disturbance specification

struct DisturbanceSpec {
  enum class Kind { none, uniform };
  Kind kind = Kind::none;
  double lo = 0.0;
  double hi = 0.0;

  [[nodiscard]] bool active() const { return kind == Kind::uniform; }

  static DisturbanceSpec none() { return {}; }

  static DisturbanceSpec uniform(double lo, double hi) {
    check(lo <= hi, "DisturbanceSpec: lo must be <= hi");
    return {Kind::uniform, lo, hi};
  }

  // Accepts "none" or "uniform:LO:HI".
  static DisturbanceSpec parse(const std::string& text) {
    if (text == "none") return none();
    if (text.rfind("uniform:", 0) == 0) {
      const auto rest = text.substr(8);
      const auto sep = rest.find(':');
      check(sep != std::string::npos,
            cat("DisturbanceSpec: expected uniform:LO:HI, got '", text, "'"));
      try {
        return uniform(std::stod(rest.substr(0, sep)),
                       std::stod(rest.substr(sep + 1)));
      } catch (const std::invalid_argument&) {
        throw std::runtime_error(
            cat("DisturbanceSpec: bad numbers in '", text, "'"));
      }
    }
    throw std::runtime_error(
        cat("DisturbanceSpec: expected 'none' or 'uniform:LO:HI', got '", text,
            "'"));
  }

  [[nodiscard]] std::string str() const {
    if (!active()) return "none";
    return cat("uniform:", lo, ":", hi);
  }
};

// ---------------------------------------------------------------------------
// Simulation

using InputPolicy = std::function<Vec(int t, const Vec& x)>;

struct SimulationTrace {
  Mat x;  // (T+1) x n, row t = x(t)
  Mat u;  // (T+1) x m, row t = u(t); the row at t = T is evaluated, not applied
  Mat w;  // T x n when a disturbance was active, otherwise 0 x n

  [[nodiscard]] int horizon() const { return static_cast<int>(x.rows()) - 1; }

  void write_csv(std::ostream& os) const {
    os << "t";
    for (Eigen::Index i = 0; i < x.cols(); ++i) os << ",x" << i + 1;
    for (Eigen::Index j = 0; j < u.cols(); ++j) os << ",u" << j + 1;
    os << "\n";
    os.precision(17);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      os << t;
      for (Eigen::Index i = 0; i < x.cols(); ++i) os << "," << x(t, i);
      for (Eigen::Index j = 0; j < u.cols(); ++j) os << "," << u(t, j);
      os << "\n";
    }
  }
};

inline void require_admissible_x0(const LtnSystem& sys, const Vec& x0) {
  const double cap = sys.state_cap();
  for (int i = 0; i < sys.n; ++i) {
    check(x0[i] >= 0.0 && x0[i] <= cap,
          cat("x0[", i, "] = ", x0[i], " outside the invariant box [0, ", cap,
              "]; pass clamp_x0/--force to project"));
  }
}

inline SimulationTrace simulate(const LtnSystem& sys, const Vec& x0,
                                const InputPolicy& policy, int T,
                                const DisturbanceSpec& dist = {},
                                std::uint64_t noise_seed = 0,
                                bool clamp_x0 = false) {
  sys.validate();
  check(x0.size() == sys.n, "simulate: x0 has wrong dimension");
  check(T >= 1, "simulate: horizon must be >= 1");
  Vec x = clamp_x0 ? Vec(threshold_clamp(x0, sys.state_cap())) : x0;
  if (!clamp_x0) require_admissible_x0(sys, x);

  SimulationTrace tr;
  tr.x.resize(T + 1, sys.n);
  tr.u.resize(T + 1, sys.m);
  tr.w.resize(dist.active() ? T : 0, sys.n);

  Rng noise(noise_seed);
  for (int t = 0; t < T; ++t) {
    tr.x.row(t) = x.transpose();
    const Vec u = policy(t, x);
    check(u.size() == sys.m, "simulate: policy returned wrong input dimension");
    tr.u.row(t) = u.transpose();
    if (dist.active()) {
      const Vec w = noise.uniform_vec(sys.n, dist.lo, dist.hi);
      tr.w.row(t) = w.transpose();
      x = step_with_disturbance(sys, x, u, w);
    } else {
      x = step(sys, x, u);
    }
  }
  tr.x.row(T) = x.transpose();
  tr.u.row(T) = policy(T, x).transpose();
  return tr;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const LtnSystem& sys) {
  return {{"n", sys.n},         {"m", sys.m}, {"alpha", sys.alpha},
          {"s", sys.s},         {"W", matrix_to_json(sys.W)},
          {"B", matrix_to_json(sys.B)}};
}

inline LtnSystem system_from_json(const nlohmann::json& j) {
  LtnSystem sys;
  sys.n = j.at("n").get<int>();
  sys.m = j.at("m").get<int>();
  sys.alpha = j.at("alpha").get<double>();
  sys.s = j.at("s").get<double>();
  sys.W = matrix_from_json(j.at("W"), "W");
  sys.B = matrix_from_json(j.at("B"), "B");
  sys.validate();
  return sys;
}

inline LtnSystem load_system(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), cat("cannot open system file '", path, "'"));
  nlohmann::json j;
  in >> j;
  return system_from_json(j);
}

inline void save_system(const LtnSystem& sys, const std::string& path) {
  std::ofstream out(path);
  check(out.good(), cat("cannot write system file '", path, "'"));
  out << to_json(sys).dump(2) << "\n";
}

}  // namespace ltn
