#pragma once

// Closed-loop execution of the synthesized controllers on the true plant,
// plus the analysis toolkit: quadratic certificate evaluation, switching
// matrix diagnostics, integrator equilibrium, and steady-state metrics.
//
// The plant model is the only place W and B appear; controllers carry gains
// obtained from data, so module boundaries enforce the separation between
// synthesis (data only) and evaluation (true system).

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <vector>

#include "ltn/data_pipeline.hpp"
#include "ltn/lmi_synthesis.hpp"
#include "ltn/ltn_model.hpp"

namespace ltn {

// ===========================================================================
// Controllers

// u(x) = K1 x + K2 r. Steers the state to r, assuming the gains satisfy the
// reference-matching identity; any r inside the invariant box is admissible.
struct FeedforwardController {
  Mat K1;  // m x n
  Mat K2;  // m x n
  Vec r;   // length n

  [[nodiscard]] int n() const { return static_cast<int>(K1.cols()); }
  [[nodiscard]] int m() const { return static_cast<int>(K1.rows()); }

  void validate(const LtnSystem& sys) const {
    check(K1.rows() == sys.m && K1.cols() == sys.n &&
              K2.rows() == sys.m && K2.cols() == sys.n,
          "FeedforwardController: gain shapes do not match the system");
    check(r.size() == sys.n, "FeedforwardController: reference length");
    const double cap = sys.state_cap();
    for (int i = 0; i < sys.n; ++i)
      check(r[i] >= 0.0 && r[i] <= cap,
            cat("FeedforwardController: r[", i, "] = ", r[i],
                " outside the invariant box [0, ", cap, "]"));
  }

  [[nodiscard]] Vec input(const Vec& x) const { return K1 * x + K2 * r; }
};

// u(x, xi) = K1 (x - r) + K2 xi with the integrator xi(t+1) = xi(t) + x(t)-r.
// Needs a strictly interior reference: at the box edges the integrator has no
// room to bias the input in one of the directions.
struct IntegralController {
  Mat K1;  // m x n
  Mat K2;  // m x n
  Vec r;   // length n
  double interior_margin = 1e-6;

  [[nodiscard]] int n() const { return static_cast<int>(K1.cols()); }
  [[nodiscard]] int m() const { return static_cast<int>(K1.rows()); }

  void validate(const LtnSystem& sys) const {
    check(K1.rows() == sys.m && K1.cols() == sys.n &&
              K2.rows() == sys.m && K2.cols() == sys.n,
          "IntegralController: gain shapes do not match the system");
    check(r.size() == sys.n, "IntegralController: reference length");
    const double cap = sys.state_cap();
    for (int i = 0; i < sys.n; ++i)
      check(std::min(r[i], cap - r[i]) >= interior_margin,
            cat("IntegralController: r[", i, "] = ", r[i],
                " is not strictly inside (0, ", cap,
                "); integral tracking requires an interior reference"));
  }

  [[nodiscard]] Vec input(const Vec& x, const Vec& xi) const {
    return K1 * (x - r) + K2 * xi;
  }
};

inline FeedforwardController feedforward_controller(const SynthesisResult& res,
                                                    Vec r) {
  check(res.controller_kind == "feedforward",
        cat("feedforward_controller: result holds ", res.controller_kind,
            " gains"));
  return {res.K1, res.K2, std::move(r)};
}

inline IntegralController integral_controller(const SynthesisResult& res,
                                              Vec r) {
  check(res.controller_kind == "integral",
        cat("integral_controller: result holds ", res.controller_kind,
            " gains"));
  return {res.K1, res.K2, std::move(r), 1e-6};
}

// ===========================================================================
// Closed-loop traces

struct ClosedLoopTrace {
  Mat x;    // (T+1) x n, row t = x(t)
  Mat u;    // (T+1) x m, row t = u(t); the row at t = T is evaluated, not applied
  Mat xi;   // (T+1) x n for the integral controller, otherwise 0 x 0
  Mat eps;  // (T+1) x n, row t = x(t) - r
  Vec V;    // (T+1) once a certificate is attached, otherwise empty
  Mat w;    // T x n disturbance draws when a disturbance was active, else 0 x n
  bool integral = false;

  [[nodiscard]] int horizon() const { return static_cast<int>(x.rows()) - 1; }

  // Columns: t, x1..xn, u1..um, [xi1..xin,] eps_inf, V.
  void write_csv(std::ostream& os) const {
    os << "t";
    for (Eigen::Index i = 0; i < x.cols(); ++i) os << ",x" << i + 1;
    for (Eigen::Index j = 0; j < u.cols(); ++j) os << ",u" << j + 1;
    if (integral)
      for (Eigen::Index i = 0; i < xi.cols(); ++i) os << ",xi" << i + 1;
    os << ",eps_inf,V\n";
    os.precision(17);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      os << t;
      for (Eigen::Index i = 0; i < x.cols(); ++i) os << "," << x(t, i);
      for (Eigen::Index j = 0; j < u.cols(); ++j) os << "," << u(t, j);
      if (integral)
        for (Eigen::Index i = 0; i < xi.cols(); ++i) os << "," << xi(t, i);
      os << "," << eps.row(t).cwiseAbs().maxCoeff();
      if (V.size() > 0)
        os << "," << V[t];
      else
        os << ",nan";
      os << "\n";
    }
  }
};

namespace loop_detail {

template <typename InputFn, typename AdvanceFn>
ClosedLoopTrace run_loop(const LtnSystem& sys, const Vec& r, const Vec& x0,
                         int T, const DisturbanceSpec& dist,
                         std::uint64_t seed, InputFn&& input,
                         AdvanceFn&& advance) {
  sys.validate();
  check(x0.size() == sys.n, "run_closed_loop: x0 has wrong dimension");
  check(T >= 1, "run_closed_loop: horizon must be >= 1");
  require_admissible_x0(sys, x0);

  ClosedLoopTrace tr;
  tr.x.resize(T + 1, sys.n);
  tr.u.resize(T + 1, sys.m);
  tr.eps.resize(T + 1, sys.n);
  tr.w.resize(dist.active() ? T : 0, sys.n);

  Rng noise(seed);
  Vec x = x0;
  for (int t = 0; t < T; ++t) {
    tr.x.row(t) = x.transpose();
    tr.eps.row(t) = (x - r).transpose();
    const Vec u = input(t, x);
    tr.u.row(t) = u.transpose();
    advance(t, x);
    if (dist.active()) {
      const Vec wv = noise.uniform_vec(sys.n, dist.lo, dist.hi);
      tr.w.row(t) = wv.transpose();
      x = step_with_disturbance(sys, x, u, wv);
    } else {
      x = step(sys, x, u);
    }
  }
  tr.x.row(T) = x.transpose();
  tr.eps.row(T) = (x - r).transpose();
  tr.u.row(T) = input(T, x).transpose();
  return tr;
}

}  // namespace loop_detail

inline ClosedLoopTrace run_closed_loop(const LtnSystem& sys,
                                       const FeedforwardController& ctrl,
                                       const Vec& x0, int T,
                                       const DisturbanceSpec& dist = {},
                                       std::uint64_t seed = 0) {
  ctrl.validate(sys);
  return loop_detail::run_loop(
      sys, ctrl.r, x0, T, dist, seed,
      [&](int, const Vec& x) { return ctrl.input(x); }, [](int, const Vec&) {});
}

inline ClosedLoopTrace run_closed_loop(const LtnSystem& sys,
                                       const IntegralController& ctrl,
                                       const Vec& x0, int T,
                                       const DisturbanceSpec& dist = {},
                                       std::uint64_t seed = 0) {
  ctrl.validate(sys);
  Vec xi = Vec::Zero(sys.n);
  Mat xi_hist(T + 1, sys.n);
  ClosedLoopTrace tr = loop_detail::run_loop(
      sys, ctrl.r, x0, T, dist, seed,
      [&](int t, const Vec& x) {
        xi_hist.row(t) = xi.transpose();
        return ctrl.input(x, xi);
      },
      [&](int, const Vec& x) { xi += x - ctrl.r; });
  tr.integral = true;
  tr.xi = std::move(xi_hist);
  return tr;
}

// ===========================================================================
// Quadratic certificate evaluation

// V(eps) = eps^T P_bar^{-1} eps, via a linear solve rather than inversion.
inline double lyapunov_value(const Mat& p_bar, const Vec& eps) {
  check(p_bar.rows() == p_bar.cols() && p_bar.rows() == eps.size(),
        "lyapunov_value: dimension mismatch");
  Eigen::LLT<Mat> llt(p_bar);
  check(llt.info() == Eigen::Success,
        "lyapunov_value: certificate matrix is not positive definite");
  return eps.dot(llt.solve(eps));
}

inline double lyapunov_value(const Mat& p_bar, const Vec& eps, const Vec& e) {
  Vec z(eps.size() + e.size());
  z << eps, e;
  return lyapunov_value(p_bar, z);
}

inline void attach_lyapunov(ClosedLoopTrace& tr, const Mat& p_bar) {
  check(!tr.integral,
        "attach_lyapunov: integral traces need the integrator equilibrium");
  check(p_bar.rows() == tr.eps.cols(), "attach_lyapunov: certificate size");
  Eigen::LLT<Mat> llt(p_bar);
  check(llt.info() == Eigen::Success,
        "attach_lyapunov: certificate matrix is not positive definite");
  tr.V.resize(tr.eps.rows());
  for (Eigen::Index t = 0; t < tr.eps.rows(); ++t) {
    const Vec e = tr.eps.row(t).transpose();
    tr.V[t] = e.dot(llt.solve(e));
  }
}

inline void attach_lyapunov(ClosedLoopTrace& tr, const Mat& p_bar,
                            const Vec& xi_star) {
  check(tr.integral, "attach_lyapunov: trace has no integrator state");
  const Eigen::Index n = tr.eps.cols();
  check(p_bar.rows() == 2 * n && xi_star.size() == n,
        "attach_lyapunov: certificate size");
  Eigen::LLT<Mat> llt(p_bar);
  check(llt.info() == Eigen::Success,
        "attach_lyapunov: certificate matrix is not positive definite");
  tr.V.resize(tr.eps.rows());
  Vec z(2 * n);
  for (Eigen::Index t = 0; t < tr.eps.rows(); ++t) {
    z.head(n) = tr.eps.row(t).transpose();
    z.tail(n) = tr.xi.row(t).transpose() - xi_star;
    tr.V[t] = z.dot(llt.solve(z));
  }
}

// ===========================================================================
// Switching matrix

// Diagonal of the matrix that rewrites the thresholded error recursion as a
// switched linear one: entry i is
//   ([y + (1-a)r]_0^s - (1-a)r)[i] / y[i]   if y + (1-a)r escapes [0, s],
//   1                                        otherwise.
// y is ZM eps for the feedforward loop and ZM eps + ZU e for the integral
// loop. Entries lie in (0, 1] whenever r is admissible, because the escape
// branches force y[i] != 0.
inline Vec eval_switch_matrix(const Vec& y, const Vec& r, double alpha,
                              double s) {
  check(y.size() == r.size(), "eval_switch_matrix: dimension mismatch");
  Vec d(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double base = (1.0 - alpha) * r[i];
    const double pre = y[i] + base;
    if (pre > s || pre < 0.0) {
      check(y[i] != 0.0,
            "eval_switch_matrix: zero denominator on a saturated branch; "
            "the reference lies outside [0, s/(1-a)]");
      d[i] = (std::clamp(pre, 0.0, s) - base) / y[i];
    } else {
      d[i] = 1.0;
    }
  }
  return d;
}

// ===========================================================================
// Integrator equilibrium

struct XiStar {
  Vec xi_star;
  double residual = 0.0;  // relative infinity-norm residual of the solve
};

// Solves (Z U) xi* = (1-a) r - Z (M+N) r. M, N, U are stacked per-node
// representation blocks; nonsingular Z U is exactly what the integral design
// certifies, so a singular one here means the gains were not produced by a
// valid synthesis.
inline XiStar compute_xi_star(const DataMatrices& dm,
                              const std::vector<Mat>& M,
                              const std::vector<Mat>& N,
                              const std::vector<Mat>& U, const Vec& r) {
  check(r.size() == dm.n, "compute_xi_star: reference length");
  const Mat zm = z_times_blocks(dm, M);
  const Mat zn = z_times_blocks(dm, N);
  const Mat zu = z_times_blocks(dm, U);
  const auto rep = check_zu_nonsingular(zu);
  check(rep.ok,
        cat("compute_xi_star: Z U is numerically singular (min singular "
            "value ",
            rep.min_singular_value,
            "); the integral design requires a nonsingular Z U"));
  const Vec rhs = (1.0 - dm.alpha) * r - (zm + zn) * r;
  XiStar out;
  out.xi_star = zu.fullPivLu().solve(rhs);
  out.residual = (zu * out.xi_star - rhs).lpNorm<Eigen::Infinity>() /
                 (1.0 + rhs.lpNorm<Eigen::Infinity>());
  check(out.residual <= 1e-8,
        cat("compute_xi_star: solve residual ", out.residual,
            " exceeds 1e-8"));
  return out;
}

// Builds M, U from the stored certificate blocks via [M U] = [S1 S2] P^{-1}
// and N from the min-norm representation of [0; -K1], then solves for xi*.
inline XiStar integral_equilibrium(const DataMatrices& dm,
                                   const SynthesisResult& res, const Vec& r) {
  check(res.integral(), "integral_equilibrium: feedforward result");
  check(res.S1.size() > 0 && res.S2.size() > 0,
        "integral_equilibrium: result has no S1/S2 blocks (loaded from a "
        "gains-only file?)");
  const int n = dm.n;
  const auto s1 = split_blocks(res.S1, n);
  const auto s2 = split_blocks(res.S2, n);
  const Eigen::LLT<Mat> llt(res.P_bar);
  check(llt.info() == Eigen::Success,
        "integral_equilibrium: certificate matrix is not positive definite");
  std::vector<Mat> M(n), U(n);
  for (int i = 0; i < n; ++i) {
    Mat s12(dm.T_d, 2 * n);
    s12 << s1[i], s2[i];
    const Mat mu = llt.solve(s12.transpose()).transpose();
    M[i] = mu.leftCols(n);
    U[i] = mu.rightCols(n);
  }
  Mat target = Mat::Zero(n + dm.m, n);
  target.bottomRows(dm.m) = -res.K1;
  const auto N = solve_representation_blocks(dm, target);
  return compute_xi_star(dm, M, N, U, r);
}

// ===========================================================================
// Steady-state metrics

struct SteadyStateMetrics {
  double mean_abs_error = 0.0;  // mean |eps| over the trailing window
  double max_error = 0.0;       // max |eps| over the trailing window
  Vec per_state_mean_abs_error;
  int settling_time = -1;  // first t with ||eps||_inf <= tol ever after; -1 if never
  double settle_tol = 0.0;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    j["mean_abs_error"] = mean_abs_error;
    j["max_error"] = max_error;
    j["per_state_mean_abs_error"] =
        std::vector<double>(per_state_mean_abs_error.data(),
                            per_state_mean_abs_error.data() +
                                per_state_mean_abs_error.size());
    j["settling_time"] = settling_time;
    j["settle_tol"] = settle_tol;
    return j;
  }
};

inline SteadyStateMetrics steady_state_metrics(const ClosedLoopTrace& tr,
                                               double tail_fraction,
                                               double settle_tol = 1e-2) {
  const Eigen::Index rows = tr.eps.rows();
  check(rows >= 10, "steady_state_metrics: trace too short");
  check(tail_fraction > 0.0 && tail_fraction <= 1.0,
        "steady_state_metrics: tail_fraction must lie in (0, 1]");
  const Eigen::Index window = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(std::ceil(tail_fraction * rows)));
  const Mat tail = tr.eps.bottomRows(window).cwiseAbs();

  SteadyStateMetrics out;
  out.mean_abs_error = tail.mean();
  out.max_error = tail.maxCoeff();
  out.per_state_mean_abs_error = tail.colwise().mean().transpose();
  out.settle_tol = settle_tol;
  out.settling_time = 0;
  for (Eigen::Index t = rows - 1; t >= 0; --t) {
    if (tr.eps.row(t).cwiseAbs().maxCoeff() > settle_tol) {
      out.settling_time = (t + 1 < rows) ? static_cast<int>(t + 1) : -1;
      break;
    }
  }
  return out;
}

}  // namespace ltn
