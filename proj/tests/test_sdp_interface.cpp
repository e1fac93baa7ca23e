#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>

#include "ltn/sdp.hpp"
#include "ltn/sdp_solver.hpp"

using namespace ltn;

namespace {

// maximize g subject to [[1, g], [g, 1]] >= 0. Optimum is g = 1.
SdpProblem correlation_problem() {
  SdpProblem p;
  const int g = p.add_variable("g", 1, 1, false);
  SdpExpr e = p.make_expr("corr", 2, 2);
  e.constant << 1.0, 0.0, 0.0, 1.0;
  e.add_term(g, 0, 0, 0, 1, 1.0);
  e.add_term(g, 0, 0, 1, 0, 1.0);
  p.add_psd(std::move(e));
  p.maximize({{g, 0, 0, 1.0}});
  return p;
}

}  // namespace

TEST_CASE("bounded correlation entry maximizes to one") {
  const SdpProblem p = correlation_problem();
  const SdpSolution sol = solve(p);
  REQUIRE(sol.status == SdpStatus::optimal);
  REQUIRE(sol.has_values());
  REQUIRE(std::abs(sol.objective - 1.0) <= 1e-6);
  REQUIRE(std::abs(sol.value("g")(0, 0) - 1.0) <= 1e-6);
  REQUIRE(sol.newton_iterations > 0);
  REQUIRE(sol.wall_seconds >= 0.0);
}

TEST_CASE("psd variable pinned to a negative value is infeasible") {
  SdpProblem p;
  const int x = p.add_variable("X", 1, 1, true);
  SdpExpr cone = p.make_expr("X_psd", 1, 1);
  cone.add_term(x, 0, 0, 0, 0, 1.0);
  p.add_psd(std::move(cone));
  SdpExpr pin = p.make_expr("X_value", 1, 1);
  pin.constant << 1.0;  // X + 1 = 0, i.e. X = -1
  pin.add_term(x, 0, 0, 0, 0, 1.0);
  p.add_equality(std::move(pin));
  const SdpSolution sol = solve(p);
  REQUIRE(sol.status == SdpStatus::infeasible);
  REQUIRE_FALSE(sol.has_values());
  REQUIRE_FALSE(sol.message.empty());
}

TEST_CASE("empty problem is trivially optimal with zero objective") {
  SdpProblem p;
  const SdpSolution sol = solve(p);
  REQUIRE(sol.status == SdpStatus::optimal);
  REQUIRE(sol.objective == 0.0);
}

TEST_CASE("geometric mean bound through equality elimination") {
  // maximize g subject to [[a, g], [g, b]] >= 0, a = 2, b = 0.5.
  // The block is PSD iff g^2 <= a b, so the optimum is sqrt(1.0) = 1.
  SdpProblem p;
  const int a = p.add_variable("a", 1, 1, false);
  const int b = p.add_variable("b", 1, 1, false);
  const int g = p.add_variable("g", 1, 1, false);
  SdpExpr cone = p.make_expr("gram", 2, 2);
  cone.constant.setZero();
  cone.add_term(a, 0, 0, 0, 0, 1.0);
  cone.add_term(b, 0, 0, 1, 1, 1.0);
  cone.add_term(g, 0, 0, 0, 1, 1.0);
  cone.add_term(g, 0, 0, 1, 0, 1.0);
  p.add_psd(std::move(cone));
  SdpExpr pa = p.make_expr("fix_a", 1, 1);
  pa.constant << -2.0;
  pa.add_term(a, 0, 0, 0, 0, 1.0);
  p.add_equality(std::move(pa));
  SdpExpr pb = p.make_expr("fix_b", 1, 1);
  pb.constant << -0.5;
  pb.add_term(b, 0, 0, 0, 0, 1.0);
  p.add_equality(std::move(pb));
  p.maximize({{g, 0, 0, 1.0}});

  const SdpSolution sol = solve(p);
  REQUIRE(sol.status == SdpStatus::optimal);
  REQUIRE(std::abs(sol.value("a")(0, 0) - 2.0) <= 1e-9);
  REQUIRE(std::abs(sol.value("b")(0, 0) - 0.5) <= 1e-9);
  REQUIRE(std::abs(sol.objective - 1.0) <= 1e-6);
}

TEST_CASE("largest shift below a symmetric matrix equals its smallest "
          "eigenvalue") {
  // maximize t subject to A - t I >= 0: the optimum is lambda_min(A),
  // cross-checked against an eigenvalue decomposition.
  Rng rng(991);
  for (int trial = 0; trial < 3; ++trial) {
    const int n = 5;
    Mat a0 = rng.uniform_mat(n, n, -1.0, 1.0);
    const Mat a = 0.5 * (a0 + a0.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> es(a, Eigen::EigenvaluesOnly);
    const double lmin = es.eigenvalues().minCoeff();

    SdpProblem p;
    const int t = p.add_variable("t", 1, 1, false);
    SdpExpr cone = p.make_expr("shifted", n, n);
    cone.constant = a;
    for (int i = 0; i < n; ++i) cone.add_term(t, 0, 0, i, i, -1.0);
    p.add_psd(std::move(cone));
    p.maximize({{t, 0, 0, 1.0}});

    const SdpSolution sol = solve(p);
    REQUIRE(sol.status == SdpStatus::optimal);
    REQUIRE(std::abs(sol.objective - lmin) <= 1e-6 * (1.0 + std::abs(lmin)));
  }
}

TEST_CASE("interior-point solution respects the boundary from inside") {
  // maximize x1 subject to diag(x1, x2) >= 0 and x1 + x2 = 1. The optimum
  // sits at the corner (1, 0); the returned point must still satisfy every
  // original constraint.
  SdpProblem p;
  const int x = p.add_variable("x", 2, 1, false);
  SdpExpr cone = p.make_expr("diag", 2, 2);
  cone.constant.setZero();
  cone.add_term(x, 0, 0, 0, 0, 1.0);
  cone.add_term(x, 1, 0, 1, 1, 1.0);
  p.add_psd(std::move(cone));
  SdpExpr sum = p.make_expr("sum_to_one", 1, 1);
  sum.constant << -1.0;
  sum.add_term(x, 0, 0, 0, 0, 1.0);
  sum.add_term(x, 1, 0, 0, 0, 1.0);
  p.add_equality(std::move(sum));
  p.maximize({{x, 0, 0, 1.0}});

  const SdpSolution sol = solve(p);
  REQUIRE(sol.status == SdpStatus::optimal);
  const Mat xv = sol.value("x");
  REQUIRE(std::abs(sol.objective - 1.0) <= 1e-5);
  REQUIRE(std::abs(xv(0, 0) + xv(1, 0) - 1.0) <= 1e-9);
  REQUIRE(xv(0, 0) >= -1e-9);
  REQUIRE(xv(1, 0) >= -1e-9);
}

TEST_CASE("tall variable seen only through one row is still solved") {
  // S is 40 x 2 but the problem only observes z . S, so the backend's
  // subspace substitution has to recover the same optimum as the scalar
  // formulation: (zS)_1 maximized to 1, (zS)_2 pinned.
  Rng rng(7171);
  const int rows = 40;
  const Vec z = rng.uniform_vec(rows, -1.0, 1.0);

  SdpProblem p;
  const int s = p.add_variable("S", rows, 2, false);
  SdpExpr cone = p.make_expr("corr", 2, 2);
  cone.constant << 1.0, 0.0, 0.0, 1.0;
  for (int r = 0; r < rows; ++r) {
    cone.add_term(s, r, 0, 0, 1, z[r]);
    cone.add_term(s, r, 0, 1, 0, z[r]);
  }
  p.add_psd(std::move(cone));
  SdpExpr pin = p.make_expr("second_column", 1, 1);
  pin.constant << -0.3;
  for (int r = 0; r < rows; ++r) pin.add_term(s, r, 1, 0, 0, z[r]);
  p.add_equality(std::move(pin));
  std::vector<SdpObjectiveTerm> obj;
  for (int r = 0; r < rows; ++r) obj.push_back({s, r, 0, z[r]});
  p.maximize(obj);

  const SdpSolution sol = solve(p);
  REQUIRE(sol.status == SdpStatus::optimal);
  REQUIRE(std::abs(sol.objective - 1.0) <= 1e-6);
  const Mat sv = sol.value("S");
  REQUIRE(sv.rows() == rows);
  REQUIRE(sv.cols() == 2);
  REQUIRE(std::abs(z.dot(sv.col(0)) - 1.0) <= 1e-6);
  REQUIRE(std::abs(z.dot(sv.col(1)) - 0.3) <= 1e-8);
}

TEST_CASE("inconsistent equalities are reported infeasible") {
  SdpProblem p;
  const int x = p.add_variable("x", 1, 1, false);
  SdpExpr e1 = p.make_expr("x_is_one", 1, 1);
  e1.constant << -1.0;
  e1.add_term(x, 0, 0, 0, 0, 1.0);
  p.add_equality(std::move(e1));
  SdpExpr e2 = p.make_expr("x_is_two", 1, 1);
  e2.constant << -2.0;
  e2.add_term(x, 0, 0, 0, 0, 1.0);
  p.add_equality(std::move(e2));
  const SdpSolution sol = solve(p);
  REQUIRE(sol.status == SdpStatus::infeasible);
}

TEST_CASE("symmetric variable solve returns a symmetric matrix") {
  // maximize tr(X) subject to I - X >= 0, X >= 0: optimum tr(X) = n.
  const int n = 3;
  SdpProblem p;
  const int x = p.add_variable("X", n, n, true);
  SdpExpr upper = p.make_expr("below_identity", n, n);
  upper.constant = Mat::Identity(n, n);
  for (int c = 0; c < n; ++c)
    for (int r = 0; r < n; ++r) upper.add_term(x, r, c, r, c, -1.0);
  p.add_psd(std::move(upper));
  SdpExpr lower = p.make_expr("nonneg", n, n);
  lower.constant.setZero();
  for (int c = 0; c < n; ++c)
    for (int r = 0; r < n; ++r) lower.add_term(x, r, c, r, c, 1.0);
  p.add_psd(std::move(lower));
  std::vector<SdpObjectiveTerm> obj;
  for (int i = 0; i < n; ++i) obj.push_back({x, i, i, 1.0});
  p.maximize(obj);

  const SdpSolution sol = solve(p);
  REQUIRE(sol.status == SdpStatus::optimal);
  const Mat xv = sol.value("X");
  REQUIRE((xv - xv.transpose()).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(std::abs(sol.objective - n) <= 1e-5);
  Eigen::SelfAdjointEigenSolver<Mat> es(xv, Eigen::EigenvaluesOnly);
  REQUIRE(es.eigenvalues().minCoeff() >= -1e-7);
  REQUIRE(es.eigenvalues().maxCoeff() <= 1.0 + 1e-7);
}

TEST_CASE("json round-trip preserves the whole problem") {
  Rng rng(7171);
  const int rows = 40;
  SdpProblem p;
  const int s = p.add_variable("S", rows, 2, false);
  const int q = p.add_variable("Q", 3, 3, true);
  SdpExpr cone = p.make_expr("mixed", 2, 2);
  cone.constant << 1.0, 0.25, 0.25, 1.0;
  const Vec z = rng.uniform_vec(rows, -1.0, 1.0);
  for (int r = 0; r < rows; ++r) {
    cone.add_term(s, r, 0, 0, 1, z[r]);
    cone.add_term(s, r, 0, 1, 0, z[r]);
  }
  cone.add_term(q, 1, 2, 0, 0, 0.5);
  p.add_psd(std::move(cone));
  SdpExpr eq = p.make_expr("tie", 2, 1);
  eq.constant << -1.0, 0.5;
  eq.add_term(s, 3, 1, 0, 0, 2.0);
  eq.add_term(q, 0, 0, 1, 0, -1.0);
  p.add_equality(std::move(eq));
  p.maximize({{q, 2, 2, 1.0}, {s, 5, 0, -0.125}});

  const auto path = std::filesystem::temp_directory_path() / "sdp_rt.json";
  save_sdp_problem(p, path.string());
  const SdpProblem q2 = load_sdp_problem(path.string());
  REQUIRE(to_json(q2) == to_json(p));
  std::filesystem::remove(path);
}

TEST_CASE("malformed problems are rejected before solving") {
  SECTION("duplicate variable name") {
    SdpProblem p;
    p.add_variable("X", 2, 2, true);
    REQUIRE_THROWS(p.add_variable("X", 1, 1, false));
  }
  SECTION("term referencing a missing variable") {
    SdpProblem p;
    p.add_variable("X", 2, 2, true);
    SdpExpr e = p.make_expr("bad", 1, 1);
    e.terms.push_back({5, 0, 0, 0, 0, 1.0});
    p.add_psd(std::move(e));
    REQUIRE_THROWS(p.validate());
  }
  SECTION("asymmetric cone expression") {
    SdpProblem p;
    const int x = p.add_variable("x", 1, 1, false);
    SdpExpr e = p.make_expr("asym", 2, 2);
    e.constant.setIdentity();
    e.add_term(x, 0, 0, 0, 1, 1.0);  // no mirrored term at (1, 0)
    p.add_psd(std::move(e));
    REQUIRE_THROWS(p.validate());
  }
  SECTION("non-finite constant") {
    SdpProblem p;
    SdpExpr e = p.make_expr("nan", 1, 1);
    e.constant << std::numeric_limits<double>::quiet_NaN();
    p.add_psd(std::move(e));
    REQUIRE_THROWS(p.validate());
  }
  SECTION("rectangular cone expression") {
    SdpProblem p;
    REQUIRE_THROWS(p.add_psd(p.make_expr("rect", 2, 3)));
  }
}

TEST_CASE("time limit reports timeout without values") {
  SdpProblem p = correlation_problem();
  SdpSettings st;
  st.time_limit_sec = 0.0;
  const SdpSolution sol = solve(p, st);
  REQUIRE(sol.status == SdpStatus::timeout);
  REQUIRE_FALSE(sol.has_values());
}

TEST_CASE("iteration budget yields a feasible interior point") {
  SdpProblem p = correlation_problem();
  SdpSettings st;
  st.max_newton = 3;
  const SdpSolution sol = solve(p, st);
  REQUIRE(sol.status == SdpStatus::feasible);
  REQUIRE(sol.has_values());
  const double g = sol.value("g")(0, 0);
  REQUIRE(g > -1.0);
  REQUIRE(g < 1.0);
  REQUIRE_FALSE(sol.message.empty());
}

TEST_CASE("unknown solver backend is refused with a clear message") {
  setenv("LTN_SOLVER", "does-not-exist", 1);
  SdpProblem p = correlation_problem();
  REQUIRE_THROWS_WITH(solve(p), Catch::Matchers::ContainsSubstring("internal"));
  setenv("LTN_SOLVER", "internal", 1);
  REQUIRE(solve(p).status == SdpStatus::optimal);
  unsetenv("LTN_SOLVER");
}

TEST_CASE("status names are stable") {
  REQUIRE(to_string(SdpStatus::optimal) == "optimal");
  REQUIRE(to_string(SdpStatus::feasible) == "feasible");
  REQUIRE(to_string(SdpStatus::infeasible) == "infeasible");
  REQUIRE(to_string(SdpStatus::numerical_failure) == "numerical_failure");
  REQUIRE(to_string(SdpStatus::timeout) == "timeout");
}
