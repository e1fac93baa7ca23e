#pragma once

// Controller synthesis from data: assembly of the stabilization LMI programs
// (feedforward and integral variants, full 2^n or reduced O(n) vertex sets),
// gain extraction, and numerical certificate validation.
//
// Conventions. S1 and S2 live as n stacked T_d x n blocks, one per node;
// Z S1 is assembled blockwise as row i = Z_i S1_i, and Q^T S1 blockwise as
// Q_i^T S1_i. The decoupling constraint calL Q^T S = 0 is encoded as
// Q_i^T S_i = Q_1^T S_1 for i = 2..n, which has the same solution set with
// far fewer rows. Strict inequalities are realized as ">= gamma I" with
// gamma maximized and accepted only above gamma_min.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ltn/data_pipeline.hpp"
#include "ltn/sdp.hpp"
#include "ltn/sdp_solver.hpp"

namespace ltn {

// ===========================================================================
// Constant matrices of the decoupled gain structure

struct ConstantMatrices {
  int n = 0;
  int m = 0;
  Mat L;     // n x n complete-graph Laplacian, kernel = span(1)
  Mat calL;  // L kron I_{n+m}
  Mat C1;    // n x n(n+m), selects rows 1..n of the first stacked block
  Mat C2;    // m x n(n+m), selects rows n+1..n+m of the first stacked block
};

inline ConstantMatrices build_constant_matrices(int n, int m) {
  check(n >= 1 && m >= 1, "build_constant_matrices: n, m must be >= 1");
  ConstantMatrices cm;
  cm.n = n;
  cm.m = m;
  cm.L = static_cast<double>(n) * Mat::Identity(n, n) - Mat::Ones(n, n);
  const int b = n + m;
  cm.calL = Mat::Zero(n * b, n * b);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      cm.calL.block(i * b, j * b, b, b) =
          cm.L(i, j) * Mat::Identity(b, b);
  cm.C1 = Mat::Zero(n, n * b);
  cm.C1.leftCols(n) = Mat::Identity(n, n);
  cm.C2 = Mat::Zero(m, n * b);
  cm.C2.block(0, n, m, m) = Mat::Identity(m, m);
  return cm;
}

// ===========================================================================
// Vertex sets

enum class VertexMode { full, reduced };

inline std::string to_string(VertexMode v) {
  return v == VertexMode::full ? "full" : "reduced";
}

inline VertexMode vertex_mode_from_string(const std::string& s) {
  if (s == "full") return VertexMode::full;
  if (s == "reduced") return VertexMode::reduced;
  throw std::runtime_error(
      cat("vertex mode must be 'full' or 'reduced', got '", s, "'"));
}

// Full enumeration is exponential; beyond this many nodes default to the
// reduced set.
inline VertexMode default_vertex_mode(int n) {
  return n > 8 ? VertexMode::reduced : VertexMode::full;
}

struct VertexSet {
  VertexMode kind = VertexMode::full;
  std::vector<Vec> diagonals;  // 0/1 patterns; scaling applied at assembly
};

inline VertexSet enumerate_vertices(int n, VertexMode kind, int cap = 16) {
  check(n >= 1, "enumerate_vertices: n must be >= 1");
  VertexSet vs;
  vs.kind = kind;
  if (kind == VertexMode::reduced) {
    vs.diagonals.push_back(Vec::Zero(n));
    for (int k = 0; k < n; ++k) {
      Vec d = Vec::Zero(n);
      d[k] = 1.0;
      vs.diagonals.push_back(d);
    }
    return vs;
  }
  check(n <= cap,
        cat("enumerate_vertices: full mode with n = ", n,
            " exceeds the cap of ", cap, "; use reduced mode"));
  const std::uint32_t total = 1u << n;
  vs.diagonals.push_back(Vec::Ones(n));  // identity listed first
  for (std::uint32_t mask = 0; mask + 1 < total; ++mask) {
    Vec d = Vec::Zero(n);
    for (int b = 0; b < n; ++b)
      if (mask & (1u << b)) d[b] = 1.0;
    vs.diagonals.push_back(d);
  }
  return vs;
}

// ===========================================================================
// Program assembly

namespace synth_detail {

// Adds the terms of scale * (Z S)[i, c] to expression entry (erow, ecol):
// sum_k scale * Z_i[k] * S_i[k, c]. Masked samples hold exact zeros.
inline void add_zs_entry(SdpExpr& e, const DataMatrices& dm, int s_var_base,
                         int i, int c, int erow, int ecol, double scale) {
  const auto& zi = dm.Z_blocks[i];
  for (int k = 0; k < dm.T_d; ++k)
    if (zi[k] != 0.0)
      e.add_term(s_var_base + i, k, c, erow, ecol, scale * zi[k]);
}

// Adds the terms of scale * (Q_i^T S_i)[a, c] to entry (erow, ecol).
inline void add_qts_entry(SdpExpr& e, const DataMatrices& dm, int s_var_base,
                          int i, int a, int c, int erow, int ecol,
                          double scale) {
  const auto& qi = dm.Q_blocks[i];
  for (int k = 0; k < dm.T_d; ++k)
    if (qi(k, a) != 0.0)
      e.add_term(s_var_base + i, k, c, erow, ecol, scale * qi(k, a));
}

// Blockwise decoupling rows Q_i^T S_i - Q_1^T S_1 = 0 for i = 2..n, plus the
// anchor rows of the first block against the given (n+m) x n target pattern:
// rows 0..n-1 equal the P entries selected by p_entry (or zero when absent).
struct AnchorTarget {
  int p_var = -1;  // -1: target is the zero matrix
  int p_row_off = 0;
  int p_col_off = 0;
};

inline void add_equalities_for(SdpProblem& prog, const DataMatrices& dm,
                               int s_var_base, const std::string& tag,
                               const AnchorTarget& anchor) {
  const int n = dm.n, m = dm.m;
  for (int i = 1; i < n; ++i) {
    SdpExpr e =
        prog.make_expr(cat("decouple_", tag, "_node", i + 1), n + m, n);
    for (int a = 0; a < n + m; ++a)
      for (int c = 0; c < n; ++c) {
        add_qts_entry(e, dm, s_var_base, i, a, c, a, c, 1.0);
        add_qts_entry(e, dm, s_var_base, 0, a, c, a, c, -1.0);
      }
    prog.add_equality(std::move(e));
  }
  SdpExpr e = prog.make_expr(cat("anchor_", tag), n, n);
  for (int a = 0; a < n; ++a)
    for (int c = 0; c < n; ++c) {
      add_qts_entry(e, dm, s_var_base, 0, a, c, a, c, 1.0);
      if (anchor.p_var >= 0)
        e.add_term(anchor.p_var, anchor.p_row_off + a, anchor.p_col_off + c,
                   a, c, -1.0);
    }
  prog.add_equality(std::move(e));
}

inline void require_rich(const DataMatrices& dm, const char* who) {
  const auto rich = check_richness(dm);
  check(rich.pass, cat(who, ": ", rich.describe(dm.n, dm.m)));
}

}  // namespace synth_detail

// Feedforward program: variables P (n x n symmetric), S1_i, S2_i
// (T_d x n each), gamma; maximize gamma subject to
//   P <= I,
//   [[P, (aP + Z S1)^T], [aP + Z S1, P]] >= gamma I,
//   the same block with R Z S1 >= 0 for every non-identity vertex R
//   (n R~_k in reduced mode),
//   decoupling and anchors C1 Q^T S1 = P, C1 Q^T S2 = 0,
//   Z (S1 + S2) = (1 - alpha) P.
inline SdpProblem assemble_ff_program(const DataMatrices& dm, double alpha,
                                      VertexMode vertex_mode) {
  synth_detail::require_rich(dm, "assemble_ff_program");
  const int n = dm.n;
  SdpProblem prog;
  const int vP = prog.add_variable("P", n, n, true);
  const int vS1 = prog.add_variable("S1_1", dm.T_d, n, false);
  for (int i = 1; i < n; ++i)
    prog.add_variable(cat("S1_", i + 1), dm.T_d, n, false);
  const int vS2 = prog.add_variable("S2_1", dm.T_d, n, false);
  for (int i = 1; i < n; ++i)
    prog.add_variable(cat("S2_", i + 1), dm.T_d, n, false);
  const int vG = prog.add_variable("gamma", 1, 1, false);

  // P <= I.
  {
    SdpExpr e = prog.make_expr("p_normalization", n, n);
    e.constant = Mat::Identity(n, n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) e.add_term(vP, r, c, r, c, -1.0);
    prog.add_psd(std::move(e));
  }

  // One 2n vertex block; R given by diag pattern d (scaled), gamma_coeff
  // subtracts gamma from the diagonal for the strict block.
  auto add_vertex_block = [&](const std::string& label, const Vec& d,
                              double r_scale, bool with_gamma) {
    SdpExpr e = prog.make_expr(label, 2 * n, 2 * n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        e.add_term(vP, r, c, r, c, 1.0);              // top-left P
        e.add_term(vP, r, c, n + r, n + c, 1.0);      // bottom-right P
        e.add_term(vP, r, c, n + r, c, alpha);        // bottom-left aP
        e.add_term(vP, r, c, c, n + r, alpha);        // mirrored
        const double ri = r_scale * d[r];
        if (ri != 0.0) {
          synth_detail::add_zs_entry(e, dm, vS1, r, c, n + r, c, ri);
          synth_detail::add_zs_entry(e, dm, vS1, r, c, c, n + r, ri);
        }
      }
    if (with_gamma)
      for (int r = 0; r < 2 * n; ++r) e.add_term(vG, 0, 0, r, r, -1.0);
    prog.add_psd(std::move(e));
  };

  add_vertex_block("strict", Vec::Ones(n), 1.0, true);
  const VertexSet vs = enumerate_vertices(n, vertex_mode);
  const double r_scale =
      vertex_mode == VertexMode::reduced ? static_cast<double>(n) : 1.0;
  for (std::size_t j = 0; j < vs.diagonals.size(); ++j) {
    if (vertex_mode == VertexMode::full && j == 0) continue;  // identity
    add_vertex_block(cat("vertex_", to_string(vertex_mode), "_", j),
                     vs.diagonals[j], r_scale, false);
  }

  synth_detail::add_equalities_for(prog, dm, vS1, "S1", {vP, 0, 0});
  synth_detail::add_equalities_for(prog, dm, vS2, "S2", {});

  // Z (S1 + S2) = (1 - alpha) P.
  {
    SdpExpr e = prog.make_expr("gain_match", n, n);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < n; ++c) {
        synth_detail::add_zs_entry(e, dm, vS1, i, c, i, c, 1.0);
        synth_detail::add_zs_entry(e, dm, vS2, i, c, i, c, 1.0);
        e.add_term(vP, i, c, i, c, -(1.0 - alpha));
      }
    prog.add_equality(std::move(e));
  }

  prog.maximize({{vG, 0, 0, 1.0}});
  return prog;
}

// Integral program: variables P (2n x 2n symmetric, blocks P11 P12 / . P22),
// S1_i, S2_i, gamma; maximize gamma subject to
//   P <= I_{2n},
//   [[P, Phi^T], [Phi, P]] >= gamma I with
//   Phi = [[a P11 + Z S1, a P12 + Z S2], [P11 + P12^T, P12 + P22]],
//   per-vertex blocks with R scaling Z S1 and Z S2,
//   decoupling and anchors C1 Q^T S1 = P11, C1 Q^T S2 = P12.
// There is no feedforward matching constraint in this design.
//
// The non-identity vertex blocks are structurally boundary-tight: for any
// vertex R with a zero diagonal entry, [[aI + R ZM, R ZU], [I, I]] keeps the
// integrator row nonexpansive along ker(R ZU), so those blocks can be
// singular at best and the feasible set has no interior. A barrier method
// needs one, so the synthesis runs in two phases:
//   1. margin phase: vertex blocks relaxed by vertex_slack * I, gamma
//      maximized (this assembly);
//   2. face polish: gamma pinned below the achieved margin, theta maximized
//      with vertex blocks >= theta I (assemble_integral_polish_program).
// Exact face points exist (theta* = 0), so the polish drives the raw vertex
// violations down to the solver gap, and validate_certificate checks the
// unrelaxed blocks.

namespace synth_detail {

// vertex_slack > 0, gamma_pin < 0: margin phase. gamma_pin >= 0: face polish.
inline SdpProblem assemble_integral_core(const DataMatrices& dm, double alpha,
                                         VertexMode vertex_mode,
                                         double vertex_slack,
                                         double gamma_pin) {
  require_rich(dm, "assemble_integral_program");
  const bool polish = gamma_pin >= 0.0;
  const int n = dm.n;
  SdpProblem prog;
  const int vP = prog.add_variable("P", 2 * n, 2 * n, true);
  const int vS1 = prog.add_variable("S1_1", dm.T_d, n, false);
  for (int i = 1; i < n; ++i)
    prog.add_variable(cat("S1_", i + 1), dm.T_d, n, false);
  const int vS2 = prog.add_variable("S2_1", dm.T_d, n, false);
  for (int i = 1; i < n; ++i)
    prog.add_variable(cat("S2_", i + 1), dm.T_d, n, false);
  const int vObj =
      prog.add_variable(polish ? "theta" : "gamma", 1, 1, false);

  {
    SdpExpr e = prog.make_expr("p_normalization", 2 * n, 2 * n);
    e.constant = Mat::Identity(2 * n, 2 * n);
    for (int r = 0; r < 2 * n; ++r)
      for (int c = 0; c < 2 * n; ++c) e.add_term(vP, r, c, r, c, -1.0);
    prog.add_psd(std::move(e));
  }

  // Emits Phi entry (pr, pc) of the 2n x 2n lower-left block into the 4n
  // expression at (2n + pr, pc) and its mirror.
  auto add_vertex_block = [&](const std::string& label, const Vec& d,
                              double r_scale, bool strict_block) {
    const int N = 2 * n;
    SdpExpr e = prog.make_expr(label, 2 * N, 2 * N);
    if (strict_block && polish)
      e.constant = -gamma_pin * Mat::Identity(2 * N, 2 * N);
    if (!strict_block && !polish)
      e.constant = vertex_slack * Mat::Identity(2 * N, 2 * N);
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < N; ++c) {
        e.add_term(vP, r, c, r, c, 1.0);
        e.add_term(vP, r, c, N + r, N + c, 1.0);
      }
    auto phi_p = [&](int pr, int pc, int var_r, int var_c, double coeff) {
      e.add_term(vP, var_r, var_c, N + pr, pc, coeff);
      e.add_term(vP, var_r, var_c, pc, N + pr, coeff);
    };
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < n; ++c) {
        const double ri = r_scale * d[i];
        // Phi[i, c] = a P11[i, c] + (R Z S1)[i, c]
        phi_p(i, c, i, c, alpha);
        if (ri != 0.0) {
          synth_detail::add_zs_entry(e, dm, vS1, i, c, N + i, c, ri);
          synth_detail::add_zs_entry(e, dm, vS1, i, c, c, N + i, ri);
        }
        // Phi[i, n+c] = a P12[i, c] + (R Z S2)[i, c]
        phi_p(i, n + c, i, n + c, alpha);
        if (ri != 0.0) {
          synth_detail::add_zs_entry(e, dm, vS2, i, c, N + i, n + c, ri);
          synth_detail::add_zs_entry(e, dm, vS2, i, c, n + c, N + i, ri);
        }
        // Phi[n+i, c] = P11[i, c] + P12[c, i]
        phi_p(n + i, c, i, c, 1.0);
        phi_p(n + i, c, c, n + i, 1.0);
        // Phi[n+i, n+c] = P12[i, c] + P22[i, c]
        phi_p(n + i, n + c, i, n + c, 1.0);
        phi_p(n + i, n + c, n + i, n + c, 1.0);
      }
    if (strict_block && !polish)
      for (int r = 0; r < 2 * N; ++r) e.add_term(vObj, 0, 0, r, r, -1.0);
    if (!strict_block && polish)
      for (int r = 0; r < 2 * N; ++r) e.add_term(vObj, 0, 0, r, r, -1.0);
    prog.add_psd(std::move(e));
  };

  add_vertex_block("strict", Vec::Ones(n), 1.0, true);
  const VertexSet vs = enumerate_vertices(n, vertex_mode);
  const double r_scale =
      vertex_mode == VertexMode::reduced ? static_cast<double>(n) : 1.0;
  for (std::size_t j = 0; j < vs.diagonals.size(); ++j) {
    if (vertex_mode == VertexMode::full && j == 0) continue;
    add_vertex_block(cat("vertex_", to_string(vertex_mode), "_", j),
                     vs.diagonals[j], r_scale, false);
  }

  synth_detail::add_equalities_for(prog, dm, vS1, "S1", {vP, 0, 0});
  synth_detail::add_equalities_for(prog, dm, vS2, "S2", {vP, 0, n});

  prog.maximize({{vObj, 0, 0, 1.0}});
  return prog;
}

}  // namespace synth_detail

inline SdpProblem assemble_integral_program(const DataMatrices& dm,
                                            double alpha,
                                            VertexMode vertex_mode,
                                            double vertex_slack = 1e-6) {
  check(vertex_slack > 0.0,
        "assemble_integral_program: vertex_slack must be positive");
  return synth_detail::assemble_integral_core(dm, alpha, vertex_mode,
                                              vertex_slack, -1.0);
}

inline SdpProblem assemble_integral_polish_program(const DataMatrices& dm,
                                                   double alpha,
                                                   VertexMode vertex_mode,
                                                   double gamma_pin) {
  check(gamma_pin > 0.0,
        "assemble_integral_polish_program: gamma_pin must be positive");
  return synth_detail::assemble_integral_core(dm, alpha, vertex_mode, 0.0,
                                              gamma_pin);
}

// ===========================================================================
// Condensed assembly
//
// The S blocks enter the program only through their data images: the common
// block G = Q_i^T S_i (whose state rows are anchored to P) and the rows
// (Z S)_i = Z_i S_i. Splitting Z_i = zeta_i Q_i^T + rho_i with rho_i Q_i = 0
// gives (Z S)_i = zeta_i G + rho_i S_i, so the T_d-sized S coordinates can be
// eliminated:
//   - noise-free collection: rho_i = 0 and (Z S)_i = zeta_i G exactly; the
//     free variables shrink to P and the input rows F = C2 G;
//   - noisy collection: rho_i != 0 on every node and the image rows are free
//     n x n variables X; gains are recovered afterwards as the minimum
//     kernel-energy representation realizing X.
// Both forms describe the same feasible set as the T_d-sized assembly
// projected onto the quantities the LMIs see, at a fraction of the size.
// Full S blocks are reconstructed after the solve, so extraction and
// certificate validation run unchanged.

struct CondensedData {
  int n = 0;
  int m = 0;
  std::vector<Eigen::RowVectorXd> zeta;  // n of 1 x (n+m): row-span fit of Z_i
  std::vector<Eigen::RowVectorXd> rho;   // n of 1 x T_d: novel component
  Vec novelty;        // relative residual |rho_i| / |Z_i| per node
  bool all_exact = false;
  bool all_novel = false;
};

inline CondensedData condense_data(const DataMatrices& dm, double tol = 1e-7) {
  synth_detail::require_rich(dm, "condense_data");
  CondensedData cd;
  cd.n = dm.n;
  cd.m = dm.m;
  cd.zeta.resize(dm.n);
  cd.rho.resize(dm.n);
  cd.novelty.resize(dm.n);
  for (int i = 0; i < dm.n; ++i) {
    const Mat& qi = dm.Q_blocks[i];
    const Eigen::RowVectorXd& zi = dm.Z_blocks[i];
    cd.zeta[i] =
        qi.colPivHouseholderQr().solve(zi.transpose()).transpose();
    cd.rho[i] = zi - cd.zeta[i] * qi.transpose();
    cd.novelty[i] = cd.rho[i].norm() / std::max(zi.norm(), 1e-300);
  }
  cd.all_exact = (cd.novelty.maxCoeff() <= tol);
  cd.all_novel = (cd.novelty.minCoeff() > tol);
  check(cd.all_exact || cd.all_novel,
        cat("condense_data: node image residuals straddle the tolerance ",
            tol, " (min ", cd.novelty.minCoeff(), ", max ",
            cd.novelty.maxCoeff(),
            "); collection must be noise-free or noisy on all nodes"));
  return cd;
}

namespace synth_detail {

// Emits scale * (Z S)[i, c] in condensed variables: either zeta_i applied to
// the stacked block [P_anchor; F] (exact data), the free image entry X(i, c)
// (novel data), or the fitted part plus an explicit off-span residual D(i, c)
// (novel data under image polish). p_var < 0 drops the anchor part.
struct ImageEmitter {
  const CondensedData* cd = nullptr;
  int x_var = -1;
  int f_var = -1;
  int p_var = -1;
  int d_var = -1;
  int p_row_off = 0;
  int p_col_off = 0;

  void add(SdpExpr& e, int i, int c, int erow, int ecol, double scale) const {
    if (x_var >= 0) {
      e.add_term(x_var, i, c, erow, ecol, scale);
      return;
    }
    const auto& z = (*cd).zeta[i];
    if (p_var >= 0)
      for (int a = 0; a < cd->n; ++a)
        if (z[a] != 0.0)
          e.add_term(p_var, p_row_off + a, p_col_off + c, erow, ecol,
                     scale * z[a]);
    for (int b = 0; b < cd->m; ++b)
      if (z[cd->n + b] != 0.0)
        e.add_term(f_var, b, c, erow, ecol, scale * z[cd->n + b]);
    if (d_var >= 0) e.add_term(d_var, i, c, erow, ecol, scale);
  }
};

// Condensed solve phases. margin maximizes gamma; the integral polishes then
// pin gamma and restore what the margin objective trades away: face_polish
// (exact data) maximizes the vertex-block floor theta, image_polish (novel
// data) minimizes the off-span image residual so the recovered gains realize
// the certified images as closely as the margin allows.
enum class CondensedPhase { margin, face_polish, image_polish };

// Shared condensed program body. kind_integral selects the block structure;
// vertex_slack / gamma_pin follow the two-phase convention of
// assemble_integral_core (ignored for the feedforward kind).
inline SdpProblem assemble_condensed_core(const DataMatrices& dm,
                                          const CondensedData& cd,
                                          double alpha, VertexMode vertex_mode,
                                          bool kind_integral,
                                          CondensedPhase phase,
                                          double vertex_slack,
                                          double gamma_pin) {
  check(cd.n == dm.n && cd.m == dm.m, "assemble_condensed_core: dimensions");
  const bool face = phase == CondensedPhase::face_polish;
  const bool image = phase == CondensedPhase::image_polish;
  check(kind_integral || phase == CondensedPhase::margin,
        "assemble_condensed_core: polish phases are integral-only");
  check(!image || cd.all_novel,
        "assemble_condensed_core: image polish requires novel data");
  const int n = dm.n, m = dm.m;
  const int pdim = kind_integral ? 2 * n : n;

  SdpProblem prog;
  const int vP = prog.add_variable("P", pdim, pdim, true);
  ImageEmitter im1, im2;
  im1.cd = im2.cd = &cd;
  if (cd.all_exact || image) {
    im1.f_var = prog.add_variable("F1", m, n, false);
    im2.f_var = prog.add_variable("F2", m, n, false);
    im1.p_var = vP;  // S1 anchor: P (feedforward) or P11 (integral)
    if (kind_integral) {
      im2.p_var = vP;  // S2 anchor: P12
      im2.p_col_off = n;
    }
    if (image) {
      im1.d_var = prog.add_variable("D1", n, n, false);
      im2.d_var = prog.add_variable("D2", n, n, false);
    }
  } else {
    im1.x_var = prog.add_variable("X1", n, n, false);
    im2.x_var = prog.add_variable("X2", n, n, false);
  }
  const int vObj =
      image ? -1 : prog.add_variable(face ? "theta" : "gamma", 1, 1, false);

  {
    SdpExpr e = prog.make_expr("p_normalization", pdim, pdim);
    e.constant = Mat::Identity(pdim, pdim);
    for (int r = 0; r < pdim; ++r)
      for (int c = 0; c < pdim; ++c) e.add_term(vP, r, c, r, c, -1.0);
    prog.add_psd(std::move(e));
  }

  auto add_ff_block = [&](const std::string& label, const Vec& d,
                          double r_scale, bool strict_block) {
    SdpExpr e = prog.make_expr(label, 2 * n, 2 * n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        e.add_term(vP, r, c, r, c, 1.0);
        e.add_term(vP, r, c, n + r, n + c, 1.0);
        e.add_term(vP, r, c, n + r, c, alpha);
        e.add_term(vP, r, c, c, n + r, alpha);
        const double ri = r_scale * d[r];
        if (ri != 0.0) {
          im1.add(e, r, c, n + r, c, ri);
          im1.add(e, r, c, c, n + r, ri);
        }
      }
    if (strict_block)
      for (int r = 0; r < 2 * n; ++r) e.add_term(vObj, 0, 0, r, r, -1.0);
    prog.add_psd(std::move(e));
  };

  auto add_integral_block = [&](const std::string& label, const Vec& d,
                                double r_scale, bool strict_block) {
    const int N = 2 * n;
    SdpExpr e = prog.make_expr(label, 2 * N, 2 * N);
    if (strict_block && (face || image))
      e.constant = -gamma_pin * Mat::Identity(2 * N, 2 * N);
    if (!strict_block && !face)
      e.constant = vertex_slack * Mat::Identity(2 * N, 2 * N);
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < N; ++c) {
        e.add_term(vP, r, c, r, c, 1.0);
        e.add_term(vP, r, c, N + r, N + c, 1.0);
      }
    auto phi_p = [&](int pr, int pc, int var_r, int var_c, double coeff) {
      e.add_term(vP, var_r, var_c, N + pr, pc, coeff);
      e.add_term(vP, var_r, var_c, pc, N + pr, coeff);
    };
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < n; ++c) {
        const double ri = r_scale * d[i];
        phi_p(i, c, i, c, alpha);
        if (ri != 0.0) {
          im1.add(e, i, c, N + i, c, ri);
          im1.add(e, i, c, c, N + i, ri);
        }
        phi_p(i, n + c, i, n + c, alpha);
        if (ri != 0.0) {
          im2.add(e, i, c, N + i, n + c, ri);
          im2.add(e, i, c, n + c, N + i, ri);
        }
        phi_p(n + i, c, i, c, 1.0);
        phi_p(n + i, c, c, n + i, 1.0);
        phi_p(n + i, n + c, i, n + c, 1.0);
        phi_p(n + i, n + c, n + i, n + c, 1.0);
      }
    if ((strict_block && phase == CondensedPhase::margin) ||
        (!strict_block && face))
      for (int r = 0; r < 2 * N; ++r) e.add_term(vObj, 0, 0, r, r, -1.0);
    prog.add_psd(std::move(e));
  };

  auto add_block = [&](const std::string& label, const Vec& d, double r_scale,
                       bool strict_block) {
    if (kind_integral)
      add_integral_block(label, d, r_scale, strict_block);
    else
      add_ff_block(label, d, r_scale, strict_block);
  };

  add_block("strict", Vec::Ones(n), 1.0, true);
  const VertexSet vs = enumerate_vertices(n, vertex_mode);
  const double r_scale =
      vertex_mode == VertexMode::reduced ? static_cast<double>(n) : 1.0;
  for (std::size_t j = 0; j < vs.diagonals.size(); ++j) {
    if (vertex_mode == VertexMode::full && j == 0) continue;
    add_block(cat("vertex_", to_string(vertex_mode), "_", j), vs.diagonals[j],
              r_scale, false);
  }

  if (!kind_integral) {
    // Z (S1 + S2) = (1 - alpha) P in image variables.
    SdpExpr e = prog.make_expr("gain_match", n, n);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < n; ++c) {
        im1.add(e, i, c, i, c, 1.0);
        im2.add(e, i, c, i, c, 1.0);
        e.add_term(vP, i, c, i, c, -(1.0 - alpha));
      }
    prog.add_equality(std::move(e));
  }

  if (image) {
    // Row-wise epigraphs t_{b,i} >= |D_b row i|^2; minimizing their sum keeps
    // the certified images as close to gain-realizable as the margin allows.
    const int vT1 = prog.add_variable("T1", n, 1, false);
    const int vT2 = prog.add_variable("T2", n, 1, false);
    std::vector<SdpObjectiveTerm> obj;
    for (int b = 0; b < 2; ++b) {
      const int vT = b == 0 ? vT1 : vT2;
      const int vD = b == 0 ? im1.d_var : im2.d_var;
      for (int i = 0; i < n; ++i) {
        SdpExpr e = prog.make_expr(cat("kernel_", b + 1, "_", i), n + 1, n + 1);
        e.constant = Mat::Identity(n + 1, n + 1);
        e.constant(0, 0) = 0.0;
        e.add_term(vT, i, 0, 0, 0, 1.0);
        for (int j = 0; j < n; ++j) {
          e.add_term(vD, i, j, 0, 1 + j, 1.0);
          e.add_term(vD, i, j, 1 + j, 0, 1.0);
        }
        prog.add_psd(std::move(e));
        obj.push_back({vT, i, 0, -1.0});
      }
    }
    prog.maximize(obj);
  } else {
    prog.maximize({{vObj, 0, 0, 1.0}});
  }
  return prog;
}

}  // namespace synth_detail

inline SdpProblem condensed_ff_program(const DataMatrices& dm,
                                       const CondensedData& cd, double alpha,
                                       VertexMode vertex_mode) {
  return synth_detail::assemble_condensed_core(
      dm, cd, alpha, vertex_mode, false,
      synth_detail::CondensedPhase::margin, 0.0, -1.0);
}

inline SdpProblem condensed_integral_program(const DataMatrices& dm,
                                             const CondensedData& cd,
                                             double alpha,
                                             VertexMode vertex_mode,
                                             double vertex_slack = 1e-6) {
  check(vertex_slack > 0.0,
        "condensed_integral_program: vertex_slack must be positive");
  return synth_detail::assemble_condensed_core(
      dm, cd, alpha, vertex_mode, true, synth_detail::CondensedPhase::margin,
      vertex_slack, -1.0);
}

inline SdpProblem condensed_integral_polish_program(const DataMatrices& dm,
                                                    const CondensedData& cd,
                                                    double alpha,
                                                    VertexMode vertex_mode,
                                                    double gamma_pin) {
  check(gamma_pin > 0.0,
        "condensed_integral_polish_program: gamma_pin must be positive");
  return synth_detail::assemble_condensed_core(
      dm, cd, alpha, vertex_mode, true,
      synth_detail::CondensedPhase::face_polish, 0.0, gamma_pin);
}

inline SdpProblem condensed_integral_image_polish_program(
    const DataMatrices& dm, const CondensedData& cd, double alpha,
    VertexMode vertex_mode, double gamma_pin, double vertex_slack = 5e-9) {
  check(gamma_pin > 0.0,
        "condensed_integral_image_polish_program: gamma_pin must be positive");
  check(vertex_slack > 0.0,
        "condensed_integral_image_polish_program: vertex_slack must be "
        "positive");
  return synth_detail::assemble_condensed_core(
      dm, cd, alpha, vertex_mode, true,
      synth_detail::CondensedPhase::image_polish, vertex_slack, gamma_pin);
}

// ===========================================================================
// Gain extraction

struct SynthesisResult {
  std::string controller_kind;  // "feedforward" or "integral"
  VertexMode vertex_mode = VertexMode::full;
  Mat K1, K2;    // m x n
  Mat P_bar;     // n x n (feedforward) or 2n x 2n (integral)
  Mat S1, S2;    // stacked n blocks of T_d x n
  double gamma = 0.0;
  double p_min_eig = 0.0;
  double p_cond = 0.0;
  std::map<std::string, double> residuals;

  // Data-side controller blocks: row space images under P_bar^{-1}.
  Mat ZM;  // n x n, both kinds
  Mat ZN;  // n x n, feedforward only
  Mat ZU;  // n x n, integral only
  double zu_min_singular_value = 0.0;

  std::string solver_status;
  std::string solver_message;
  int newton_iterations = 0;
  double solve_seconds = 0.0;

  [[nodiscard]] int n() const { return static_cast<int>(K1.cols()); }
  [[nodiscard]] int m() const { return static_cast<int>(K1.rows()); }
  [[nodiscard]] bool integral() const { return controller_kind == "integral"; }
  [[nodiscard]] Mat P11() const { return P_bar.topLeftCorner(n(), n()); }
  [[nodiscard]] Mat P12() const { return P_bar.topRightCorner(n(), n()); }
  [[nodiscard]] Mat P22() const { return P_bar.bottomRightCorner(n(), n()); }
};

inline Mat stack_blocks(const std::vector<Mat>& blocks) {
  check(!blocks.empty(), "stack_blocks: empty");
  Mat out(blocks[0].rows() * static_cast<Eigen::Index>(blocks.size()),
          blocks[0].cols());
  for (std::size_t i = 0; i < blocks.size(); ++i)
    out.middleRows(blocks[0].rows() * static_cast<Eigen::Index>(i),
                   blocks[0].rows()) = blocks[i];
  return out;
}

inline std::vector<Mat> split_blocks(const Mat& stacked, int count) {
  check(count >= 1 && stacked.rows() % count == 0,
        "split_blocks: row count is not a multiple of the block count");
  const Eigen::Index rows = stacked.rows() / count;
  std::vector<Mat> out(count);
  for (int i = 0; i < count; ++i) out[i] = stacked.middleRows(i * rows, rows);
  return out;
}

namespace synth_detail {

struct PosDefInfo {
  Eigen::LLT<Mat> llt;
  double min_eig = 0.0;
  double cond = 0.0;
};

inline PosDefInfo analyze_pd(const Mat& p, const char* who) {
  Eigen::SelfAdjointEigenSolver<Mat> es(p, Eigen::EigenvaluesOnly);
  PosDefInfo info;
  info.min_eig = es.eigenvalues().minCoeff();
  check(info.min_eig > 0.0,
        cat(who, ": P_bar is not positive definite (min eigenvalue ",
            info.min_eig, ")"));
  info.cond = es.eigenvalues().maxCoeff() / info.min_eig;
  check(info.cond <= 1e10,
        cat(who, ": P_bar condition number ", info.cond,
            " exceeds 1e10; refusing to extract gains"));
  info.llt.compute(p);
  check(info.llt.info() == Eigen::Success, cat(who, ": factorization failed"));
  return info;
}

// X * P^{-1} for symmetric positive definite P via the factorization.
inline Mat right_solve(const Eigen::LLT<Mat>& llt, const Mat& x) {
  return llt.solve(x.transpose()).transpose();
}

inline double rel_fro(const Mat& resid, const Mat& ref) {
  return resid.norm() / std::max(1e-300, ref.norm());
}

inline void fill_solver_metadata(SynthesisResult& r, const SdpSolution& sol) {
  r.solver_status = to_string(sol.status);
  r.solver_message = sol.message;
  r.newton_iterations = sol.newton_iterations;
  r.solve_seconds = sol.wall_seconds;
}

inline void require_usable(const SdpSolution& sol, double gamma_min,
                           const char* who) {
  check(sol.status == SdpStatus::optimal || sol.status == SdpStatus::feasible,
        cat(who, ": solver status '", to_string(sol.status),
            "' carries no usable point (", sol.message, ")"));
  const double g = sol.value("gamma")(0, 0);
  check(g > gamma_min,
        cat(who, ": achieved margin gamma = ", g, " is at or below ",
            gamma_min,
            "; rejecting (try more data or full vertex mode)"));
}

}  // namespace synth_detail

inline SynthesisResult extract_ff_gains(const SdpSolution& sol,
                                        const DataMatrices& dm,
                                        const ConstantMatrices& cm,
                                        VertexMode vertex_mode,
                                        double gamma_min = 1e-6) {
  synth_detail::require_usable(sol, gamma_min, "extract_ff_gains");
  const int n = dm.n, m = dm.m;
  check(cm.n == n && cm.m == m, "extract_ff_gains: dimension mismatch");

  SynthesisResult r;
  r.controller_kind = "feedforward";
  r.vertex_mode = vertex_mode;
  r.P_bar = sol.value("P");
  r.gamma = sol.value("gamma")(0, 0);
  const auto pd = synth_detail::analyze_pd(r.P_bar, "extract_ff_gains");
  r.p_min_eig = pd.min_eig;
  r.p_cond = pd.cond;

  std::vector<Mat> s1(n), s2(n);
  for (int i = 0; i < n; ++i) {
    s1[i] = sol.value(cat("S1_", i + 1));
    s2[i] = sol.value(cat("S2_", i + 1));
  }
  r.S1 = stack_blocks(s1);
  r.S2 = stack_blocks(s2);

  // Gains from the first block: rows n..n+m-1 of Q_1^T S_1 are C2 Q^T S.
  const Mat v1 = dm.Q_blocks[0].transpose() * s1[0];  // (n+m) x n
  const Mat v2 = dm.Q_blocks[0].transpose() * s2[0];
  r.K1 = synth_detail::right_solve(pd.llt, v1.middleRows(n, m));
  r.K2 = synth_detail::right_solve(pd.llt, v2.middleRows(n, m));

  const Mat zs1 = z_times_blocks(dm, s1);
  const Mat zs2 = z_times_blocks(dm, s2);
  r.ZM = synth_detail::right_solve(pd.llt, zs1);
  r.ZN = synth_detail::right_solve(pd.llt, zs2);

  // Residual bookkeeping (relative Frobenius).
  double dec1 = 0.0, dec2 = 0.0;
  for (int i = 1; i < n; ++i) {
    dec1 = std::max(dec1, synth_detail::rel_fro(
                              dm.Q_blocks[i].transpose() * s1[i] - v1, v1));
    dec2 = std::max(dec2,
                    synth_detail::rel_fro(
                        dm.Q_blocks[i].transpose() * s2[i] - v2,
                        v2.norm() > 0 ? v2 : Mat::Ones(1, 1)));
  }
  r.residuals["decouple_S1"] = dec1;
  r.residuals["decouple_S2"] = dec2;
  r.residuals["anchor_S1"] =
      synth_detail::rel_fro(v1.topRows(n) - r.P_bar, r.P_bar);
  r.residuals["anchor_S2"] = synth_detail::rel_fro(v2.topRows(n), r.P_bar);
  r.residuals["gain_match"] = synth_detail::rel_fro(
      zs1 + zs2 - (1.0 - dm.alpha) * r.P_bar, r.P_bar);
  const Mat gain_id =
      synth_detail::right_solve(pd.llt, v1.topRows(n)) - Mat::Identity(n, n);
  r.residuals["gain_identity"] = gain_id.norm();
  check(r.residuals["gain_identity"] <= 1e-6,
        cat("extract_ff_gains: C1 Q^T S1 P_bar^{-1} deviates from identity by ",
            r.residuals["gain_identity"]));

  synth_detail::fill_solver_metadata(r, sol);
  return r;
}

struct ZuReport {
  double min_singular_value = 0.0;
  bool ok = false;
};

inline ZuReport check_zu_nonsingular(const Mat& zu, double tol = 1e-8) {
  Eigen::JacobiSVD<Mat> svd(zu);
  ZuReport rep;
  rep.min_singular_value = svd.singularValues().minCoeff();
  rep.ok = rep.min_singular_value > tol;
  return rep;
}

inline SynthesisResult extract_integral_gains(const SdpSolution& sol,
                                              const DataMatrices& dm,
                                              const ConstantMatrices& cm,
                                              VertexMode vertex_mode,
                                              double gamma_min = 1e-6) {
  synth_detail::require_usable(sol, gamma_min, "extract_integral_gains");
  const int n = dm.n, m = dm.m;
  check(cm.n == n && cm.m == m, "extract_integral_gains: dimension mismatch");

  SynthesisResult r;
  r.controller_kind = "integral";
  r.vertex_mode = vertex_mode;
  r.P_bar = sol.value("P");
  r.gamma = sol.value("gamma")(0, 0);
  const auto pd = synth_detail::analyze_pd(r.P_bar, "extract_integral_gains");
  r.p_min_eig = pd.min_eig;
  r.p_cond = pd.cond;

  std::vector<Mat> s1(n), s2(n);
  for (int i = 0; i < n; ++i) {
    s1[i] = sol.value(cat("S1_", i + 1));
    s2[i] = sol.value(cat("S2_", i + 1));
  }
  r.S1 = stack_blocks(s1);
  r.S2 = stack_blocks(s2);

  const Mat v1 = dm.Q_blocks[0].transpose() * s1[0];
  const Mat v2 = dm.Q_blocks[0].transpose() * s2[0];
  Mat c2qs(m, 2 * n);
  c2qs.leftCols(n) = v1.middleRows(n, m);
  c2qs.rightCols(n) = v2.middleRows(n, m);
  const Mat gains = synth_detail::right_solve(pd.llt, c2qs);  // [K1 K2]
  r.K1 = gains.leftCols(n);
  r.K2 = gains.rightCols(n);

  // [Z M, Z U] = [Z S1, Z S2] P_bar^{-1}.
  const Mat zs1 = z_times_blocks(dm, s1);
  const Mat zs2 = z_times_blocks(dm, s2);
  Mat zs(n, 2 * n);
  zs.leftCols(n) = zs1;
  zs.rightCols(n) = zs2;
  const Mat zmu = synth_detail::right_solve(pd.llt, zs);
  r.ZM = zmu.leftCols(n);
  r.ZU = zmu.rightCols(n);
  const auto zu_rep = check_zu_nonsingular(r.ZU);
  r.zu_min_singular_value = zu_rep.min_singular_value;
  check(zu_rep.ok, cat("extract_integral_gains: Z U is numerically singular "
                       "(min singular value ",
                       zu_rep.min_singular_value, ")"));

  double dec1 = 0.0, dec2 = 0.0;
  for (int i = 1; i < n; ++i) {
    dec1 = std::max(dec1, synth_detail::rel_fro(
                              dm.Q_blocks[i].transpose() * s1[i] - v1, v1));
    dec2 = std::max(dec2, synth_detail::rel_fro(
                              dm.Q_blocks[i].transpose() * s2[i] - v2, v2));
  }
  r.residuals["decouple_S1"] = dec1;
  r.residuals["decouple_S2"] = dec2;
  r.residuals["anchor_S1"] =
      synth_detail::rel_fro(v1.topRows(n) - r.P11(), r.P_bar);
  r.residuals["anchor_S2"] =
      synth_detail::rel_fro(v2.topRows(n) - r.P12(), r.P_bar);
  Mat c1qs(n, 2 * n);
  c1qs.leftCols(n) = v1.topRows(n);
  c1qs.rightCols(n) = v2.topRows(n);
  Mat id_target = Mat::Zero(n, 2 * n);
  id_target.leftCols(n) = Mat::Identity(n, n);
  r.residuals["gain_identity"] =
      (synth_detail::right_solve(pd.llt, c1qs) - id_target).norm();
  check(r.residuals["gain_identity"] <= 1e-6,
        cat("extract_integral_gains: [C1 Q^T S1, C1 Q^T S2] P_bar^{-1} "
            "deviates from [I 0] by ",
            r.residuals["gain_identity"]));

  synth_detail::fill_solver_metadata(r, sol);
  return r;
}

// ===========================================================================
// Certificate validation

struct CertificateReport {
  bool pass = false;
  double p_min_eig = 0.0;
  double strict_min_eig = 0.0;
  double worst_vertex_min_eig = 0.0;
  std::vector<double> vertex_min_eigs;
  std::map<std::string, double> residuals;
  std::string detail;
};

// Re-evaluates every certificate condition from the stored solution. When
// full_recheck is set and the result came from reduced mode, all 2^n full
// vertex blocks are evaluated as well (the implication the reduced set is
// supposed to guarantee).
inline CertificateReport validate_certificate(const SynthesisResult& res,
                                              const DataMatrices& dm,
                                              double alpha,
                                              bool full_recheck = false) {
  const int n = dm.n;
  check(res.S1.size() > 0 && res.S2.size() > 0,
        "validate_certificate: result has no S1/S2 blocks (loaded from a "
        "gains-only file?)");
  const auto s1 = split_blocks(res.S1, n);
  const auto s2 = split_blocks(res.S2, n);
  const Mat zs1 = z_times_blocks(dm, s1);
  const Mat zs2 = z_times_blocks(dm, s2);
  const Mat& p = res.P_bar;

  CertificateReport rep;
  {
    Eigen::SelfAdjointEigenSolver<Mat> es(p, Eigen::EigenvaluesOnly);
    rep.p_min_eig = es.eigenvalues().minCoeff();
  }

  const Mat v1 = dm.Q_blocks[0].transpose() * s1[0];
  const Mat v2 = dm.Q_blocks[0].transpose() * s2[0];
  double dec = 0.0;
  for (int i = 1; i < n; ++i) {
    dec = std::max(dec, synth_detail::rel_fro(
                            dm.Q_blocks[i].transpose() * s1[i] - v1, v1));
    dec = std::max(
        dec, synth_detail::rel_fro(dm.Q_blocks[i].transpose() * s2[i] - v2,
                                   v2.norm() > 0 ? v2 : Mat::Ones(1, 1)));
  }
  rep.residuals["decouple"] = dec;
  if (res.integral()) {
    rep.residuals["anchor_S1"] =
        synth_detail::rel_fro(v1.topRows(n) - res.P11(), p);
    rep.residuals["anchor_S2"] =
        synth_detail::rel_fro(v2.topRows(n) - res.P12(), p);
  } else {
    rep.residuals["anchor_S1"] = synth_detail::rel_fro(v1.topRows(n) - p, p);
    rep.residuals["anchor_S2"] = synth_detail::rel_fro(v2.topRows(n), p);
    rep.residuals["gain_match"] =
        synth_detail::rel_fro(zs1 + zs2 - (1.0 - alpha) * p, p);
  }

  // Vertex block evaluator for a given 0/1 diagonal pattern and scale.
  auto block_min_eig = [&](const Vec& d, double r_scale) {
    if (!res.integral()) {
      Mat f(2 * n, 2 * n);
      f.topLeftCorner(n, n) = p;
      f.bottomRightCorner(n, n) = p;
      Mat lower = alpha * p;
      for (int i = 0; i < n; ++i)
        lower.row(i) += r_scale * d[i] * zs1.row(i);
      f.bottomLeftCorner(n, n) = lower;
      f.topRightCorner(n, n) = lower.transpose();
      Eigen::SelfAdjointEigenSolver<Mat> es(f, Eigen::EigenvaluesOnly);
      return es.eigenvalues().minCoeff();
    }
    const int N = 2 * n;
    Mat phi(N, N);
    phi.topLeftCorner(n, n) = alpha * res.P11();
    phi.topRightCorner(n, n) = alpha * res.P12();
    for (int i = 0; i < n; ++i) {
      phi.row(i).head(n) += r_scale * d[i] * zs1.row(i);
      phi.row(i).tail(n) += r_scale * d[i] * zs2.row(i);
    }
    phi.bottomLeftCorner(n, n) = res.P11() + res.P12().transpose();
    phi.bottomRightCorner(n, n) = res.P12() + res.P22();
    Mat f(2 * N, 2 * N);
    f.topLeftCorner(N, N) = p;
    f.bottomRightCorner(N, N) = p;
    f.bottomLeftCorner(N, N) = phi;
    f.topRightCorner(N, N) = phi.transpose();
    Eigen::SelfAdjointEigenSolver<Mat> es(f, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  };

  rep.strict_min_eig = block_min_eig(Vec::Ones(n), 1.0);

  const double r_scale =
      res.vertex_mode == VertexMode::reduced ? static_cast<double>(n) : 1.0;
  const VertexSet vs = enumerate_vertices(n, res.vertex_mode);
  for (std::size_t j = 0; j < vs.diagonals.size(); ++j) {
    if (res.vertex_mode == VertexMode::full && j == 0) continue;
    rep.vertex_min_eigs.push_back(block_min_eig(vs.diagonals[j], r_scale));
  }
  if (full_recheck && res.vertex_mode == VertexMode::reduced) {
    const VertexSet full = enumerate_vertices(n, VertexMode::full);
    for (std::size_t j = 1; j < full.diagonals.size(); ++j)
      rep.vertex_min_eigs.push_back(block_min_eig(full.diagonals[j], 1.0));
  }
  rep.worst_vertex_min_eig =
      rep.vertex_min_eigs.empty()
          ? 0.0
          : *std::min_element(rep.vertex_min_eigs.begin(),
                              rep.vertex_min_eigs.end());

  rep.pass = true;
  auto fail = [&](const std::string& why) {
    rep.pass = false;
    if (rep.detail.empty()) rep.detail = why;
  };
  if (!(rep.p_min_eig > 0.0)) fail("P_bar is not positive definite");
  if (rep.strict_min_eig < res.gamma * (1.0 - 1e-6))
    fail(cat("strict block min eigenvalue ", rep.strict_min_eig,
             " is below gamma = ", res.gamma));
  if (rep.worst_vertex_min_eig < -1e-8)
    fail(cat("a vertex block has min eigenvalue ", rep.worst_vertex_min_eig));
  if (rep.residuals["decouple"] > 1e-8)
    fail(cat("decoupling residual ", rep.residuals["decouple"]));
  for (const char* key : {"anchor_S1", "anchor_S2", "gain_match"}) {
    const auto it = rep.residuals.find(key);
    if (it != rep.residuals.end() && it->second > 1e-6)
      fail(cat(key, " residual ", it->second));
  }
  return rep;
}

// ===========================================================================
// One-call synthesis drivers

struct SynthesisRun {
  SdpSolution solution;
  bool ok = false;
  std::string failure;  // set when !ok
  SynthesisResult result;
};

namespace synth_detail {

template <typename AssembleFn, typename ExtractFn>
SynthesisRun run_synthesis(const DataMatrices& dm, VertexMode mode,
                           const SdpSettings& settings, double gamma_min,
                           AssembleFn&& assemble, ExtractFn&& extract) {
  SynthesisRun run;
  const SdpProblem prog = assemble(dm, dm.alpha, mode);
  run.solution = solve(prog, settings);
  if (run.solution.status != SdpStatus::optimal &&
      run.solution.status != SdpStatus::feasible) {
    run.failure = cat("solver status ", to_string(run.solution.status), ": ",
                      run.solution.message);
    return run;
  }
  const double g = run.solution.value("gamma")(0, 0);
  if (!(g > gamma_min)) {
    run.failure =
        cat("achieved margin gamma = ", g, " is at or below ", gamma_min,
            "; rejecting (try more data or full vertex mode)");
    return run;
  }
  const ConstantMatrices cm = build_constant_matrices(dm.n, dm.m);
  run.result = extract(run.solution, dm, cm, mode, gamma_min);
  run.ok = true;
  return run;
}

}  // namespace synth_detail

inline SynthesisRun run_ff_synthesis(const DataMatrices& dm, VertexMode mode,
                                     const SdpSettings& settings = {},
                                     double gamma_min = 1e-6) {
  return synth_detail::run_synthesis(
      dm, mode, settings, gamma_min,
      [](const DataMatrices& d, double a, VertexMode v) {
        return assemble_ff_program(d, a, v);
      },
      [](const SdpSolution& s, const DataMatrices& d,
         const ConstantMatrices& c, VertexMode v, double g) {
        return extract_ff_gains(s, d, c, v, g);
      });
}

// Margin phase learns the achievable strict margin gamma*, then the face
// polish pins gamma at 0.9 gamma* and pushes the nonstrict vertex blocks back
// onto their structural boundary (theta* = 0), so the raw blocks rechecked by
// validate_certificate end up violated by no more than the solver gap.
inline SynthesisRun run_integral_synthesis(const DataMatrices& dm,
                                           VertexMode mode,
                                           const SdpSettings& settings = {},
                                           double gamma_min = 1e-6) {
  SynthesisRun run;
  const SdpProblem margin_prog =
      assemble_integral_program(dm, dm.alpha, mode);
  run.solution = solve(margin_prog, settings);
  if (run.solution.status != SdpStatus::optimal &&
      run.solution.status != SdpStatus::feasible) {
    run.failure = cat("solver status ", to_string(run.solution.status), ": ",
                      run.solution.message);
    return run;
  }
  const double g_star = run.solution.value("gamma")(0, 0);
  const double g_pin = 0.9 * g_star;
  if (!(g_pin > gamma_min)) {
    run.failure =
        cat("achieved margin gamma = ", g_star, " pins below ", gamma_min,
            "; rejecting (try more data or full vertex mode)");
    return run;
  }

  SdpSettings polish_settings = settings;
  polish_settings.gap_tol = std::min(settings.gap_tol, 1e-9);
  const SdpProblem polish_prog =
      assemble_integral_polish_program(dm, dm.alpha, mode, g_pin);
  SdpSolution polished = solve(polish_prog, polish_settings);
  if (polished.status != SdpStatus::optimal &&
      polished.status != SdpStatus::feasible) {
    run.failure = cat("face polish failed with status ",
                      to_string(polished.status), ": ", polished.message);
    return run;
  }
  polished.newton_iterations += run.solution.newton_iterations;
  polished.wall_seconds += run.solution.wall_seconds;
  polished.message =
      cat("margin gamma* = ", g_star, "; pinned gamma = ", g_pin,
          "; vertex face gap = ", -polished.value("theta")(0, 0));
  polished.values["gamma"] = Mat::Constant(1, 1, g_pin);
  run.solution = std::move(polished);

  const ConstantMatrices cm = build_constant_matrices(dm.n, dm.m);
  run.result = extract_integral_gains(run.solution, dm, cm, mode, gamma_min);
  run.ok = true;
  return run;
}

// ===========================================================================
// Condensed synthesis drivers

namespace synth_detail {

// Input rows F of G = [P_anchor; F] realizing the image rows X with minimum
// kernel energy sum_i |V_i|^2, V_i = rho_i^T (X_i - zeta_i G) / |rho_i|^2:
// weighted least squares with node weights 1 / |rho_i|.
inline Mat reproject_input_rows(const CondensedData& cd, const Mat& X,
                                const Mat& p_anchor) {
  const int n = cd.n, m = cd.m;
  Mat A(n, m), B(n, n);
  for (int i = 0; i < n; ++i) {
    const double w = 1.0 / std::max(cd.rho[i].norm(), 1e-300);
    A.row(i) = w * cd.zeta[i].tail(m);
    B.row(i) = w * (X.row(i) - cd.zeta[i].head(n) * p_anchor);
  }
  return A.completeOrthogonalDecomposition().solve(B);
}

// T_d x n blocks with Q_i^T S_i = G and, when X is given, Z_i S_i = X_i.
inline std::vector<Mat> recover_s_blocks(const DataMatrices& dm,
                                         const CondensedData& cd, const Mat& G,
                                         const Mat* X) {
  std::vector<Mat> out(dm.n);
  for (int i = 0; i < dm.n; ++i) {
    const Mat& qi = dm.Q_blocks[i];
    const Mat qtq = qi.transpose() * qi;
    Mat s = qi * qtq.ldlt().solve(G);
    if (X != nullptr) {
      const double rr = std::max(cd.rho[i].squaredNorm(), 1e-300);
      const Eigen::RowVectorXd gap = X->row(i) - cd.zeta[i] * G;
      s += cd.rho[i].transpose() * (gap / rr);
    }
    out[i] = std::move(s);
  }
  return out;
}

// Expands a condensed solution in place with reconstructed S blocks, so the
// standard extraction and certificate validation run unchanged.
inline void inflate_condensed_solution(SdpSolution& sol,
                                       const DataMatrices& dm,
                                       const CondensedData& cd,
                                       bool kind_integral) {
  const int n = dm.n, m = dm.m;
  const Mat p = sol.value("P");
  const Mat a1 = kind_integral ? Mat(p.topLeftCorner(n, n)) : p;
  const Mat a2 =
      kind_integral ? Mat(p.topRightCorner(n, n)) : Mat(Mat::Zero(n, n));
  Mat g1(n + m, n), g2(n + m, n);
  std::vector<Mat> s1, s2;
  if (cd.all_exact) {
    g1 << a1, sol.value("F1");
    g2 << a2, sol.value("F2");
    s1 = recover_s_blocks(dm, cd, g1, nullptr);
    s2 = recover_s_blocks(dm, cd, g2, nullptr);
  } else if (sol.values.count("D1") != 0) {
    g1 << a1, sol.value("F1");
    g2 << a2, sol.value("F2");
    auto fitted = [&](const Mat& g, const Mat& d) {
      Mat x(n, n);
      for (int i = 0; i < n; ++i) x.row(i) = cd.zeta[i] * g + d.row(i);
      return x;
    };
    const Mat x1 = fitted(g1, sol.value("D1"));
    const Mat x2 = fitted(g2, sol.value("D2"));
    s1 = recover_s_blocks(dm, cd, g1, &x1);
    s2 = recover_s_blocks(dm, cd, g2, &x2);
  } else {
    const Mat x1 = sol.value("X1");
    const Mat x2 = sol.value("X2");
    g1 << a1, reproject_input_rows(cd, x1, a1);
    g2 << a2, reproject_input_rows(cd, x2, a2);
    s1 = recover_s_blocks(dm, cd, g1, &x1);
    s2 = recover_s_blocks(dm, cd, g2, &x2);
  }
  for (int i = 0; i < n; ++i) {
    sol.values[cat("S1_", i + 1)] = s1[i];
    sol.values[cat("S2_", i + 1)] = s2[i];
  }
}

}  // namespace synth_detail

// Same contract as run_ff_synthesis, solving the condensed program. The
// image-variable form describes the same feasible set, so accepted results
// are interchangeable; cost no longer grows with T_d.
inline SynthesisRun run_ff_synthesis_condensed(const DataMatrices& dm,
                                               VertexMode mode,
                                               const SdpSettings& settings = {},
                                               double gamma_min = 1e-6) {
  SynthesisRun run;
  const CondensedData cd = condense_data(dm);
  const SdpProblem prog = condensed_ff_program(dm, cd, dm.alpha, mode);
  run.solution = solve(prog, settings);
  if (run.solution.status != SdpStatus::optimal &&
      run.solution.status != SdpStatus::feasible) {
    run.failure = cat("solver status ", to_string(run.solution.status), ": ",
                      run.solution.message);
    return run;
  }
  const double g = run.solution.value("gamma")(0, 0);
  if (!(g > gamma_min)) {
    run.failure =
        cat("achieved margin gamma = ", g, " is at or below ", gamma_min,
            "; rejecting (try more data or full vertex mode)");
    return run;
  }
  synth_detail::inflate_condensed_solution(run.solution, dm, cd, false);
  const ConstantMatrices cm = build_constant_matrices(dm.n, dm.m);
  run.result = extract_ff_gains(run.solution, dm, cm, mode, gamma_min);
  run.ok = true;
  return run;
}

// Condensed two-phase integral synthesis; see run_integral_synthesis for the
// margin / face-polish scheme. Novel (noisy) data swap the face polish for the
// image polish: gamma stays pinned while the off-span image residual is
// minimized, so the recovered gains realize the certified images as closely as
// the pinned margin allows.
inline SynthesisRun run_integral_synthesis_condensed(
    const DataMatrices& dm, VertexMode mode, const SdpSettings& settings = {},
    double gamma_min = 1e-6) {
  SynthesisRun run;
  const CondensedData cd = condense_data(dm);
  const SdpProblem margin_prog =
      condensed_integral_program(dm, cd, dm.alpha, mode);
  run.solution = solve(margin_prog, settings);
  if (run.solution.status != SdpStatus::optimal &&
      run.solution.status != SdpStatus::feasible) {
    run.failure = cat("solver status ", to_string(run.solution.status), ": ",
                      run.solution.message);
    return run;
  }
  const double g_star = run.solution.value("gamma")(0, 0);
  const double g_pin = 0.9 * g_star;
  if (!(g_pin > gamma_min)) {
    run.failure =
        cat("achieved margin gamma = ", g_star, " pins below ", gamma_min,
            "; rejecting (try more data or full vertex mode)");
    return run;
  }

  SdpSettings polish_settings = settings;
  SdpProblem polish_prog;
  if (cd.all_exact) {
    polish_settings.gap_tol = std::min(settings.gap_tol, 1e-9);
    polish_prog =
        condensed_integral_polish_program(dm, cd, dm.alpha, mode, g_pin);
  } else {
    polish_prog = condensed_integral_image_polish_program(dm, cd, dm.alpha,
                                                          mode, g_pin);
  }
  SdpSolution polished = solve(polish_prog, polish_settings);
  if (polished.status != SdpStatus::optimal &&
      polished.status != SdpStatus::feasible) {
    run.failure = cat(cd.all_exact ? "face" : "image", " polish failed with ",
                      "status ", to_string(polished.status), ": ",
                      polished.message);
    return run;
  }
  polished.newton_iterations += run.solution.newton_iterations;
  polished.wall_seconds += run.solution.wall_seconds;
  if (cd.all_exact) {
    polished.message =
        cat("margin gamma* = ", g_star, "; pinned gamma = ", g_pin,
            "; vertex face gap = ", -polished.value("theta")(0, 0));
  } else {
    polished.message =
        cat("margin gamma* = ", g_star, "; pinned gamma = ", g_pin,
            "; off-span image residual = ",
            std::sqrt(std::max(0.0, -polished.objective)));
  }
  polished.values["gamma"] = Mat::Constant(1, 1, g_pin);
  run.solution = std::move(polished);

  synth_detail::inflate_condensed_solution(run.solution, dm, cd, true);
  const ConstantMatrices cm = build_constant_matrices(dm.n, dm.m);
  run.result = extract_integral_gains(run.solution, dm, cm, mode, gamma_min);
  run.ok = true;
  return run;
}

// ===========================================================================
// Serialization (gains and certificate summary; S1/S2 stay in memory)

inline nlohmann::json synthesis_result_to_json(const SynthesisResult& r) {
  nlohmann::json j;
  j["controller_kind"] = r.controller_kind;
  j["vertex_mode"] = to_string(r.vertex_mode);
  j["K1"] = matrix_to_json(r.K1);
  j["K2"] = matrix_to_json(r.K2);
  j["P_bar"] = matrix_to_json(r.P_bar);
  j["gamma"] = r.gamma;
  j["p_min_eig"] = r.p_min_eig;
  j["p_cond"] = r.p_cond;
  j["residuals"] = r.residuals;
  j["ZM"] = matrix_to_json(r.ZM);
  if (r.ZN.size() > 0) j["ZN"] = matrix_to_json(r.ZN);
  if (r.ZU.size() > 0) {
    j["ZU"] = matrix_to_json(r.ZU);
    j["zu_min_singular_value"] = r.zu_min_singular_value;
  }
  j["solver"] = {{"status", r.solver_status},
                 {"message", r.solver_message},
                 {"newton_iterations", r.newton_iterations},
                 {"wall_seconds", r.solve_seconds}};
  return j;
}

inline SynthesisResult synthesis_result_from_json(const nlohmann::json& j) {
  SynthesisResult r;
  r.controller_kind = j.at("controller_kind").get<std::string>();
  r.vertex_mode = vertex_mode_from_string(j.at("vertex_mode"));
  r.K1 = matrix_from_json(j.at("K1"), "K1");
  r.K2 = matrix_from_json(j.at("K2"), "K2");
  r.P_bar = matrix_from_json(j.at("P_bar"), "P_bar");
  r.gamma = j.at("gamma").get<double>();
  r.p_min_eig = j.at("p_min_eig").get<double>();
  r.p_cond = j.at("p_cond").get<double>();
  for (const auto& [key, val] : j.at("residuals").items())
    r.residuals[key] = val.get<double>();
  r.ZM = matrix_from_json(j.at("ZM"), "ZM");
  if (j.contains("ZN")) r.ZN = matrix_from_json(j.at("ZN"), "ZN");
  if (j.contains("ZU")) {
    r.ZU = matrix_from_json(j.at("ZU"), "ZU");
    r.zu_min_singular_value = j.at("zu_min_singular_value").get<double>();
  }
  const auto& s = j.at("solver");
  r.solver_status = s.at("status").get<std::string>();
  r.solver_message = s.value("message", std::string{});
  r.newton_iterations = s.at("newton_iterations").get<int>();
  r.solve_seconds = s.at("wall_seconds").get<double>();
  return r;
}

inline void save_synthesis_result(const SynthesisResult& r,
                                  const std::string& path) {
  std::ofstream f(path);
  check(f.good(), cat("save_synthesis_result: cannot open ", path));
  f << synthesis_result_to_json(r).dump(2) << "\n";
}

inline SynthesisResult load_synthesis_result(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), cat("load_synthesis_result: cannot open ", path));
  nlohmann::json j;
  f >> j;
  return synthesis_result_from_json(j);
}

}  // namespace ltn
