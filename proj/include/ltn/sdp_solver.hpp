#pragma once

// Bundled SDP backend: a log-det barrier interior-point method with a
// Phase I feasibility stage, preceded by two generic reductions that make
// the synthesis problems tractable:
//
//   1. per-variable row-subspace substitution: a tall matrix variable only
//      enters the problem through a handful of coefficient row-patterns, so
//      it is replaced by coordinates on the span of those patterns;
//   2. equality elimination: a particular solution plus a kernel basis turn
//      the equality-constrained program into a free one (dense orthonormal
//      basis for small problems, sparse fundamental basis from a rank
//      revealing QR for large ones, which keeps per-coordinate sparsity).
//
// Newton steps assemble the barrier Hessian coordinate-by-coordinate from
// sparse constraint derivatives, so cost scales with the number of nonzero
// couplings instead of the cube of the cone dimension. Both reductions
// inspect only the problem's coefficient structure, never its provenance,
// and the returned point is re-evaluated against the ORIGINAL constraints
// before any success status is reported.

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/OrderingMethods>
#include <Eigen/SVD>
#include <Eigen/SparseCore>
#include <Eigen/SparseQR>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <unordered_map>
#include <vector>

#include "ltn/sdp.hpp"

namespace ltn {
namespace sdp_detail {

using SpMat = Eigen::SparseMatrix<double>;

// Upper-triangle column-major svec index for (r <= c).
inline int svec_index(int r, int c) { return c * (c + 1) / 2 + r; }

// Inverse of svec_index.
inline void svec_unindex(int idx, int& r, int& c) {
  c = static_cast<int>((std::sqrt(8.0 * idx + 1.0) - 1.0) / 2.0);
  while (c * (c + 1) / 2 > idx) --c;
  while ((c + 1) * (c + 2) / 2 <= idx) ++c;
  r = idx - c * (c + 1) / 2;
}

inline Mat unsvec(const Vec& v, int d) {
  Mat x(d, d);
  for (int c = 0; c < d; ++c)
    for (int r = 0; r <= c; ++r) {
      x(r, c) = v[svec_index(r, c)];
      x(c, r) = x(r, c);
    }
  return x;
}

// svec with doubled off-diagonals: <svec2(X), svec_coeffs(E)> = tr(X E).
inline Vec svec2(const Mat& x) {
  const int d = static_cast<int>(x.rows());
  Vec v(d * (d + 1) / 2);
  for (int c = 0; c < d; ++c)
    for (int r = 0; r <= c; ++r)
      v[svec_index(r, c)] = (r == c) ? x(r, c) : 2.0 * x(r, c);
  return v;
}

// Incremental orthonormal basis of offered vectors (modified Gram-Schmidt,
// two passes). Used for the row-subspace substitution.
class BasisBuilder {
 public:
  explicit BasisBuilder(int dim)
      : u_(dim, std::min<Eigen::Index>(dim, 32)), r_(0) {}

  void offer(Vec a) {
    const double n0 = a.norm();
    if (n0 <= 0.0 || r_ == u_.rows()) return;
    for (int pass = 0; pass < 2; ++pass)
      if (r_ > 0) a -= u_.leftCols(r_) * (u_.leftCols(r_).transpose() * a);
    const double n1 = a.norm();
    if (n1 > 1e-10 * n0) {
      if (r_ == u_.cols())
        u_.conservativeResize(Eigen::NoChange,
                              std::min(u_.rows(), 2 * u_.cols()));
      u_.col(r_++) = a / n1;
    }
  }

  [[nodiscard]] int rank() const { return r_; }
  [[nodiscard]] Mat basis() const { return u_.leftCols(r_); }
  [[nodiscard]] bool full() const { return r_ == u_.rows(); }

 private:
  Mat u_;
  Eigen::Index r_;
};

// ---------------------------------------------------------------------------
// Reduced problem data

struct ReducedVar {
  bool substituted = false;
  Mat U;           // original rows x r basis when substituted
  int offset = 0;  // into the reduced scalar vector
  int size = 0;
};

struct PsdData {
  std::string label;
  int dim = 0;
  SpMat A;  // svec_size x N_red coefficient rows (value of E[r,c], r<=c)
  Vec c0;   // constant svec
};

struct ReducedProblem {
  std::vector<ReducedVar> rvars;
  int N_red = 0;
  SpMat G;  // equality rows over reduced scalars
  Vec h;
  std::vector<PsdData> blocks;
  Vec obj;  // maximize obj . z
};

inline ReducedProblem build_reduced(const SdpProblem& p) {
  const auto& vars = p.variables();
  ReducedProblem rp;
  rp.rvars.resize(vars.size());

  // Pass 1: collect per-variable coefficient row-patterns. A full matrix
  // variable v appears in every expression entry as sum_t coeff(t) v[t, j];
  // the vectors coeff(.) over all (entry, j) span the only directions of v
  // the problem can see. Equalities are scanned first so that dependent
  // patterns arising in cone blocks are recognized as such.
  std::vector<BasisBuilder> builders;
  builders.reserve(vars.size());
  for (const auto& v : vars)
    builders.emplace_back((!v.symmetric && v.rows >= 2) ? v.rows : 0);

  auto collect = [&](const std::vector<SdpTerm>& terms) {
    std::unordered_map<std::uint64_t, Vec> rows;
    for (const auto& t : terms) {
      const auto& v = vars[t.var];
      if (v.symmetric || v.rows < 2) continue;
      const std::uint64_t key = (static_cast<std::uint64_t>(t.var) << 48) |
                                (static_cast<std::uint64_t>(t.erow) << 32) |
                                (static_cast<std::uint64_t>(t.ecol) << 16) |
                                static_cast<std::uint64_t>(t.vcol);
      auto it = rows.find(key);
      if (it == rows.end()) it = rows.emplace(key, Vec::Zero(v.rows)).first;
      it->second[t.vrow] += t.coeff;
    }
    for (auto& [key, vec] : rows) {
      const int var = static_cast<int>(key >> 48);
      builders[var].offer(std::move(vec));
    }
  };
  for (const auto& e : p.equality_constraints()) collect(e.terms);
  for (const auto& e : p.psd_constraints()) collect(e.terms);
  {
    std::vector<SdpTerm> obj_terms;
    for (const auto& t : p.objective())
      obj_terms.push_back({t.var, t.vrow, t.vcol, 0, 0, t.coeff});
    collect(obj_terms);
  }

  // Reduced scalar layout.
  int off = 0;
  for (std::size_t vi = 0; vi < vars.size(); ++vi) {
    auto& rv = rp.rvars[vi];
    const auto& v = vars[vi];
    if (!v.symmetric && v.rows >= 2 && !builders[vi].full()) {
      rv.substituted = true;
      rv.U = builders[vi].basis();
      rv.size = static_cast<int>(rv.U.cols()) * v.cols;
    } else {
      rv.substituted = false;
      rv.size = v.size;
    }
    rv.offset = off;
    off += rv.size;
  }
  rp.N_red = off;

  // Term rewrite: original scalar -> one or more reduced scalars.
  auto emit = [&](const SdpTerm& t,
                  std::unordered_map<std::uint64_t, double>& acc,
                  std::uint64_t slot) {
    const auto& v = vars[t.var];
    const auto& rv = rp.rvars[t.var];
    if (rv.substituted) {
      const int r = static_cast<int>(rv.U.cols());
      for (int l = 0; l < r; ++l) {
        const double c = t.coeff * rv.U(t.vrow, l);
        if (c != 0.0)
          acc[(slot << 32) |
              static_cast<std::uint32_t>(rv.offset + t.vcol * r + l)] += c;
      }
    } else {
      const int local = v.symmetric
                            ? sym_packed_index(t.vrow, t.vcol, v.rows)
                            : t.vcol * v.rows + t.vrow;
      acc[(slot << 32) | static_cast<std::uint32_t>(rv.offset + local)] +=
          t.coeff;
    }
  };

  // Equalities: one scalar row per matrix entry (column-major).
  int eq_rows = 0;
  for (const auto& e : p.equality_constraints()) eq_rows += e.rows * e.cols;
  rp.h.resize(eq_rows);
  {
    std::vector<Eigen::Triplet<double>> trips;
    int row_base = 0;
    for (const auto& e : p.equality_constraints()) {
      std::unordered_map<std::uint64_t, double> acc;
      for (const auto& t : e.terms)
        emit(t, acc,
             static_cast<std::uint64_t>(row_base + t.ecol * e.rows + t.erow));
      for (const auto& [key, c] : acc)
        if (c != 0.0)
          trips.emplace_back(static_cast<int>(key >> 32),
                             static_cast<int>(key & 0xffffffffu), c);
      for (int cc = 0; cc < e.cols; ++cc)
        for (int rr = 0; rr < e.rows; ++rr)
          rp.h[row_base + cc * e.rows + rr] = -e.constant(rr, cc);
      row_base += e.rows * e.cols;
    }
    rp.G.resize(eq_rows, rp.N_red);
    rp.G.setFromTriplets(trips.begin(), trips.end());
    rp.G.makeCompressed();
  }

  // PSD blocks: svec rows; symmetric mirrors averaged (sound for validated
  // expressions and exact when both triangles carry the same terms).
  for (const auto& e : p.psd_constraints()) {
    PsdData b;
    b.label = e.label;
    b.dim = e.rows;
    const int sv = b.dim * (b.dim + 1) / 2;
    std::unordered_map<std::uint64_t, double> acc;
    for (const auto& t : e.terms) {
      const int r = std::min(t.erow, t.ecol);
      const int c = std::max(t.erow, t.ecol);
      SdpTerm tt = t;
      tt.coeff = (t.erow == t.ecol) ? t.coeff : 0.5 * t.coeff;
      emit(tt, acc, static_cast<std::uint64_t>(svec_index(r, c)));
    }
    std::vector<Eigen::Triplet<double>> trips;
    for (const auto& [key, c] : acc)
      if (c != 0.0)
        trips.emplace_back(static_cast<int>(key >> 32),
                           static_cast<int>(key & 0xffffffffu), c);
    b.A.resize(sv, rp.N_red);
    b.A.setFromTriplets(trips.begin(), trips.end());
    b.A.makeCompressed();
    b.c0.resize(sv);
    for (int c = 0; c < b.dim; ++c)
      for (int r = 0; r <= c; ++r)
        b.c0[svec_index(r, c)] = 0.5 * (e.constant(r, c) + e.constant(c, r));
    rp.blocks.push_back(std::move(b));
  }

  rp.obj = Vec::Zero(rp.N_red);
  {
    std::unordered_map<std::uint64_t, double> acc;
    for (const auto& t : p.objective())
      emit({t.var, t.vrow, t.vcol, 0, 0, t.coeff}, acc, 0);
    for (const auto& [key, c] : acc)
      rp.obj[static_cast<int>(key & 0xffffffffu)] += c;
  }
  return rp;
}

// ---------------------------------------------------------------------------
// Equality elimination

struct EqElimination {
  bool consistent = true;
  bool identity_kernel = false;  // no equalities: kernel is the whole space
  Vec z0;
  SpMat kernel;  // N_red x p (unused when identity_kernel)
  std::string note;

  [[nodiscard]] int dim(int n_red) const {
    return identity_kernel ? n_red : static_cast<int>(kernel.cols());
  }
  [[nodiscard]] Vec lift(const Vec& w) const {
    if (identity_kernel) return z0 + w;
    return z0 + kernel * w;
  }
};

inline EqElimination eliminate_equalities(const ReducedProblem& rp) {
  EqElimination out;
  const int rows = static_cast<int>(rp.G.rows());
  if (rows == 0) {
    out.identity_kernel = true;
    out.z0 = Vec::Zero(rp.N_red);
    return out;
  }
  const double h_scale = 1.0 + rp.h.lpNorm<Eigen::Infinity>();

  if (rp.N_red <= 2500) {
    // Dense path: minimum-norm particular solution and orthonormal kernel.
    const Mat gd(rp.G);
    Eigen::CompleteOrthogonalDecomposition<Mat> cod(gd);
    out.z0 = cod.solve(rp.h);
    if ((gd * out.z0 - rp.h).lpNorm<Eigen::Infinity>() > 1e-8 * h_scale) {
      out.consistent = false;
      out.note = "equality constraints are inconsistent";
      return out;
    }
    Eigen::BDCSVD<Mat> svd(gd, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    const double tol = std::max(gd.rows(), gd.cols()) *
                       (sv.size() ? sv[0] : 0.0) *
                       std::numeric_limits<double>::epsilon() * 100.0;
    int rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
      if (sv[i] > tol) ++rank;
    out.kernel = svd.matrixV().rightCols(rp.N_red - rank).sparseView();
    return out;
  }

  // Large path: rank-revealing sparse QR. The kernel uses the fundamental
  // basis (identity on free columns, back-substituted pivot columns), which
  // keeps the lifted coefficient matrices sparse.
  Eigen::SparseQR<SpMat, Eigen::COLAMDOrdering<int>> qr;
  qr.compute(rp.G);
  if (qr.info() != Eigen::Success) {
    out.consistent = false;
    out.note = "sparse QR of the equality system failed";
    return out;
  }
  out.z0 = qr.solve(rp.h);
  if ((rp.G * out.z0 - rp.h).lpNorm<Eigen::Infinity>() > 1e-8 * h_scale) {
    out.consistent = false;
    out.note = "equality constraints are inconsistent";
    return out;
  }
  const int rank = static_cast<int>(qr.rank());
  const int free = rp.N_red - rank;
  const SpMat r_all = qr.matrixR();
  const SpMat r11 = r_all.topLeftCorner(rank, rank);
  const auto& perm = qr.colsPermutation();
  std::vector<Eigen::Triplet<double>> ktrips;
  Vec y_perm = Vec::Zero(rp.N_red);
  for (int f = 0; f < free; ++f) {
    // Kernel of G * P in permuted coordinates: [-R11^{-1} R12 e_f; e_f].
    y_perm.setZero();
    y_perm.head(rank) = -r_all.col(rank + f).toDense().head(rank);
    {
      Vec top = y_perm.head(rank);
      r11.triangularView<Eigen::Upper>().solveInPlace(top);
      y_perm.head(rank) = top;
    }
    y_perm[rank + f] = 1.0;
    const Vec z = perm * y_perm;  // (G P) y = 0  =>  G (P y) = 0
    for (int i = 0; i < rp.N_red; ++i)
      if (z[i] != 0.0) ktrips.emplace_back(i, f, z[i]);
  }
  out.kernel.resize(rp.N_red, free);
  out.kernel.setFromTriplets(ktrips.begin(), ktrips.end());
  out.kernel.makeCompressed();
  return out;
}

// ---------------------------------------------------------------------------
// Barrier engine

struct SparseEntry {
  int r = 0;
  int c = 0;  // r <= c
  double v = 0.0;
};

struct BarrierBlock {
  std::string label;
  int dim = 0;
  SpMat C;   // svec_size x p
  Vec d0;    // svec constant
  std::vector<std::vector<SparseEntry>> col_entries;  // per coordinate
  std::vector<int> active;                            // coords with entries

  void index_columns(int p) {
    col_entries.assign(p, {});
    active.clear();
    for (int k = 0; k < p; ++k) {
      for (SpMat::InnerIterator it(C, k); it; ++it) {
        int r, c;
        svec_unindex(static_cast<int>(it.row()), r, c);
        col_entries[k].push_back({r, c, it.value()});
      }
      if (!col_entries[k].empty()) active.push_back(k);
    }
  }
};

struct BoxTerm {
  int idx = 0;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

struct BarrierProblem {
  int p = 0;
  std::vector<BarrierBlock> blocks;
  std::vector<BoxTerm> boxes;
  Vec minimize;  // engine minimizes minimize . w

  [[nodiscard]] double barrier_count() const {
    double m = 0.0;
    for (const auto& b : blocks) m += b.dim;
    for (const auto& bx : boxes) {
      if (std::isfinite(bx.lo)) m += 1.0;
      if (std::isfinite(bx.hi)) m += 1.0;
    }
    return m;
  }
};

struct BarrierState {
  Vec w;
  std::vector<Eigen::LLT<Mat>> llts;  // factor per block at w
  double logdet_sum = 0.0;
  bool feasible = false;
};

inline bool factor_at(const BarrierProblem& bp, const Vec& w,
                      BarrierState& st) {
  st.w = w;
  st.llts.assign(bp.blocks.size(), Eigen::LLT<Mat>());
  st.logdet_sum = 0.0;
  st.feasible = false;
  for (const auto& bx : bp.boxes) {
    if (std::isfinite(bx.lo) && w[bx.idx] <= bx.lo) return false;
    if (std::isfinite(bx.hi) && w[bx.idx] >= bx.hi) return false;
    if (std::isfinite(bx.lo)) st.logdet_sum += std::log(w[bx.idx] - bx.lo);
    if (std::isfinite(bx.hi)) st.logdet_sum += std::log(bx.hi - w[bx.idx]);
  }
  for (std::size_t j = 0; j < bp.blocks.size(); ++j) {
    const auto& b = bp.blocks[j];
    const Mat f = unsvec(b.d0 + b.C * w, b.dim);
    st.llts[j].compute(f);
    if (st.llts[j].info() != Eigen::Success) return false;
    double ld = 0.0;
    const auto& l = st.llts[j].matrixLLT();
    for (int i = 0; i < b.dim; ++i) {
      const double d = l(i, i);
      if (!(d > 0.0) || !std::isfinite(d)) return false;
      ld += std::log(d);
    }
    st.logdet_sum += 2.0 * ld;
  }
  st.feasible = true;
  return true;
}

inline double barrier_value(const BarrierProblem& bp, const BarrierState& st,
                            double t) {
  return t * bp.minimize.dot(st.w) - st.logdet_sum;
}

// Accumulates one block's contribution to gradient and (lower-triangle)
// Hessian of -logdet. Works coordinate-by-coordinate: for coordinate k with
// sparse derivative E_k, G_k = Finv E_k Finv is assembled from the few
// nonzero rows of E_k Finv, and H(k, l) += <G_k, E_l> touches only E_l's
// entries.
inline void accumulate_block(const BarrierBlock& b, const Eigen::LLT<Mat>& llt,
                             Vec& g, Mat& h) {
  const int d = b.dim;
  const Mat finv = llt.solve(Mat::Identity(d, d));
  Mat m1(d, d), gk(d, d);
  const Vec s2 = svec2(finv);
  g -= b.C.transpose() * s2;

  std::vector<int> rows_used;
  rows_used.reserve(2 * 8);
  for (const int k : b.active) {
    // m1 = E_k * finv, nonzero only on rows_used.
    rows_used.clear();
    for (const auto& e : b.col_entries[k]) {
      if (std::find(rows_used.begin(), rows_used.end(), e.r) ==
          rows_used.end()) {
        m1.row(e.r).setZero();
        rows_used.push_back(e.r);
      }
      if (e.c != e.r &&
          std::find(rows_used.begin(), rows_used.end(), e.c) ==
              rows_used.end()) {
        m1.row(e.c).setZero();
        rows_used.push_back(e.c);
      }
    }
    for (const auto& e : b.col_entries[k]) {
      m1.row(e.r) += e.v * finv.row(e.c);
      if (e.c != e.r) m1.row(e.c) += e.v * finv.row(e.r);
    }
    // gk = finv * m1 via the nonzero rows only.
    gk.setZero();
    for (const int r : rows_used) gk += finv.col(r) * m1.row(r);
    for (const int l : b.active) {
      if (l > k) break;  // active is sorted ascending
      double acc = 0.0;
      for (const auto& e : b.col_entries[l])
        acc += (e.r == e.c ? 1.0 : 2.0) * e.v * gk(e.r, e.c);
      h(k, l) += acc;
    }
  }
}

struct CenterResult {
  bool ok = false;
  int newton_steps = 0;
  std::string note;
};

// Newton centering of t*obj - sum logdet at fixed t. st must hold a feasible
// point on entry and holds the centered point on exit.
inline CenterResult center(const BarrierProblem& bp, BarrierState& st,
                           double t, int max_inner, int& newton_budget,
                           const std::chrono::steady_clock::time_point& t_end,
                           const std::function<bool(const Vec&)>& early_stop) {
  CenterResult res;
  Vec g(bp.p);
  Mat h(bp.p, bp.p);

  for (int it = 0; it < max_inner; ++it) {
    if (newton_budget <= 0) {
      res.note = "newton budget exhausted";
      return res;
    }
    if (std::chrono::steady_clock::now() > t_end) {
      res.note = "time limit";
      return res;
    }
    --newton_budget;
    ++res.newton_steps;

    g = t * bp.minimize;
    h.setZero();
    for (const auto& bx : bp.boxes) {
      if (std::isfinite(bx.lo)) {
        const double d = st.w[bx.idx] - bx.lo;
        g[bx.idx] -= 1.0 / d;
        h(bx.idx, bx.idx) += 1.0 / (d * d);
      }
      if (std::isfinite(bx.hi)) {
        const double d = bx.hi - st.w[bx.idx];
        g[bx.idx] += 1.0 / d;
        h(bx.idx, bx.idx) += 1.0 / (d * d);
      }
    }
    for (std::size_t j = 0; j < bp.blocks.size(); ++j)
      accumulate_block(bp.blocks[j], st.llts[j], g, h);

    // Newton direction with escalating ridge on factorization trouble.
    Vec dw;
    double ridge = 0.0;
    for (int attempt = 0;; ++attempt) {
      Mat hr = h;
      if (ridge > 0.0) hr.diagonal().array() += ridge;
      Eigen::LLT<Mat> hl(hr);
      if (hl.info() == Eigen::Success) {
        dw = hl.solve(-g);
        if (dw.allFinite()) break;
      }
      if (attempt == 0)
        ridge = std::max(1e-12 * h.trace() / std::max(1, bp.p), 1e-14);
      else
        ridge *= 100.0;
      if (attempt > 8) {
        res.note = "newton system factorization failed";
        return res;
      }
    }

    const double lambda_sq = std::max(0.0, -g.dot(dw));
    if (lambda_sq * 0.5 <= 1e-9) {
      res.ok = true;
      return res;
    }

    // Step to strict feasibility, then Armijo.
    const double phi0 = barrier_value(bp, st, t);
    double step = 1.0;
    BarrierState trial;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      if (factor_at(bp, st.w + step * dw, trial)) {
        const double phi1 = barrier_value(bp, trial, t);
        if (phi1 <= phi0 + 0.01 * step * g.dot(dw)) {
          st = std::move(trial);
          moved = true;
          break;
        }
      }
      step *= 0.5;
    }
    if (!moved) {
      // Fully stalled line search: accept the center as-is.
      res.ok = true;
      res.note = "line search stalled";
      return res;
    }
    if (early_stop && early_stop(st.w)) {
      res.ok = true;
      return res;
    }
  }
  res.ok = true;  // inner cap reached; path following tolerates this
  res.note = "inner iteration cap";
  return res;
}

struct IpmOutcome {
  enum class Kind { solved, infeasible, budget, time, failure } kind;
  Vec w;
  std::string note;
  int newton_steps = 0;
};

inline IpmOutcome run_ipm(const std::vector<BarrierBlock>& blocks, int p,
                          const Vec& maximize, const SdpSettings& st,
                          const std::chrono::steady_clock::time_point& t_end) {
  IpmOutcome out{IpmOutcome::Kind::failure, Vec::Zero(p), "", 0};
  int newton_budget = st.max_newton;

  // Margin scale for Phase I decisions.
  double d0_scale = 1.0;
  for (const auto& b : blocks)
    if (b.d0.size())
      d0_scale = std::max(d0_scale, b.d0.lpNorm<Eigen::Infinity>());

  Vec w = Vec::Zero(p);
  double min_eig0 = std::numeric_limits<double>::infinity();
  for (const auto& b : blocks) {
    const Mat f = unsvec(b.d0 + b.C * w, b.dim);
    Eigen::SelfAdjointEigenSolver<Mat> es(f, Eigen::EigenvaluesOnly);
    min_eig0 = std::min(min_eig0, es.eigenvalues().minCoeff());
  }
  if (blocks.empty()) min_eig0 = 1.0;

  const double p1_margin = std::min(1.0, 1e-3 * d0_scale);
  if (!(min_eig0 > p1_margin)) {
    // ---- Phase I: minimize tau with blocks F_j(w) + tau I.
    const double tau0 = std::max(0.0, -min_eig0) + 1.0;
    BarrierProblem p1;
    p1.p = p + 1;
    p1.minimize = Vec::Zero(p + 1);
    p1.minimize[p] = 1.0;
    for (const auto& b : blocks) {
      BarrierBlock eb;
      eb.label = b.label;
      eb.dim = b.dim;
      eb.d0 = b.d0;
      std::vector<Eigen::Triplet<double>> trips;
      trips.reserve(b.C.nonZeros() + b.dim);
      for (int k = 0; k < p; ++k)
        for (SpMat::InnerIterator it(b.C, k); it; ++it)
          trips.emplace_back(static_cast<int>(it.row()), k, it.value());
      for (int i = 0; i < b.dim; ++i)
        trips.emplace_back(svec_index(i, i), p, 1.0);
      eb.C.resize(b.C.rows(), p + 1);
      eb.C.setFromTriplets(trips.begin(), trips.end());
      eb.C.makeCompressed();
      eb.index_columns(p + 1);
      p1.blocks.push_back(std::move(eb));
    }
    for (int i = 0; i < p; ++i) p1.boxes.push_back({i, -1e7, 1e7});
    p1.boxes.push_back(
        {p, -std::numeric_limits<double>::infinity(), tau0 + 1.0});

    Vec w1 = Vec::Zero(p + 1);
    w1[p] = tau0;
    BarrierState s1;
    check(factor_at(p1, w1, s1), "phase I start infeasible (internal)");

    const auto stop_when_interior = [&](const Vec& ww) {
      return ww[p] < -p1_margin;
    };
    double t = 1.0;
    const double m_bar = p1.barrier_count();
    bool interior = false;
    while (true) {
      const auto cr =
          center(p1, s1, t, 60, newton_budget, t_end, stop_when_interior);
      out.newton_steps += cr.newton_steps;
      if (stop_when_interior(s1.w)) {
        interior = true;
        break;
      }
      if (!cr.ok) {
        out.kind = (cr.note == "time limit") ? IpmOutcome::Kind::time
                                             : IpmOutcome::Kind::failure;
        out.note = cat("phase I stopped: ", cr.note);
        return out;
      }
      if (m_bar / t <= 1e-9 * d0_scale) break;
      t *= st.mu;
    }
    if (!interior) {
      // Gap converged without reaching a comfortable margin. A genuinely
      // negative tau still certifies strict feasibility, just a thin one.
      const double tau_star = s1.w[p];
      if (tau_star > -1e-9 * d0_scale) {
        out.kind = IpmOutcome::Kind::infeasible;
        out.note = cat("phase I optimum tau = ", tau_star,
                       "; no strictly feasible point");
        return out;
      }
    }
    w = s1.w.head(p);
  }

  // ---- Phase II: maximize the objective from the interior point.
  BarrierProblem p2;
  p2.p = p;
  p2.blocks = blocks;
  p2.minimize = -maximize;
  BarrierState s2;
  if (!factor_at(p2, w, s2)) {
    out.kind = IpmOutcome::Kind::failure;
    out.note = "interior point lost between phases";
    return out;
  }

  if (maximize.lpNorm<Eigen::Infinity>() == 0.0) {
    // Pure feasibility: one centering pass tidies the point.
    const auto cr = center(p2, s2, 1.0, 40, newton_budget, t_end, nullptr);
    out.newton_steps += cr.newton_steps;
    out.kind = IpmOutcome::Kind::solved;
    out.w = s2.w;
    return out;
  }

  const double m_bar = std::max(1.0, p2.barrier_count());
  double t = 1.0;
  while (true) {
    const auto cr = center(p2, s2, t, 60, newton_budget, t_end, nullptr);
    out.newton_steps += cr.newton_steps;
    if (!cr.ok) {
      out.w = s2.w;
      out.kind = (cr.note == "time limit") ? IpmOutcome::Kind::time
                                           : IpmOutcome::Kind::budget;
      out.note = cat("phase II stopped: ", cr.note);
      return out;
    }
    if (s2.w.lpNorm<Eigen::Infinity>() > 1e7) {
      out.kind = IpmOutcome::Kind::failure;
      out.note =
          "iterates diverged; problem appears unbounded or badly scaled";
      return out;
    }
    if (m_bar / t <= st.gap_tol) break;
    t *= st.mu;
  }
  out.kind = IpmOutcome::Kind::solved;
  out.w = s2.w;
  return out;
}

// ---------------------------------------------------------------------------
// Front end

inline SdpSolution solve_internal(const SdpProblem& p,
                                  const SdpSettings& settings) {
  const auto t_start = std::chrono::steady_clock::now();
  const auto t_end =
      t_start +
      std::chrono::duration_cast<std::chrono::steady_clock::duration>(
          std::chrono::duration<double>(settings.time_limit_sec));
  p.validate();

  SdpSolution sol;
  auto finish = [&](SdpSolution s) {
    s.wall_seconds = std::chrono::duration<double>(
                         std::chrono::steady_clock::now() - t_start)
                         .count();
    return s;
  };

  const ReducedProblem rp = build_reduced(p);
  const EqElimination elim = eliminate_equalities(rp);
  if (!elim.consistent) {
    sol.status = SdpStatus::infeasible;
    sol.message = elim.note;
    return finish(sol);
  }

  const int dim = elim.dim(rp.N_red);
  std::vector<BarrierBlock> blocks;
  for (const auto& b : rp.blocks) {
    BarrierBlock bb;
    bb.label = b.label;
    bb.dim = b.dim;
    bb.d0 = b.c0 + b.A * elim.z0;
    bb.C = elim.identity_kernel ? b.A : SpMat(b.A * elim.kernel);
    bb.C.makeCompressed();
    bb.index_columns(dim);
    blocks.push_back(std::move(bb));
  }
  Vec chat;
  if (elim.identity_kernel)
    chat = rp.obj;
  else
    chat = elim.kernel.transpose() * rp.obj;
  const double obj0 = rp.obj.dot(elim.z0);

  // Degenerate cases: nothing to optimize over.
  IpmOutcome ipm{IpmOutcome::Kind::solved, Vec::Zero(dim), "", 0};
  if (dim == 0) {
    for (const auto& b : blocks) {
      const Mat f = unsvec(b.d0, b.dim);
      Eigen::SelfAdjointEigenSolver<Mat> es(f, Eigen::EigenvaluesOnly);
      if (es.eigenvalues().minCoeff() < -settings.feas_tol) {
        sol.status = SdpStatus::infeasible;
        sol.message = cat("fixed block '", b.label, "' is not PSD");
        return finish(sol);
      }
    }
  } else if (blocks.empty()) {
    if (chat.lpNorm<Eigen::Infinity>() > 0.0) {
      sol.status = SdpStatus::numerical_failure;
      sol.message = "objective is unbounded (no PSD constraints)";
      return finish(sol);
    }
  } else {
    ipm = run_ipm(blocks, dim, chat, settings, t_end);
  }

  switch (ipm.kind) {
    case IpmOutcome::Kind::infeasible:
      sol.status = SdpStatus::infeasible;
      sol.message = ipm.note;
      sol.newton_iterations = ipm.newton_steps;
      return finish(sol);
    case IpmOutcome::Kind::time:
      sol.status = SdpStatus::timeout;
      sol.message = ipm.note;
      sol.newton_iterations = ipm.newton_steps;
      return finish(sol);
    case IpmOutcome::Kind::failure:
      sol.status = SdpStatus::numerical_failure;
      sol.message = ipm.note;
      sol.newton_iterations = ipm.newton_steps;
      return finish(sol);
    case IpmOutcome::Kind::budget:
    case IpmOutcome::Kind::solved:
      break;
  }

  // Reconstruct the original variables and re-evaluate the ORIGINAL
  // constraints; any violation downgrades the status.
  const Vec z = elim.lift(ipm.w);
  Vec x(p.scalar_count());
  for (std::size_t vi = 0; vi < p.variables().size(); ++vi) {
    const auto& v = p.variables()[vi];
    const auto& rv = rp.rvars[vi];
    if (rv.substituted) {
      const int r = static_cast<int>(rv.U.cols());
      for (int c = 0; c < v.cols; ++c) {
        const Vec col = rv.U * z.segment(rv.offset + c * r, r);
        for (int rr = 0; rr < v.rows; ++rr)
          x[p.flat_index(static_cast<int>(vi), rr, c)] = col[rr];
      }
    } else {
      x.segment(v.offset, v.size) = z.segment(rv.offset, rv.size);
    }
  }

  double worst_eq = 0.0, worst_eig = 0.0;
  for (const auto& e : p.equality_constraints()) {
    const Mat r = p.eval_expr(e, x);
    const double scale = 1.0 + e.constant.cwiseAbs().maxCoeff();
    worst_eq = std::max(worst_eq, r.cwiseAbs().maxCoeff() / scale);
  }
  for (const auto& e : p.psd_constraints()) {
    const Mat f = p.eval_expr(e, x);
    Eigen::SelfAdjointEigenSolver<Mat> es(f, Eigen::EigenvaluesOnly);
    const double scale = 1.0 + f.cwiseAbs().maxCoeff();
    worst_eig = std::max(worst_eig, -es.eigenvalues().minCoeff() / scale);
  }
  if (worst_eq > settings.feas_tol || worst_eig > settings.feas_tol) {
    sol.status = SdpStatus::numerical_failure;
    sol.message = cat("re-evaluation failed: eq residual ", worst_eq,
                      ", min-eig deficit ", worst_eig);
    sol.newton_iterations = ipm.newton_steps;
    return finish(sol);
  }

  sol.status = (ipm.kind == IpmOutcome::Kind::solved) ? SdpStatus::optimal
                                                      : SdpStatus::feasible;
  if (ipm.kind == IpmOutcome::Kind::budget)
    sol.message = cat("iteration budget reached; returning feasible iterate (",
                      ipm.note, ")");
  sol.objective = obj0 + chat.dot(ipm.w);
  sol.newton_iterations = ipm.newton_steps;
  for (std::size_t vi = 0; vi < p.variables().size(); ++vi)
    sol.values[p.variables()[vi].name] = p.unflatten(static_cast<int>(vi), x);
  return finish(sol);
}

}  // namespace sdp_detail

// Backend selection: LTN_SOLVER env var, default "internal" (the bundled
// interior-point method).
inline SdpSolution solve(const SdpProblem& p,
                         const SdpSettings& settings = {}) {
  const char* env = std::getenv("LTN_SOLVER");
  std::string backend = (env && *env) ? env : "internal";
  check(backend == "internal",
        cat("unknown LTN_SOLVER backend '", backend, "'; available: internal"));
  return sdp_detail::solve_internal(p, settings);
}

}  // namespace ltn
