#pragma once

// Dataset collection and the data matrices driving controller synthesis.
//
// From T_d recorded transitions (x_d(k), u_d(k), x_d+(k)) we form, per node i,
//
//   z_bar_i[k] = x_d+(k)[i] - alpha*x_d(k)[i]      (realized threshold output)
//   Z_i       = z_bar_i^T (I - E_i)                (1 x T_d)
//   Q_i       = (I - E_i) [x_d(k)^T u_d(k)^T]      (T_d x (n+m))
//
// where E_i masks samples whose threshold output sat at a rail (0 or s).
// Masked samples contribute exact zeros. The node-major reordering that makes
// these blocks contiguous is tracked by an index map; the permutation matrix
// behind it is never materialized.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ltn/common.hpp"
#include "ltn/ltn_model.hpp"

namespace ltn {

struct Box {
  double lo = 0.0;
  double hi = 0.0;

  [[nodiscard]] bool valid() const { return lo <= hi; }

  // Accepts "LO:HI".
  static Box parse(const std::string& text) {
    const auto sep = text.find(':');
    check(sep != std::string::npos,
          cat("Box: expected LO:HI, got '", text, "'"));
    try {
      return {std::stod(text.substr(0, sep)), std::stod(text.substr(sep + 1))};
    } catch (const std::invalid_argument&) {
      throw std::runtime_error(cat("Box: bad numbers in '", text, "'"));
    }
  }
};

struct DataSet {
  int T_d = 0;
  Mat x;       // T_d x n, row k = x_d(k)
  Mat u;       // T_d x m, row k = u_d(k)
  Mat x_plus;  // T_d x n, row k = x_d+(k)

  [[nodiscard]] int n() const { return static_cast<int>(x.cols()); }
  [[nodiscard]] int m() const { return static_cast<int>(u.cols()); }

  void validate() const {
    check(T_d >= 1, "DataSet: T_d must be >= 1");
    check(x.rows() == T_d && u.rows() == T_d && x_plus.rows() == T_d,
          "DataSet: sample count mismatch");
    check(x_plus.cols() == x.cols(), "DataSet: state dimension mismatch");
    check(x.cols() >= 1 && u.cols() >= 1, "DataSet: empty dimensions");
  }
};

struct DataMatrices {
  int n = 0;
  int m = 0;
  int T_d = 0;
  double alpha = 0.0;
  double s = 0.0;
  double eps_sat = 0.0;

  Mat z_bar;  // n x T_d, row i = z_bar_i (node-major)
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> sat_mask;  // n x T_d
  std::vector<Eigen::RowVectorXd> Z_blocks;                     // n of 1 x T_d
  std::vector<Mat> Q_blocks;      // n of T_d x (n+m)
  Eigen::VectorXi node_ranks;     // rank of each Q_i
  int richness_rank = 0;          // sum of block ranks
};

// Node-major row index for (node i, sample k), both 0-based: the sample-major
// row k*n + i lands at row i*T_d + k after reordering.
[[nodiscard]] inline Eigen::Index permuted_row_index(int i, int k, int n,
                                                     int T_d) {
  check(i >= 0 && i < n, cat("permuted_row_index: node ", i, " out of range"));
  check(k >= 0 && k < T_d,
        cat("permuted_row_index: sample ", k, " out of range"));
  return static_cast<Eigen::Index>(i) * T_d + k;
}

[[nodiscard]] inline Eigen::Index sample_major_row_index(int i, int k, int n) {
  return static_cast<Eigen::Index>(k) * n + i;
}

inline DataSet collect_random_dataset(const LtnSystem& sys, int T_d,
                                      const Box& x_box, const Box& u_box,
                                      std::uint64_t seed,
                                      const DisturbanceSpec& dist = {}) {
  sys.validate();
  check(T_d >= 1, "collect_random_dataset: T_d must be >= 1");
  check(x_box.valid() && u_box.valid(), "collect_random_dataset: empty box");
  check(x_box.lo >= 0.0 && x_box.hi <= sys.state_cap() * (1.0 + 1e-12),
        cat("collect_random_dataset: x box must lie within [0, ",
            sys.state_cap(), "]"));

  DataSet ds;
  ds.T_d = T_d;
  ds.x.resize(T_d, sys.n);
  ds.u.resize(T_d, sys.m);
  ds.x_plus.resize(T_d, sys.n);

  // Samples are independent draws, not a trajectory: the representation
  // theory only needs a bag of one-step transitions.
  Rng rng(seed);
  for (int k = 0; k < T_d; ++k) {
    const Vec xk = rng.uniform_vec(sys.n, x_box.lo, x_box.hi);
    const Vec uk = rng.uniform_vec(sys.m, u_box.lo, u_box.hi);
    Vec xp;
    if (dist.active()) {
      const Vec wk = rng.uniform_vec(sys.n, dist.lo, dist.hi);
      xp = step_with_disturbance(sys, xk, uk, wk);
    } else {
      xp = step(sys, xk, uk);
    }
    ds.x.row(k) = xk.transpose();
    ds.u.row(k) = uk.transpose();
    ds.x_plus.row(k) = xp.transpose();
  }
  return ds;
}

// Numerical rank with the standard tolerance max_dim * sigma_max * eps * 10.
[[nodiscard]] inline int numerical_rank(const Mat& a) {
  if (a.size() == 0) return 0;
  Eigen::JacobiSVD<Mat> svd(a);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv[0] == 0.0) return 0;
  const double tol = static_cast<double>(std::max(a.rows(), a.cols())) *
                     sv[0] * std::numeric_limits<double>::epsilon() * 10.0;
  int r = 0;
  for (Eigen::Index j = 0; j < sv.size(); ++j)
    if (sv[j] > tol) ++r;
  return r;
}

inline DataMatrices build_data_matrices(const DataSet& ds, double alpha,
                                        double s, double eps_sat = 1e-9) {
  ds.validate();
  check(alpha >= 0.0 && alpha < 1.0, "build_data_matrices: bad alpha");
  check(s > 0.0, "build_data_matrices: bad s");
  check(eps_sat >= 0.0, "build_data_matrices: bad eps_sat");

  DataMatrices dm;
  dm.n = ds.n();
  dm.m = ds.m();
  dm.T_d = ds.T_d;
  dm.alpha = alpha;
  dm.s = s;
  dm.eps_sat = eps_sat;

  dm.z_bar.resize(dm.n, dm.T_d);
  dm.sat_mask.resize(dm.n, dm.T_d);
  dm.Z_blocks.resize(dm.n);
  dm.Q_blocks.resize(dm.n);
  dm.node_ranks.resize(dm.n);

  for (int i = 0; i < dm.n; ++i) {
    Eigen::RowVectorXd Zi = Eigen::RowVectorXd::Zero(dm.T_d);
    Mat Qi = Mat::Zero(dm.T_d, dm.n + dm.m);
    for (int k = 0; k < dm.T_d; ++k) {
      const double z = ds.x_plus(k, i) - alpha * ds.x(k, i);
      dm.z_bar(i, k) = z;
      const bool at_rail = std::abs(z) <= eps_sat || std::abs(z - s) <= eps_sat;
      dm.sat_mask(i, k) = at_rail;
      if (!at_rail) {
        Zi[k] = z;
        Qi.row(k).head(dm.n) = ds.x.row(k);
        Qi.row(k).tail(dm.m) = ds.u.row(k);
      }
      // Masked rows stay exact zeros.
    }
    dm.Z_blocks[i] = std::move(Zi);
    dm.node_ranks[i] = numerical_rank(Qi);
    dm.Q_blocks[i] = std::move(Qi);
  }
  dm.richness_rank = dm.node_ranks.sum();
  return dm;
}

struct RichnessReport {
  bool pass = false;
  Eigen::VectorXi node_ranks;
  std::vector<int> deficient_nodes;

  [[nodiscard]] std::string describe(int n, int m) const {
    if (pass) return cat("richness ok: every Q_i has full column rank ", n + m);
    std::string out = cat("richness FAILED (need rank ", n + m, "):");
    for (int i : deficient_nodes)
      out += cat(" node ", i + 1, " rank ", node_ranks[i], ";");
    return out;
  }
};

inline RichnessReport check_richness(const DataMatrices& dm) {
  RichnessReport rep;
  rep.node_ranks = dm.node_ranks;
  for (int i = 0; i < dm.n; ++i)
    if (dm.node_ranks[i] < dm.n + dm.m) rep.deficient_nodes.push_back(i);
  rep.pass = rep.deficient_nodes.empty();
  return rep;
}

// Minimum-norm per-block solution of Q_i^T M_i = target. The target stacks an
// (n+m) x n block, e.g. [I; K1] for the state path or [0; K2] for the
// reference path of the data-based representation.
inline std::vector<Mat> solve_representation_blocks(const DataMatrices& dm,
                                                    const Mat& target) {
  check(target.rows() == dm.n + dm.m && target.cols() == dm.n,
        cat("solve_representation_blocks: target must be ", dm.n + dm.m, "x",
            dm.n));
  const auto rich = check_richness(dm);
  check(rich.pass, cat("solve_representation_blocks: ",
                       rich.describe(dm.n, dm.m)));

  std::vector<Mat> blocks(dm.n);
  for (int i = 0; i < dm.n; ++i) {
    const Mat qt = dm.Q_blocks[i].transpose();  // (n+m) x T_d, full row rank
    Eigen::CompleteOrthogonalDecomposition<Mat> cod(qt);
    Mat Mi = cod.solve(target);
    const double resid = (qt * Mi - target).norm();
    check(resid <= 1e-10 * std::max(1.0, target.norm()),
          cat("solve_representation_blocks: residual ", resid, " at node ",
              i + 1));
    blocks[i] = std::move(Mi);
  }
  return blocks;
}

inline std::vector<Mat> solve_M_for_gains(const DataMatrices& dm,
                                          const Mat& K1) {
  Mat target(dm.n + dm.m, dm.n);
  target.topRows(dm.n) = Mat::Identity(dm.n, dm.n);
  target.bottomRows(dm.m) = K1;
  return solve_representation_blocks(dm, target);
}

inline std::vector<Mat> solve_N_for_gains(const DataMatrices& dm,
                                          const Mat& K2) {
  Mat target = Mat::Zero(dm.n + dm.m, dm.n);
  target.bottomRows(dm.m) = K2;
  return solve_representation_blocks(dm, target);
}

// Row i of the result is Z_i * S_i; the blockwise form of Z * S for the
// block-diagonal Z.
[[nodiscard]] inline Mat z_times_blocks(const DataMatrices& dm,
                                        const std::vector<Mat>& S) {
  check(static_cast<int>(S.size()) == dm.n, "z_times_blocks: block count");
  Mat out(dm.n, S[0].cols());
  for (int i = 0; i < dm.n; ++i) out.row(i) = dm.Z_blocks[i] * S[i];
  return out;
}

// One step of the data-based representation x+ = alpha*x + [Z(Mx + Nr)]_0^s.
[[nodiscard]] inline Vec representation_step(const DataMatrices& dm,
                                             const std::vector<Mat>& M,
                                             const std::vector<Mat>& N,
                                             const Vec& x, const Vec& r) {
  Vec pre(dm.n);
  for (int i = 0; i < dm.n; ++i)
    pre[i] = dm.Z_blocks[i].dot(M[i] * x + N[i] * r);
  return dm.alpha * x + threshold_clamp(pre, dm.s);
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const DataSet& ds) {
  return {{"T_d", ds.T_d},
          {"x", matrix_to_json(ds.x)},
          {"u", matrix_to_json(ds.u)},
          {"x_plus", matrix_to_json(ds.x_plus)}};
}

inline DataSet dataset_from_json(const nlohmann::json& j) {
  DataSet ds;
  ds.T_d = j.at("T_d").get<int>();
  ds.x = matrix_from_json(j.at("x"), "x");
  ds.u = matrix_from_json(j.at("u"), "u");
  ds.x_plus = matrix_from_json(j.at("x_plus"), "x_plus");
  ds.validate();
  return ds;
}

inline DataSet load_dataset(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), cat("cannot open dataset file '", path, "'"));
  nlohmann::json j;
  in >> j;
  return dataset_from_json(j);
}

inline void save_dataset(const DataSet& ds, const std::string& path) {
  std::ofstream out(path);
  check(out.good(), cat("cannot write dataset file '", path, "'"));
  out << to_json(ds).dump() << "\n";
}

}  // namespace ltn
