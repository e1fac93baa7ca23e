#pragma once

// Solver-agnostic semidefinite program model.
//
// A problem is a set of named matrix variables (optionally symmetric, stored
// packed), affine matrix expressions required PSD or zero, and a linear
// objective to maximize. Scalars flatten column-major (packed lower triangle
// for symmetric variables); the sparse-triplet JSON schema below uses those
// flat indices.

#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "ltn/common.hpp"

namespace ltn {

struct SdpVariable {
  std::string name;
  int rows = 0;
  int cols = 0;
  bool symmetric = false;
  int offset = 0;  // first flat scalar index
  int size = 0;    // scalar count: rows*cols, or rows*(rows+1)/2 if symmetric
};

// Packed lower-triangle column-major index for a k x k symmetric matrix.
[[nodiscard]] inline int sym_packed_index(int i, int j, int k) {
  if (i < j) std::swap(i, j);
  (void)k;
  return j * k - (j * (j - 1)) / 2 + (i - j);
}

// Inverse of sym_packed_index: packed -> (i, j) with i >= j.
inline void sym_unpacked_index(int packed, int k, int& i, int& j) {
  j = 0;
  while (j + 1 < k && (j + 1) * k - ((j + 1) * j) / 2 <= packed) ++j;
  const int off = j * k - (j * (j - 1)) / 2;
  i = j + (packed - off);
}

// One linear term: coeff * var[vrow, vcol] contributes to expression entry
// (erow, ecol). For symmetric variables (vrow, vcol) and (vcol, vrow) name
// the same scalar.
struct SdpTerm {
  int var = 0;
  int vrow = 0;
  int vcol = 0;
  int erow = 0;
  int ecol = 0;
  double coeff = 0.0;
};

struct SdpExpr {
  std::string label;
  int rows = 0;
  int cols = 0;
  Mat constant;  // rows x cols
  std::vector<SdpTerm> terms;

  void add_term(int var, int vrow, int vcol, int erow, int ecol,
                double coeff) {
    if (coeff != 0.0) terms.push_back({var, vrow, vcol, erow, ecol, coeff});
  }
};

struct SdpObjectiveTerm {
  int var = 0;
  int vrow = 0;
  int vcol = 0;
  double coeff = 0.0;
};

class SdpProblem {
 public:
  int add_variable(const std::string& name, int rows, int cols,
                   bool symmetric) {
    check(rows >= 1 && cols >= 1, cat("variable '", name, "': bad shape"));
    if (symmetric)
      check(rows == cols, cat("variable '", name, "': symmetric means square"));
    for (const auto& v : vars_)
      check(v.name != name, cat("duplicate variable '", name, "'"));
    SdpVariable v;
    v.name = name;
    v.rows = rows;
    v.cols = cols;
    v.symmetric = symmetric;
    v.offset = scalar_count_;
    v.size = symmetric ? rows * (rows + 1) / 2 : rows * cols;
    scalar_count_ += v.size;
    vars_.push_back(v);
    return static_cast<int>(vars_.size()) - 1;
  }

  [[nodiscard]] SdpExpr make_expr(const std::string& label, int rows,
                                  int cols) const {
    SdpExpr e;
    e.label = label;
    e.rows = rows;
    e.cols = cols;
    e.constant = Mat::Zero(rows, cols);
    return e;
  }

  void add_psd(SdpExpr e) {
    check(e.rows == e.cols, cat("psd '", e.label, "' must be square"));
    psd_.push_back(std::move(e));
  }

  void add_equality(SdpExpr e) { eq_.push_back(std::move(e)); }

  void maximize(std::vector<SdpObjectiveTerm> objective) {
    objective_ = std::move(objective);
  }

  [[nodiscard]] const std::vector<SdpVariable>& variables() const {
    return vars_;
  }
  [[nodiscard]] const std::vector<SdpExpr>& psd_constraints() const {
    return psd_;
  }
  [[nodiscard]] const std::vector<SdpExpr>& equality_constraints() const {
    return eq_;
  }
  [[nodiscard]] const std::vector<SdpObjectiveTerm>& objective() const {
    return objective_;
  }
  [[nodiscard]] int scalar_count() const { return scalar_count_; }

  [[nodiscard]] int flat_index(int var, int vrow, int vcol) const {
    const auto& v = vars_.at(var);
    check(vrow >= 0 && vrow < v.rows && vcol >= 0 && vcol < v.cols,
          cat("entry (", vrow, ",", vcol, ") out of range for '", v.name,
              "'"));
    if (v.symmetric)
      return v.offset + sym_packed_index(vrow, vcol, v.rows);
    return v.offset + vcol * v.rows + vrow;
  }

  // Dense value of one variable given the flat scalar vector.
  [[nodiscard]] Mat unflatten(int var, const Vec& x) const {
    const auto& v = vars_.at(var);
    Mat m(v.rows, v.cols);
    for (int c = 0; c < v.cols; ++c)
      for (int r = 0; r < v.rows; ++r) m(r, c) = x[flat_index(var, r, c)];
    return m;
  }

  [[nodiscard]] Mat eval_expr(const SdpExpr& e, const Vec& x) const {
    Mat out = e.constant;
    for (const auto& t : e.terms)
      out(t.erow, t.ecol) += t.coeff * x[flat_index(t.var, t.vrow, t.vcol)];
    return out;
  }

  [[nodiscard]] double eval_objective(const Vec& x) const {
    double v = 0.0;
    for (const auto& t : objective_)
      v += t.coeff * x[flat_index(t.var, t.vrow, t.vcol)];
    return v;
  }

  // Rejects malformed problems: bad references, non-finite data, asymmetric
  // PSD expressions (probed at random points).
  void validate() const {
    auto check_expr = [&](const SdpExpr& e, bool needs_square) {
      check(!e.label.empty(), "expression label must be nonempty");
      check(e.rows >= 1 && e.cols >= 1 && (!needs_square || e.rows == e.cols),
            cat("'", e.label, "': bad shape"));
      check(e.constant.rows() == e.rows && e.constant.cols() == e.cols,
            cat("'", e.label, "': constant shape mismatch"));
      check(e.constant.allFinite(), cat("'", e.label, "': non-finite data"));
      for (const auto& t : e.terms) {
        check(t.var >= 0 && t.var < static_cast<int>(vars_.size()),
              cat("'", e.label, "': unknown variable id ", t.var));
        const auto& v = vars_[t.var];
        check(t.vrow >= 0 && t.vrow < v.rows && t.vcol >= 0 && t.vcol < v.cols,
              cat("'", e.label, "': variable entry out of range"));
        check(t.erow >= 0 && t.erow < e.rows && t.ecol >= 0 && t.ecol < e.cols,
              cat("'", e.label, "': expression entry out of range"));
        check(std::isfinite(t.coeff), cat("'", e.label, "': bad coefficient"));
      }
    };
    for (const auto& e : eq_) check_expr(e, false);
    for (const auto& e : psd_) {
      check_expr(e, true);
      // Symmetry must hold identically in the variables; two random probes
      // catch any structural slip.
      Rng rng(0xC0FFEE);
      for (int probe = 0; probe < 2; ++probe) {
        const Vec x = rng.uniform_vec(scalar_count_, -1.0, 1.0);
        const Mat g = eval_expr(e, x);
        const double scale = 1.0 + g.cwiseAbs().maxCoeff();
        check((g - g.transpose()).cwiseAbs().maxCoeff() <= 1e-9 * scale,
              cat("psd '", e.label, "' is not structurally symmetric"));
      }
    }
    for (const auto& t : objective_) {
      check(t.var >= 0 && t.var < static_cast<int>(vars_.size()),
            "objective references unknown variable");
      check(std::isfinite(t.coeff), "objective has bad coefficient");
    }
  }

 private:
  std::vector<SdpVariable> vars_;
  std::vector<SdpExpr> psd_;
  std::vector<SdpExpr> eq_;
  std::vector<SdpObjectiveTerm> objective_;
  int scalar_count_ = 0;
};

enum class SdpStatus { optimal, feasible, infeasible, numerical_failure,
                       timeout };

[[nodiscard]] inline std::string to_string(SdpStatus s) {
  switch (s) {
    case SdpStatus::optimal: return "optimal";
    case SdpStatus::feasible: return "feasible";
    case SdpStatus::infeasible: return "infeasible";
    case SdpStatus::numerical_failure: return "numerical_failure";
    case SdpStatus::timeout: return "timeout";
  }
  return "unknown";
}

struct SdpSolution {
  SdpStatus status = SdpStatus::numerical_failure;
  std::map<std::string, Mat> values;  // present iff optimal/feasible
  double objective = std::numeric_limits<double>::quiet_NaN();
  int newton_iterations = 0;
  double wall_seconds = 0.0;
  std::string message;

  [[nodiscard]] bool has_values() const {
    return status == SdpStatus::optimal || status == SdpStatus::feasible;
  }

  [[nodiscard]] const Mat& value(const std::string& name) const {
    const auto it = values.find(name);
    check(it != values.end(), cat("no value for variable '", name, "'"));
    return it->second;
  }
};

struct SdpSettings {
  double feas_tol = 1e-7;    // post-solve re-evaluation tolerance
  double gap_tol = 1e-8;     // target objective gap (absolute)
  int max_newton = 2000;     // total Newton iterations across all stages
  double time_limit_sec = 600.0;
  double mu = 20.0;          // barrier stage growth
  bool verbose = false;
};

// ---------------------------------------------------------------------------
// Sparse-triplet JSON schema
//
// {
//   "scalar_count": N,
//   "variables": [{"name","rows","cols","symmetric","offset","size"}...],
//   "objective": {"sense":"maximize", "terms":[[flat,coeff]...]},
//   "psd_constraints": [{"label","dim","constant":[[...]],
//                        "terms":[[flat,row,col,coeff]...]}...],
//   "equality_constraints": [{"label","rows","cols","constant":[[...]],
//                             "terms":[[flat,row,col,coeff]...]}...]
// }
//
// flat indexes scalars column-major within each variable (packed lower
// triangle for symmetric ones), offset by the variable's "offset".

inline nlohmann::json to_json(const SdpProblem& p) {
  nlohmann::json j;
  j["scalar_count"] = p.scalar_count();
  j["variables"] = nlohmann::json::array();
  for (const auto& v : p.variables())
    j["variables"].push_back({{"name", v.name},
                              {"rows", v.rows},
                              {"cols", v.cols},
                              {"symmetric", v.symmetric},
                              {"offset", v.offset},
                              {"size", v.size}});
  auto expr_json = [&](const SdpExpr& e, bool square) {
    nlohmann::json je;
    je["label"] = e.label;
    if (square)
      je["dim"] = e.rows;
    else {
      je["rows"] = e.rows;
      je["cols"] = e.cols;
    }
    je["constant"] = matrix_to_json(e.constant);
    nlohmann::json terms = nlohmann::json::array();
    for (const auto& t : e.terms)
      terms.push_back({p.flat_index(t.var, t.vrow, t.vcol), t.erow, t.ecol,
                       t.coeff});
    je["terms"] = std::move(terms);
    return je;
  };
  j["psd_constraints"] = nlohmann::json::array();
  for (const auto& e : p.psd_constraints())
    j["psd_constraints"].push_back(expr_json(e, true));
  j["equality_constraints"] = nlohmann::json::array();
  for (const auto& e : p.equality_constraints())
    j["equality_constraints"].push_back(expr_json(e, false));
  nlohmann::json obj;
  obj["sense"] = "maximize";
  obj["terms"] = nlohmann::json::array();
  for (const auto& t : p.objective())
    obj["terms"].push_back({p.flat_index(t.var, t.vrow, t.vcol), t.coeff});
  j["objective"] = std::move(obj);
  return j;
}

inline SdpProblem sdp_problem_from_json(const nlohmann::json& j) {
  SdpProblem p;
  std::vector<SdpVariable> vars;
  for (const auto& jv : j.at("variables")) {
    const int id = p.add_variable(jv.at("name").get<std::string>(),
                                  jv.at("rows").get<int>(),
                                  jv.at("cols").get<int>(),
                                  jv.at("symmetric").get<bool>());
    check(p.variables()[id].offset == jv.at("offset").get<int>() &&
              p.variables()[id].size == jv.at("size").get<int>(),
          "sdp import: variable table offsets inconsistent");
  }
  check(p.scalar_count() == j.at("scalar_count").get<int>(),
        "sdp import: scalar count mismatch");

  // flat scalar -> (var, vrow, vcol)
  auto locate = [&](int flat, int& var, int& vr, int& vc) {
    const auto& vs = p.variables();
    var = 0;
    while (var + 1 < static_cast<int>(vs.size()) &&
           vs[var + 1].offset <= flat)
      ++var;
    const auto& v = vs[var];
    const int local = flat - v.offset;
    check(local >= 0 && local < v.size, "sdp import: flat index out of range");
    if (v.symmetric) {
      sym_unpacked_index(local, v.rows, vr, vc);
    } else {
      vc = local / v.rows;
      vr = local % v.rows;
    }
  };

  auto read_expr = [&](const nlohmann::json& je, bool square) {
    const int rows = square ? je.at("dim").get<int>() : je.at("rows").get<int>();
    const int cols = square ? rows : je.at("cols").get<int>();
    SdpExpr e = p.make_expr(je.at("label").get<std::string>(), rows, cols);
    e.constant = matrix_from_json(je.at("constant"), e.label);
    for (const auto& jt : je.at("terms")) {
      int var, vr, vc;
      locate(jt[0].get<int>(), var, vr, vc);
      e.add_term(var, vr, vc, jt[1].get<int>(), jt[2].get<int>(),
                 jt[3].get<double>());
    }
    return e;
  };
  for (const auto& je : j.at("psd_constraints")) p.add_psd(read_expr(je, true));
  for (const auto& je : j.at("equality_constraints"))
    p.add_equality(read_expr(je, false));

  check(j.at("objective").at("sense").get<std::string>() == "maximize",
        "sdp import: unsupported objective sense");
  std::vector<SdpObjectiveTerm> obj;
  for (const auto& jt : j.at("objective").at("terms")) {
    int var, vr, vc;
    locate(jt[0].get<int>(), var, vr, vc);
    obj.push_back({var, vr, vc, jt[1].get<double>()});
  }
  p.maximize(std::move(obj));
  p.validate();
  return p;
}

inline void save_sdp_problem(const SdpProblem& p, const std::string& path) {
  std::ofstream out(path);
  check(out.good(), cat("cannot write sdp file '", path, "'"));
  out << to_json(p).dump() << "\n";
}

inline SdpProblem load_sdp_problem(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), cat("cannot open sdp file '", path, "'"));
  nlohmann::json j;
  in >> j;
  return sdp_problem_from_json(j);
}

}  // namespace ltn
