#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace ltn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Always-on runtime check (independent of NDEBUG so release builds keep
// their invariants).
inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

// Deterministic uniform sampler. The mantissa construction gives the same
// stream on every platform, unlike std::uniform_real_distribution.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // [0, 1)
  double canonical() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * canonical(); }

  Vec uniform_vec(Eigen::Index n, double lo, double hi) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = uniform(lo, hi);
    return v;
  }

  Mat uniform_mat(Eigen::Index r, Eigen::Index c, double lo, double hi) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = uniform(lo, hi);
    return m;
  }

  std::uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

inline nlohmann::json matrix_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat matrix_from_json(const nlohmann::json& j, const std::string& name) {
  check(j.is_array() && !j.empty(), cat(name, ": expected nonempty 2d array"));
  const auto rows = j.size();
  check(j[0].is_array(), cat(name, ": expected 2d array"));
  const auto cols = j[0].size();
  Mat m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    check(j[i].is_array() && j[i].size() == cols,
          cat(name, ": ragged rows in matrix"));
    for (std::size_t k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

}  // namespace ltn
