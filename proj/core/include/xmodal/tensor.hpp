#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace xmodal {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols,
                          const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw std::invalid_argument(what + ": expected " + std::to_string(rows) + "x" +
                                std::to_string(cols) + ", got " +
                                std::to_string(m.rows()) + "x" +
                                std::to_string(m.cols()));
  }
}

}  // namespace xmodal
