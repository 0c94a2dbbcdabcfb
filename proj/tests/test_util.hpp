#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <string>

#include "flowvi/rng.hpp"

namespace testutil {

inline double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

inline bool bit_equal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, flowvi::RngStream& rng,
                                     double scale = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Mean/SE summary of a scalar stream.
struct Welford {
  long n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / n;
    m2 += d * (x - mean);
  }
  double variance() const { return n > 1 ? m2 / (n - 1) : 0.0; }
  double se() const { return n > 1 ? std::sqrt(variance() / n) : 0.0; }
};

inline std::string temp_dir(const std::string& tag) {
  std::string d = std::string("flowvi_test_") + tag;
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace testutil
