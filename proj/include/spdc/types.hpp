#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace spdc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using MatI = Eigen::MatrixXi;

// Raised when a trajectory leaves the finite doubles; carries the grid step.
struct NumericalAbort : std::runtime_error {
  int step;
  NumericalAbort(const std::string& what, int k)
      : std::runtime_error(what + " (step " + std::to_string(k) + ")"), step(k) {}
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

// Mean and standard error of a sample.
struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& s) {
  MeanSe r;
  const std::size_t n = s.size();
  if (n == 0) return r;
  double m = 0.0;
  for (double v : s) m += v;
  m /= double(n);
  double q = 0.0;
  for (double v : s) q += (v - m) * (v - m);
  r.mean = m;
  r.se = n > 1 ? std::sqrt(q / double(n - 1) / double(n)) : 0.0;
  return r;
}

inline MeanSe mean_se(const Vec& s) {
  return mean_se(std::vector<double>(s.data(), s.data() + s.size()));
}

}  // namespace spdc
