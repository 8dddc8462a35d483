#pragma once

#include "spdc/types.hpp"

#include <Eigen/Eigenvalues>

namespace spdc {

enum class RegressionKind { polynomial, mode_linear, mode_quadratic };

inline std::string to_string(RegressionKind k) {
  switch (k) {
    case RegressionKind::polynomial: return "polynomial";
    case RegressionKind::mode_linear: return "mode_linear";
    default: return "mode_quadratic";
  }
}

inline RegressionKind regression_kind_from(const std::string& s) {
  if (s == "polynomial") return RegressionKind::polynomial;
  if (s == "mode_linear") return RegressionKind::mode_linear;
  if (s == "mode_quadratic") return RegressionKind::mode_quadratic;
  throw std::invalid_argument("unknown regression basis '" + s + "'");
}

/// Feature map on a state vector s.
///   polynomial: 1, s_i^p for p = 1..degree (no cross terms)
///   mode_linear: 1, s
///   mode_quadratic: 1, s, s_i s_j for i <= j < quad_modes
struct RegressionBasis {
  RegressionKind kind = RegressionKind::mode_linear;
  int degree = 2;
  int quad_modes = 6;
  int max_features = 512;

  int count(int dim) const {
    switch (kind) {
      case RegressionKind::polynomial: return 1 + dim * degree;
      case RegressionKind::mode_linear: return 1 + dim;
      default: {
        const int q = std::min(quad_modes, dim);
        return 1 + dim + q * (q + 1) / 2;
      }
    }
  }

  void features(const Vec& s, double* out) const {
    const int dim = int(s.size());
    int c = 0;
    out[c++] = 1.0;
    if (kind == RegressionKind::polynomial) {
      for (int i = 0; i < dim; ++i) {
        double v = 1.0;
        for (int p = 1; p <= degree; ++p) {
          v *= s[i];
          out[c++] = v;
        }
      }
      return;
    }
    for (int i = 0; i < dim; ++i) out[c++] = s[i];
    if (kind == RegressionKind::mode_quadratic) {
      const int q = std::min(quad_modes, dim);
      for (int i = 0; i < q; ++i)
        for (int j = i; j < q; ++j) out[c++] = s[i] * s[j];
    }
  }

  Vec features(const Vec& s) const {
    Vec f(count(int(s.size())));
    features(s, f.data());
    return f;
  }
};

struct RegressionFit {
  Mat beta;             // nf x n_targets
  double cond = 1.0;    // condition number of the regularised Gram matrix
  double lambda = 0.0;  // ridge actually used
  std::vector<int> active;
};

/// Ridge least squares Phi beta ~ T with lambda = ridge_rel * trace(G)/nf on
/// the active non-intercept block. Features without sample variance (other than the
/// intercept in column 0) are dropped and get zero coefficients.
inline RegressionFit ridge_fit(const Mat& Phi, const Mat& T, double ridge_rel, double max_cond = 1e13) {
  const int M = int(Phi.rows()), nf = int(Phi.cols());
  require(T.rows() == M, "ridge_fit: row mismatch");
  const Mat G = Phi.transpose() * Phi;
  std::vector<int> act{0};
  for (int f = 1; f < nf; ++f) {
    const double mean = G(0, f) / M, m2 = G(f, f) / M;
    if (m2 - mean * mean > 1e-14 * std::max(1.0, m2)) act.push_back(f);
  }
  const int na = int(act.size());
  Mat Ga(na, na);
  Mat Ba(na, T.cols());
  const Mat B = Phi.transpose() * T;
  for (int a = 0; a < na; ++a) {
    for (int b = 0; b < na; ++b) Ga(a, b) = G(act[a], act[b]);
    Ba.row(a) = B.row(act[a]);
  }
  RegressionFit R;
  R.active = act;
  R.lambda = na > 1 ? ridge_rel * (Ga.trace() - Ga(0, 0)) / (na - 1) : 0.0;
  Ga.diagonal().tail(na - 1).array() += R.lambda;
  Eigen::SelfAdjointEigenSolver<Mat> es(Ga, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  R.cond = lo > 0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (!(R.cond < max_cond))
    throw NumericalAbort("rank-deficient regression, condition number " + std::to_string(R.cond), -1);
  const Mat ba = Ga.ldlt().solve(Ba);
  R.beta = Mat::Zero(nf, T.cols());
  for (int a = 0; a < na; ++a) R.beta.row(act[a]) = ba.row(a);
  return R;
}

}  // namespace spdc
