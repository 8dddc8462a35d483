#pragma once

#include "spdc/types.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <numbers>
#include <string>

namespace spdc {

enum class BasisKind { neumann_cosine, dirichlet_sine, abstract_diagonal };

inline std::string to_string(BasisKind k) {
  switch (k) {
    case BasisKind::neumann_cosine: return "neumann_cosine";
    case BasisKind::dirichlet_sine: return "dirichlet_sine";
    default: return "abstract_diagonal";
  }
}

inline BasisKind basis_kind_from(const std::string& s) {
  if (s == "neumann_cosine") return BasisKind::neumann_cosine;
  if (s == "dirichlet_sine") return BasisKind::dirichlet_sine;
  if (s == "abstract_diagonal") return BasisKind::abstract_diagonal;
  throw std::invalid_argument("unknown basis_kind '" + s + "'");
}

/// Galerkin space spanned by the first dim_h eigenfunctions of a diagonal
/// generator A = -diag(eigenvalues).
struct SpectralSpace {
  int dim_h = 0;
  Vec eigenvalues;
  double domain_length = 1.0;
  BasisKind basis_kind = BasisKind::neumann_cosine;

  Vec semigroup_diag(double t) const { return (-t * eigenvalues.array()).exp().matrix(); }

  /// Values e_i(xi) of the eigenfunctions at a point of the domain.
  Vec basis_at(double xi) const {
    Vec e(dim_h);
    const double L = domain_length;
    for (int i = 0; i < dim_h; ++i) {
      if (basis_kind == BasisKind::neumann_cosine)
        e[i] = i == 0 ? 1.0 / std::sqrt(L) : std::sqrt(2.0 / L) * std::cos(std::numbers::pi * i * xi / L);
      else if (basis_kind == BasisKind::dirichlet_sine)
        e[i] = std::sqrt(2.0 / L) * std::sin(std::numbers::pi * (i + 1) * xi / L);
      else
        throw std::logic_error("abstract_diagonal space has no spatial basis");
    }
    return e;
  }
};

/// scale multiplies every eigenvalue (the harvesting model uses A = ½Δ).
inline SpectralSpace build_spectral_space(int dim_h, double domain_length, BasisKind kind,
                                          double scale = 1.0) {
  require(dim_h >= 1, "dim_h must be >= 1");
  require(domain_length > 0.0, "domain_length must be positive");
  require(kind != BasisKind::abstract_diagonal, "abstract_diagonal needs explicit eigenvalues");
  SpectralSpace s;
  s.dim_h = dim_h;
  s.domain_length = domain_length;
  s.basis_kind = kind;
  s.eigenvalues.resize(dim_h);
  for (int i = 0; i < dim_h; ++i) {
    const double k = kind == BasisKind::neumann_cosine ? double(i) : double(i + 1);
    const double w = std::numbers::pi * k / domain_length;
    s.eigenvalues[i] = scale * w * w;
  }
  return s;
}

inline SpectralSpace build_abstract_space(const Vec& eigenvalues) {
  require(eigenvalues.size() >= 1, "dim_h must be >= 1");
  for (int i = 0; i < eigenvalues.size(); ++i) {
    require(eigenvalues[i] >= 0.0, "eigenvalues must be non-negative");
    require(i == 0 || eigenvalues[i] >= eigenvalues[i - 1], "eigenvalues must be sorted");
  }
  SpectralSpace s;
  s.dim_h = int(eigenvalues.size());
  s.eigenvalues = eigenvalues;
  s.basis_kind = BasisKind::abstract_diagonal;
  return s;
}

inline Vec apply_semigroup(const SpectralSpace& s, double t, const Vec& x) {
  require(t >= 0.0, "apply_semigroup: t must be non-negative");
  require(x.size() == s.dim_h, "apply_semigroup: dimension mismatch");
  return s.semigroup_diag(t).cwiseProduct(x);
}

inline double schatten_norm(const Mat& op, double kappa) {
  require(kappa >= 1.0, "schatten_norm: kappa must be >= 1");
  if (op.size() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(op);
  const Vec sv = svd.singularValues();
  if (kappa == 2.0) return sv.norm();
  if (kappa == 1.0) return sv.sum();
  double acc = 0.0;
  for (int i = 0; i < sv.size(); ++i) acc += std::pow(sv[i], kappa);
  return std::pow(acc, 1.0 / kappa);
}

inline double operator_norm(const Mat& op) {
  if (op.size() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(op);
  return svd.singularValues()[0];
}

/// Hilbert-Schmidt norm of e^{tA} on each grid time.
inline std::vector<double> semigroup_hs_profile(const SpectralSpace& s, const std::vector<double>& t_grid) {
  std::vector<double> out;
  out.reserve(t_grid.size());
  for (double t : t_grid) {
    require(t > 0.0, "semigroup_hs_profile: t must be positive");
    out.push_back(std::sqrt((-2.0 * t * s.eigenvalues.array()).exp().sum()));
  }
  return out;
}

struct PowerLawFit {
  double C = 0.0;
  double theta = 0.0;  // profile ~ C t^{-theta}
  double slope = 0.0;
};

/// Least-squares line through (log t, log v).
inline PowerLawFit fit_power_law(const std::vector<double>& t, const std::vector<double>& v) {
  require(t.size() == v.size() && t.size() >= 2, "fit_power_law: need two or more points");
  const int n = int(t.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    const double a = std::log(t[i]), b = std::log(v[i]);
    sx += a; sy += b; sxx += a * a; sxy += a * b;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double icpt = (sy - slope * sx) / n;
  return {std::exp(icpt), -slope, slope};
}

inline std::vector<double> log_grid(double a, double b, int n) {
  std::vector<double> t(n);
  for (int i = 0; i < n; ++i) t[i] = std::exp(std::log(a) + (std::log(b) - std::log(a)) * i / (n - 1));
  return t;
}

}  // namespace spdc
