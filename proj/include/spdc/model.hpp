#pragma once

#include "spdc/spectral.hpp"

#include <functional>
#include <random>

namespace spdc {

/// Driver value and Jacobians; z and r derivatives are taken w.r.t. the
/// column-major vectorisations of the D x n_W and D x d integrands.
struct DriverJac {
  Vec val;
  Mat x, u, y, z, r, gamma;
};

struct CostJac {
  double val = 0.0;
  Vec x, u, y, z, r, gamma;
};

struct MarkNode {
  int m;     // -1 for the phantom node when there are no marks
  double w;  // integration weight pi_m
};

using VecFn = std::function<Vec(double, const Vec&, const Vec&)>;
using MatFn = std::function<Mat(double, const Vec&, const Vec&)>;
using MatListFn = std::function<std::vector<Mat>(double, const Vec&, const Vec&)>;
using MarkVecFn = std::function<Vec(double, const Vec&, const Vec&, int)>;
using MarkMatFn = std::function<Mat(double, const Vec&, const Vec&, int)>;
using DriverFn = std::function<Vec(double, const Vec&, const Vec&, const Vec&, const Mat&, const Mat&, const Vec&, int)>;
using DriverJacFn = std::function<DriverJac(double, const Vec&, const Vec&, const Vec&, const Mat&, const Mat&, const Vec&, int)>;
using CostFn = std::function<double(double, const Vec&, const Vec&, const Vec&, const Mat&, const Mat&, const Vec&, int)>;
using CostJacFn = std::function<CostJac(double, const Vec&, const Vec&, const Vec&, const Mat&, const Mat&, const Vec&, int)>;

/// Coefficients of the controlled forward-backward system.
///
/// Shapes: F is n, G1 is n x n_W, G1_x lists K_i = d(G1 e_i)/dx, G1_u lists
/// dG1/du_c, G2 is n x d with G2_x[j], G2_u[j] the Jacobians of column j,
/// h is d, f is D, and g / L are the per-mark integrands evaluated with
/// gamma(mark). Mark index -1 is used when the jump measure is empty.
struct ModelSpec {
  std::string name;
  SpectralSpace space;
  int n_W = 0, d = 1, D = 1, p = 1;
  std::vector<double> marks, weights;
  Vec u_lo, u_hi;
  double h_bound = 0.0;
  Vec x0;

  VecFn F;
  MatFn F_x, F_u;
  MatFn G1;
  MatListFn G1_x, G1_u;
  MatFn G2;
  MatListFn G2_x, G2_u;
  MarkVecFn Theta;
  MarkMatFn Theta_x, Theta_u;
  VecFn h;
  MatFn h_x, h_u;
  DriverFn g;
  DriverJacFn g_jac;
  CostFn L;
  CostJacFn L_jac;
  std::function<Vec(const Vec&)> f;
  std::function<Mat(const Vec&)> f_x;
  std::function<double(const Vec&)> phi;
  std::function<Vec(const Vec&)> phi_x;
  std::function<double(const Vec&)> psi;
  std::function<Vec(const Vec&)> psi_y;

  int n() const { return space.dim_h; }
  int K() const { return int(marks.size()); }
  double total_intensity() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
  }
  /// Nodes of the finite mark integral.
  std::vector<MarkNode> mark_nodes() const {
    if (K() == 0) return {{-1, 1.0}};
    std::vector<MarkNode> q;
    for (int m = 0; m < K(); ++m) q.push_back({m, weights[m]});
    return q;
  }
  double mark_mass() const { return K() == 0 ? 1.0 : total_intensity(); }
  Vec project_box(const Vec& u) const { return u.cwiseMax(u_lo).cwiseMin(u_hi); }
};

// ---------------------------------------------------------------- policies

enum class PolicyFeatures { constant, affine_y, affine_y_qv };

inline std::string to_string(PolicyFeatures f) {
  switch (f) {
    case PolicyFeatures::constant: return "constant";
    case PolicyFeatures::affine_y: return "affine_y";
    default: return "affine_y_qv";
  }
}

inline PolicyFeatures policy_features_from(const std::string& s) {
  if (s == "constant") return PolicyFeatures::constant;
  if (s == "affine_y") return PolicyFeatures::affine_y;
  if (s == "affine_y_qv") return PolicyFeatures::affine_y_qv;
  throw std::invalid_argument("unknown policy features '" + s + "'");
}

/// Piecewise-constant-in-time feedback u = proj(theta_knot * phi(Y_t)).
/// theta is laid out [knot][control coordinate][feature].
struct PolicyParams {
  PolicyFeatures features = PolicyFeatures::affine_y;
  int n_knots = 1;
  int p = 1;
  int d = 1;
  double T = 1.0;
  Vec theta;

  int n_feat() const {
    switch (features) {
      case PolicyFeatures::constant: return 1;
      case PolicyFeatures::affine_y: return 1 + d;
      default: return 2 + d;
    }
  }
  int size() const { return n_knots * p * n_feat(); }
  int index(int knot, int c, int f) const { return (knot * p + c) * n_feat() + f; }
  int knot_of(double t) const {
    int k = int(std::floor(t / T * n_knots + 1e-12));
    return std::clamp(k, 0, n_knots - 1);
  }
  int knot_of_step(int k, int n_steps) const {
    return std::clamp(int((long long)(k) * n_knots / n_steps), 0, n_knots - 1);
  }
};

inline PolicyParams make_policy(PolicyFeatures f, int n_knots, int p, int d, double T) {
  PolicyParams pp;
  pp.features = f;
  pp.n_knots = n_knots;
  pp.p = p;
  pp.d = d;
  pp.T = T;
  pp.theta = Vec::Zero(pp.size());
  return pp;
}

inline Vec policy_feature_vector(const PolicyParams& pp, const Vec& Y, double qv) {
  Vec phi(pp.n_feat());
  phi[0] = 1.0;
  if (pp.features != PolicyFeatures::constant) phi.segment(1, pp.d) = Y;
  if (pp.features == PolicyFeatures::affine_y_qv) phi[1 + pp.d] = qv;
  return phi;
}

/// Unprojected policy output at a knot.
inline Vec policy_raw(const PolicyParams& pp, int knot, const Vec& phi, const Vec& theta) {
  Vec u(pp.p);
  for (int c = 0; c < pp.p; ++c) u[c] = theta.segment(pp.index(knot, c, 0), pp.n_feat()).dot(phi);
  return u;
}

inline Vec policy_control(const PolicyParams& pp, const ModelSpec& m, int knot, const Vec& Y, double qv) {
  return m.project_box(policy_raw(pp, knot, policy_feature_vector(pp, Y, qv), pp.theta));
}

/// Control at time t from the observation prefix (columns are Y_{t_0..t_k}).
inline Vec evaluate_policy(const PolicyParams& pp, const ModelSpec& m, double t, const Mat& Y_prefix) {
  require(t >= 0.0 && t <= pp.T + 1e-12, "evaluate_policy: t outside [0,T]");
  require(Y_prefix.cols() >= 1 && Y_prefix.rows() == pp.d, "evaluate_policy: bad Y prefix");
  double qv = 0.0;
  for (int k = 1; k < Y_prefix.cols(); ++k) qv += (Y_prefix.col(k) - Y_prefix.col(k - 1)).squaredNorm();
  return policy_control(pp, m, pp.knot_of(t), Y_prefix.col(Y_prefix.cols() - 1), qv);
}

/// Directional derivative of the projected policy along dtheta.
inline Vec policy_tangent(const PolicyParams& pp, const ModelSpec& m, int knot, const Vec& phi,
                          const Vec& dtheta) {
  const Vec raw = policy_raw(pp, knot, phi, pp.theta);
  const Vec dv = policy_raw(pp, knot, phi, dtheta);
  Vec v(pp.p);
  for (int c = 0; c < pp.p; ++c) v[c] = (raw[c] > m.u_lo[c] && raw[c] < m.u_hi[c]) ? dv[c] : 0.0;
  return v;
}

// ------------------------------------------------------ derivative checks

struct DerivativeCheck {
  std::string name;
  double max_rel_err = 0.0;
};

inline Vec vec_of(const Mat& m) { return Eigen::Map<const Vec>(m.data(), m.size()); }
inline Mat mat_of(const Vec& v, int r, int c) { return Eigen::Map<const Mat>(v.data(), r, c); }

namespace detail {

inline double rel_err(const Mat& a, const Mat& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1.0});
}

template <class Fn>
Mat fd_jacobian(Fn fn, const Vec& at, double h) {
  const Vec f0 = fn(at);
  Mat J(f0.size(), at.size());
  for (int c = 0; c < at.size(); ++c) {
    Vec a = at, b = at;
    a[c] += h;
    b[c] -= h;
    J.col(c) = (fn(a) - fn(b)) / (2.0 * h);
  }
  return J;
}

}  // namespace detail

/// Central-difference check of every derivative callable at random points.
inline std::vector<DerivativeCheck> check_model_derivatives(const ModelSpec& m, int n_points, std::uint64_t seed,
                                                            double x_scale = 0.5) {
  using detail::fd_jacobian;
  using detail::rel_err;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  const int n = m.n(), p = m.p, d = m.d, D = m.D, nW = m.n_W;
  std::vector<DerivativeCheck> out;
  auto note = [&](const std::string& nm, double e) {
    for (auto& c : out)
      if (c.name == nm) { c.max_rel_err = std::max(c.max_rel_err, e); return; }
    out.push_back({nm, e});
  };
  auto rnd = [&](int k, double s) {
    Vec v(k);
    for (int i = 0; i < k; ++i) v[i] = s * nd(gen);
    return v;
  };
  const double hb = 1e-6;
  for (int it = 0; it < n_points; ++it) {
    const double t = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    const Vec x = m.x0 + rnd(n, x_scale);
    Vec u(p);
    for (int c = 0; c < p; ++c)
      u[c] = std::uniform_real_distribution<double>(m.u_lo[c], m.u_hi[c])(gen);
    const double sx = hb * std::max(1.0, x.norm());
    const double su = hb * std::max(1.0, u.norm());
    note("F_x", rel_err(m.F_x(t, x, u), fd_jacobian([&](const Vec& a) { return m.F(t, a, u); }, x, sx)));
    note("F_u", rel_err(m.F_u(t, x, u), fd_jacobian([&](const Vec& a) { return m.F(t, x, a); }, u, su)));
    {
      auto Kx = m.G1_x(t, x, u);
      for (int i = 0; i < nW; ++i)
        note("G1_x", rel_err(Kx[i], fd_jacobian([&](const Vec& a) { return Vec(m.G1(t, a, u).col(i)); }, x, sx)));
      auto Gu = m.G1_u(t, x, u);
      const Mat J = fd_jacobian([&](const Vec& a) { return vec_of(m.G1(t, x, a)); }, u, su);
      for (int c = 0; c < p; ++c) note("G1_u", rel_err(vec_of(Gu[c]), J.col(c)));
    }
    {
      auto Ex = m.G2_x(t, x, u);
      auto Eu = m.G2_u(t, x, u);
      for (int j = 0; j < d; ++j) {
        note("G2_x", rel_err(Ex[j], fd_jacobian([&](const Vec& a) { return Vec(m.G2(t, a, u).col(j)); }, x, sx)));
        note("G2_u", rel_err(Eu[j], fd_jacobian([&](const Vec& a) { return Vec(m.G2(t, x, a).col(j)); }, u, su)));
      }
    }
    for (int q = 0; q < m.K(); ++q) {
      note("Theta_x", rel_err(m.Theta_x(t, x, u, q), fd_jacobian([&](const Vec& a) { return m.Theta(t, a, u, q); }, x, sx)));
      note("Theta_u", rel_err(m.Theta_u(t, x, u, q), fd_jacobian([&](const Vec& a) { return m.Theta(t, x, a, q); }, u, su)));
    }
    note("h_x", rel_err(m.h_x(t, x, u), fd_jacobian([&](const Vec& a) { return m.h(t, a, u); }, x, sx)));
    note("h_u", rel_err(m.h_u(t, x, u), fd_jacobian([&](const Vec& a) { return m.h(t, x, a); }, u, su)));
    note("f_x", rel_err(m.f_x(x), fd_jacobian([&](const Vec& a) { return m.f(a); }, x, sx)));
    {
      auto sc = [&](const Vec& a) { Vec r(1); r[0] = m.phi(a); return r; };
      note("phi_x", rel_err(m.phi_x(x).transpose(), fd_jacobian(sc, x, sx)));
    }
    const Vec y = rnd(D, 1.0);
    const Mat z = mat_of(rnd(D * nW, 1.0), D, nW);
    const Mat r = mat_of(rnd(D * d, 1.0), D, d);
    const Vec gm = rnd(D, 1.0);
    {
      auto sc = [&](const Vec& a) { Vec o(1); o[0] = m.psi(a); return o; };
      note("psi_y", rel_err(m.psi_y(y).transpose(), fd_jacobian(sc, y, hb * std::max(1.0, y.norm()))));
    }
    for (const auto& node : m.mark_nodes()) {
      const int q = node.m;
      const DriverJac gj = m.g_jac(t, x, u, y, z, r, gm, q);
      const CostJac lj = m.L_jac(t, x, u, y, z, r, gm, q);
      auto gv = [&](const Vec& xx, const Vec& uu, const Vec& yy, const Mat& zz, const Mat& rr, const Vec& gg) {
        return m.g(t, xx, uu, yy, zz, rr, gg, q);
      };
      auto lv = [&](const Vec& xx, const Vec& uu, const Vec& yy, const Mat& zz, const Mat& rr, const Vec& gg) {
        Vec o(1);
        o[0] = m.L(t, xx, uu, yy, zz, rr, gg, q);
        return o;
      };
      const double sy = hb * std::max(1.0, y.norm()), sz = hb * std::max(1.0, z.norm());
      const double sr = hb * std::max(1.0, r.norm()), sg = hb * std::max(1.0, gm.norm());
      note("g_val", rel_err(gj.val, gv(x, u, y, z, r, gm)));
      note("g_x", rel_err(gj.x, fd_jacobian([&](const Vec& a) { return gv(a, u, y, z, r, gm); }, x, sx)));
      note("g_u", rel_err(gj.u, fd_jacobian([&](const Vec& a) { return gv(x, a, y, z, r, gm); }, u, su)));
      note("g_y", rel_err(gj.y, fd_jacobian([&](const Vec& a) { return gv(x, u, a, z, r, gm); }, y, sy)));
      note("g_z", rel_err(gj.z, fd_jacobian([&](const Vec& a) { return gv(x, u, y, mat_of(a, D, nW), r, gm); }, vec_of(z), sz)));
      note("g_r", rel_err(gj.r, fd_jacobian([&](const Vec& a) { return gv(x, u, y, z, mat_of(a, D, d), gm); }, vec_of(r), sr)));
      note("g_gamma", rel_err(gj.gamma, fd_jacobian([&](const Vec& a) { return gv(x, u, y, z, r, a); }, gm, sg)));
      note("L_val", std::abs(lj.val - lv(x, u, y, z, r, gm)[0]));
      note("L_x", rel_err(lj.x.transpose(), fd_jacobian([&](const Vec& a) { return lv(a, u, y, z, r, gm); }, x, sx)));
      note("L_u", rel_err(lj.u.transpose(), fd_jacobian([&](const Vec& a) { return lv(x, a, y, z, r, gm); }, u, su)));
      note("L_y", rel_err(lj.y.transpose(), fd_jacobian([&](const Vec& a) { return lv(x, u, a, z, r, gm); }, y, sy)));
      note("L_z", rel_err(lj.z.transpose(), fd_jacobian([&](const Vec& a) { return lv(x, u, y, mat_of(a, D, nW), r, gm); }, vec_of(z), sz)));
      note("L_r", rel_err(lj.r.transpose(), fd_jacobian([&](const Vec& a) { return lv(x, u, y, z, mat_of(a, D, d), gm); }, vec_of(r), sr)));
      note("L_gamma", rel_err(lj.gamma.transpose(), fd_jacobian([&](const Vec& a) { return lv(x, u, y, z, r, a); }, gm, sg)));
    }
  }
  return out;
}

/// Largest |h| seen at random states.
inline double sampled_h_sup(const ModelSpec& m, int n_points, std::uint64_t seed, double x_scale = 5.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  double s = 0.0;
  for (int it = 0; it < n_points; ++it) {
    Vec x = m.x0;
    for (int i = 0; i < x.size(); ++i) x[i] += x_scale * nd(gen);
    Vec u(m.p);
    for (int c = 0; c < m.p; ++c) u[c] = std::uniform_real_distribution<double>(m.u_lo[c], m.u_hi[c])(gen);
    s = std::max(s, m.h(0.0, x, u).lpNorm<Eigen::Infinity>());
  }
  return s;
}

}  // namespace spdc
