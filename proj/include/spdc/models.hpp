#pragma once

#include "spdc/model.hpp"
#include "spdc/noise.hpp"

namespace spdc {

/// Coefficients that are affine in (x, u), with saturated linear sensor,
/// linear scalar driver and quadratic costs. Shared by the LQ and the
/// random bounded instances.
struct AffineModelParams {
  std::string name = "affine";
  SpectralSpace space;
  int n_W = 1, d = 1, p = 1;
  std::vector<double> marks, weights;
  Vec u_lo, u_hi, x0;
  Mat A, B;
  Vec c;
  std::vector<Mat> K, C1;  // G1 column i: K[i] x + C1[i] u + c1.col(i)
  Mat c1;
  std::vector<Mat> E, C2;  // G2 column j: E[j] x + C2[j] u + b2.col(j)
  Mat b2;
  std::vector<Mat> T3, D3;  // Theta_m = T3[m] x + D3[m] u + t3.col(m)
  Mat t3;
  Mat H, Hu;
  Vec h0;
  double S = 10.0;  // sensor saturation level
  // g_m = (gy y + gx.x + gu.u + gz.vec z + gr.vec r + g0) / mass + gg gamma_m
  double gy = 0.0, g0 = 0.0, gg = 0.0;
  Vec gx, gu, gz, gr;
  Vec fx;
  // L_m = (u'Ru/2 + s.u + x'Qx/2 + q.x + ly y + lz.vec z + lr.vec r) / mass + lg gamma_m
  Mat R, Q;
  Vec s, q, lz, lr;
  double ly = 0.0, lg = 0.0;
  Mat Phi;
  Vec cphi;
  double psi2 = 0.0, psi1 = 1.0;

  /// Zero-fills every coefficient for the given sizes.
  void zero(const SpectralSpace& sp, int nW, int dd, int pp, const JumpMeasureSpec& jm) {
    space = sp;
    n_W = nW;
    d = dd;
    p = pp;
    marks = jm.marks;
    weights = jm.weights;
    const int n = sp.dim_h, Km = jm.K();
    u_lo = Vec::Constant(p, -5.0);
    u_hi = Vec::Constant(p, 5.0);
    x0 = Vec::Zero(n);
    A = Mat::Zero(n, n);
    B = Mat::Zero(n, p);
    c = Vec::Zero(n);
    K.assign(nW, Mat::Zero(n, n));
    C1.assign(nW, Mat::Zero(n, p));
    c1 = Mat::Zero(n, nW);
    E.assign(d, Mat::Zero(n, n));
    C2.assign(d, Mat::Zero(n, p));
    b2 = Mat::Zero(n, d);
    T3.assign(Km, Mat::Zero(n, n));
    D3.assign(Km, Mat::Zero(n, p));
    t3 = Mat::Zero(n, Km);
    H = Mat::Zero(d, n);
    Hu = Mat::Zero(d, p);
    h0 = Vec::Zero(d);
    gx = Vec::Zero(n);
    gu = Vec::Zero(p);
    gz = Vec::Zero(nW);
    gr = Vec::Zero(d);
    fx = Vec::Zero(n);
    R = Mat::Identity(p, p);
    Q = Mat::Zero(n, n);
    s = Vec::Zero(p);
    q = Vec::Zero(n);
    lz = Vec::Zero(nW);
    lr = Vec::Zero(d);
    Phi = Mat::Zero(n, n);
    cphi = Vec::Zero(n);
  }
};

inline ModelSpec make_affine_model(const AffineModelParams& P) {
  ModelSpec m;
  m.name = P.name;
  m.space = P.space;
  m.n_W = P.n_W;
  m.d = P.d;
  m.D = 1;
  m.p = P.p;
  m.marks = P.marks;
  m.weights = P.weights;
  m.u_lo = P.u_lo;
  m.u_hi = P.u_hi;
  m.x0 = P.x0;
  m.h_bound = P.S;
  const int n = P.space.dim_h, nW = P.n_W, d = P.d, p = P.p;
  const double mass = m.mark_mass();

  m.F = [P](double, const Vec& x, const Vec& u) -> Vec { return P.A * x + P.B * u + P.c; };
  m.F_x = [P](double, const Vec&, const Vec&) -> Mat { return P.A; };
  m.F_u = [P](double, const Vec&, const Vec&) -> Mat { return P.B; };
  m.G1 = [P, n, nW](double, const Vec& x, const Vec& u) -> Mat {
    Mat G(n, nW);
    for (int i = 0; i < nW; ++i) G.col(i) = P.K[i] * x + P.C1[i] * u + P.c1.col(i);
    return G;
  };
  m.G1_x = [P](double, const Vec&, const Vec&) { return P.K; };
  m.G1_u = [P, n, nW, p](double, const Vec&, const Vec&) {
    std::vector<Mat> out(p, Mat(n, nW));
    for (int c = 0; c < p; ++c)
      for (int i = 0; i < nW; ++i) out[c].col(i) = P.C1[i].col(c);
    return out;
  };
  m.G2 = [P, n, d](double, const Vec& x, const Vec& u) -> Mat {
    Mat G(n, d);
    for (int j = 0; j < d; ++j) G.col(j) = P.E[j] * x + P.C2[j] * u + P.b2.col(j);
    return G;
  };
  m.G2_x = [P](double, const Vec&, const Vec&) { return P.E; };
  m.G2_u = [P](double, const Vec&, const Vec&) { return P.C2; };
  m.Theta = [P](double, const Vec& x, const Vec& u, int q) -> Vec {
    return P.T3[q] * x + P.D3[q] * u + P.t3.col(q);
  };
  m.Theta_x = [P](double, const Vec&, const Vec&, int q) -> Mat { return P.T3[q]; };
  m.Theta_u = [P](double, const Vec&, const Vec&, int q) -> Mat { return P.D3[q]; };

  auto sat_arg = [P](const Vec& x, const Vec& u) -> Vec { return (P.H * x + P.Hu * u + P.h0) / P.S; };
  m.h = [P, sat_arg](double, const Vec& x, const Vec& u) -> Vec {
    return P.S * sat_arg(x, u).array().tanh().matrix();
  };
  m.h_x = [P, sat_arg](double, const Vec& x, const Vec& u) -> Mat {
    const Vec s = 1.0 - sat_arg(x, u).array().tanh().square();
    return s.asDiagonal() * P.H;
  };
  m.h_u = [P, sat_arg](double, const Vec& x, const Vec& u) -> Mat {
    const Vec s = 1.0 - sat_arg(x, u).array().tanh().square();
    return s.asDiagonal() * P.Hu;
  };

  auto flat = [](const Mat& a) { return Eigen::Map<const Vec>(a.data(), a.size()); };
  m.g = [P, mass, flat](double, const Vec& x, const Vec& u, const Vec& y, const Mat& z, const Mat& r,
                        const Vec& gam, int q) -> Vec {
    Vec o(1);
    o[0] = (P.gy * y[0] + P.gx.dot(x) + P.gu.dot(u) + P.gz.dot(flat(z)) + P.gr.dot(flat(r)) + P.g0) / mass +
           (q >= 0 ? P.gg * gam[0] : 0.0);
    return o;
  };
  m.g_jac = [P, mass, n, nW, d, p, g = m.g](double t, const Vec& x, const Vec& u, const Vec& y, const Mat& z,
                                          const Mat& r, const Vec& gam, int q) {
    DriverJac J;
    J.val = g(t, x, u, y, z, r, gam, q);
    J.x = P.gx.transpose() / mass;
    J.u = P.gu.transpose() / mass;
    J.y = Mat::Constant(1, 1, P.gy / mass);
    J.z = P.gz.transpose() / mass;
    J.r = P.gr.transpose() / mass;
    J.gamma = Mat::Constant(1, 1, q >= 0 ? P.gg : 0.0);
    (void)n; (void)nW; (void)d; (void)p;
    return J;
  };
  m.L = [P, mass, flat](double, const Vec& x, const Vec& u, const Vec& y, const Mat& z, const Mat& r,
                        const Vec& gam, int q) -> double {
    const double base = 0.5 * u.dot(P.R * u) + P.s.dot(u) + 0.5 * x.dot(P.Q * x) + P.q.dot(x) + P.ly * y[0] +
                        P.lz.dot(flat(z)) + P.lr.dot(flat(r));
    return base / mass + (q >= 0 ? P.lg * gam[0] : 0.0);
  };
  m.L_jac = [P, mass, L = m.L](double t, const Vec& x, const Vec& u, const Vec& y, const Mat& z, const Mat& r,
                               const Vec& gam, int q) {
    CostJac J;
    J.val = L(t, x, u, y, z, r, gam, q);
    J.x = (0.5 * (P.Q + P.Q.transpose()) * x + P.q) / mass;
    J.u = (0.5 * (P.R + P.R.transpose()) * u + P.s) / mass;
    J.y = Vec::Constant(1, P.ly / mass);
    J.z = P.lz / mass;
    J.r = P.lr / mass;
    J.gamma = Vec::Constant(1, q >= 0 ? P.lg : 0.0);
    return J;
  };
  m.f = [P](const Vec& x) -> Vec { return Vec::Constant(1, P.fx.dot(x)); };
  m.f_x = [P](const Vec&) -> Mat { return P.fx.transpose(); };
  m.phi = [P](const Vec& x) { return 0.5 * x.dot(P.Phi * x) + P.cphi.dot(x); };
  m.phi_x = [P](const Vec& x) -> Vec { return 0.5 * (P.Phi + P.Phi.transpose()) * x + P.cphi; };
  m.psi = [P](const Vec& y) { return 0.5 * P.psi2 * y[0] * y[0] + P.psi1 * y[0]; };
  m.psi_y = [P](const Vec& y) -> Vec { return Vec::Constant(1, P.psi2 * y[0] + P.psi1); };
  return m;
}

// ------------------------------------------------------------------ LQ

struct LqParams {
  std::string preset = "general";  // general | certificate
  int dim_h = 16, n_W = 16, d = 1, n_steps = 64;
  double T = 1.0;
  double decay = 0.5;      // extra linear damping in F
  double control_gain = 1.0;
  double sigma = 0.3;      // additive W noise level
  double obs_noise_gain = 0.2;  // G2 level
  double jump_size = 0.1;
  double sensor = 1.0;
  double sensor_u = 0.2;   // control feed-through into h (general preset)
  double saturation = 20.0;
  double R = 1.0, s = -0.5, q = 0.5, terminal = 0.5, terminal_lin = 0.2;
  double eta = 0.3, recursive = 0.5;
};

/// Linear drift, constant noise coefficients, linear driver and quadratic
/// costs. Preset "certificate" isolates a controlled mode that the sensor
/// cannot see, so the optimal policy is deterministic in time.
inline ModelSpec make_lq_model(const LqParams& lp, const SpectralSpace& space, const JumpMeasureSpec& jm) {
  AffineModelParams P;
  const int n = space.dim_h, p = 1;
  P.zero(space, lp.n_W, lp.d, p, jm);
  P.name = "lq_" + lp.preset;
  const int Km = jm.K();
  if (lp.preset == "general") {
    for (int i = 0; i < n; ++i) P.A(i, i) = -lp.decay;
    if (n > 1) { P.A(0, 1) = 0.2; P.A(1, 0) = -0.2; }
    P.B(0, 0) = lp.control_gain;
    if (n > 1) P.B(1, 0) = 0.5 * lp.control_gain;
    for (int i = 0; i < std::min(n, lp.n_W); ++i) P.c1(i, i) = lp.sigma / (1.0 + i);
    for (int j = 0; j < lp.d; ++j) {
      P.b2(std::min(j, n - 1), j) = lp.obs_noise_gain;
      P.H(j, std::min(j, n - 1)) = lp.sensor;
      if (n > 1) P.H(j, 1) += 0.5 * lp.sensor;
      P.Hu(j, 0) = lp.sensor_u;
    }
    for (int q = 0; q < Km; ++q) P.t3(std::min(q, n - 1), q) = -lp.jump_size * (1.0 + jm.marks[q]);
    P.S = lp.saturation;
    P.gy = -lp.eta;
    P.gx[0] = 0.2;
    P.gu[0] = 0.1;
    P.gr = Vec::Constant(lp.d, 0.1);
    if (Km > 0) P.gg = 0.05;
    P.fx[0] = lp.recursive;
    P.R(0, 0) = lp.R;
    P.s[0] = lp.s;
    for (int i = 0; i < std::min(n, 3); ++i) P.Q(i, i) = lp.q;
    for (int i = 0; i < std::min(n, 2); ++i) P.Phi(i, i) = lp.terminal;
    P.cphi[0] = lp.terminal_lin;
    P.psi2 = 0.5;
    P.psi1 = 1.0;
    P.x0[0] = 1.0;
    if (n > 1) P.x0[1] = -0.5;
  } else if (lp.preset == "certificate") {
    require(n >= 3, "certificate LQ preset needs dim_h >= 3");
    const int c = 1;  // controlled, unobserved mode
    for (int i = 0; i < n; ++i) P.A(i, i) = i == c ? 0.0 : -lp.decay;
    P.B(c, 0) = lp.control_gain;
    for (int i = 0; i < std::min(n, lp.n_W); ++i) P.c1(i, i) = lp.sigma / (1.0 + i);
    for (int j = 0; j < lp.d; ++j) {
      P.b2(2 + (j % (n - 2)), j) = lp.obs_noise_gain;
      P.H(j, 2 + (j % (n - 2))) = lp.sensor;
      if (n > 3) P.H(j, 3) += 0.5 * lp.sensor;
    }
    for (int q = 0; q < Km; ++q) P.t3(c, q) = -lp.jump_size * (1.0 + jm.marks[q]);
    P.S = lp.saturation;
    P.gy = -lp.eta;
    P.R(0, 0) = lp.R;
    P.s[0] = lp.s;
    P.Q(c, c) = lp.q;
    P.Phi(c, c) = lp.terminal;
    P.cphi[c] = lp.terminal_lin;
    P.psi2 = 0.0;
    P.psi1 = 1.0;
    P.x0[c] = 1.0;
    P.x0[2] = 0.5;
  } else {
    throw std::invalid_argument("unknown lq preset '" + lp.preset + "'");
  }
  return make_affine_model(P);
}

// -------------------------------------------------------- random bounded

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
/// Uniform in [-1, 1] keyed by (seed, slot, i, j, k); independent of sizes.
inline double keyed_uniform(std::uint64_t seed, std::uint64_t slot, std::uint64_t i, std::uint64_t j,
                            std::uint64_t k = 0) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t v : {slot, i, j, k}) h = splitmix64(h ^ (v + 0x632be59bd9b4e019ULL));
  return 2.0 * (double(h >> 11) * 0x1.0p-53) - 1.0;
}
inline void cap_operator_norm(Mat& a, double cap) {
  const double nrm = operator_norm(a);
  if (nrm > cap) a *= cap / nrm;
}
}  // namespace detail

struct RandomBoundedParams {
  std::uint64_t seed = 1;
  double level = 0.5;  // overall coefficient scale (norms stay <= 1)
};

/// Affine model with seeded entries decaying like 1/(i j) in the mode
/// indices, so draws are nested across dimensions.
inline ModelSpec make_random_bounded_model(const RandomBoundedParams& rp, const SpectralSpace& space, int n_W, int d,
                                           const JumpMeasureSpec& jm) {
  using detail::keyed_uniform;
  AffineModelParams P;
  const int n = space.dim_h, p = 2, Km = jm.K();
  P.zero(space, n_W, d, p, jm);
  P.name = "random_bounded";
  const std::uint64_t sd = rp.seed;
  const double lv = rp.level;
  auto w2 = [](int i, int j) { return 1.0 / ((1.0 + i) * (1.0 + j)); };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) P.A(i, j) = lv * keyed_uniform(sd, 1, i, j) * w2(i, j);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < p; ++c) P.B(i, c) = lv * keyed_uniform(sd, 2, i, c) / (1.0 + i);
  for (int i = 0; i < n; ++i) P.c[i] = 0.2 * lv * keyed_uniform(sd, 3, i, 0) / (1.0 + i);
  for (int k = 0; k < n_W; ++k) {
    const double wk = 1.0 / ((1.0 + k) * (1.0 + k));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) P.K[k](i, j) = lv * wk * keyed_uniform(sd, 4, k, i, j) * w2(i, j);
      for (int c = 0; c < p; ++c) P.C1[k](i, c) = 0.5 * lv * wk * keyed_uniform(sd, 5, k, i, c) / (1.0 + i);
      P.c1(i, k) = lv * keyed_uniform(sd, 6, k, i) / ((1.0 + k) * (1.0 + i));
    }
    detail::cap_operator_norm(P.K[k], 1.0);
  }
  for (int j = 0; j < d; ++j) {
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) P.E[j](a, b) = 0.5 * lv * keyed_uniform(sd, 7, j, a, b) * w2(a, b);
      for (int c = 0; c < p; ++c) P.C2[j](a, c) = 0.5 * lv * keyed_uniform(sd, 8, j, a, c) / (1.0 + a);
      P.b2(a, j) = lv * keyed_uniform(sd, 9, j, a) / (1.0 + a);
      P.H(j, a) = keyed_uniform(sd, 10, j, a) / (1.0 + a);
    }
    for (int c = 0; c < p; ++c) P.Hu(j, c) = 0.5 * keyed_uniform(sd, 11, j, c);
    detail::cap_operator_norm(P.E[j], 1.0);
  }
  for (int q = 0; q < Km; ++q) {
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) P.T3[q](a, b) = 0.5 * lv * keyed_uniform(sd, 12, q, a, b) * w2(a, b);
      for (int c = 0; c < p; ++c) P.D3[q](a, c) = 0.5 * lv * keyed_uniform(sd, 13, q, a, c) / (1.0 + a);
      P.t3(a, q) = lv * keyed_uniform(sd, 14, q, a) / (1.0 + a);
    }
    detail::cap_operator_norm(P.T3[q], 1.0);
  }
  detail::cap_operator_norm(P.A, 1.0);
  P.S = 1.0;
  P.gy = -0.5 * std::abs(keyed_uniform(sd, 15, 0, 0));
  for (int i = 0; i < n; ++i) P.gx[i] = 0.5 * keyed_uniform(sd, 16, i, 0) / (1.0 + i);
  for (int c = 0; c < p; ++c) P.gu[c] = 0.3 * keyed_uniform(sd, 17, c, 0);
  for (int k = 0; k < n_W; ++k) P.gz[k] = 0.2 * keyed_uniform(sd, 18, k, 0) / (1.0 + k);
  for (int j = 0; j < d; ++j) P.gr[j] = 0.2 * keyed_uniform(sd, 19, j, 0);
  if (Km > 0) P.gg = 0.2 * keyed_uniform(sd, 20, 0, 0);
  for (int i = 0; i < n; ++i) P.fx[i] = 0.5 * keyed_uniform(sd, 21, i, 0) / (1.0 + i);
  P.R = Mat::Identity(p, p);
  for (int c = 0; c < p; ++c) P.s[c] = 0.3 * keyed_uniform(sd, 22, c, 0);
  for (int i = 0; i < n; ++i) {
    P.Q(i, i) = 0.5 * (1.0 + keyed_uniform(sd, 23, i, 0)) / ((1.0 + i) * (1.0 + i));
    P.q[i] = 0.3 * keyed_uniform(sd, 24, i, 0) / (1.0 + i);
    P.Phi(i, i) = 0.5 * (1.0 + keyed_uniform(sd, 25, i, 0)) / ((1.0 + i) * (1.0 + i));
    P.cphi[i] = 0.3 * keyed_uniform(sd, 26, i, 0) / (1.0 + i);
    P.x0[i] = keyed_uniform(sd, 27, i, 0) / (1.0 + i);
  }
  P.ly = 0.1 * keyed_uniform(sd, 28, 0, 0);
  for (int j = 0; j < d; ++j) P.lr[j] = 0.1 * keyed_uniform(sd, 29, j, 0);
  if (Km > 0) P.lg = 0.1 * keyed_uniform(sd, 30, 0, 0);
  P.psi2 = 0.5;
  P.psi1 = 0.5;
  return make_affine_model(P);
}

// ------------------------------------------------------------ harvesting

struct HarvestingParams {
  double r_a = 1.0, c_a = 1.0, sigma_level = 0.2;
  double p_L = 1.0, c_L = 2.0, lambda_L = 1.0, x_star = 0.6;
  double beta = 1.0, x_T_star = 0.5;
  double eta = 0.5, theta_bar = 0.5, delta_r = 1.0, delta_gamma = 1.0;
  std::vector<double> rho_weights;  // one per mark; empty means all 0.5
  double terminal_utility = 0.25;   // f(x) = kappa * int x(T) dxi
  double x0_level = 0.8;
  std::vector<double> sensor_centers{0.5};  // as fractions of the domain
  double sensor_width = 0.15;
  double saturation = 10.0;
  double u_max = 2.0;
  int n_quad = 0;  // 0 picks max(4 dim_h, 64)
};

/// Huber-type penalty theta * delta^2 (sqrt(1 + (s/delta)^2) - 1) and its derivative.
inline double huber(double s, double theta, double delta) {
  return theta * delta * delta * (std::sqrt(1.0 + (s / delta) * (s / delta)) - 1.0);
}
inline double huber_prime(double s, double theta, double delta) {
  return theta * s / std::sqrt(1.0 + (s / delta) * (s / delta));
}

inline ModelSpec make_harvesting_model(const HarvestingParams& hp, const SpectralSpace& space, int n_W,
                                       const JumpMeasureSpec& jm) {
  for (double a : jm.marks) require(a > 0.0 && a < 1.0, "harvesting marks must lie in (0,1)");
  require(hp.r_a > 0 && hp.c_a > 0 && hp.sigma_level >= 0 && hp.c_L > 0 && hp.delta_r > 0 && hp.delta_gamma > 0 &&
              hp.theta_bar > 0 && hp.eta >= 0 && hp.beta >= 0 && hp.lambda_L >= 0,
          "harvesting scale parameters must be positive");
  require(space.basis_kind != BasisKind::abstract_diagonal, "harvesting needs a spatial basis");
  const int n = space.dim_h, d = int(hp.sensor_centers.size()), Km = jm.K();
  require(d >= 1, "harvesting needs at least one sensor");
  std::vector<double> rho = hp.rho_weights;
  if (rho.empty()) rho.assign(Km, 0.5);
  require(int(rho.size()) == Km, "rho_weights must have one entry per mark");

  const double Ld = space.domain_length;
  const int nq = hp.n_quad > 0 ? hp.n_quad : std::max(4 * n, 64);
  const double wq = Ld / nq;
  Mat Bq(nq, n);
  for (int k = 0; k < nq; ++k) Bq.row(k) = space.basis_at((k + 0.5) * wq).transpose();
  const Vec one_proj = wq * Bq.transpose() * Vec::Ones(nq);  // coefficients of the constant 1
  Mat Hs(d, n);
  for (int j = 0; j < d; ++j) {
    Vec prof(nq);
    const double c0 = hp.sensor_centers[j] * Ld, w = hp.sensor_width * Ld;
    for (int k = 0; k < nq; ++k) {
      const double xi = (k + 0.5) * wq;
      prof[k] = std::exp(-0.5 * (xi - c0) * (xi - c0) / (w * w));
    }
    Hs.row(j) = (wq * Bq.transpose() * prof).transpose();
  }
  const Vec xs_proj = hp.x_star * one_proj;
  const double xs_const = hp.x_star * hp.x_star * Ld - xs_proj.squaredNorm();

  ModelSpec m;
  m.name = "harvesting";
  m.space = space;
  m.n_W = n_W;
  m.d = d;
  m.D = 1;
  m.p = 1;
  m.marks = jm.marks;
  m.weights = jm.weights;
  m.u_lo = Vec::Zero(1);
  m.u_hi = Vec::Constant(1, hp.u_max);
  m.h_bound = hp.saturation;
  m.x0 = hp.x0_level * one_proj;
  const double mass = m.mark_mass();

  m.F = [hp, Bq, wq, one_proj](double, const Vec& x, const Vec& u) -> Vec {
    const Vec X = Bq * x;
    const Vec a = (hp.r_a * X.array() * (1.0 - X.array() / hp.c_a)).matrix();
    return wq * Bq.transpose() * a - u[0] * one_proj;
  };
  m.F_x = [hp, Bq, wq](double, const Vec& x, const Vec&) -> Mat {
    const Vec X = Bq * x;
    const Vec ap = (hp.r_a * (1.0 - 2.0 * X.array() / hp.c_a)).matrix();
    return wq * Bq.transpose() * ap.asDiagonal() * Bq;
  };
  m.F_u = [one_proj](double, const Vec&, const Vec&) -> Mat { return -one_proj; };
  const int nm = std::min(n, n_W);
  m.G1 = [hp, n, n_W, nm](double, const Vec& x, const Vec&) -> Mat {
    Mat G = Mat::Zero(n, n_W);
    for (int i = 0; i < nm; ++i) G(i, i) = hp.sigma_level * x[i];
    return G;
  };
  m.G1_x = [hp, n, n_W, nm](double, const Vec&, const Vec&) {
    std::vector<Mat> K(n_W, Mat::Zero(n, n));
    for (int i = 0; i < nm; ++i) K[i](i, i) = hp.sigma_level;
    return K;
  };
  m.G1_u = [n, n_W](double, const Vec&, const Vec&) { return std::vector<Mat>(1, Mat::Zero(n, n_W)); };
  m.G2 = [n, d](double, const Vec&, const Vec&) -> Mat { return Mat::Zero(n, d); };
  m.G2_x = [n, d](double, const Vec&, const Vec&) { return std::vector<Mat>(d, Mat::Zero(n, n)); };
  m.G2_u = [n, d](double, const Vec&, const Vec&) { return std::vector<Mat>(d, Mat::Zero(n, 1)); };
  const std::vector<double> alpha = jm.marks;
  m.Theta = [alpha](double, const Vec& x, const Vec&, int q) -> Vec { return -alpha[q] * x; };
  m.Theta_x = [alpha, n](double, const Vec&, const Vec&, int q) -> Mat { return -alpha[q] * Mat::Identity(n, n); };
  m.Theta_u = [n](double, const Vec&, const Vec&, int) -> Mat { return Mat::Zero(n, 1); };
  const double S = hp.saturation;
  m.h = [Hs, S](double, const Vec& x, const Vec&) -> Vec { return S * (Hs * x / S).array().tanh().matrix(); };
  m.h_x = [Hs, S](double, const Vec& x, const Vec&) -> Mat {
    const Vec s = 1.0 - (Hs * x / S).array().tanh().square();
    return s.asDiagonal() * Hs;
  };
  m.h_u = [d](double, const Vec&, const Vec&) -> Mat { return Mat::Zero(d, 1); };

  // dy = [-eta y + huber_r(|r|) + sum_m pi_m rho_m huber_g(|gamma_m|)] dt + ...
  m.g = [hp, rho, mass](double, const Vec&, const Vec&, const Vec& y, const Mat&, const Mat& r, const Vec& gam,
                        int q) -> Vec {
    Vec o(1);
    o[0] = (hp.eta * y[0] - huber(r.norm(), hp.theta_bar, hp.delta_r)) / mass;
    if (q >= 0) o[0] -= rho[q] * huber(std::abs(gam[0]), 1.0, hp.delta_gamma);
    return o;
  };
  m.g_jac = [hp, rho, mass, n, n_W, d, g = m.g](double t, const Vec& x, const Vec& u, const Vec& y, const Mat& z,
                                               const Mat& r, const Vec& gam, int q) {
    DriverJac J;
    J.val = g(t, x, u, y, z, r, gam, q);
    J.x = Mat::Zero(1, n);
    J.u = Mat::Zero(1, 1);
    J.y = Mat::Constant(1, 1, hp.eta / mass);
    J.z = Mat::Zero(1, n_W);
    const double rn = r.norm();
    const double s = 1.0 / std::sqrt(1.0 + (rn / hp.delta_r) * (rn / hp.delta_r));
    J.r = -(hp.theta_bar * s / mass) * Eigen::Map<const Vec>(r.data(), d).transpose();
    J.gamma = Mat::Constant(1, 1, q >= 0 ? -rho[q] * huber_prime(gam[0], 1.0, hp.delta_gamma) : 0.0);
    return J;
  };
  m.L = [hp, Ld, mass, xs_proj, xs_const](double, const Vec& x, const Vec& u, const Vec&, const Mat&, const Mat&,
                                          const Vec&, int) -> double {
    return (-hp.p_L * u[0] * Ld + 0.5 * hp.c_L * u[0] * u[0] * Ld +
            0.5 * hp.lambda_L * ((x - xs_proj).squaredNorm() + xs_const)) /
           mass;
  };
  m.L_jac = [hp, Ld, mass, xs_proj, n, n_W, d, L = m.L](double t, const Vec& x, const Vec& u, const Vec& y,
                                                       const Mat& z, const Mat& r, const Vec& gam, int q) {
    CostJac J;
    J.val = L(t, x, u, y, z, r, gam, q);
    J.x = hp.lambda_L * (x - xs_proj) / mass;
    J.u = Vec::Constant(1, (-hp.p_L * Ld + hp.c_L * u[0] * Ld) / mass);
    J.y = Vec::Zero(1);
    J.z = Vec::Zero(n_W);
    J.r = Vec::Zero(d);
    J.gamma = Vec::Zero(1);
    return J;
  };
  const double kap = hp.terminal_utility;
  m.f = [kap, one_proj](const Vec& x) -> Vec { return Vec::Constant(1, kap * one_proj.dot(x)); };
  m.f_x = [kap, one_proj](const Vec&) -> Mat { return kap * one_proj.transpose(); };
  m.phi = [hp, one_proj](const Vec& x) {
    const double e = one_proj.dot(x) - hp.x_T_star;
    return 0.5 * hp.beta * e * e;
  };
  m.phi_x = [hp, one_proj](const Vec& x) -> Vec { return hp.beta * (one_proj.dot(x) - hp.x_T_star) * one_proj; };
  m.psi = [](const Vec& y) { return y[0]; };
  m.psi_y = [](const Vec&) -> Vec { return Vec::Ones(1); };
  return m;
}

/// Logistic reaction in physical space, exposed for tests.
inline double logistic(double x, const HarvestingParams& hp) { return hp.r_a * x * (1.0 - x / hp.c_a); }

}  // namespace spdc
