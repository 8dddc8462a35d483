#pragma once

#include "spdc/girsanov.hpp"
#include "spdc/models.hpp"

#include <fstream>
#include <limits>
#include <memory>

namespace spdc {

struct SolverOptions {
  RegressionBasis bsde_basis;     // state (x, Y)
  RegressionBasis adjoint_basis;  // state (x, Y, ell) for P, (x, Y) for p
  double ridge = 1e-8;
  int truncation_n = -1;  // drift truncation of the P equation, -1 for n_W
};

/// Everything attached to the reference control: the Q ensemble, the
/// BSDE, the first adjoint ell, the auxiliary pair (p, q) and the state
/// adjoint P.
struct HatBundle {
  const ModelSpec* model = nullptr;
  PolicyParams pp;
  SolverOptions opts;
  Ensemble E;
  BsdeResult B;
  std::vector<Mat> ell;
  AuxResult aux;
  BspdeSolution P;
  bool has_adjoint = false;

  int M() const { return E.size(); }
  const TimeGrid& grid() const { return E.grid; }
  const ModelSpec& m() const { return *model; }
};

inline void solve_hat_adjoint(HatBundle& H) {
  const ModelSpec& m = H.m();
  H.aux = solve_auxiliary_pq(m, H.E, H.B, H.opts.adjoint_basis, H.opts.ridge);
  const int tn = H.opts.truncation_n < 0 ? m.n_W : H.opts.truncation_n;
  const BspdeProblem prob = assemble_P_equation(m, H.E, H.B, H.ell, H.aux);
  H.P = solve_singular_bspde(prob, m, H.E, H.opts.adjoint_basis, tn, H.opts.ridge);
  H.has_adjoint = true;
}

inline void build_hat(HatBundle& H, const ModelSpec& m, const PolicyParams& pp, const TimeGrid& grid, int M,
                      std::uint64_t seed, const SolverOptions& opts, bool with_adjoint = true) {
  H.model = &m;
  H.pp = pp;
  H.opts = opts;
  H.E = simulate_ensemble(m, pp, grid, M, seed, Measure::Q_u_with_B_as_BM);
  H.B = solve_bsde(m, H.E, opts.bsde_basis, opts.ridge);
  H.ell = solve_ell(m, H.E, H.B);
  H.has_adjoint = false;
  if (with_adjoint) solve_hat_adjoint(H);
}

inline CostReport hat_cost(const HatBundle& H) { return compute_cost(H.m(), H.E, H.B, MeasureForm::Q_form); }

// ------------------------------------------------------ first variation

inline std::vector<VariationPath> variation_paths(const HatBundle& H, const DirectionFn& dir) {
  std::vector<VariationPath> V(H.M());
  parallel_for(H.M(), [&](int i) {
    V[i] = simulate_first_variation(H.m(), dir, H.E.noise[i], H.grid(), H.E.paths[i]);
  });
  return V;
}

struct VariationReport {
  double I_v = 0.0, se = 0.0;
  Vec samples;
  double terminal = 0.0, recursive = 0.0, density = 0.0, running = 0.0;
  std::vector<double> eps, fd_slopes, fd_se, fd_gap;
  double extrapolated = 0.0;  // Richardson from the two smallest eps
  double agreement = 0.0;     // |I - slope(eps_min)| / |slope(eps_min)|
};

/// Per-path terms of I for a family of directions solved together: the
/// linearised BSDE uses one regression design with state
/// (x, Y, x1_1, ..., x1_P), so I is exactly linear over the family.
struct VariationFamily {
  Mat terminal, recursive, density, running;  // M x P
  Mat y10;                                    // (M D) x P, rows path-major

  int size() const { return int(terminal.cols()); }
  Mat samples() const { return terminal + recursive + density + running; }
  /// I along sum_a c_a dir_a.
  VariationReport report(const Vec& c) const {
    require(c.size() == size(), "VariationFamily::report: coefficient size mismatch");
    VariationReport R;
    R.samples = samples() * c;
    const MeanSe ms = mean_se(R.samples);
    R.I_v = ms.mean;
    R.se = ms.se;
    R.terminal = (terminal * c).mean();
    R.recursive = (recursive * c).mean();
    R.density = (density * c).mean();
    R.running = (running * c).mean();
    return R;
  }
};

/// Monte Carlo I(v) under Q for each direction: boundary terms
/// phi_x . x1_T, psi_y . y1_0, phi Lambda_T plus the running terms of the
/// linearised cost. The linearised BSDE driver is linear in
/// (y1, z1, r1, gamma1), so each step is a D x D solve; running terms are
/// accumulated during the sweep.
inline VariationFamily first_variation_family(const HatBundle& H, const std::vector<DirectionFn>& dirs) {
  const ModelSpec& m = H.m();
  const int M = H.M(), N = H.grid().n_steps, D = m.D, nW = m.n_W, d = m.d, Km = m.K(), n = m.n();
  const int P = int(dirs.size());
  const double dt = H.grid().dt();
  require(P >= 1, "first_variation_family: no directions");
  std::vector<std::vector<VariationPath>> V;
  for (const auto& dir : dirs) V.push_back(variation_paths(H, dir));
  const RegressionBasis& basis = H.opts.bsde_basis;
  const int ns = n + d + P * n;
  const int nf = basis.count(ns);
  const Vec dpsi = m.psi_y(H.B.y0);
  VariationFamily out;
  out.terminal = Mat::Zero(M, P);
  out.recursive = Mat::Zero(M, P);
  out.density = Mat::Zero(M, P);
  out.running = Mat::Zero(M, P);
  out.y10 = Mat::Zero(M * D, P);
  std::vector<Mat> y1(M, Mat(D, P));  // y1 at k + 1 per path
  for (int i = 0; i < M; ++i) {
    const Vec xN = H.E.paths[i].x.col(N);
    const Mat fx = m.f_x(xN);
    const Vec px = m.phi_x(xN);
    const double ph = m.phi(xN);
    for (int a = 0; a < P; ++a) {
      y1[i].col(a) = fx * V[a][i].x1.col(N);
      out.terminal(i, a) = px.dot(V[a][i].x1.col(N));
      out.density(i, a) = ph * V[a][i].Lambda[N];
    }
  }
  const int nt = D * (1 + nW + d + Km);
  Mat Phi(M, nf), T(M, P * nt);
  for (int k = N - 1; k >= 0; --k) {
    const double t = H.grid().t(k);
    parallel_for(M, [&](int i) {
      const ForwardPath& Pp = H.E.paths[i];
      const NoiseGrid& ng = H.E.noise[i];
      Vec st(ns);
      st.head(n) = Pp.x.col(k);
      st.segment(n, d) = Pp.Y.col(k);
      for (int a = 0; a < P; ++a) st.segment(n + d + a * n, n) = V[a][i].x1.col(k);
      Phi.row(i) = basis.features(st).transpose();
      for (int a = 0; a < P; ++a) {
        const Vec yk = y1[i].col(a);
        int c = a * nt;
        T.block(i, c, 1, D) = yk.transpose();
        c += D;
        for (int w = 0; w < nW; ++w, c += D) T.block(i, c, 1, D) = (yk * (ng.dW(w, k) / dt)).transpose();
        for (int j = 0; j < d; ++j, c += D) T.block(i, c, 1, D) = (yk * (Pp.dM(j, k) / dt)).transpose();
        for (int q = 0; q < Km; ++q, c += D) {
          const double w = m.weights[q];
          T.block(i, c, 1, D) = (yk * (w > 0 ? compensated(ng, q, k, w, dt) / (w * dt) : 0.0)).transpose();
        }
      }
    });
    RegressionFit fit;
    try {
      fit = ridge_fit(Phi, T, H.opts.ridge);
    } catch (const NumericalAbort& e) {
      throw NumericalAbort(std::string("first variation BSDE: ") + e.what(), k);
    }
    const Mat F = Phi * fit.beta;
    parallel_for(M, [&](int i) {
      const ForwardPath& Pp = H.E.paths[i];
      const BsdeSolution& s0 = H.B.sol[i];
      const Vec x = Pp.x.col(k), u = Pp.u.col(k), y = s0.y.col(k);
      const Mat Z = s0.Z(k, nW), R = s0.R(k, d);
      std::vector<DriverJac> gj;
      std::vector<CostJac> lj;
      double Lbar = 0.0;
      for (const auto& nd : m.mark_nodes()) {
        gj.push_back(m.g_jac(t, x, u, y, Z, R, s0.gam(k, nd.m, D), nd.m));
        lj.push_back(m.L_jac(t, x, u, y, Z, R, s0.gam(k, nd.m, D), nd.m));
        Lbar += nd.w * lj.back().val;
      }
      Mat A = Mat::Identity(D, D);
      const auto nodes = m.mark_nodes();
      for (std::size_t q = 0; q < nodes.size(); ++q) A -= dt * nodes[q].w * gj[q].y;
      const auto lu = A.partialPivLu();
      for (int a = 0; a < P; ++a) {
        const Vec Fi = F.row(i).segment(a * nt, nt).transpose();
        const Vec z1 = Fi.segment(D, D * nW), r1 = Fi.segment(D * (1 + nW), D * d);
        const Vec g1 = Fi.segment(D * (1 + nW + d), D * Km);
        const Vec x1 = V[a][i].x1.col(k), v = V[a][i].v.col(k);
        Vec rhs = dt * (-mat_of(r1, D, d) * Pp.h_ref.col(k));
        for (std::size_t q = 0; q < nodes.size(); ++q) {
          Vec lin = gj[q].x * x1 + gj[q].u * v + gj[q].z * z1 + gj[q].r * r1;
          if (nodes[q].m >= 0) lin += gj[q].gamma * g1.segment(nodes[q].m * D, D);
          rhs += dt * nodes[q].w * lin;
        }
        const Vec yk = lu.solve(Vec(Fi.head(D) + rhs));
        y1[i].col(a) = yk;
        double run = V[a][i].Lambda[k] * Lbar;
        for (std::size_t q = 0; q < nodes.size(); ++q) {
          const CostJac& L = lj[q];
          double l = L.u.dot(v) + L.x.dot(x1) + L.y.dot(yk) + L.z.dot(z1) + L.r.dot(r1);
          if (nodes[q].m >= 0) l += L.gamma.dot(g1.segment(nodes[q].m * D, D));
          run += nodes[q].w * l;
        }
        out.running(i, a) += dt * run;
        if (k == 0) {
          const Vec y10 = lu.solve(Vec(T.row(i).segment(a * nt, D).transpose() + rhs));
          out.y10.block(i * D, a, D, 1) = y10;
          out.recursive(i, a) = dpsi.dot(y10);
        }
      }
    });
  }
  return out;
}

/// The family of unit directions of the policy parameters.
inline VariationFamily first_variation_basis(const HatBundle& H) {
  std::vector<DirectionFn> dirs;
  for (int a = 0; a < H.pp.size(); ++a) {
    Vec e = Vec::Zero(H.pp.size());
    e[a] = 1.0;
    dirs.push_back(policy_direction(H.pp, H.m(), e));
  }
  return first_variation_family(H, dirs);
}

inline VariationReport first_variation_along(const HatBundle& H, const DirectionFn& dir) {
  return first_variation_family(H, {dir}).report(Vec::Ones(1));
}

/// I along a policy direction, from the unit-direction family.
inline VariationReport first_variation_I(const HatBundle& H, const Vec& dtheta) {
  require(dtheta.size() == H.pp.size(), "first_variation_I: direction size mismatch");
  return first_variation_basis(H).report(dtheta);
}

/// Cost after moving theta by eps * dtheta, re-simulated on the hat
/// observations (P form, common random numbers) with a fresh BSDE solve.
inline CostReport perturbed_cost(const HatBundle& H, const Vec& theta) {
  const ModelSpec& m = H.m();
  PolicyParams pp = H.pp;
  pp.theta = theta;
  const Ensemble E = simulate_on_observations(m, pp, H.E);
  const BsdeResult B = solve_bsde(m, E, H.opts.bsde_basis, H.opts.ridge);
  return compute_cost(m, E, B, MeasureForm::P_form);
}

/// Fills the finite-difference slopes of R along dtheta.
inline void fd_slopes(const HatBundle& H, const Vec& dtheta, const std::vector<double>& eps, VariationReport& R) {
  require(!eps.empty(), "fd_slopes: empty eps list");
  const CostReport c0 = hat_cost(H);
  R.eps = eps;
  R.fd_slopes.clear();
  R.fd_se.clear();
  R.fd_gap.clear();
  for (double e : eps) {
    require(e > 0.0, "fd_slopes: eps must be positive");
    const CostReport ce = perturbed_cost(H, H.pp.theta + e * dtheta);
    const Vec diff = (ce.samples - c0.samples) / e;
    const MeanSe ms = mean_se(diff);
    R.fd_slopes.push_back((ce.J - c0.J) / e);
    R.fd_se.push_back(ms.se);
    R.fd_gap.push_back(std::abs(R.fd_slopes.back() - R.I_v));
  }
  std::vector<int> ord(eps.size());
  for (int i = 0; i < int(ord.size()); ++i) ord[i] = i;
  std::sort(ord.begin(), ord.end(), [&](int a, int b) { return eps[a] < eps[b]; });
  const double s_min = R.fd_slopes[ord[0]];
  R.extrapolated = s_min;
  if (ord.size() >= 2) {
    const double r = eps[ord[1]] / eps[ord[0]];
    R.extrapolated = (r * s_min - R.fd_slopes[ord[1]]) / (r - 1.0);
  }
  R.agreement = std::abs(R.I_v - s_min) / std::max(std::abs(s_min), 1e-300);
}

struct ScalingReport {
  std::vector<double> eps, sup_msd;
  double slope = 0.0;
};

/// sup_k mean |x^eps_k - xhat_k|^2 on the hat observations and its
/// log-log slope in eps.
inline ScalingReport perturbation_scaling(const HatBundle& H, const Vec& dtheta, const std::vector<double>& eps) {
  const ModelSpec& m = H.m();
  const int N = H.grid().n_steps, M = H.M();
  ScalingReport R;
  R.eps = eps;
  for (double e : eps) {
    PolicyParams pp = H.pp;
    pp.theta = H.pp.theta + e * dtheta;
    const Ensemble E = simulate_on_observations(m, pp, H.E);
    double s = 0.0;
    for (int k = 0; k <= N; ++k) {
      double a = 0.0;
      for (int i = 0; i < M; ++i) a += (E.paths[i].x.col(k) - H.E.paths[i].x.col(k)).squaredNorm();
      s = std::max(s, a / M);
    }
    R.sup_msd.push_back(s);
  }
  R.slope = fit_power_law(R.eps, R.sup_msd).slope;
  return R;
}

// -------------------------------------------------------------- duality

/// Forcing of the linear SPDE in the duality identity. Constant in time
/// and across paths.
struct DualityForcing {
  Vec R;      // n
  Mat Gamma;  // n x n_W
  Mat R2;     // n x d
  Mat R3;     // n x K
  Vec chi;    // n
  Vec X0;     // n
};

inline DualityForcing zero_forcing(const ModelSpec& m) {
  const int n = m.n();
  return {Vec::Zero(n), Mat::Zero(n, m.n_W), Mat::Zero(n, m.d), Mat::Zero(n, m.K()), Vec::Zero(n), Vec::Zero(n)};
}

/// Gaussian forcing with mode weights 1/(1+i).
inline DualityForcing random_forcing(const ModelSpec& m, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd;
  DualityForcing f = zero_forcing(m);
  auto fill = [&](Mat& a) {
    for (int i = 0; i < a.rows(); ++i)
      for (int j = 0; j < a.cols(); ++j) a(i, j) = scale * nd(g) / (1.0 + i);
  };
  Mat r = Mat::Zero(m.n(), 1), c = Mat::Zero(m.n(), 1), x0 = Mat::Zero(m.n(), 1);
  fill(r);
  fill(f.Gamma);
  fill(f.R2);
  fill(f.R3);
  fill(c);
  fill(x0);
  f.R = r.col(0);
  f.chi = c.col(0);
  f.X0 = x0.col(0);
  return f;
}

struct DualityReport {
  int n = 0, m = 0;
  double lhs = 0.0, rhs = 0.0, residual = 0.0, se = 0.0;
  bool pass = false;
  Vec lhs_samples, rhs_samples;
};

/// Solves the linear SPDE driven by the forcing and the P equation with
/// drift truncation n, then compares
///   E<eta, X_T> + sum dt E<J, X>
/// with
///   E<P_0, X_0> + sum dt E[<Pbar, R> + <Q1, Gamma> + <Q2, R2> + sum pi <Q3, R3>
///                          + sum_{i<m} <Q1 e_i, K_i chi>].
/// With augment_state the regression state of P is (x, Y, ell, X).
inline DualityReport duality_check(const HatBundle& H, const DualityForcing& f, int n_trunc, int m_chi,
                                   bool augment_state) {
  const ModelSpec& m = H.m();
  const int M = H.M(), N = H.grid().n_steps, n = m.n(), nW = m.n_W, d = m.d, Km = m.K();
  const double dt = H.grid().dt();
  require(n_trunc >= 0 && n_trunc <= nW, "duality_check: truncation n must lie in [0, n_W]");
  require(m_chi >= 0 && m_chi <= nW, "duality_check: chi truncation m must lie in [0, n_W]");
  require(f.R.size() == n && f.Gamma.rows() == n && f.Gamma.cols() == nW && f.R2.cols() == d &&
              f.R3.cols() == Km && f.chi.size() == n && f.X0.size() == n,
          "duality_check: forcing shape mismatch");
  require(int(H.ell.size()) == M && int(H.aux.sol.size()) == M, "duality_check: adjoint data missing");
  std::vector<Mat> X(M);
  parallel_for(M, [&](int i) {
    LinearSpdeCoeffs C = hat_linear_coeffs(m, H.E.paths[i], H.grid());
    C.forcing = true;
    C.K_truncation_n = n_trunc;
    C.chi_truncation_m = m_chi;
    auto base = C.at;
    C.at = [base, &f](int k) {
      LinearStepCoeffs c = base(k);
      c.R = f.R;
      c.Gamma = f.Gamma;
      c.R2 = f.R2;
      c.R3 = f.R3;
      c.chi = f.chi;
      return c;
    };
    X[i] = simulate_linear_spde(C, m.space, H.E.noise[i], H.E.paths[i].dBhat, m.weights, H.grid(), f.X0, 0);
  });
  BspdeProblem prob = assemble_P_equation(m, H.E, H.B, H.ell, H.aux);
  if (augment_state) {
    const Ensemble& E = H.E;
    const std::vector<Mat>& ell = H.ell;
    prob.state = [&E, &ell, &X](int i, int k) {
      const ForwardPath& P = E.paths[i];
      Vec s(P.x.rows() + P.Y.rows() + ell[i].rows() + X[i].rows());
      s << P.x.col(k), P.Y.col(k), ell[i].col(k), X[i].col(k);
      return s;
    };
  }
  const BspdeSolution S = solve_singular_bspde(prob, m, H.E, H.opts.adjoint_basis, n_trunc, H.opts.ridge);
  Vec lhs(M), rhs(M);
  for (int i = 0; i < M; ++i) {
    lhs[i] = prob.eta.col(i).dot(X[i].col(N));
    rhs[i] = S.Z[i].col(0).dot(X[i].col(0));
  }
  for (int k = 0; k < N; ++k) {
    const Mat F = S.fitted(k);
    parallel_for(M, [&](int i) {
      const BspdeStepData c = prob.at(i, k);
      lhs[i] += dt * c.J.dot(X[i].col(k));
      const Mat q1 = S.Q1(F, i), q2 = S.Q2(F, i), q3 = S.Q3(F, i);
      double r = S.Zbar(F, i).dot(f.R) + (q1.array() * f.Gamma.array()).sum() + (q2.array() * f.R2.array()).sum();
      for (int q = 0; q < Km; ++q) r += m.weights[q] * q3.col(q).dot(f.R3.col(q));
      for (int a = 0; a < m_chi; ++a) r += q1.col(a).dot(c.K[a] * f.chi);
      rhs[i] += dt * r;
    });
  }
  DualityReport R;
  R.n = n_trunc;
  R.m = m_chi;
  R.lhs_samples = lhs;
  R.rhs_samples = rhs;
  R.lhs = lhs.mean();
  R.rhs = rhs.mean();
  R.residual = R.lhs - R.rhs;
  R.se = mean_se(Vec(lhs - rhs)).se;
  R.pass = std::abs(R.residual) <= 3.0 * R.se;
  return R;
}

inline DualityReport duality_check_direct(const HatBundle& H, const DualityForcing& f, bool augment_state) {
  return duality_check(H, f, H.m().n_W, 0, augment_state);
}

struct LadderReport {
  std::vector<DualityReport> points;
  std::vector<double> gap;       // pathwise RMS of LHS_n - LHS_{n_max} on common noise
  std::vector<double> mean_gap;  // |mean LHS_n - mean LHS_{n_max}|
  std::vector<double> rhs_gap;   // |mean RHS_n - mean RHS_{n_max}|
  bool all_pass = false;
  bool trend_non_increasing = false;
};

/// Truncated identities for (m, n) = (n, n) along the ladder.
inline LadderReport duality_check_truncated(const HatBundle& H, const DualityForcing& f,
                                            const std::vector<int>& ladder, bool augment_state) {
  require(!ladder.empty(), "duality_check_truncated: empty ladder");
  for (int n : ladder)
    require(n >= 0 && n <= H.m().n_W, "ladder entry n = " + std::to_string(n) + " exceeds n_W = " +
                                          std::to_string(H.m().n_W));
  LadderReport L;
  for (int n : ladder) L.points.push_back(duality_check(H, f, n, n, augment_state));
  const DualityReport& top = L.points.back();
  L.all_pass = true;
  L.trend_non_increasing = true;
  for (std::size_t a = 0; a < L.points.size(); ++a) {
    const Vec dl = L.points[a].lhs_samples - top.lhs_samples;
    L.gap.push_back(std::sqrt(dl.squaredNorm() / double(dl.size())));
    L.mean_gap.push_back(std::abs(L.points[a].lhs - top.lhs));
    L.rhs_gap.push_back(std::abs(L.points[a].rhs - top.rhs));
    L.all_pass = L.all_pass && L.points[a].pass;
    if (a > 0 && L.gap[a] > L.gap[a - 1]) L.trend_non_increasing = false;
  }
  return L;
}

// ----------------------------------------------------------- gradient

/// The conditional-expectation bracket of the maximum principle along
/// one hat path at step k, without the projection onto observations:
///   sum pi (L_u - g_u* ell) + R* Pbar + tr(Q1* G1_u) + G2_u^j* Q2^j
///   + sum pi Theta_u* Q3 + h_u* q2.
inline Vec smp_bracket(const HatBundle& H, const Mat& F, int i, int k) {
  const ModelSpec& m = H.m();
  const BspdeSolution& S = H.P;
  const ForwardPath& P = H.E.paths[i];
  const BsdeSolution& s = H.B.sol[i];
  const double t = H.grid().t(k);
  const int D = m.D;
  const Vec x = P.x.col(k), u = P.u.col(k), y = s.y.col(k), l = H.ell[i].col(k);
  const StepJac J = step_jacobians(m, t, x, u);
  const Mat q1 = S.Q1(F, i), q2 = S.Q2(F, i), q3 = S.Q3(F, i);
  Vec b = J.R.transpose() * S.Zbar(F, i);
  for (int c = 0; c < m.p; ++c)
    if (c < int(J.G1u.size())) b[c] += (J.G1u[c].array() * q1.array()).sum();
  for (int j = 0; j < m.d; ++j) b += J.G2u[j].transpose() * q2.col(j);
  for (int q = 0; q < m.K(); ++q) b += m.weights[q] * (J.Thu[q].transpose() * q3.col(q));
  b += J.hu.transpose() * H.aux.sol[i].q2.col(k);
  const Mat Z = s.Z(k, m.n_W), R = s.R(k, m.d);
  for (const auto& nd : m.mark_nodes()) {
    const Vec gm = s.gam(k, nd.m, D);
    b += nd.w * (m.L_jac(t, x, u, y, Z, R, gm, nd.m).u - m.g_jac(t, x, u, y, Z, R, gm, nd.m).u.transpose() * l);
  }
  return b;
}

struct SmpGradient {
  Vec G, se;         // PolicyParams layout
  Vec se_fitted;     // SE from the bracket samples alone
  Mat samples;       // M x size
  Mat path_samples;  // M x size, per-path I(e_a) once attach_pathwise_se ran
  Mat cond_coef;     // (knot * p + c) x n_feat, regression of the bracket on Y features
  double norm = 0.0;
  double stat = 0.0;  // |G| / sqrt(sum se^2)
  std::vector<Mat> bracket;  // per path, p x N
};

inline double gradient_stat(const Vec& G, const Vec& se) {
  const double s = std::sqrt(se.squaredNorm());
  return s > 0.0 ? G.norm() / s : (G.norm() == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
}

/// Projection of a per-step bracket (p x N per path) onto the policy
/// directions: G_{knot,c,f} = sum_{k in knot} dt E[b_k[c] phi_f(Y_k) 1{inactive}].
inline SmpGradient project_bracket(const PolicyParams& pp, const ModelSpec& m, const Ensemble& E,
                                   std::vector<Mat> bracket) {
  const int M = E.size(), N = E.grid.n_steps, nf = pp.n_feat();
  const double dt = E.grid.dt();
  SmpGradient G;
  G.samples = Mat::Zero(M, pp.size());
  parallel_for(M, [&](int i) {
    const ForwardPath& P = E.paths[i];
    for (int k = 0; k < N; ++k) {
      const int kn = pp.knot_of_step(k, N);
      const Vec phi = policy_feature_vector(pp, P.Y.col(k), P.qv[k]);
      const Vec raw = policy_raw(pp, kn, phi, pp.theta);
      for (int c = 0; c < pp.p; ++c) {
        if (!(raw[c] > m.u_lo[c] && raw[c] < m.u_hi[c])) continue;
        for (int f = 0; f < nf; ++f) G.samples(i, pp.index(kn, c, f)) += dt * bracket[i](c, k) * phi[f];
      }
    }
  });
  G.G = G.samples.colwise().mean().transpose();
  G.se.resize(pp.size());
  for (int a = 0; a < pp.size(); ++a) G.se[a] = mean_se(Vec(G.samples.col(a))).se;
  G.se_fitted = G.se;
  G.norm = G.G.norm();
  G.stat = gradient_stat(G.G, G.se);
  // per-knot conditional expectation of the bracket on the policy features
  G.cond_coef = Mat::Zero(pp.n_knots * pp.p, nf);
  for (int kn = 0; kn < pp.n_knots; ++kn) {
    std::vector<int> steps;
    for (int k = 0; k < N; ++k)
      if (pp.knot_of_step(k, N) == kn) steps.push_back(k);
    const int rows = M * int(steps.size());
    Mat Phi(rows, nf), T(rows, pp.p);
    int r = 0;
    for (int i = 0; i < M; ++i)
      for (int k : steps) {
        Phi.row(r) = policy_feature_vector(pp, E.paths[i].Y.col(k), E.paths[i].qv[k]).transpose();
        T.row(r) = bracket[i].col(k).transpose();
        ++r;
      }
    try {
      const RegressionFit fit = ridge_fit(Phi, T, 1e-10);
      for (int c = 0; c < pp.p; ++c) G.cond_coef.row(kn * pp.p + c) = fit.beta.col(c).transpose();
    } catch (const NumericalAbort&) {
      G.cond_coef.middleRows(kn * pp.p, pp.p).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
  }
  G.bracket = std::move(bracket);
  return G;
}

inline SmpGradient smp_gradient(const HatBundle& H) {
  require(H.has_adjoint, "smp_gradient: adjoint bundle missing");
  const ModelSpec& m = H.m();
  const int M = H.M(), N = H.grid().n_steps;
  std::vector<Mat> br(M, Mat(m.p, N));
  for (int k = 0; k < N; ++k) {
    const Mat F = H.P.fitted(k);
    parallel_for(M, [&](int i) { br[i].col(k) = smp_bracket(H, F, i, k); });
  }
  return project_bracket(H.pp, m, H.E, std::move(br));
}

/// Replaces the bracket-sample SE of each gradient entry by the SE of the
/// per-path linearised-cost samples I(e_a). The bracket samples use fitted
/// adjoints, whose regression constants are shared by all paths, so their
/// spread misses the noise of the future; I(e_a) is built from realised
/// paths. Component values are kept; I(e_a) is returned for comparison.
inline Vec attach_pathwise_se(const HatBundle& H, SmpGradient& G, const VariationFamily* basis = nullptr) {
  const int n = H.pp.size();
  Vec I(n);
  G.se_fitted = G.se;
  std::unique_ptr<VariationFamily> own;
  if (!basis) {
    own = std::make_unique<VariationFamily>(first_variation_basis(H));
    basis = own.get();
  }
  require(basis->size() == n, "attach_pathwise_se: basis family size mismatch");
  G.path_samples = basis->samples();
  for (int a = 0; a < n; ++a) {
    const MeanSe ms = mean_se(Vec(G.path_samples.col(a)));
    I[a] = ms.mean;
    G.se[a] = ms.se;
  }
  G.stat = gradient_stat(G.G, G.se);
  return I;
}

struct BoxFaceCheck {
  int knot = 0, c = 0;
  bool upper = false;
  double value = 0.0, se = 0.0;
  bool pass = false;
};

/// E[sum_{k in knot} dt b_k[c] (v - u_k[c])] for v at each box face. With
/// pathwise samples the SE is the larger of the bracket SE and the SE of
/// the matching policy direction v e_const - theta_knot.
inline std::vector<BoxFaceCheck> box_face_check(const SmpGradient& G, const HatBundle& H) {
  const ModelSpec& m = H.m();
  const PolicyParams& pp = H.pp;
  const int M = H.M(), N = H.grid().n_steps;
  const double dt = H.grid().dt();
  std::vector<BoxFaceCheck> out;
  for (int kn = 0; kn < pp.n_knots; ++kn)
    for (int c = 0; c < pp.p; ++c)
      for (bool up : {false, true}) {
        Vec s = Vec::Zero(M);
        const double v = up ? m.u_hi[c] : m.u_lo[c];
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < N; ++k)
            if (pp.knot_of_step(k, N) == kn) s[i] += dt * G.bracket[i](c, k) * (v - H.E.paths[i].u(c, k));
        const MeanSe ms = mean_se(s);
        double se = ms.se;
        if (G.path_samples.rows() == M) {
          Vec dth = Vec::Zero(pp.size());
          for (int f = 0; f < pp.n_feat(); ++f) dth[pp.index(kn, c, f)] = -pp.theta[pp.index(kn, c, f)];
          dth[pp.index(kn, c, 0)] += v;
          se = std::max(se, mean_se(Vec(G.path_samples * dth)).se);
        }
        out.push_back({kn, c, up, ms.mean, se, ms.mean >= -3.0 * se});
      }
  return out;
}

// ----------------------------------------------------------- optimizer

struct OptimizerOptions {
  double step = 1.0;
  int iters = 20;
  int M = 4096;
  std::uint64_t seed = 1;
  double tol_stat = 3.0;   // stop when |G| / SE falls below this
  double theta_max = 10.0;
  int max_halvings = 12;
};

struct OptimizerIterate {
  int iter = 0;
  double J = 0.0, se = 0.0, grad_norm = 0.0, grad_stat = 0.0, step = 0.0;
  Vec theta;
};

struct OptimizerResult {
  std::vector<OptimizerIterate> log;
  PolicyParams pp;
  CostReport cost;
  SmpGradient grad;
  bool step_collapse = false;
  std::string stop_reason;
  double initial_grad_norm = 0.0;
};

/// Projected gradient descent on theta with a fixed ensemble seed. A trial
/// step is accepted when the estimated cost decreases, otherwise the step
/// is halved.
inline OptimizerResult optimize_policy(const ModelSpec& m, const PolicyParams& pp0, const TimeGrid& grid,
                                       const SolverOptions& so, const OptimizerOptions& oo) {
  require(oo.step > 0.0 && oo.iters >= 0 && oo.M >= 2, "optimize_policy: invalid options");
  OptimizerResult R;
  R.pp = pp0;
  R.pp.theta = pp0.theta.cwiseMax(-oo.theta_max).cwiseMin(oo.theta_max);
  auto hat = std::make_unique<HatBundle>();
  build_hat(*hat, m, R.pp, grid, oo.M, oo.seed, so);
  R.cost = hat_cost(*hat);
  R.grad = smp_gradient(*hat);
  R.initial_grad_norm = R.grad.norm;
  double step = oo.step;
  R.log.push_back({0, R.cost.J, R.cost.se, R.grad.norm, R.grad.stat, step, R.pp.theta});
  R.stop_reason = "iteration cap";
  for (int it = 1; it <= oo.iters; ++it) {
    if (R.grad.stat <= oo.tol_stat) {
      R.stop_reason = "stationary";
      break;
    }
    bool accepted = false;
    for (int h = 0; h <= oo.max_halvings && !accepted; ++h, step *= 0.5) {
      PolicyParams trial = R.pp;
      trial.theta = (R.pp.theta - step * R.grad.G).cwiseMax(-oo.theta_max).cwiseMin(oo.theta_max);
      if ((trial.theta - R.pp.theta).norm() == 0.0) break;
      auto th = std::make_unique<HatBundle>();
      build_hat(*th, m, trial, grid, oo.M, oo.seed, so, false);
      const CostReport c = hat_cost(*th);
      if (c.J < R.cost.J) {
        solve_hat_adjoint(*th);
        hat = std::move(th);
        R.pp = trial;
        R.cost = c;
        R.grad = smp_gradient(*hat);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      R.step_collapse = true;
      R.stop_reason = "step-size collapse";
      break;
    }
    R.log.push_back({it, R.cost.J, R.cost.se, R.grad.norm, R.grad.stat, step, R.pp.theta});
    step = std::min(oo.step, 2.0 * step);
  }
  if (R.stop_reason == "iteration cap" && R.grad.stat <= oo.tol_stat) R.stop_reason = "stationary";
  return R;
}

inline void write_optimizer_csv(const std::string& path, const OptimizerResult& R) {
  std::ofstream o(path);
  if (!o) throw std::runtime_error("cannot open " + path);
  o << "iter,J,SE,grad_norm,step\n";
  for (const auto& r : R.log)
    o << r.iter << ',' << fmt_double(r.J) << ',' << fmt_double(r.se) << ',' << fmt_double(r.grad_norm) << ','
      << fmt_double(r.step) << '\n';
}

// ------------------------------------------------------ LQ certificate

/// Deterministic reduction of the certificate preset: the controlled mode
/// c = 1 is unobserved and has no generator drift besides the semigroup,
/// so its mean follows m_{k+1} = e^{-lambda_c dt}(m_k + gain u_k dt) and
/// the control-dependent part of the cost is
///   sum dt (R u^2 / 2 + s u + q m^2 / 2) + terminal m_N^2 / 2 + terminal_lin m_N.
inline double lq_certificate_cost(const LqParams& lp, const SpectralSpace& space, const TimeGrid& grid,
                                  const PolicyParams& pp, const Vec& u_knots) {
  const int c = 1, N = grid.n_steps;
  const double dt = grid.dt(), S = std::exp(-space.eigenvalues[c] * dt);
  double mk = 1.0, J = 0.0;
  for (int k = 0; k < N; ++k) {
    const double u = u_knots[pp.knot_of_step(k, N)];
    J += dt * (0.5 * lp.R * u * u + lp.s * u + 0.5 * lp.q * mk * mk);
    mk = S * (mk + lp.control_gain * u * dt);
  }
  return J + 0.5 * lp.terminal * mk * mk + lp.terminal_lin * mk;
}

struct LqCertificate {
  Vec u_star;          // per knot
  double J_star = 0.0;
  Vec u_line;          // coordinate golden-section cross-check
  double line_gap = 0.0;
  Vec theta;           // policy parameters of the optimum
};

inline LqCertificate lq_certificate_optimum(const LqParams& lp, const SpectralSpace& space, const TimeGrid& grid,
                                            const PolicyParams& pp) {
  require(lp.preset == "certificate", "lq_certificate_optimum: needs the certificate preset");
  require(pp.p == 1, "lq_certificate_optimum: scalar control expected");
  const int K = pp.n_knots;
  auto J = [&](const Vec& u) { return lq_certificate_cost(lp, space, grid, pp, u); };
  // exact quadratic: gradient and Hessian by unit differences
  const Vec z = Vec::Zero(K);
  const double J0 = J(z);
  Mat Hs(K, K);
  Vec g(K);
  for (int a = 0; a < K; ++a) {
    Vec ea = z, em = z;
    ea[a] = 1.0;
    em[a] = -1.0;
    g[a] = 0.5 * (J(ea) - J(em));
    Hs(a, a) = J(ea) + J(em) - 2.0 * J0;
    for (int b = 0; b < a; ++b) {
      Vec eab = ea;
      eab[b] = 1.0;
      Vec eb = z;
      eb[b] = 1.0;
      Hs(a, b) = Hs(b, a) = J(eab) - J(ea) - J(eb) + J0;
    }
  }
  LqCertificate C;
  C.u_star = Hs.ldlt().solve(-g);
  C.J_star = J(C.u_star);
  // coordinate descent with golden-section line searches
  Vec u = z;
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int sweep = 0; sweep < 200; ++sweep)
    for (int a = 0; a < K; ++a) {
      double lo = -20.0, hi = 20.0;
      auto Ja = [&](double v) { Vec w = u; w[a] = v; return J(w); };
      double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo), f1 = Ja(x1), f2 = Ja(x2);
      while (hi - lo > 1e-12) {
        if (f1 < f2) { hi = x2; x2 = x1; f2 = f1; x1 = hi - gr * (hi - lo); f1 = Ja(x1); }
        else { lo = x1; x1 = x2; f1 = f2; x2 = lo + gr * (hi - lo); f2 = Ja(x2); }
      }
      u[a] = 0.5 * (lo + hi);
    }
  C.u_line = u;
  C.line_gap = (C.u_line - C.u_star).lpNorm<Eigen::Infinity>();
  C.theta = Vec::Zero(pp.size());
  for (int kn = 0; kn < K; ++kn) C.theta[pp.index(kn, 0, 0)] = C.u_star[kn];
  return C;
}

}  // namespace spdc
