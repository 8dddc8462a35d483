#pragma once

#include "spdc/forward.hpp"
#include "spdc/regression.hpp"

#include <Eigen/SVD>

namespace spdc {

/// (y, z, r, gamma) along one path; z, r, gamma columns are the
/// column-major vectorisations of D x n_W, D x d and D x K blocks.
struct BsdeSolution {
  Mat y;      // D x (N+1)
  Mat z;      // (D n_W) x N
  Mat r;      // (D d) x N
  Mat gamma;  // (D K) x N

  Mat Z(int k, int n_W) const { return mat_of(Vec(z.col(k)), int(y.rows()), n_W); }
  Mat R(int k, int d) const { return mat_of(Vec(r.col(k)), int(y.rows()), d); }
  Vec gam(int k, int q, int D) const {
    if (q < 0) return Vec::Zero(D);
    return gamma.col(k).segment(q * D, D);
  }
};

/// Per-step regression coefficients of a backward sweep, so the solution
/// can be re-evaluated on other paths.
struct BsdeCoeffs {
  RegressionBasis basis;
  std::vector<Mat> beta;  // N entries, nf x D(1 + n_W + d + K)
  int D = 1, n_W = 1, d = 1, K = 0;
};

struct BsdeResult {
  std::vector<BsdeSolution> sol;
  BsdeCoeffs coeffs;
  Vec y0;
  Mat y0_samples;  // D x M, per-path regression targets at step 0
  double max_picard_residual = 0.0;
  double max_cond = 1.0;
};

inline Vec bsde_state(const ForwardPath& P, int k) {
  Vec s(P.x.rows() + P.Y.rows());
  s << P.x.col(k), P.Y.col(k);
  return s;
}

/// Aggregated driver sum_m pi_m g_m (per-mark gamma argument).
inline Vec driver_total(const ModelSpec& m, double t, const Vec& x, const Vec& u, const Vec& y, const Mat& Z,
                        const Mat& R, const BsdeSolution& s, int k) {
  Vec g = Vec::Zero(m.D);
  for (const auto& nd : m.mark_nodes()) g += nd.w * m.g(t, x, u, y, Z, R, s.gam(k, nd.m, m.D), nd.m);
  return g;
}

inline double running_cost(const ModelSpec& m, double t, const Vec& x, const Vec& u, const Vec& y, const Mat& Z,
                           const Mat& R, const BsdeSolution& s, int k) {
  double L = 0.0;
  for (const auto& nd : m.mark_nodes()) L += nd.w * m.L(t, x, u, y, Z, R, s.gam(k, nd.m, m.D), nd.m);
  return L;
}

namespace detail {

/// y_k = Ey + dt (sum pi g(y_k, ...) - r h_ref) by Picard iteration.
inline double picard_y(const ModelSpec& m, double t, const ForwardPath& P, int k, BsdeSolution& s, const Vec& Ey,
                       double dt, int max_iter = 5, double tol = 1e-10) {
  const Vec x = P.x.col(k), u = P.u.col(k);
  const Mat Z = s.Z(k, m.n_W), R = s.R(k, m.d);
  const Vec corr = R * P.h_ref.col(k);
  Vec y = Ey;
  double res = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    const Vec yn = Ey + dt * (driver_total(m, t, x, u, y, Z, R, s, k) - corr);
    res = (yn - y).lpNorm<Eigen::Infinity>();
    y = yn;
    if (res <= tol * (1.0 + y.lpNorm<Eigen::Infinity>())) break;
  }
  s.y.col(k) = y;
  return res / (1.0 + y.lpNorm<Eigen::Infinity>());
}

}  // namespace detail

/// Least-squares Monte Carlo for the controlled BSDE with jumps. Works on
/// paths sampled under P (r against dY) or under Q (r against dB, with the
/// -r h dt drift correction); both are the same equation.
inline BsdeResult solve_bsde(const ModelSpec& m, const Ensemble& E, const RegressionBasis& basis, double ridge = 1e-8) {
  const int M = E.size(), N = E.grid.n_steps, D = m.D, nW = m.n_W, d = m.d, Km = m.K();
  const double dt = E.grid.dt();
  require(M >= 2, "solve_bsde: need at least two paths");
  const int dim_s = m.n() + d;
  const int nf = basis.count(dim_s);
  require(nf <= basis.max_features, "solve_bsde: too many regression features");
  require(M >= 10 * nf, "solve_bsde: ensemble size below 10 x feature count");
  BsdeResult out;
  out.coeffs.basis = basis;
  out.coeffs.D = D;
  out.coeffs.n_W = nW;
  out.coeffs.d = d;
  out.coeffs.K = Km;
  out.coeffs.beta.assign(N, Mat());
  out.sol.resize(M);
  for (int i = 0; i < M; ++i) {
    auto& s = out.sol[i];
    s.y.resize(D, N + 1);
    s.z = Mat::Zero(D * nW, N);
    s.r = Mat::Zero(D * d, N);
    s.gamma = Mat::Zero(D * Km, N);
    s.y.col(N) = m.f(E.paths[i].x.col(N));
  }
  const int nt = D * (1 + nW + d + Km);
  Mat Phi(M, nf), T(M, nt);
  std::vector<double> res(M, 0.0);
  for (int k = N - 1; k >= 0; --k) {
    const double t = E.grid.t(k);
    parallel_for(M, [&](int i) {
      const ForwardPath& P = E.paths[i];
      const NoiseGrid& ng = E.noise[i];
      Vec f = basis.features(bsde_state(P, k));
      Phi.row(i) = f.transpose();
      const Vec y1 = out.sol[i].y.col(k + 1);
      int c = 0;
      T.block(i, c, 1, D) = y1.transpose();
      c += D;
      for (int a = 0; a < nW; ++a, c += D) T.block(i, c, 1, D) = (y1 * (ng.dW(a, k) / dt)).transpose();
      for (int j = 0; j < d; ++j, c += D) T.block(i, c, 1, D) = (y1 * (P.dM(j, k) / dt)).transpose();
      for (int q = 0; q < Km; ++q, c += D) {
        const double w = m.weights[q];
        const double s = w > 0 ? compensated(ng, q, k, w, dt) / (w * dt) : 0.0;
        T.block(i, c, 1, D) = (y1 * s).transpose();
      }
    });
    RegressionFit fit;
    try {
      fit = ridge_fit(Phi, T, ridge);
    } catch (const NumericalAbort& e) {
      throw NumericalAbort(std::string("solve_bsde: ") + e.what(), k);
    }
    out.max_cond = std::max(out.max_cond, fit.cond);
    out.coeffs.beta[k] = fit.beta;
    const Mat F = Phi * fit.beta;
    if (k == 0) out.y0_samples.resize(D, M);
    parallel_for(M, [&](int i) {
      auto& s = out.sol[i];
      const Vec Fi = F.row(i).transpose();
      s.z.col(k) = Fi.segment(D, D * nW);
      s.r.col(k) = Fi.segment(D * (1 + nW), D * d);
      s.gamma.col(k) = Fi.segment(D * (1 + nW + d), D * Km);
      res[i] = std::max(res[i], detail::picard_y(m, t, E.paths[i], k, s, Fi.head(D), dt));
      if (k == 0) {
        // per-path target whose mean is y_0
        BsdeSolution tmp = s;
        detail::picard_y(m, t, E.paths[i], 0, tmp, T.row(i).head(D).transpose(), dt);
        out.y0_samples.col(i) = tmp.y.col(0);
      }
    });
  }
  for (double r : res) out.max_picard_residual = std::max(out.max_picard_residual, r);
  if (out.max_picard_residual > 1e-6) throw NumericalAbort("solve_bsde: Picard iteration did not converge", 0);
  out.y0 = Vec::Zero(D);
  for (int i = 0; i < M; ++i) out.y0 += out.sol[i].y.col(0);
  out.y0 /= M;
  return out;
}

/// Overwrites steps from_step..N of s by frozen-coefficient evaluation.
inline void eval_bsde_into(const ModelSpec& m, const BsdeCoeffs& C, const ForwardPath& P, const TimeGrid& grid,
                           BsdeSolution& s, int from_step) {
  const int N = grid.n_steps, D = C.D, nW = C.n_W, d = C.d;
  const double dt = grid.dt();
  s.y.col(N) = m.f(P.x.col(N));
  for (int k = std::max(0, from_step); k < N; ++k) {
    const Vec Fi = C.beta[k].transpose() * C.basis.features(bsde_state(P, k));
    s.z.col(k) = Fi.segment(D, D * nW);
    s.r.col(k) = Fi.segment(D * (1 + nW), D * d);
    s.gamma.col(k) = Fi.segment(D * (1 + nW + d), D * C.K);
    detail::picard_y(m, grid.t(k), P, k, s, Fi.head(D), dt);
  }
}

/// Re-evaluates a solved BSDE on another path with frozen coefficients.
inline BsdeSolution eval_bsde(const ModelSpec& m, const BsdeCoeffs& C, const ForwardPath& P, const TimeGrid& grid,
                              int from_step = 0) {
  const int N = grid.n_steps, D = C.D;
  BsdeSolution s;
  s.y = Mat::Zero(D, N + 1);
  s.z = Mat::Zero(D * C.n_W, N);
  s.r = Mat::Zero(D * C.d, N);
  s.gamma = Mat::Zero(D * C.K, N);
  eval_bsde_into(m, C, P, grid, s, from_step);
  return s;
}

// -------------------------------------------------------------- ell

namespace detail {

inline void ell_step(const ModelSpec& m, const ForwardPath& P, const NoiseGrid& ng, const BsdeSolution& s,
                     const TimeGrid& grid, Mat& l, int k) {
  const int D = m.D, nW = m.n_W, d = m.d;
  const double dt = grid.dt();
  const double t = grid.t(k);
  const Vec x = P.x.col(k), u = P.u.col(k), y = s.y.col(k), lk = l.col(k);
  const Mat Z = s.Z(k, nW), R = s.R(k, d);
  Vec a = Vec::Zero(D), bz = Vec::Zero(D * nW), br = Vec::Zero(D * d);
  Vec inc = Vec::Zero(D);
  for (const auto& nd : m.mark_nodes()) {
    const Vec gm = s.gam(k, nd.m, D);
    const DriverJac gj = m.g_jac(t, x, u, y, Z, R, gm, nd.m);
    const CostJac Lj = m.L_jac(t, x, u, y, Z, R, gm, nd.m);
    a += nd.w * (gj.y.transpose() * lk - Lj.y);
    bz += nd.w * (gj.z.transpose() * lk - Lj.z);
    br += nd.w * (gj.r.transpose() * lk - Lj.r);
    if (nd.m >= 0) {
      const double c = compensated(ng, nd.m, k, m.weights[nd.m], dt);
      if (c != 0.0) inc += c * (gj.gamma.transpose() * lk - Lj.gamma);
    }
  }
  inc += a * dt;
  const Mat Bz = mat_of(bz, D, nW), Br = mat_of(br, D, d);
  inc += Bz * ng.dW.col(k);
  inc += (Br - lk * P.hval.col(k).transpose()) * P.dBhat.col(k);
  l.col(k + 1) = lk + inc;
  if (!l.col(k + 1).allFinite()) throw NumericalAbort("ell not finite", k + 1);
}

}  // namespace detail

/// First adjoint: forward linear SDE driven by W, B and compensated jumps.
inline Mat ell_path(const ModelSpec& m, const ForwardPath& P, const NoiseGrid& ng, const BsdeSolution& s,
                    const Vec& y0, const TimeGrid& grid) {
  const int N = grid.n_steps;
  Mat l(m.D, N + 1);
  l.col(0) = -m.psi_y(y0);
  for (int k = 0; k < N; ++k) detail::ell_step(m, P, ng, s, grid, l, k);
  return l;
}

/// Re-runs ell from step r, keeping columns up to r of `base`.
inline Mat ell_path_from(const ModelSpec& m, const ForwardPath& P, const NoiseGrid& ng, const BsdeSolution& s,
                         const Mat& base, const TimeGrid& grid, int r) {
  Mat l = base;
  for (int k = r; k < grid.n_steps; ++k) detail::ell_step(m, P, ng, s, grid, l, k);
  return l;
}

inline std::vector<Mat> solve_ell(const ModelSpec& m, const Ensemble& E, const BsdeResult& B) {
  std::vector<Mat> out(E.size());
  parallel_for(E.size(), [&](int i) { out[i] = ell_path(m, E.paths[i], E.noise[i], B.sol[i], B.y0, E.grid); });
  return out;
}

// ------------------------------------------------------- auxiliary p, q

struct AuxSolution {
  Vec p;    // N+1
  Mat q1;   // n_W x N
  Mat q2;   // d x N
  Mat q3;   // K x N
};

struct AuxResult {
  std::vector<AuxSolution> sol;
  std::vector<Mat> beta;  // nf x (1 + n_W + d + K) per step
  RegressionBasis basis;
  double p0 = 0.0;
};

/// Running cost sum_m pi_m L_m along a path.
inline Vec running_cost_path(const ModelSpec& m, const ForwardPath& P, const BsdeSolution& s, const TimeGrid& grid) {
  const int N = grid.n_steps;
  Vec L(N);
  for (int k = 0; k < N; ++k)
    L[k] = running_cost(m, grid.t(k), P.x.col(k), P.u.col(k), s.y.col(k), s.Z(k, m.n_W), s.R(k, m.d), s, k);
  return L;
}

/// -dp = sum pi L dt - q1 dW - q2 dB - q3 dN~, p_T = phi(x_T), solved under
/// the sampling measure Q with the realised tail sums as regression targets.
inline AuxResult solve_auxiliary_pq(const ModelSpec& m, const Ensemble& E, const BsdeResult& B,
                                    const RegressionBasis& basis, double ridge = 1e-8) {
  require(E.measure == Measure::Q_u_with_B_as_BM, "solve_auxiliary_pq: needs an ensemble sampled under Q");
  const int M = E.size(), N = E.grid.n_steps, nW = m.n_W, d = m.d, Km = m.K();
  const double dt = E.grid.dt();
  const int nf = basis.count(m.n() + d);
  AuxResult out;
  out.basis = basis;
  out.beta.assign(N, Mat());
  out.sol.resize(M);
  std::vector<Vec> Lp(M);
  Vec tail(M);
  parallel_for(M, [&](int i) {
    Lp[i] = running_cost_path(m, E.paths[i], B.sol[i], E.grid);
    auto& s = out.sol[i];
    s.p.resize(N + 1);
    s.q1 = Mat::Zero(nW, N);
    s.q2 = Mat::Zero(d, N);
    s.q3 = Mat::Zero(Km, N);
    s.p[N] = m.phi(E.paths[i].x.col(N));
    tail[i] = s.p[N];
  });
  const int nt = 1 + nW + d + Km;
  Mat Phi(M, nf), T(M, nt);
  for (int k = N - 1; k >= 0; --k) {
    parallel_for(M, [&](int i) {
      const ForwardPath& P = E.paths[i];
      const NoiseGrid& ng = E.noise[i];
      Phi.row(i) = basis.features(bsde_state(P, k)).transpose();
      const double a = tail[i];
      int c = 0;
      T(i, c++) = a;
      for (int j = 0; j < nW; ++j) T(i, c++) = a * ng.dW(j, k) / dt;
      for (int j = 0; j < d; ++j) T(i, c++) = a * P.dBhat(j, k) / dt;
      for (int q = 0; q < Km; ++q) {
        const double w = m.weights[q];
        T(i, c++) = w > 0 ? a * compensated(ng, q, k, w, dt) / (w * dt) : 0.0;
      }
    });
    RegressionFit fit;
    try {
      fit = ridge_fit(Phi, T, ridge);
    } catch (const NumericalAbort& e) {
      throw NumericalAbort(std::string("solve_auxiliary_pq: ") + e.what(), k);
    }
    out.beta[k] = fit.beta;
    const Mat F = Phi * fit.beta;
    for (int i = 0; i < M; ++i) {
      auto& s = out.sol[i];
      s.p[k] = F(i, 0) + dt * Lp[i][k];
      s.q1.col(k) = F.row(i).segment(1, nW).transpose();
      s.q2.col(k) = F.row(i).segment(1 + nW, d).transpose();
      s.q3.col(k) = F.row(i).segment(1 + nW + d, Km).transpose();
      tail[i] += dt * Lp[i][k];
    }
  }
  for (int i = 0; i < M; ++i) out.p0 += out.sol[i].p[0];
  out.p0 /= M;
  return out;
}

// ---------------------------------------------------- singular BSPDE

/// Coefficients of -dZ = [A*Z + V*Z + sum_{i<n} K_i* Q1 e_i + E_j* Q2^j
/// + sum_m pi_m T_m* Q3_m + J] dt - ... at one (path, step). Operators are
/// given untransposed; the solver applies adjoints.
struct BspdeStepData {
  Mat V;
  std::vector<Mat> K, E, T3;
  Vec J;
};

struct BspdeProblem {
  std::function<BspdeStepData(int i, int k)> at;
  std::function<Vec(int i, int k)> state;  // regression state
  Mat eta;                                  // n x M terminal data
};

struct BspdeSolution {
  std::vector<Mat> Z;     // per path, n x (N+1)
  std::vector<Mat> beta;  // per step, nf x n(1 + n_W + d + K)
  std::vector<Mat> Phi;   // per step, M x nf design
  int n = 0, n_W = 0, d = 0, K = 0;
  int truncation_n = 0;
  double eta_sq = 0.0;  // E|eta|^2
  double J_sq = 0.0;    // E int |J|^2 dt
  double max_cond = 1.0;

  Mat fitted(int k) const { return Phi[k] * beta[k]; }
  /// Views into one fitted row: Sbar (n), Q1 (n x n_W), Q2 (n x d), Q3 (n x K).
  Vec Zbar(const Mat& F, int i) const { return F.row(i).head(n).transpose(); }
  Mat Q1(const Mat& F, int i) const { return mat_of(Vec(F.row(i).segment(n, n * n_W).transpose()), n, n_W); }
  Mat Q2(const Mat& F, int i) const {
    return mat_of(Vec(F.row(i).segment(n * (1 + n_W), n * d).transpose()), n, d);
  }
  Mat Q3(const Mat& F, int i) const {
    return mat_of(Vec(F.row(i).segment(n * (1 + n_W + d), n * K).transpose()), n, K);
  }
};

/// Backward exponential-Euler sweep. With Zbar = E_k[S Z_{k+1}] and the
/// Q's obtained by regressing S Z_{k+1} times the cell increments,
///   Z_k = Zbar + dt (V* Zbar + sum_{i<n} K_i* Q1 e_i + E_j* Q2^j
///                    + sum_m pi_m T_m* Q3_m + J_k).
inline BspdeSolution solve_singular_bspde(const BspdeProblem& prob, const ModelSpec& m, const Ensemble& E,
                                          const RegressionBasis& basis, int truncation_n, double ridge = 1e-8) {
  const int M = E.size(), N = E.grid.n_steps, n = m.n(), nW = m.n_W, d = m.d, Km = m.K();
  require(truncation_n >= 0 && truncation_n <= nW, "solve_singular_bspde: truncation_n must lie in [0, n_W]");
  require(prob.eta.rows() == n && prob.eta.cols() == M, "solve_singular_bspde: eta shape mismatch");
  const double dt = E.grid.dt();
  const Vec sg = m.space.semigroup_diag(dt);
  const int nf = basis.count(int(prob.state(0, 0).size()));
  require(nf <= basis.max_features, "solve_singular_bspde: too many regression features");
  BspdeSolution S;
  S.n = n;
  S.n_W = nW;
  S.d = d;
  S.K = Km;
  S.truncation_n = truncation_n;
  S.beta.assign(N, Mat());
  S.Phi.assign(N, Mat());
  S.Z.assign(M, Mat(n, N + 1));
  for (int i = 0; i < M; ++i) {
    S.Z[i].col(N) = prob.eta.col(i);
    S.eta_sq += prob.eta.col(i).squaredNorm() / M;
  }
  const int nt = n * (1 + nW + d + Km);
  Mat T(M, nt);
  std::vector<double> Jsq(M, 0.0);
  for (int k = N - 1; k >= 0; --k) {
    Mat Phi(M, nf);
    parallel_for(M, [&](int i) {
      const NoiseGrid& ng = E.noise[i];
      const ForwardPath& P = E.paths[i];
      Phi.row(i) = basis.features(prob.state(i, k)).transpose();
      const Vec sz = sg.cwiseProduct(S.Z[i].col(k + 1));
      int c = 0;
      T.block(i, c, 1, n) = sz.transpose();
      c += n;
      for (int a = 0; a < nW; ++a, c += n) T.block(i, c, 1, n) = (sz * (ng.dW(a, k) / dt)).transpose();
      for (int j = 0; j < d; ++j, c += n) T.block(i, c, 1, n) = (sz * (P.dBhat(j, k) / dt)).transpose();
      for (int q = 0; q < Km; ++q, c += n) {
        const double w = m.weights[q];
        const double s = w > 0 ? compensated(ng, q, k, w, dt) / (w * dt) : 0.0;
        T.block(i, c, 1, n) = (sz * s).transpose();
      }
    });
    RegressionFit fit;
    try {
      fit = ridge_fit(Phi, T, ridge);
    } catch (const NumericalAbort& e) {
      throw NumericalAbort(std::string("solve_singular_bspde: ") + e.what(), k);
    }
    S.max_cond = std::max(S.max_cond, fit.cond);
    S.beta[k] = fit.beta;
    S.Phi[k] = std::move(Phi);
    const Mat F = S.Phi[k] * fit.beta;
    parallel_for(M, [&](int i) {
      const BspdeStepData c = prob.at(i, k);
      const Vec zb = S.Zbar(F, i);
      const Mat q1 = S.Q1(F, i), q2 = S.Q2(F, i), q3 = S.Q3(F, i);
      Vec drift = c.V.transpose() * zb + c.J;
      for (int a = 0; a < truncation_n; ++a) drift += c.K[a].transpose() * q1.col(a);
      for (int j = 0; j < d; ++j) drift += c.E[j].transpose() * q2.col(j);
      for (int q = 0; q < Km; ++q) drift += m.weights[q] * (c.T3[q].transpose() * q3.col(q));
      S.Z[i].col(k) = zb + dt * drift;
      Jsq[i] += dt * c.J.squaredNorm();
      if (!S.Z[i].col(k).allFinite()) throw NumericalAbort("singular BSPDE not finite", k);
    });
  }
  for (double v : Jsq) S.J_sq += v / M;
  return S;
}

/// The adjoint equation for the state: V = O-hat, E_j = grad G2^j,
/// T_m = grad Theta_m, J = sum pi (grad L - grad g* ell) + grad h^j* q2^j,
/// eta = grad phi(x_T) - grad f(x_T)* ell_T. Regression state (x, Y, ell).
inline BspdeProblem assemble_P_equation(const ModelSpec& m, const Ensemble& E, const BsdeResult& B,
                                        const std::vector<Mat>& ell, const AuxResult& aux) {
  const int M = E.size(), N = E.grid.n_steps, n = m.n();
  BspdeProblem prob;
  prob.eta.resize(n, M);
  for (int i = 0; i < M; ++i) {
    const Vec xT = E.paths[i].x.col(N);
    prob.eta.col(i) = m.phi_x(xT) - m.f_x(xT).transpose() * ell[i].col(N);
  }
  prob.state = [&E, &ell](int i, int k) {
    const ForwardPath& P = E.paths[i];
    Vec s(P.x.rows() + P.Y.rows() + ell[i].rows());
    s << P.x.col(k), P.Y.col(k), ell[i].col(k);
    return s;
  };
  prob.at = [&m, &E, &B, &ell, &aux](int i, int k) {
    const ForwardPath& P = E.paths[i];
    const BsdeSolution& s = B.sol[i];
    const double t = E.grid.t(k);
    const Vec x = P.x.col(k), u = P.u.col(k), y = s.y.col(k), l = ell[i].col(k);
    const StepJac Jc = step_jacobians(m, t, x, u);
    BspdeStepData c;
    c.V = Jc.O;
    c.K = Jc.K;
    c.E = Jc.G2x;
    c.T3 = Jc.Thx;
    c.J = Jc.hx.transpose() * aux.sol[i].q2.col(k);
    const Mat Z = s.Z(k, m.n_W), R = s.R(k, m.d);
    for (const auto& nd : m.mark_nodes()) {
      const Vec gm = s.gam(k, nd.m, m.D);
      c.J += nd.w * (m.L_jac(t, x, u, y, Z, R, gm, nd.m).x - m.g_jac(t, x, u, y, Z, R, gm, nd.m).x.transpose() * l);
    }
    return c;
  };
  return prob;
}

/// E int (T-t)^{2 theta} |Q1|_1^2 dt together with the data size
/// E|eta|^2 + E int |J|^2 dt it is bounded by.
struct TraceDiagnostic {
  double statistic = 0.0;
  double data_norm = 0.0;
  double ratio = 0.0;
  double theta = 0.0;
};

inline TraceDiagnostic trace_diagnostic(const BspdeSolution& S, const TimeGrid& grid, double theta) {
  TraceDiagnostic out;
  out.theta = theta;
  const int N = grid.n_steps;
  const int M = int(S.Z.size());
  for (int k = 0; k < N; ++k) {
    const Mat F = S.fitted(k);
    double acc = 0.0;
    for (int i = 0; i < M; ++i) {
      const double tn = Eigen::JacobiSVD<Mat>(S.Q1(F, i)).singularValues().sum();
      acc += tn * tn;
    }
    out.statistic += grid.dt() * std::pow(grid.T - grid.t(k), 2.0 * theta) * acc / M;
  }
  out.data_norm = S.eta_sq + S.J_sq;
  out.ratio = out.data_norm > 0 ? out.statistic / out.data_norm : 0.0;
  return out;
}

}  // namespace spdc
