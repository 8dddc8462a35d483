#pragma once

#include "spdc/model.hpp"
#include "spdc/noise.hpp"
#include "spdc/parallel.hpp"

#include <charconv>
#include <fstream>
#include <functional>

namespace spdc {

enum class Measure { P_with_Y_as_BM, Q_u_with_B_as_BM };

inline std::string to_string(Measure m) { return m == Measure::P_with_Y_as_BM ? "P" : "Q"; }

/// One simulated trajectory. Time-indexed arrays are column-per-step.
struct ForwardPath {
  Mat x;        // n x (N+1)
  Mat Y;        // d x (N+1), Y_0 = 0
  Mat dY;       // d x N
  Mat dBhat;    // d x N, dY - h dt along this path
  Mat dM;       // d x N, martingale increments of the sampling measure
  Mat h_ref;    // d x N, drift of Y under the sampling measure
  Mat u;        // p x N
  Mat hval;     // d x N
  Vec qv;       // N+1, running sum of |dY|^2
  Vec log_rho;  // N+1
  Vec log_ref;  // N+1, log density of the sampling measure w.r.t. P
  std::int64_t path_index = 0;

  int n_steps() const { return int(u.cols()); }
};

/// Coefficients and derivatives of the model at one grid point.
struct StepJac {
  Vec F, h;
  Mat Fx, Fu, G1, G2, hx, hu, O, R;
  std::vector<Mat> K, G1u, G2x, G2u, Th, Thx, Thu;  // Th holds column vectors
};

inline StepJac step_jacobians(const ModelSpec& m, double t, const Vec& x, const Vec& u) {
  StepJac J;
  J.F = m.F(t, x, u);
  J.Fx = m.F_x(t, x, u);
  J.Fu = m.F_u(t, x, u);
  J.G1 = m.G1(t, x, u);
  J.K = m.G1_x(t, x, u);
  J.G1u = m.G1_u(t, x, u);
  J.G2 = m.G2(t, x, u);
  J.G2x = m.G2_x(t, x, u);
  J.G2u = m.G2_u(t, x, u);
  J.h = m.h(t, x, u);
  J.hx = m.h_x(t, x, u);
  J.hu = m.h_u(t, x, u);
  for (int q = 0; q < m.K(); ++q) {
    J.Th.push_back(m.Theta(t, x, u, q));
    J.Thx.push_back(m.Theta_x(t, x, u, q));
    J.Thu.push_back(m.Theta_u(t, x, u, q));
  }
  J.O = J.Fx - J.G2 * J.hx;
  J.R = J.Fu - J.G2 * J.hu;
  return J;
}

/// (G1_u v) as an n x n_W matrix.
inline Mat g1u_times(const std::vector<Mat>& G1u, const Vec& v) {
  Mat out = Mat::Zero(G1u.empty() ? 0 : G1u[0].rows(), G1u.empty() ? 0 : G1u[0].cols());
  for (int c = 0; c < v.size(); ++c)
    if (v[c] != 0.0) out += v[c] * G1u[c];
  return out;
}

inline double compensated(const NoiseGrid& ng, int q, int k, double w, double dt) {
  return double(ng.counts(q, k)) - w * dt;
}

namespace detail {

inline void forward_step(const ModelSpec& m, const PolicyParams& pp, const NoiseGrid& ng, const TimeGrid& grid,
                         Measure measure, const Vec& sg, ForwardPath& P, int k) {
  const int N = grid.n_steps, Km = m.K();
  const double dt = grid.dt();
  const double t = grid.t(k);
  const Vec x = P.x.col(k);
  const Vec u = policy_control(pp, m, pp.knot_of_step(k, N), P.Y.col(k), P.qv[k]);
  const Vec h = m.h(t, x, u);
  const Mat G2 = m.G2(t, x, u);
  Vec dY = measure == Measure::Q_u_with_B_as_BM ? Vec(h * dt + ng.dB.col(k)) : Vec(ng.dB.col(k));
  Vec inc = x + (m.F(t, x, u) - G2 * h) * dt + m.G1(t, x, u) * ng.dW.col(k) + G2 * dY;
  for (int q = 0; q < Km; ++q) {
    const double c = compensated(ng, q, k, m.weights[q], dt);
    if (c != 0.0) inc += c * m.Theta(t, x, u, q);
  }
  P.x.col(k + 1) = sg.cwiseProduct(inc);
  if (!P.x.col(k + 1).allFinite()) throw NumericalAbort("forward state not finite", k + 1);
  P.u.col(k) = u;
  P.hval.col(k) = h;
  P.dY.col(k) = dY;
  P.dBhat.col(k) = dY - h * dt;
  P.Y.col(k + 1) = P.Y.col(k) + dY;
  P.qv[k + 1] = P.qv[k] + dY.squaredNorm();
  P.log_rho[k + 1] = P.log_rho[k] + h.dot(dY) - 0.5 * h.squaredNorm() * dt;
}

inline void finish_measure(ForwardPath& P, Measure measure, int d, int N) {
  if (measure == Measure::Q_u_with_B_as_BM) {
    P.log_ref = P.log_rho;
    P.h_ref = P.hval;
    P.dM = P.dBhat;
  } else {
    P.log_ref = Vec::Zero(N + 1);
    P.h_ref = Mat::Zero(d, N);
    P.dM = P.dY;
  }
}

}  // namespace detail

/// Controlled SPDE by exponential Euler. Under P the dB rows of ng are the
/// observation increments; under Q they are the B increments and
/// dY = h dt + dB.
inline ForwardPath simulate_forward(const ModelSpec& m, const PolicyParams& pp, const NoiseGrid& ng,
                                    const TimeGrid& grid, Measure measure, const Vec* x0 = nullptr) {
  const int n = m.n(), d = m.d, p = m.p, N = grid.n_steps, Km = m.K();
  require(ng.n_steps() == N && ng.d() == d && ng.n_W() == m.n_W && ng.K() == Km,
          "simulate_forward: noise grid does not match model");
  const Vec sg = m.space.semigroup_diag(grid.dt());
  ForwardPath P;
  P.path_index = ng.path_index;
  P.x.resize(n, N + 1);
  P.Y = Mat::Zero(d, N + 1);
  P.dY.resize(d, N);
  P.dBhat.resize(d, N);
  P.u.resize(p, N);
  P.hval.resize(d, N);
  P.qv = Vec::Zero(N + 1);
  P.log_rho = Vec::Zero(N + 1);
  P.x.col(0) = x0 ? *x0 : m.x0;
  for (int k = 0; k < N; ++k) detail::forward_step(m, pp, ng, grid, measure, sg, P, k);
  detail::finish_measure(P, measure, d, N);
  return P;
}

/// Re-runs steps r..N-1 of `base` on (possibly altered) noise; columns up
/// to r are kept.
inline ForwardPath simulate_forward_from(const ModelSpec& m, const PolicyParams& pp, const NoiseGrid& ng,
                                         const TimeGrid& grid, Measure measure, const ForwardPath& base, int r) {
  const int N = grid.n_steps;
  require(r >= 0 && r <= N, "simulate_forward_from: step out of range");
  const Vec sg = m.space.semigroup_diag(grid.dt());
  ForwardPath P = base;
  for (int k = r; k < N; ++k) detail::forward_step(m, pp, ng, grid, measure, sg, P, k);
  detail::finish_measure(P, measure, m.d, N);
  return P;
}

/// Runs a different policy on the observation path of `hat` (Y fixed, as
/// under P) and keeps the sampling measure of `hat`.
inline ForwardPath simulate_on_observation(const ModelSpec& m, const PolicyParams& pp, const NoiseGrid& ng,
                                           const TimeGrid& grid, const ForwardPath& hat) {
  NoiseGrid obs = ng;
  obs.dB = hat.dY;
  ForwardPath P = simulate_forward(m, pp, obs, grid, Measure::P_with_Y_as_BM);
  P.log_ref = hat.log_ref;
  P.h_ref = hat.h_ref;
  P.dM = hat.dM;
  return P;
}

/// A sampled ensemble: noise and trajectories indexed by path.
struct Ensemble {
  TimeGrid grid;
  Measure measure = Measure::Q_u_with_B_as_BM;
  std::vector<NoiseGrid> noise;
  std::vector<ForwardPath> paths;
  int size() const { return int(paths.size()); }
};

inline std::vector<NoiseGrid> sample_noise_ensemble(const TimeGrid& grid, int n_W, int d, const JumpMeasureSpec& jm,
                                                    int M, std::uint64_t seed, std::int64_t first_path = 0) {
  std::vector<NoiseGrid> out(M);
  parallel_for(M, [&](int i) { out[i] = sample_noise(grid, n_W, d, jm, seed, first_path + i); });
  return out;
}

inline Ensemble simulate_ensemble(const ModelSpec& m, const PolicyParams& pp, const TimeGrid& grid, int M,
                                  std::uint64_t seed, Measure measure, std::int64_t first_path = 0) {
  Ensemble E;
  E.grid = grid;
  E.measure = measure;
  JumpMeasureSpec jm{m.marks, m.weights};
  E.noise = sample_noise_ensemble(grid, m.n_W, m.d, jm, M, seed, first_path);
  E.paths.resize(M);
  parallel_for(M, [&](int i) { E.paths[i] = simulate_forward(m, pp, E.noise[i], grid, measure); });
  return E;
}

inline Ensemble simulate_on_observations(const ModelSpec& m, const PolicyParams& pp, const Ensemble& hat) {
  Ensemble E;
  E.grid = hat.grid;
  E.measure = hat.measure;
  E.noise = hat.noise;
  E.paths.resize(hat.size());
  parallel_for(hat.size(), [&](int i) {
    E.paths[i] = simulate_on_observation(m, pp, hat.noise[i], hat.grid, hat.paths[i]);
  });
  return E;
}

// ------------------------------------------------------- first variation

/// Direction v_k of a control perturbation, adapted to the observation.
using DirectionFn = std::function<Vec(int k, const ForwardPath& hat)>;

/// Tangent of the policy family along dtheta (zero where the box is active).
inline DirectionFn policy_direction(const PolicyParams& pp, const ModelSpec& m, const Vec& dtheta) {
  return [pp, &m, dtheta](int k, const ForwardPath& hat) -> Vec {
    const int N = hat.n_steps();
    const Vec phi = policy_feature_vector(pp, hat.Y.col(k), hat.qv[k]);
    return policy_tangent(pp, m, pp.knot_of_step(k, N), phi, dtheta);
  };
}

struct VariationPath {
  Mat x1;      // n x (N+1)
  Mat v;       // p x N
  Vec Lambda;  // N+1
};

/// Linearised state equation along `hat` in the B-form, together with the
/// density ratio variation Lambda.
inline VariationPath simulate_first_variation(const ModelSpec& m, const DirectionFn& dir, const NoiseGrid& ng,
                                              const TimeGrid& grid, const ForwardPath& hat) {
  const int n = m.n(), N = grid.n_steps, Km = m.K();
  require(hat.n_steps() == N && ng.n_steps() == N, "simulate_first_variation: grid mismatch");
  const double dt = grid.dt();
  const Vec sg = m.space.semigroup_diag(dt);
  VariationPath V;
  V.x1 = Mat::Zero(n, N + 1);
  V.v.resize(m.p, N);
  V.Lambda = Vec::Zero(N + 1);
  for (int k = 0; k < N; ++k) {
    const double t = grid.t(k);
    const Vec x = hat.x.col(k), u = hat.u.col(k), x1 = V.x1.col(k);
    const Vec v = dir(k, hat);
    V.v.col(k) = v;
    const StepJac J = step_jacobians(m, t, x, u);
    Vec inc = x1 + (J.O * x1 + J.R * v) * dt;
    const Mat Gv = g1u_times(J.G1u, v);
    for (int i = 0; i < m.n_W; ++i) {
      const double w = ng.dW(i, k);
      inc += w * (J.K[i] * x1 + Gv.col(i));
    }
    for (int j = 0; j < m.d; ++j) inc += hat.dBhat(j, k) * (J.G2x[j] * x1 + J.G2u[j] * v);
    for (int q = 0; q < Km; ++q) {
      const double c = compensated(ng, q, k, m.weights[q], dt);
      if (c != 0.0) inc += c * (J.Thx[q] * x1 + J.Thu[q] * v);
    }
    V.x1.col(k + 1) = sg.cwiseProduct(inc);
    V.Lambda[k + 1] = V.Lambda[k] + (J.hx * x1 + J.hu * v).dot(hat.dBhat.col(k));
    if (!V.x1.col(k + 1).allFinite()) throw NumericalAbort("first variation not finite", k + 1);
  }
  return V;
}

// ----------------------------------------------------- linear SPDE / flow

/// Coefficients of the generic linear SPDE at one grid step.
struct LinearStepCoeffs {
  Mat Q1;                  // n x n drift multiplier
  std::vector<Mat> K;      // n_W operators against d beta^i
  std::vector<Mat> Q2;     // d operators against dB^j
  std::vector<Mat> Q3;     // K operators against compensated counts
  Vec R;                   // n, drift forcing
  Mat Gamma;               // n x n_W, additive W forcing
  Mat R2;                  // n x d
  Mat R3;                  // n x K
  Vec chi;                 // n, enters as K_i chi d beta^i
};

struct LinearSpdeCoeffs {
  std::function<LinearStepCoeffs(int k)> at;
  int K_truncation_n = 0;    // K_i Y enters for i < n
  int chi_truncation_m = 0;  // K_i chi enters for i < m
  bool forcing = true;       // false drops R, Gamma, R2, R3, chi
};

/// Linear-SPDE coefficients read off the model along a hat path (the
/// operators of the first-variation equation), without forcing.
inline LinearSpdeCoeffs hat_linear_coeffs(const ModelSpec& m, const ForwardPath& hat, const TimeGrid& grid) {
  LinearSpdeCoeffs C;
  C.K_truncation_n = m.n_W;
  C.chi_truncation_m = 0;
  C.forcing = false;
  C.at = [&m, &hat, grid](int k) {
    const StepJac J = step_jacobians(m, grid.t(k), hat.x.col(k), hat.u.col(k));
    LinearStepCoeffs c;
    c.Q1 = J.O;
    c.K = J.K;
    c.Q2 = J.G2x;
    c.Q3 = J.Thx;
    return c;
  };
  return C;
}

inline void check_linear_bounds(const LinearStepCoeffs& c, int k, double cap) {
  auto bad = [cap](const Mat& a) { return !a.allFinite() || (a.size() > 0 && a.norm() > cap); };
  bool b = bad(c.Q1);
  for (const auto& a : c.K) b = b || bad(a);
  for (const auto& a : c.Q2) b = b || bad(a);
  for (const auto& a : c.Q3) b = b || bad(a);
  if (b) throw NumericalAbort("linear SPDE coefficient unbounded", k);
}

/// One exponential-Euler step of the linear SPDE applied to every column
/// of Y (so the same routine drives vectors and flows).
inline Mat linear_spde_step(const LinearSpdeCoeffs& C, const LinearStepCoeffs& c, const Vec& sg, const Mat& Y,
                            const NoiseGrid& ng, const Mat& dBhat, const std::vector<double>& weights, int k,
                            double dt) {
  Mat inc = Y + c.Q1 * Y * dt;
  const int nK = int(c.K.size());
  for (int i = 0; i < std::min(C.K_truncation_n, nK); ++i) inc += ng.dW(i, k) * (c.K[i] * Y);
  for (int j = 0; j < int(c.Q2.size()); ++j) inc += dBhat(j, k) * (c.Q2[j] * Y);
  for (int q = 0; q < int(c.Q3.size()); ++q) {
    const double cm = compensated(ng, q, k, weights[q], dt);
    if (cm != 0.0) inc += cm * (c.Q3[q] * Y);
  }
  if (C.forcing) {
    Vec f = Vec::Zero(Y.rows());
    if (c.R.size()) f += c.R * dt;
    if (c.Gamma.size()) f += c.Gamma * ng.dW.col(k);
    if (c.chi.size())
      for (int i = 0; i < std::min(C.chi_truncation_m, nK); ++i) f += ng.dW(i, k) * (c.K[i] * c.chi);
    if (c.R2.size()) f += c.R2 * dBhat.col(k);
    for (int q = 0; q < int(c.R3.cols()); ++q) {
      const double cm = compensated(ng, q, k, weights[q], dt);
      if (cm != 0.0) f += cm * c.R3.col(q);
    }
    inc.colwise() += f;
  }
  return sg.asDiagonal() * inc;
}

/// Solution of the linear SPDE from y0 at grid index s, stored n x (N+1)
/// with zeros before s.
inline Mat simulate_linear_spde(const LinearSpdeCoeffs& C, const SpectralSpace& space, const NoiseGrid& ng,
                                const Mat& dBhat, const std::vector<double>& weights, const TimeGrid& grid,
                                const Vec& y0, int s_index, double bound_cap = 1e6) {
  const int N = grid.n_steps;
  require(s_index >= 0 && s_index < N, "simulate_linear_spde: s_index out of range");
  require(C.K_truncation_n <= ng.n_W() && C.chi_truncation_m <= ng.n_W(),
          "simulate_linear_spde: truncation exceeds n_W");
  const double dt = grid.dt();
  const Vec sg = space.semigroup_diag(dt);
  Mat Y = Mat::Zero(y0.size(), N + 1);
  Y.col(s_index) = y0;
  for (int k = s_index; k < N; ++k) {
    const LinearStepCoeffs c = C.at(k);
    check_linear_bounds(c, k, bound_cap);
    Y.col(k + 1) = linear_spde_step(C, c, sg, Y.col(k), ng, dBhat, weights, k, dt);
    if (!Y.col(k + 1).allFinite()) throw NumericalAbort("linear SPDE not finite", k + 1);
  }
  return Y;
}

/// Phi(t_k, t_s) for k >= s; entries before s are empty matrices.
struct FlowOperatorPath {
  std::vector<Mat> ops;
  int s_index = 0;
};

inline FlowOperatorPath simulate_flow(const LinearSpdeCoeffs& C, const SpectralSpace& space, const NoiseGrid& ng,
                                      const Mat& dBhat, const std::vector<double>& weights, const TimeGrid& grid,
                                      int s_index) {
  const int N = grid.n_steps, n = space.dim_h;
  require(s_index >= 0 && s_index <= N, "simulate_flow: s_index out of range");
  LinearSpdeCoeffs H = C;
  H.forcing = false;
  const double dt = grid.dt();
  const Vec sg = space.semigroup_diag(dt);
  FlowOperatorPath F;
  F.s_index = s_index;
  F.ops.assign(N + 1, Mat());
  F.ops[s_index] = Mat::Identity(n, n);
  for (int k = s_index; k < N; ++k) {
    F.ops[k + 1] = linear_spde_step(H, H.at(k), sg, F.ops[k], ng, dBhat, weights, k, dt);
    if (!F.ops[k + 1].allFinite()) throw NumericalAbort("flow not finite", k + 1);
  }
  return F;
}

inline FlowOperatorPath simulate_flow(const ModelSpec& m, const ForwardPath& hat, const NoiseGrid& ng,
                                      const TimeGrid& grid, int s_index) {
  return simulate_flow(hat_linear_coeffs(m, hat, grid), m.space, ng, hat.dBhat, m.weights, grid, s_index);
}

// ------------------------------------------------------------------ CSV

/// Shortest round-trip decimal.
inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline void write_forward_csv(const std::string& path, const ForwardPath& P, const TimeGrid& grid) {
  std::ofstream o(path);
  if (!o) throw std::runtime_error("cannot open " + path);
  const int n = int(P.x.rows()), d = int(P.Y.rows()), p = int(P.u.rows()), N = P.n_steps();
  o << "t";
  for (int i = 0; i < n; ++i) o << ",x" << i;
  for (int j = 0; j < d; ++j) o << ",Y" << j;
  for (int c = 0; c < p; ++c) o << ",u" << c;
  o << ",log_rho\n";
  for (int k = 0; k <= N; ++k) {
    o << fmt_double(grid.t(k));
    for (int i = 0; i < n; ++i) o << ',' << fmt_double(P.x(i, k));
    for (int j = 0; j < d; ++j) o << ',' << fmt_double(P.Y(j, k));
    for (int c = 0; c < p; ++c) o << ',' << fmt_double(k < N ? P.u(c, k) : P.u(c, N - 1));
    o << ',' << fmt_double(P.log_rho[k]) << '\n';
  }
}

/// Ensemble second moment sup_k mean |x_k|^2.
inline double sup_second_moment(const Ensemble& E) {
  const int N = E.grid.n_steps;
  double s = 0.0;
  for (int k = 0; k <= N; ++k) {
    double a = 0.0;
    for (const auto& P : E.paths) a += P.x.col(k).squaredNorm();
    s = std::max(s, a / E.size());
  }
  return s;
}

}  // namespace spdc
