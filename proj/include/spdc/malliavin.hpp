#pragma once

#include "spdc/smp.hpp"

namespace spdc {

/// A functional of one noise realisation. Values are vectors so that
/// states and adjoints can be differentiated in one pass.
struct PathFunctional {
  enum class Cost { cheap, full };
  std::function<Vec(const NoiseGrid&)> fn;
  Cost cost = Cost::full;

  Vec operator()(const NoiseGrid& ng) const { return fn(ng); }
};

inline double default_bump(const TimeGrid& grid, double rel = 1e-4) { return rel * std::sqrt(grid.dt()); }

namespace detail {

inline Vec checked(const Vec& v, const char* what, int k) {
  if (!v.allFinite()) throw NumericalAbort(std::string(what) + ": non-finite difference", k);
  return v;
}

}  // namespace detail

/// Central difference of F in the W increment of cell k, mode i.
inline Vec malliavin_W(const PathFunctional& F, const NoiseGrid& ng, const TimeGrid& grid, int k, int i,
                       double h) {
  require(h > 0.0, "malliavin_W: bump must be positive");
  const Vec a = F(apply_perturbation(ng, NoisePerturbation::W(k, i, h), grid));
  const Vec b = F(apply_perturbation(ng, NoisePerturbation::W(k, i, -h), grid));
  return detail::checked((a - b) / (2.0 * h), "malliavin_W", k);
}

/// Central difference of F in the B increment of cell k, component j.
inline Vec malliavin_B(const PathFunctional& F, const NoiseGrid& ng, const TimeGrid& grid, int k, int j,
                       double h) {
  require(h > 0.0, "malliavin_B: bump must be positive");
  const Vec a = F(apply_perturbation(ng, NoisePerturbation::B(k, j, h), grid));
  const Vec b = F(apply_perturbation(ng, NoisePerturbation::B(k, j, -h), grid));
  return detail::checked((a - b) / (2.0 * h), "malliavin_B", k);
}

/// Add-one-jump difference F(N + delta_(t, mark)) - F(N).
inline Vec malliavin_N(const PathFunctional& F, const NoiseGrid& ng, const TimeGrid& grid, double t, int mark) {
  const Vec a = F(apply_perturbation(ng, NoisePerturbation::jump(t, mark), grid));
  return detail::checked(a - F(ng), "malliavin_N", grid.cell(std::min(t, grid.T)));
}

/// x at grid index `step` of the controlled state.
inline PathFunctional state_functional(const ModelSpec& m, const PolicyParams& pp, const TimeGrid& grid,
                                       Measure measure, int step) {
  require(step >= 0 && step <= grid.n_steps, "state_functional: step out of range");
  const ModelSpec* mp = &m;
  return {[mp, pp, grid, measure, step](const NoiseGrid& ng) -> Vec {
            return simulate_forward(*mp, pp, ng, grid, measure).x.col(step);
          },
          PathFunctional::Cost::full};
}

struct TerminalTest {
  std::function<double(const Vec&)> f;
  std::function<Vec(const Vec&)> grad;
};

/// tanh(<w, x>).
inline TerminalTest tanh_test(const Vec& w) {
  return {[w](const Vec& x) { return std::tanh(w.dot(x)); },
          [w](const Vec& x) -> Vec { const double c = std::tanh(w.dot(x)); return (1.0 - c * c) * w; }};
}

inline Vec default_test_weights(int n) {
  Vec w(n);
  for (int i = 0; i < n; ++i) w[i] = 1.0 / (1.0 + i);
  return w;
}

inline PathFunctional terminal_functional(const ModelSpec& m, const PolicyParams& pp, const TimeGrid& grid,
                                          Measure measure, const TerminalTest& T) {
  const ModelSpec* mp = &m;
  return {[mp, pp, grid, measure, T](const NoiseGrid& ng) -> Vec {
            Vec v(1);
            v[0] = T.f(simulate_forward(*mp, pp, ng, grid, measure).x.col(grid.n_steps));
            return v;
          },
          PathFunctional::Cost::full};
}

// ------------------------------------------------------ dualities

struct IbpReport {
  std::string kind;  // W, B or N
  int M = 0;
  double lhs = 0.0, rhs = 0.0, residual = 0.0, se = 0.0;
  bool pass = false;
};

namespace detail {

inline IbpReport ibp_report(const std::string& kind, const Vec& lhs, const Vec& rhs) {
  IbpReport R;
  R.kind = kind;
  R.M = int(lhs.size());
  R.lhs = lhs.mean();
  R.rhs = rhs.mean();
  const MeanSe d = mean_se(Vec(lhs - rhs));
  R.residual = d.mean;
  R.se = d.se;
  R.pass = std::abs(d.mean) <= 3.0 * d.se;
  return R;
}

}  // namespace detail

/// Adapted test weights read off the base path; column k only uses
/// information before cell k.
inline Mat adapted_weights_W(const ForwardPath& P, int n_W) {
  const int N = P.n_steps(), n = int(P.x.rows());
  Mat phi(n_W, N);
  for (int k = 0; k < N; ++k)
    for (int i = 0; i < n_W; ++i) phi(i, k) = std::cos(P.x(i % n, k) + 0.3 * i);
  return phi;
}

inline Mat adapted_weights_B(const ForwardPath& P) {
  const int N = P.n_steps(), d = int(P.Y.rows());
  Mat phi(d, N);
  for (int k = 0; k < N; ++k)
    for (int j = 0; j < d; ++j) phi(j, k) = 0.5 + std::tanh(P.Y(j, k));
  return phi;
}

inline Mat adapted_weights_N(const ForwardPath& P, int K) {
  const int N = P.n_steps(), n = int(P.x.rows());
  Mat psi(K, N);
  for (int k = 0; k < N; ++k)
    for (int q = 0; q < K; ++q) psi(q, k) = 1.0 + 0.5 * std::tanh(P.x(q % n, k));
  return psi;
}

/// E[F sum_k phi_k . dW_k] against E[sum_k dt phi_k . D^W_k F] for
/// F = f(x_T) under Q. The right side is a directional derivative along
/// the frozen weights.
inline IbpReport malliavin_duality_W(const ModelSpec& m, const PolicyParams& pp, const TimeGrid& grid,
                                     const std::vector<NoiseGrid>& noise, const TerminalTest& T) {
  const int M = int(noise.size()), N = grid.n_steps;
  const double dt = grid.dt(), h = default_bump(grid);
  const Measure Q = Measure::Q_u_with_B_as_BM;
  Vec lhs(M), rhs(M);
  parallel_for(M, [&](int i) {
    const ForwardPath P = simulate_forward(m, pp, noise[i], grid, Q);
    const Mat phi = adapted_weights_W(P, m.n_W);
    NoiseGrid a = noise[i], b = noise[i];
    a.dW += h * phi;
    b.dW -= h * phi;
    const double fa = T.f(simulate_forward(m, pp, a, grid, Q).x.col(N));
    const double fb = T.f(simulate_forward(m, pp, b, grid, Q).x.col(N));
    lhs[i] = T.f(P.x.col(N)) * (phi.array() * noise[i].dW.array()).sum();
    rhs[i] = dt * (fa - fb) / (2.0 * h);
    if (!std::isfinite(rhs[i])) throw NumericalAbort("malliavin_duality_W: non-finite difference", -1);
  });
  return detail::ibp_report("W", lhs, rhs);
}

inline IbpReport malliavin_duality_B(const ModelSpec& m, const PolicyParams& pp, const TimeGrid& grid,
                                     const std::vector<NoiseGrid>& noise, const TerminalTest& T) {
  const int M = int(noise.size()), N = grid.n_steps;
  const double dt = grid.dt(), h = default_bump(grid);
  const Measure Q = Measure::Q_u_with_B_as_BM;
  Vec lhs(M), rhs(M);
  parallel_for(M, [&](int i) {
    const ForwardPath P = simulate_forward(m, pp, noise[i], grid, Q);
    const Mat phi = adapted_weights_B(P);
    NoiseGrid a = noise[i], b = noise[i];
    a.dB += h * phi;
    b.dB -= h * phi;
    const double fa = T.f(simulate_forward(m, pp, a, grid, Q).x.col(N));
    const double fb = T.f(simulate_forward(m, pp, b, grid, Q).x.col(N));
    lhs[i] = T.f(P.x.col(N)) * (phi.array() * noise[i].dB.array()).sum();
    rhs[i] = dt * (fa - fb) / (2.0 * h);
    if (!std::isfinite(rhs[i])) throw NumericalAbort("malliavin_duality_B: non-finite difference", -1);
  });
  return detail::ibp_report("B", lhs, rhs);
}

/// E[F sum psi dN~] against E[sum_k sum_q pi_q dt psi (F(N + delta) - F)],
/// one jump added at each cell midpoint and mark.
inline IbpReport malliavin_duality_N(const ModelSpec& m, const PolicyParams& pp, const TimeGrid& grid,
                                     const std::vector<NoiseGrid>& noise, const TerminalTest& T) {
  require(m.K() > 0, "malliavin_duality_N: model has no jump marks");
  const int M = int(noise.size()), N = grid.n_steps, Km = m.K();
  const double dt = grid.dt();
  const Measure Q = Measure::Q_u_with_B_as_BM;
  Vec lhs(M), rhs(M);
  parallel_for(M, [&](int i) {
    const ForwardPath P = simulate_forward(m, pp, noise[i], grid, Q);
    const Mat psi = adapted_weights_N(P, Km);
    const double f0 = T.f(P.x.col(N));
    double l = 0.0, r = 0.0;
    for (int k = 0; k < N; ++k)
      for (int q = 0; q < Km; ++q) {
        l += psi(q, k) * compensated(noise[i], q, k, m.weights[q], dt);
        const NoiseGrid a = apply_perturbation(noise[i], NoisePerturbation::jump(grid.t(k) + 0.5 * dt, q), grid);
        const double fa = T.f(simulate_forward_from(m, pp, a, grid, Q, P, k).x.col(N));
        r += m.weights[q] * dt * psi(q, k) * (fa - f0);
      }
    lhs[i] = f0 * l;
    rhs[i] = r;
    if (!std::isfinite(r)) throw NumericalAbort("malliavin_duality_N: non-finite difference", -1);
  });
  return detail::ibp_report("N", lhs, rhs);
}

/// Largest |D_k x_j| over cells k >= j (W, B and jump slots) on a few
/// paths; zero for an adapted state.
inline double adaptedness_defect(const ModelSpec& m, const PolicyParams& pp, const TimeGrid& grid,
                                 const std::vector<NoiseGrid>& noise, const std::vector<int>& steps) {
  const int N = grid.n_steps;
  const double h = default_bump(grid), dt = grid.dt();
  const Measure Q = Measure::Q_u_with_B_as_BM;
  double worst = 0.0;
  for (const NoiseGrid& ng : noise) {
    const ForwardPath P = simulate_forward(m, pp, ng, grid, Q);
    for (int j : steps) {
      require(j >= 0 && j <= N, "adaptedness_defect: step out of range");
      for (int k = j; k < N; ++k) {
        auto diff = [&](const NoiseGrid& a) {
          return (simulate_forward_from(m, pp, a, grid, Q, P, k).x.col(j) - P.x.col(j)).lpNorm<Eigen::Infinity>();
        };
        for (int i = 0; i < m.n_W; ++i)
          worst = std::max(worst, diff(apply_perturbation(ng, NoisePerturbation::W(k, i, h), grid)) / h);
        for (int q = 0; q < m.d; ++q)
          worst = std::max(worst, diff(apply_perturbation(ng, NoisePerturbation::B(k, q, h), grid)) / h);
        for (int q = 0; q < m.K(); ++q)
          worst = std::max(worst, diff(apply_perturbation(ng, NoisePerturbation::jump(grid.t(k) + 0.5 * dt, q), grid)));
      }
    }
  }
  return worst;
}

/// Relative gap between D f(x_T) and grad f(x_T) . D x_T over W and B
/// slots of the given cells.
inline double chain_rule_defect(const ModelSpec& m, const PolicyParams& pp, const TimeGrid& grid,
                                const std::vector<NoiseGrid>& noise, const TerminalTest& T,
                                const std::vector<int>& cells) {
  const int N = grid.n_steps;
  const double h = default_bump(grid);
  const Measure Q = Measure::Q_u_with_B_as_BM;
  const PathFunctional X = state_functional(m, pp, grid, Q, N);
  const PathFunctional Fv = terminal_functional(m, pp, grid, Q, T);
  double worst = 0.0;
  for (const NoiseGrid& ng : noise) {
    const Vec g = T.grad(simulate_forward(m, pp, ng, grid, Q).x.col(N));
    for (int k : cells) {
      auto gap = [&](const Vec& DF, const Vec& DX) {
        const double lhs = DF[0], rhs = g.dot(DX);
        return std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-3});
      };
      for (int i = 0; i < m.n_W; ++i)
        worst = std::max(worst, gap(malliavin_W(Fv, ng, grid, k, i, h), malliavin_W(X, ng, grid, k, i, h)));
      for (int j = 0; j < m.d; ++j)
        worst = std::max(worst, gap(malliavin_B(Fv, ng, grid, k, j, h), malliavin_B(X, ng, grid, k, j, h)));
    }
  }
  return worst;
}

// -------------------------------------------- Malliavin representation

struct MalliavinOptions {
  double bump_rel = 1e-4;            // h = bump_rel sqrt(dt)
  long long budget = 200'000'000;    // resimulated forward steps
  int psi_paths = 16;                // paths carrying explicit Psi at knot starts
};

/// Per-path pieces; matrices are n x N unless noted.
struct MalliavinPath {
  Mat Pi;       // n x (N+1), Pi_N = 0
  Vec aleph;    // N+1
  Mat gradH;    // column 0 unused
  Mat W;        // W_s = sum_{r>s} dt Phi(r, s+1)* gradH_r
  Mat Mv;       // M_s = Pi_s + S* W_s
  Mat DBaleph;  // d x N
  Mat bracket;  // p x N
  long long resim = 0;
};

struct MalliavinSmpBundle {
  std::vector<MalliavinPath> paths;
  std::vector<int> knot_steps;
  std::vector<std::vector<Mat>> Psi;  // [path][knot], column r holds S* Phi(r, s+1)* gradH_r
  double m_consistency = 0.0;         // max relative |M_s - Pi_s - sum_r dt Psi(r, s)|
  long long resim_steps = 0;
  bool used_W = false, used_B_pi = false, used_B_aleph = false, used_N = false, nested = false;
  SmpGradient grad;
};

namespace detail {

struct MalliavinCtx {
  const HatBundle* H;
  MalliavinOptions o;
  double h;
  Vec sg;
};

struct PathAdjointBase {
  BsdeSolution s;
  Mat ell;
};

inline Vec lx_bar(const ModelSpec& m, double t, const ForwardPath& P, const BsdeSolution& s, int k) {
  const Mat Z = s.Z(k, m.n_W), R = s.R(k, m.d);
  Vec a = Vec::Zero(m.n());
  for (const auto& nd : m.mark_nodes())
    a += nd.w * m.L_jac(t, P.x.col(k), P.u.col(k), s.y.col(k), Z, R, s.gam(k, nd.m, m.D), nd.m).x;
  return a;
}

/// Pi_r = S*(a_{r+1} + Pi_{r+1}) with a_N = phi_x - f_x* ell_N and
/// a_k = dt sum pi L_x.
inline Vec pi_at(const ModelSpec& m, const ForwardPath& P, const BsdeSolution& s, const Mat& ell,
                 const TimeGrid& grid, const Vec& sg, int r) {
  const int N = grid.n_steps;
  if (r >= N) return Vec::Zero(m.n());
  const Vec xT = P.x.col(N);
  Vec pi = sg.cwiseProduct(Vec(m.phi_x(xT) - m.f_x(xT).transpose() * ell.col(N)));
  for (int k = N - 2; k >= r; --k) pi = sg.cwiseProduct(Vec(grid.dt() * lx_bar(m, grid.t(k + 1), P, s, k + 1) + pi));
  return pi;
}

inline double aleph_at(const ModelSpec& m, const ForwardPath& P, const BsdeSolution& s, const TimeGrid& grid,
                       int r) {
  double a = m.phi(P.x.col(grid.n_steps));
  for (int k = r; k < grid.n_steps; ++k)
    a += grid.dt() * running_cost(m, grid.t(k), P.x.col(k), P.u.col(k), s.y.col(k), s.Z(k, m.n_W), s.R(k, m.d), s, k);
  return a;
}

struct Perturbed {
  Vec pi;
  double aleph = 0.0;
};

/// Pi_r and aleph_r after re-running the path from cell r on ngb.
inline Perturbed perturbed_at(const MalliavinCtx& c, const ForwardPath& P, const PathAdjointBase& b,
                              const NoiseGrid& ngb, int r, bool need_pi, long long& cnt) {
  const HatBundle& H = *c.H;
  const ModelSpec& m = H.m();
  const TimeGrid& grid = H.grid();
  const ForwardPath Pb = simulate_forward_from(m, H.pp, ngb, grid, Measure::Q_u_with_B_as_BM, P, r);
  BsdeSolution sb = b.s;
  eval_bsde_into(m, H.B.coeffs, Pb, grid, sb, r + 1);
  cnt += grid.n_steps - r;
  Perturbed out;
  out.aleph = aleph_at(m, Pb, sb, grid, r);
  if (need_pi) {
    const Mat lb = ell_path_from(m, Pb, ngb, sb, b.ell, grid, r);
    out.pi = pi_at(m, Pb, sb, lb, grid, c.sg, r);
  }
  return out;
}

inline bool nonzero(const Mat& a) { return a.size() > 0 && a.cwiseAbs().maxCoeff() > 0.0; }

struct SlotUse {
  std::vector<int> W, B_pi, B_aleph, N;
  bool nested = false;
};

inline SlotUse slot_use(const ModelSpec& m, const StepJac& J) {
  SlotUse u;
  for (int i = 0; i < int(J.K.size()); ++i)
    if (nonzero(J.K[i])) u.W.push_back(i);
  for (int j = 0; j < m.d; ++j) {
    if (nonzero(J.G2x[j])) u.B_pi.push_back(j);
    if (nonzero(J.hx.row(j)) || nonzero(J.hu.row(j))) u.B_aleph.push_back(j);
  }
  for (int q = 0; q < m.K(); ++q)
    if (nonzero(J.Thx[q])) u.N.push_back(q);
  for (const auto& a : J.G1u) u.nested = u.nested || nonzero(a);
  for (const auto& a : J.G2u) u.nested = u.nested || nonzero(a);
  for (const auto& a : J.Thu) u.nested = u.nested || nonzero(a);
  return u;
}

/// (I + O dt + sum K dW + sum E dBhat + sum T dN~)* (S w) at step k.
inline Vec flow_adjoint_step(const ModelSpec& m, const StepJac& J, const ForwardPath& P, const NoiseGrid& ng,
                             const Vec& sg, const Vec& w, int k, double dt) {
  const Vec sw = sg.cwiseProduct(w);
  Vec out = sw + dt * (J.O.transpose() * sw);
  for (int i = 0; i < int(J.K.size()); ++i)
    if (ng.dW(i, k) != 0.0) out += ng.dW(i, k) * (J.K[i].transpose() * sw);
  for (int j = 0; j < m.d; ++j) out += P.dBhat(j, k) * (J.G2x[j].transpose() * sw);
  for (int q = 0; q < m.K(); ++q) {
    const double cm = compensated(ng, q, k, m.weights[q], dt);
    if (cm != 0.0) out += cm * (J.Thx[q].transpose() * sw);
  }
  return out;
}

struct UseFlags {
  bool W = false, B_pi = false, B_aleph = false, N = false, nested = false;
};

/// Pi, aleph, gradH, W and M on a path for steps >= r0; with
/// `top` the bracket is formed as well, nesting one level for the
/// control-dependent noise terms.
inline MalliavinPath adjoint_path(const MalliavinCtx& c, const NoiseGrid& ng, const ForwardPath& P, int r0,
                                  bool top, UseFlags& used) {
  const HatBundle& H = *c.H;
  const ModelSpec& m = H.m();
  const TimeGrid& grid = H.grid();
  const int N = grid.n_steps, n = m.n(), d = m.d;
  const double dt = grid.dt(), h = c.h;
  PathAdjointBase b;
  b.s = eval_bsde(m, H.B.coeffs, P, grid);
  b.ell = ell_path(m, P, ng, b.s, H.B.y0, grid);
  MalliavinPath out;
  out.Pi = Mat::Zero(n, N + 1);
  {
    const Vec xT = P.x.col(N);
    Vec pi = m.phi_x(xT) - m.f_x(xT).transpose() * b.ell.col(N);
    out.Pi.col(N - 1) = c.sg.cwiseProduct(pi);
    for (int k = N - 2; k >= 0; --k)
      out.Pi.col(k) = c.sg.cwiseProduct(Vec(dt * lx_bar(m, grid.t(k + 1), P, b.s, k + 1) + out.Pi.col(k + 1)));
  }
  out.aleph = Vec::Zero(N + 1);
  out.aleph[N] = m.phi(P.x.col(N));
  for (int k = N - 1; k >= 0; --k)
    out.aleph[k] = out.aleph[k + 1] + dt * running_cost(m, grid.t(k), P.x.col(k), P.u.col(k), b.s.y.col(k),
                                                        b.s.Z(k, m.n_W), b.s.R(k, d), b.s, k);
  out.gradH = Mat::Zero(n, N);
  out.DBaleph = Mat::Zero(d, N);
  std::vector<StepJac> Js(N);
  std::vector<SlotUse> uses(N);
  for (int r = r0; r < N; ++r) {
    const double t = grid.t(r);
    Js[r] = step_jacobians(m, t, P.x.col(r), P.u.col(r));
    const StepJac& J = Js[r];
    uses[r] = slot_use(m, J);
    const SlotUse& U = uses[r];
    Vec gH = J.O.transpose() * out.Pi.col(r);
    for (int i : U.W) {
      used.W = true;
      const Perturbed a = perturbed_at(c, P, b, apply_perturbation(ng, NoisePerturbation::W(r, i, h), grid), r, true, out.resim);
      const Perturbed z = perturbed_at(c, P, b, apply_perturbation(ng, NoisePerturbation::W(r, i, -h), grid), r, true, out.resim);
      gH += J.K[i].transpose() * detail::checked((a.pi - z.pi) / (2.0 * h), "malliavin_W", r);
    }
    for (int j = 0; j < d; ++j) {
      const bool np = std::find(U.B_pi.begin(), U.B_pi.end(), j) != U.B_pi.end();
      const bool na = std::find(U.B_aleph.begin(), U.B_aleph.end(), j) != U.B_aleph.end();
      if (!np && !na) continue;
      used.B_pi = used.B_pi || np;
      used.B_aleph = used.B_aleph || na;
      const Perturbed a = perturbed_at(c, P, b, apply_perturbation(ng, NoisePerturbation::B(r, j, h), grid), r, np, out.resim);
      const Perturbed z = perturbed_at(c, P, b, apply_perturbation(ng, NoisePerturbation::B(r, j, -h), grid), r, np, out.resim);
      if (np) gH += J.G2x[j].transpose() * detail::checked((a.pi - z.pi) / (2.0 * h), "malliavin_B", r);
      if (na) {
        const double da = (a.aleph - z.aleph) / (2.0 * h);
        if (!std::isfinite(da)) throw NumericalAbort("malliavin_B: non-finite difference", r);
        out.DBaleph(j, r) = da;
        gH += J.hx.row(j).transpose() * da;
      }
    }
    for (int q : U.N) {
      used.N = true;
      const NoiseGrid a = apply_perturbation(ng, NoisePerturbation::jump(grid.t(r) + 0.5 * dt, q), grid);
      const Perturbed pa = perturbed_at(c, P, b, a, r, true, out.resim);
      gH += m.weights[q] * (J.Thx[q].transpose() * detail::checked(Vec(pa.pi - out.Pi.col(r)), "malliavin_N", r));
    }
    const Mat Z = b.s.Z(r, m.n_W), R = b.s.R(r, d);
    for (const auto& nd : m.mark_nodes())
      gH -= nd.w * (m.g_jac(t, P.x.col(r), P.u.col(r), b.s.y.col(r), Z, R, b.s.gam(r, nd.m, m.D), nd.m).x.transpose() *
                    b.ell.col(r));
    out.gradH.col(r) = gH;
  }
  out.W = Mat::Zero(n, N);
  for (int s = N - 2; s >= r0; --s)
    out.W.col(s) = dt * out.gradH.col(s + 1) + flow_adjoint_step(m, Js[s + 1], P, ng, c.sg, out.W.col(s + 1), s + 1, dt);
  out.Mv = Mat::Zero(n, N);
  for (int s = r0; s < N; ++s) out.Mv.col(s) = out.Pi.col(s) + c.sg.cwiseProduct(Vec(out.W.col(s)));
  if (!top) return out;
  out.bracket = Mat::Zero(m.p, N);
  for (int s = r0; s < N; ++s) {
    const double t = grid.t(s);
    const StepJac& J = Js[s];
    Vec bm = J.R.transpose() * out.Mv.col(s) + J.hu.transpose() * out.DBaleph.col(s);
    const Mat Z = b.s.Z(s, m.n_W), R = b.s.R(s, d);
    for (const auto& nd : m.mark_nodes()) {
      const Vec gm = b.s.gam(s, nd.m, m.D);
      bm += nd.w * (m.L_jac(t, P.x.col(s), P.u.col(s), b.s.y.col(s), Z, R, gm, nd.m).u -
                    m.g_jac(t, P.x.col(s), P.u.col(s), b.s.y.col(s), Z, R, gm, nd.m).u.transpose() * b.ell.col(s));
    }
    if (uses[s].nested) {
      used.nested = true;
      UseFlags inner;
      auto M_on = [&](const NoiseGrid& a) {
        const ForwardPath Pa = simulate_forward_from(m, H.pp, a, grid, Measure::Q_u_with_B_as_BM, P, s);
        out.resim += N - s;
        MalliavinPath q = adjoint_path(c, a, Pa, s, false, inner);
        out.resim += q.resim;
        return Vec(q.Mv.col(s));
      };
      for (int c1 = 0; c1 < int(J.G1u.size()); ++c1) {
        if (!nonzero(J.G1u[c1])) continue;
        for (int i = 0; i < m.n_W; ++i) {
          if (!nonzero(J.G1u[c1].col(i))) continue;
          const Vec D = (M_on(apply_perturbation(ng, NoisePerturbation::W(s, i, h), grid)) -
                         M_on(apply_perturbation(ng, NoisePerturbation::W(s, i, -h), grid))) / (2.0 * h);
          bm[c1] += J.G1u[c1].col(i).dot(detail::checked(D, "malliavin_W", s));
        }
      }
      for (int j = 0; j < d; ++j) {
        if (!nonzero(J.G2u[j])) continue;
        const Vec D = (M_on(apply_perturbation(ng, NoisePerturbation::B(s, j, h), grid)) -
                       M_on(apply_perturbation(ng, NoisePerturbation::B(s, j, -h), grid))) / (2.0 * h);
        bm += J.G2u[j].transpose() * detail::checked(D, "malliavin_B", s);
      }
      for (int q = 0; q < m.K(); ++q) {
        if (!nonzero(J.Thu[q])) continue;
        const Vec D = M_on(apply_perturbation(ng, NoisePerturbation::jump(t + 0.5 * dt, q), grid)) - out.Mv.col(s);
        bm += m.weights[q] * (J.Thu[q].transpose() * detail::checked(D, "malliavin_N", s));
      }
    }
    out.bracket.col(s) = bm;
  }
  return out;
}

/// Resimulated steps for one path with the slot pattern of path 0.
inline long long estimate_resim(const MalliavinCtx& c) {
  const HatBundle& H = *c.H;
  const ModelSpec& m = H.m();
  const TimeGrid& grid = H.grid();
  const ForwardPath& P = H.E.paths[0];
  const int N = grid.n_steps;
  std::vector<long long> inner(N + 1, 0);  // cost of one adjoint_path from r0 without nesting
  std::vector<long long> per(N, 0);
  std::vector<bool> nest(N, false);
  for (int r = 0; r < N; ++r) {
    const SlotUse U = slot_use(m, step_jacobians(m, grid.t(r), P.x.col(r), P.u.col(r)));
    std::vector<int> B = U.B_pi;
    for (int j : U.B_aleph)
      if (std::find(B.begin(), B.end(), j) == B.end()) B.push_back(j);
    per[r] = (2LL * (U.W.size() + B.size()) + U.N.size()) * (N - r);
    nest[r] = U.nested;
  }
  for (int r = N - 1; r >= 0; --r) inner[r] = inner[r + 1] + per[r];
  long long total = inner[0];
  for (int s = 0; s < N; ++s)
    if (nest[s]) {
      long long slots = 0;
      const StepJac J = step_jacobians(m, grid.t(s), P.x.col(s), P.u.col(s));
      for (const auto& a : J.G1u)
        for (int i = 0; i < a.cols(); ++i) slots += nonzero(a.col(i)) ? 2 : 0;
      for (const auto& a : J.G2u) slots += nonzero(a) ? 2 : 0;
      for (const auto& a : J.Thu) slots += nonzero(a) ? 1 : 0;
      total += slots * (inner[s] + N - s);
    }
  return total;
}

}  // namespace detail

/// Malliavin form of the gradient bracket on every hat path:
///   b^M_s = R* M_s + sum (G1_u v)* D^W M_s + G2_u* D^B M_s
///           + sum pi Theta_u* D^N M_s + h_u* D^B aleph_s + sum pi (L_u - g_u* ell_s),
/// projected onto the policy directions. Noise slots whose coefficient
/// vanishes are skipped. Throws when the resimulation estimate exceeds
/// the budget.
inline MalliavinSmpBundle assemble_malliavin_smp(const HatBundle& H, const MalliavinOptions& o = {}) {
  require(H.E.measure == Measure::Q_u_with_B_as_BM, "assemble_malliavin_smp: needs a Q ensemble");
  const ModelSpec& m = H.m();
  const TimeGrid& grid = H.grid();
  const int M = H.M(), N = grid.n_steps, n = m.n();
  const double dt = grid.dt();
  detail::MalliavinCtx c{&H, o, default_bump(grid, o.bump_rel), m.space.semigroup_diag(dt)};
  const long long est = detail::estimate_resim(c) * M;
  if (est > o.budget)
    throw NumericalAbort("resimulation budget exceeded: about " + std::to_string(est) + " steps against " +
                             std::to_string(o.budget) + "; reduce knots or M",
                         -1);
  MalliavinSmpBundle out;
  out.paths.resize(M);
  std::vector<detail::UseFlags> flags(M);
  parallel_for(M, [&](int i) { out.paths[i] = detail::adjoint_path(c, H.E.noise[i], H.E.paths[i], 0, true, flags[i]); });
  for (int i = 0; i < M; ++i) {
    out.resim_steps += out.paths[i].resim;
    out.used_W = out.used_W || flags[i].W;
    out.used_B_pi = out.used_B_pi || flags[i].B_pi;
    out.used_B_aleph = out.used_B_aleph || flags[i].B_aleph;
    out.used_N = out.used_N || flags[i].N;
    out.nested = out.nested || flags[i].nested;
  }
  for (int kn = 0; kn < H.pp.n_knots; ++kn) {
    int s = 0;
    while (s < N && H.pp.knot_of_step(s, N) != kn) ++s;
    out.knot_steps.push_back(s);
  }
  const int np = std::min(o.psi_paths, M);
  out.Psi.assign(np, {});
  for (int i = 0; i < np; ++i) {
    const MalliavinPath& mp = out.paths[i];
    for (int s : out.knot_steps) {
      Mat Psi = Mat::Zero(n, N);
      Vec acc = mp.Pi.col(s);
      if (s + 1 < N) {
        const FlowOperatorPath F = simulate_flow(m, H.E.paths[i], H.E.noise[i], grid, s + 1);
        for (int r = s + 1; r < N; ++r) {
          Psi.col(r) = c.sg.cwiseProduct(Vec(F.ops[r].transpose() * mp.gradH.col(r)));
          acc += dt * Psi.col(r);
        }
      }
      const double scale = std::max(mp.Mv.col(s).norm(), 1e-300);
      out.m_consistency = std::max(out.m_consistency, (mp.Mv.col(s) - acc).norm() / std::max(scale, 1.0));
      out.Psi[i].push_back(std::move(Psi));
    }
  }
  std::vector<Mat> br(M);
  for (int i = 0; i < M; ++i) br[i] = out.paths[i].bracket;
  out.grad = project_bracket(H.pp, m, H.E, std::move(br));
  return out;
}

/// Stationarity in the policy class from the Malliavin bracket. The
/// per-path samples carry no regression constants, so their SE is used
/// directly.
inline SmpGradient malliavin_stationarity(const MalliavinSmpBundle& B) { return B.grad; }

}  // namespace spdc
