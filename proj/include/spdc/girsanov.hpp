#pragma once

#include "spdc/backward.hpp"

namespace spdc {

struct DensityPath {
  Vec rho;
  Vec log_rho;
};

/// log rho_{k+1} = log rho_k + h_k . dY_k - |h_k|^2 dt / 2.
inline DensityPath density_path(const Mat& hval, const Mat& dY, double dt) {
  require(hval.rows() == dY.rows() && hval.cols() == dY.cols(), "density_path: shape mismatch");
  const int N = int(dY.cols());
  DensityPath D;
  D.log_rho = Vec::Zero(N + 1);
  for (int k = 0; k < N; ++k)
    D.log_rho[k + 1] = D.log_rho[k] + hval.col(k).dot(dY.col(k)) - 0.5 * hval.col(k).squaredNorm() * dt;
  D.rho = D.log_rho.array().exp();
  return D;
}

inline DensityPath density_path(const ForwardPath& P, const TimeGrid& grid) {
  return density_path(P.hval, P.dY, grid.dt());
}

/// Lambda_{k+1} = Lambda_k + (h_x x1 + h_u v) . dB-hat.
inline Vec variation_lambda(const ModelSpec& m, const ForwardPath& hat, const Mat& x1, const Mat& v,
                            const TimeGrid& grid) {
  const int N = grid.n_steps;
  Vec L = Vec::Zero(N + 1);
  for (int k = 0; k < N; ++k) {
    const double t = grid.t(k);
    const Vec x = hat.x.col(k), u = hat.u.col(k);
    L[k + 1] = L[k] + (m.h_x(t, x, u) * x1.col(k) + m.h_u(t, x, u) * v.col(k)).dot(hat.dBhat.col(k));
  }
  return L;
}

enum class MeasureForm { Q_form, P_form };

inline std::string to_string(MeasureForm f) { return f == MeasureForm::Q_form ? "Q_form" : "P_form"; }

struct CostReport {
  double J = 0.0, se = 0.0;
  double running = 0.0, terminal = 0.0, recursive = 0.0;
  MeasureForm form = MeasureForm::Q_form;
  Vec samples;  // per-path contributions, mean equals J
};

/// Per-path cost with density weights exp(log rho^u - log ref):
///   sum_k dt w_k sum_m pi_m L_k + w_N phi(x_N).
/// With paths sampled under Q^u the weights are 1 (Q form); with paths
/// sampled under P they are rho^u (P form).
inline CostReport compute_cost(const ModelSpec& m, const Ensemble& E, const BsdeResult& B, MeasureForm form) {
  const int M = E.size(), N = E.grid.n_steps;
  require(int(B.sol.size()) == M, "compute_cost: BSDE solution missing for the ensemble");
  if (form == MeasureForm::Q_form)
    for (const auto& P : E.paths)
      require((P.log_rho - P.log_ref).lpNorm<Eigen::Infinity>() == 0.0,
              "compute_cost: Q form needs paths sampled under Q^u");
  const double dt = E.grid.dt();
  CostReport R;
  R.form = form;
  Vec run(M), term(M);
  parallel_for(M, [&](int i) {
    const ForwardPath& P = E.paths[i];
    const Vec L = running_cost_path(m, P, B.sol[i], E.grid);
    double a = 0.0;
    for (int k = 0; k < N; ++k) a += dt * std::exp(P.log_rho[k] - P.log_ref[k]) * L[k];
    run[i] = a;
    term[i] = std::exp(P.log_rho[N] - P.log_ref[N]) * m.phi(P.x.col(N));
  });
  R.running = run.mean();
  R.terminal = term.mean();
  R.recursive = m.psi(B.y0);
  // linearised psi(y0) for the error bar
  const Vec dpsi = m.psi_y(B.y0);
  R.samples.resize(M);
  for (int i = 0; i < M; ++i)
    R.samples[i] = run[i] + term[i] + dpsi.dot(B.y0_samples.col(i) - B.y0) + R.recursive;
  R.J = R.running + R.terminal + R.recursive;
  R.se = mean_se(R.samples).se;
  return R;
}

/// Mean and SE of rho_T over an ensemble sampled under P.
inline MeanSe density_martingale_check(const Ensemble& E) {
  std::vector<double> v;
  v.reserve(E.size());
  const int N = E.grid.n_steps;
  for (const auto& P : E.paths) v.push_back(std::exp(P.log_rho[N] - P.log_ref[N]));
  return mean_se(v);
}

}  // namespace spdc
