#include <gtest/gtest.h>

#include "spdc/girsanov.hpp"
#include "spdc/models.hpp"

#include <unsupported/Eigen/MatrixFunctions>

using namespace spdc;

namespace {

JumpMeasureSpec marks2() { return {{0.3, 0.7}, {0.6, 0.4}}; }

AffineModelParams noisy_params(int n, int nW, const JumpMeasureSpec& jm) {
  AffineModelParams P;
  P.zero(build_spectral_space(n, 1.0, BasisKind::neumann_cosine), nW, 1, 1, jm);
  for (int i = 0; i < std::min(n, nW); ++i) P.c1(i, i) = 0.4;
  P.b2(0, 0) = 0.3;
  for (int q = 0; q < jm.K(); ++q) P.t3(0, q) = 0.2;
  P.H(0, 0) = 0.8;
  P.x0 = Vec::LinSpaced(n, 1.0, 0.0);
  P.fx = Vec::LinSpaced(n, 1.0, 0.5);
  return P;
}

RegressionBasis linear_basis() {
  RegressionBasis b;
  b.kind = RegressionKind::mode_linear;
  return b;
}

}  // namespace

TEST(Regression, NormalEquations) {
  std::srand(1);
  const Mat X = Mat::Random(400, 6);
  Mat Phi(400, 7);
  Phi << Mat::Ones(400, 1), X;
  const Mat T = Mat::Random(400, 3);
  const auto fit = ridge_fit(Phi, T, 0.0);
  EXPECT_LE((Phi.transpose() * (T - Phi * fit.beta)).cwiseAbs().maxCoeff(), 1e-10);
  Phi.col(3).setConstant(1.0);
  const auto f2 = ridge_fit(Phi, T, 1e-8);
  EXPECT_EQ(f2.beta.row(3).norm(), 0.0);
  Phi.col(4) = Phi.col(2);
  EXPECT_THROW(ridge_fit(Phi, T, 0.0), NumericalAbort);
  RegressionBasis q;
  q.kind = RegressionKind::mode_quadratic;
  q.quad_modes = 3;
  EXPECT_EQ(q.count(5), 1 + 5 + 6);
  EXPECT_EQ(q.features(Vec::LinSpaced(5, 1, 5))[6], 1.0);
}

TEST(Bsde, MartingaleCase) {
  auto P = noisy_params(4, 2, marks2());
  auto m = make_affine_model(P);
  auto g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  const int M = 4000;
  auto E = simulate_ensemble(m, pp, g, M, 3, Measure::P_with_Y_as_BM);
  auto B = solve_bsde(m, E, linear_basis());
  std::vector<double> fT;
  for (auto& p : E.paths) fT.push_back(m.f(p.x.col(16))[0]);
  const auto s = mean_se(fT);
  EXPECT_LE(std::abs(B.y0[0] - s.mean), 3.0 * s.se);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(B.sol[i].y(0, 16), fT[i]);
  // martingale residual of the representation, on held-out paths
  auto H = simulate_ensemble(m, pp, g, M, 4, Measure::P_with_Y_as_BM);
  std::vector<BsdeSolution> hs(M);
  for (int i = 0; i < M; ++i) hs[i] = eval_bsde(m, B.coeffs, H.paths[i], g);
  for (int k = 0; k < 16; ++k) {
    std::vector<double> res;
    for (int i = 0; i < M; ++i) {
      const auto& so = hs[i];
      double r = so.y(0, k + 1) - so.y(0, k);
      for (int a = 0; a < 2; ++a) r -= so.z(a, k) * H.noise[i].dW(a, k);
      r -= so.r(0, k) * H.paths[i].dM(0, k);
      for (int q = 0; q < 2; ++q) r -= so.gamma(q, k) * compensated(H.noise[i], q, k, m.weights[q], g.dt());
      res.push_back(r);
    }
    const auto ms = mean_se(res);
    EXPECT_LE(std::abs(ms.mean), 4.0 * ms.se + 1e-12) << k;
  }
}

TEST(Bsde, DeterministicDegenerate) {
  AffineModelParams P;
  P.zero(build_spectral_space(3, 1.0, BasisKind::neumann_cosine), 2, 1, 1, JumpMeasureSpec{});
  P.x0 = Vec::Ones(3);
  P.fx = Vec::Ones(3);
  auto m = make_affine_model(P);
  auto g = make_time_grid(1.0, 8);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto E = simulate_ensemble(m, pp, g, 400, 1, Measure::P_with_Y_as_BM);
  auto B = solve_bsde(m, E, linear_basis());
  const double fT = m.f(E.paths[0].x.col(8))[0];
  for (const auto& s : B.sol) EXPECT_NEAR((s.y.array() - fT).abs().maxCoeff(), 0.0, 1e-12);
  // z is the sample covariance of a constant with dW: zero up to sampling error
  const double se = std::abs(fT) / std::sqrt(400 * g.dt());
  Mat zbar = Mat::Zero(2, 8);
  for (const auto& s : B.sol) zbar += s.z / 400.0;
  EXPECT_LE(zbar.cwiseAbs().maxCoeff(), 4.0 * se);
}

TEST(Bsde, LinearDriverDiscount) {
  auto P = noisy_params(4, 2, marks2());
  P.gy = -0.3;
  auto m = make_affine_model(P);
  auto g = make_time_grid(1.0, 32);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  const double disc = std::pow(1.0 + 0.3 / 32, -32);
  EXPECT_NEAR(disc, std::exp(-0.3), 2e-3);
  // the value is a conditional expectation under the reference measure, so
  // paths sampled under Q are weighted by 1/rho
  for (auto meas : {Measure::P_with_Y_as_BM, Measure::Q_u_with_B_as_BM}) {
    auto E = simulate_ensemble(m, pp, g, 4000, 4, meas);
    auto B = solve_bsde(m, E, linear_basis());
    std::vector<double> fT;
    for (auto& p : E.paths) fT.push_back(m.f(p.x.col(32))[0] * std::exp(-p.log_ref[32]));
    const auto s = mean_se(fT);
    EXPECT_LE(std::abs(B.y0[0] - disc * s.mean), 3.0 * disc * s.se) << to_string(meas);
    EXPECT_LE(B.max_picard_residual, 1e-6);
  }
}

TEST(Bsde, ComparisonMonotone) {
  auto P = noisy_params(3, 2, marks2());
  P.gy = -0.2;
  P.gz = Vec::Constant(2, 0.1);
  auto lo = make_affine_model(P);
  P.g0 = 0.5;
  auto hi = make_affine_model(P);
  auto g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto E = simulate_ensemble(lo, pp, g, 2000, 5, Measure::Q_u_with_B_as_BM);
  EXPECT_GE(solve_bsde(hi, E, linear_basis()).y0[0], solve_bsde(lo, E, linear_basis()).y0[0]);
}

TEST(Bsde, RejectsSmallEnsemble) {
  auto m = make_affine_model(noisy_params(4, 2, marks2()));
  auto g = make_time_grid(1.0, 4);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto E = simulate_ensemble(m, pp, g, 40, 1, Measure::Q_u_with_B_as_BM);
  EXPECT_THROW(solve_bsde(m, E, linear_basis()), std::invalid_argument);
}

TEST(Bsde, EvalReproducesFit) {
  auto P = noisy_params(4, 2, marks2());
  P.gy = -0.3;
  P.gr = Vec::Constant(1, 0.2);
  auto m = make_affine_model(P);
  auto g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto E = simulate_ensemble(m, pp, g, 2000, 6, Measure::Q_u_with_B_as_BM);
  auto B = solve_bsde(m, E, linear_basis());
  for (int i = 0; i < 3; ++i) {
    auto s = eval_bsde(m, B.coeffs, E.paths[i], g);
    EXPECT_LE((s.z - B.sol[i].z).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((s.y.leftCols(16) - B.sol[i].y.leftCols(16)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Ell, ZeroDynamics) {
  auto P = noisy_params(3, 2, marks2());
  P.H.setZero();
  P.psi2 = 0.0;
  P.psi1 = 1.0;
  auto m = make_affine_model(P);
  auto g = make_time_grid(1.0, 8);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto E = simulate_ensemble(m, pp, g, 400, 1, Measure::Q_u_with_B_as_BM);
  auto B = solve_bsde(m, E, linear_basis());
  auto L = solve_ell(m, E, B);
  for (const auto& l : L) EXPECT_EQ((l.array() + 1.0).abs().maxCoeff(), 0.0);
}

TEST(Aux, DeterministicIntegral) {
  auto P = noisy_params(3, 2, JumpMeasureSpec{{0.5}, {1.0}});
  auto m = make_affine_model(P);
  m.L = [](double, const Vec&, const Vec&, const Vec&, const Mat&, const Mat&, const Vec&, int) { return 1.0; };
  auto g = make_time_grid(1.0, 8);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto E = simulate_ensemble(m, pp, g, 400, 2, Measure::Q_u_with_B_as_BM);
  auto B = solve_bsde(m, E, linear_basis());
  auto A = solve_auxiliary_pq(m, E, B, linear_basis());
  for (int k = 0; k <= 8; ++k) EXPECT_NEAR(A.sol[7].p[k], 1.0 - g.t(k), 1e-6);
  // q's of a deterministic target vanish up to the sampling error of dW / dt
  Mat qbar = Mat::Zero(2, 8);
  for (const auto& a : A.sol) qbar += a.q1 / 400.0;
  EXPECT_LE(qbar.cwiseAbs().maxCoeff(), 4.0 / std::sqrt(400 * g.dt()));
}

TEST(Aux, LinearSensitivity) {
  LqParams lp;
  lp.dim_h = 3;
  lp.n_W = 2;
  lp.saturation = 1e6;
  auto s = build_spectral_space(3, 1.0, BasisKind::neumann_cosine);
  auto m = make_lq_model(lp, s, JumpMeasureSpec{});
  Vec c = Vec::LinSpaced(3, 1.0, -0.5);
  m.phi = [c](const Vec& x) { return c.dot(x); };
  m.L = [](double, const Vec&, const Vec&, const Vec&, const Mat&, const Mat&, const Vec&, int) { return 0.0; };
  auto g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto E = simulate_ensemble(m, pp, g, 8000, 7, Measure::Q_u_with_B_as_BM);
  auto B = solve_bsde(m, E, linear_basis());
  auto A = solve_auxiliary_pq(m, E, B, linear_basis());
  // with u constant the state is Gaussian and p_t = c' e^{(T-t)(A+Lin)} x_t + const,
  // so q2_t = c' e^{(T-t)(A+Lin)} G2 exactly.
  const Mat Ad = Mat((-s.eigenvalues).asDiagonal()) + m.F_x(0, m.x0, Vec::Zero(1));
  const Mat G2 = m.G2(0, m.x0, Vec::Zero(1));
  for (int k : {0, 8}) {
    const double tau = 1.0 - g.t(k);
    const Mat ex = (Ad * tau).exp();
    const double want = c.dot(ex * G2.col(0));
    std::vector<double> v, tgt;
    for (int i = 0; i < 8000; ++i) {
      v.push_back(A.sol[i].q2(0, k));
      tgt.push_back(m.phi(E.paths[i].x.col(16)) * E.paths[i].dBhat(0, k) / g.dt());
    }
    // the fitted mean equals the target mean; its error is the target's SE
    EXPECT_NEAR(mean_se(v).mean, want, 3.0 * mean_se(tgt).se) << k;
  }
}

TEST(Bspde, PureTransport) {
  auto P = noisy_params(4, 2, marks2());
  auto m = make_affine_model(P);
  auto g = make_time_grid(1.0, 8);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  const int M = 200;
  auto E = simulate_ensemble(m, pp, g, M, 8, Measure::Q_u_with_B_as_BM);
  BspdeProblem prob;
  const Vec eta = Vec::LinSpaced(4, 1.0, 2.0);
  prob.eta = eta.replicate(1, M);
  prob.state = [&E](int i, int k) { return bsde_state(E.paths[i], k); };
  prob.at = [](int, int) {
    BspdeStepData c;
    c.V = Mat::Zero(4, 4);
    c.K.assign(2, Mat::Zero(4, 4));
    c.E.assign(1, Mat::Zero(4, 4));
    c.T3.assign(2, Mat::Zero(4, 4));
    c.J = Vec::Zero(4);
    return c;
  };
  auto S = solve_singular_bspde(prob, m, E, linear_basis(), 2);
  for (int k = 0; k <= 8; ++k)
    EXPECT_LE((S.Z[5].col(k) - apply_semigroup(m.space, 1.0 - g.t(k), eta)).norm(), 1e-6);
  Mat qbar = Mat::Zero(4, 2);
  const Mat F = S.fitted(0);
  for (int i = 0; i < M; ++i) qbar += S.Q1(F, i) / M;
  EXPECT_LE(qbar.cwiseAbs().maxCoeff(), 4.0 * eta.norm() / std::sqrt(M * g.dt()));
  prob.eta.setZero();
  auto S0 = solve_singular_bspde(prob, m, E, linear_basis(), 2);
  EXPECT_EQ(trace_diagnostic(S0, g, 0.25).statistic, 0.0);
  EXPECT_EQ(S0.Z[3].norm(), 0.0);
  EXPECT_THROW(solve_singular_bspde(prob, m, E, linear_basis(), 3), std::invalid_argument);
}

TEST(Bspde, PEquationTerminal) {
  auto P = noisy_params(3, 2, marks2());
  P.fx.setZero();
  P.Phi = Mat::Identity(3, 3);
  auto m = make_affine_model(P);
  auto g = make_time_grid(1.0, 8);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto E = simulate_ensemble(m, pp, g, 400, 9, Measure::Q_u_with_B_as_BM);
  auto B = solve_bsde(m, E, linear_basis());
  auto L = solve_ell(m, E, B);
  auto A = solve_auxiliary_pq(m, E, B, linear_basis());
  auto prob = assemble_P_equation(m, E, B, L, A);
  for (int i = 0; i < 4; ++i) EXPECT_LE((prob.eta.col(i) - m.phi_x(E.paths[i].x.col(8))).norm(), 1e-15);
  // linear adjoint data for the affine model
  auto c = prob.at(2, 3);
  EXPECT_LE((c.V - (m.F_x(0, Vec(), Vec()) - m.G2(0, E.paths[2].x.col(3), Vec::Zero(1)) *
                                               m.h_x(0, E.paths[2].x.col(3), E.paths[2].u.col(3))))
                .norm(),
            1e-12);
  const Vec want = E.paths[2].x.col(3) * 0.0 + m.h_x(0, E.paths[2].x.col(3), E.paths[2].u.col(3)).transpose() *
                                                     A.sol[2].q2.col(3);
  EXPECT_LE((c.J - want).norm(), 1e-12);
}

TEST(Girsanov, DensityClosedForms) {
  auto g = make_time_grid(1.0, 16);
  auto ng = sample_noise(g, 1, 1, JumpMeasureSpec{}, 3, 0);
  auto z = density_path(Mat::Zero(1, 16), ng.dB, g.dt());
  EXPECT_EQ((z.rho.array() - 1.0).abs().maxCoeff(), 0.0);
  auto c = density_path(Mat::Constant(1, 16, 0.7), ng.dB, g.dt());
  EXPECT_EQ(c.rho[0], 1.0);
  EXPECT_NEAR(c.rho[16], std::exp(0.7 * ng.dB.sum() - 0.5 * 0.49), 1e-13);
  EXPECT_THROW(density_path(Mat::Zero(2, 16), ng.dB, g.dt()), std::invalid_argument);
}

TEST(Girsanov, MartingaleMean) {
  auto m = make_affine_model(noisy_params(4, 2, marks2()));
  auto g = make_time_grid(1.0, 32);
  auto pp = make_policy(PolicyFeatures::affine_y, 2, 1, 1, 1.0);
  pp.theta.setConstant(0.3);
  auto E = simulate_ensemble(m, pp, g, 10000, 13, Measure::P_with_Y_as_BM);
  auto r = density_martingale_check(E);
  EXPECT_LE(std::abs(r.mean - 1.0), 3.0 * r.se);
  for (auto& p : E.paths) EXPECT_EQ(p.log_rho[0], 0.0);
}

TEST(Girsanov, LambdaClosedForm) {
  auto P = noisy_params(3, 2, JumpMeasureSpec{});
  P.H.setZero();
  P.Hu(0, 0) = 0.6;
  auto m = make_affine_model(P);
  auto g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto ng = sample_noise(g, 2, 1, JumpMeasureSpec{}, 1, 0);
  auto hat = simulate_forward(m, pp, ng, g, Measure::Q_u_with_B_as_BM);
  Mat x1 = Mat::Zero(3, 17);
  EXPECT_EQ(variation_lambda(m, hat, x1, Mat::Zero(1, 16), g).norm(), 0.0);
  EXPECT_NEAR(variation_lambda(m, hat, x1, Mat::Ones(1, 16), g)[16], 0.6 * ng.dB.sum(), 1e-13);
}

TEST(Girsanov, LambdaMatchesDensityRatio) {
  RandomBoundedParams rp;
  auto m = make_random_bounded_model(rp, build_spectral_space(5, 1.0, BasisKind::neumann_cosine), 2, 1, marks2());
  auto g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::affine_y, 1, m.p, m.d, 1.0);
  pp.theta.setConstant(0.1);
  const Vec dth = Vec::LinSpaced(pp.size(), 1.0, -1.0);
  auto ng = sample_noise(g, 2, 1, marks2(), 2, 0);
  auto hat = simulate_forward(m, pp, ng, g, Measure::Q_u_with_B_as_BM);
  auto V = simulate_first_variation(m, policy_direction(pp, m, dth), ng, g, hat);
  std::vector<double> e;
  for (double eps : {0.02, 0.01}) {
    PolicyParams pe = pp;
    pe.theta += eps * dth;
    auto xe = simulate_on_observation(m, pe, ng, g, hat);
    e.push_back(std::abs((std::exp(xe.log_rho[16] - hat.log_rho[16]) - 1.0) / eps - V.Lambda[16]));
  }
  EXPECT_LE(e[1], 0.7 * e[0]);
  EXPECT_LE(e[1], 0.05 * std::max(1.0, std::abs(V.Lambda[16])));
}

TEST(Girsanov, CostForms) {
  auto P = noisy_params(3, 2, marks2());
  P.psi1 = 1.0;
  auto m0 = make_affine_model(P);
  auto g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  auto EQ = simulate_ensemble(m0, pp, g, 1000, 5, Measure::Q_u_with_B_as_BM);
  auto BQ = solve_bsde(m0, EQ, linear_basis());
  EXPECT_NEAR(compute_cost(m0, EQ, BQ, MeasureForm::Q_form).J, BQ.y0[0], 1e-14);
  EXPECT_THROW(compute_cost(m0, simulate_ensemble(m0, pp, g, 1000, 5, Measure::P_with_Y_as_BM), BQ,
                            MeasureForm::Q_form),
               std::invalid_argument);
  P.H.setZero();
  P.Q = Mat::Identity(3, 3);
  P.Phi = Mat::Identity(3, 3);
  auto m1 = make_affine_model(P);
  auto E1 = simulate_ensemble(m1, pp, g, 1000, 6, Measure::Q_u_with_B_as_BM);
  auto B1 = solve_bsde(m1, E1, linear_basis());
  auto a = compute_cost(m1, E1, B1, MeasureForm::Q_form);
  auto b = compute_cost(m1, E1, B1, MeasureForm::P_form);
  EXPECT_EQ(a.J, b.J);
  EXPECT_TRUE(a.samples == b.samples);
  EXPECT_GT(a.se, 0.0);
}
