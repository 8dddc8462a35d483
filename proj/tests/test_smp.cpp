#include <gtest/gtest.h>

#include "spdc/smp.hpp"

using namespace spdc;

namespace {

JumpMeasureSpec marks2() { return {{0.3, 0.7}, {0.6, 0.4}}; }

LqParams small_lq() {
  LqParams lp;
  lp.dim_h = 4;
  lp.n_W = 4;
  return lp;
}

/// Affine model whose control enters nowhere.
AffineModelParams inert_control(int n, int nW, const JumpMeasureSpec& jm) {
  AffineModelParams P;
  P.zero(build_spectral_space(n, 1.0, BasisKind::neumann_cosine), nW, 1, 1, jm);
  for (int i = 0; i < std::min(n, nW); ++i) P.c1(i, i) = 0.3;
  P.b2(0, 0) = 0.2;
  for (int q = 0; q < jm.K(); ++q) P.t3(0, q) = 0.1;
  P.H(0, 0) = 0.7;
  P.x0 = Vec::LinSpaced(n, 1.0, 0.0);
  P.fx[0] = 0.5;
  P.gx[0] = 0.2;
  P.gy = -0.3;
  P.Q = Mat::Identity(n, n) * 0.5;
  P.R = Mat::Zero(1, 1);
  P.Phi(0, 0) = 0.5;
  return P;
}

struct Fixture {
  SpectralSpace sp;
  ModelSpec m;
  TimeGrid g;
  PolicyParams pp;
  HatBundle H;
};

std::unique_ptr<Fixture> lq_fixture(int M, std::uint64_t seed, bool adjoint = true) {
  auto f = std::make_unique<Fixture>();
  const LqParams lp = small_lq();
  f->sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  f->m = make_lq_model(lp, f->sp, marks2());
  f->g = make_time_grid(1.0, 16);
  f->pp = make_policy(PolicyFeatures::affine_y, 2, 1, 1, 1.0);
  f->pp.theta << 0.3, -0.2, 0.1, 0.4;
  build_hat(f->H, f->m, f->pp, f->g, M, seed, SolverOptions{}, adjoint);
  return f;
}

}  // namespace

TEST(FirstVariation, ZeroDirectionIsExactlyZero) {
  auto f = lq_fixture(300, 3, false);
  const VariationReport R = first_variation_I(f->H, Vec::Zero(f->pp.size()));
  EXPECT_EQ(R.I_v, 0.0);
  EXPECT_EQ(R.samples.cwiseAbs().maxCoeff(), 0.0);
}

TEST(FirstVariation, LinearInDirection) {
  auto f = lq_fixture(300, 4, false);
  Vec a(4), b(4);
  a << 1.0, 0.5, -0.3, 0.2;
  b << -0.4, 0.1, 0.8, -1.0;
  const double Ia = first_variation_I(f->H, a).I_v, Ib = first_variation_I(f->H, b).I_v;
  const double Iab = first_variation_I(f->H, Vec(2.0 * a - 3.0 * b)).I_v;
  EXPECT_NEAR(Iab, 2.0 * Ia - 3.0 * Ib, 1e-10 * std::max(1.0, std::abs(Iab)));
}

TEST(FirstVariation, FamilyMemberMatchesBasisCombination) {
  auto f = lq_fixture(300, 4, false);
  const VariationFamily B = first_variation_basis(f->H);
  Vec a(4);
  a << 1.0, 0.5, -0.3, 0.2;
  const VariationFamily F = first_variation_family(
      f->H, {policy_direction(f->pp, f->m, Vec::Unit(4, 0)), policy_direction(f->pp, f->m, Vec::Unit(4, 1)),
             policy_direction(f->pp, f->m, Vec::Unit(4, 2)), policy_direction(f->pp, f->m, Vec::Unit(4, 3))});
  EXPECT_NEAR(F.report(a).I_v, B.report(a).I_v, 1e-12);
}

TEST(FirstVariation, OnlyRecursiveTermWithoutCosts) {
  auto P = inert_control(4, 2, marks2());
  P.B(0, 0) = 1.0;
  P.Q.setZero();
  P.Phi.setZero();
  P.R.setZero();
  const ModelSpec m = make_affine_model(P);
  const TimeGrid g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::affine_y, 1, 1, 1, 1.0);
  HatBundle H;
  build_hat(H, m, pp, g, 400, 5, SolverOptions{}, false);
  Vec dth(2);
  dth << 1.0, 0.5;
  const VariationFamily F = first_variation_family(H, {policy_direction(pp, m, dth)});
  const VariationReport R = F.report(Vec::Ones(1));
  EXPECT_EQ(R.terminal, 0.0);
  EXPECT_EQ(R.density, 0.0);
  EXPECT_EQ(R.running, 0.0);
  EXPECT_NEAR(R.I_v, F.y10.col(0).mean(), 1e-12);
  EXPECT_NE(R.I_v, 0.0);
}

TEST(FirstVariation, FiniteDifferenceSlopesApproachI) {
  auto f = lq_fixture(1500, 6, false);
  Vec dth(4);
  dth << 1.0, 0.0, 0.5, 0.0;
  VariationReport R = first_variation_I(f->H, dth);
  fd_slopes(f->H, dth, {0.08, 0.04, 0.02}, R);
  ASSERT_EQ(R.fd_gap.size(), 3u);
  EXPECT_GT(R.fd_gap[0], R.fd_gap[2]);
  EXPECT_LE(std::abs(R.extrapolated - R.I_v), 0.02 * std::abs(R.I_v) + 3.0 * R.se);
}

TEST(Duality, ZeroForcingGivesZeroSides) {
  auto f = lq_fixture(200, 7, false);
  f->H.aux = solve_auxiliary_pq(f->m, f->H.E, f->H.B, f->H.opts.adjoint_basis, f->H.opts.ridge);
  const DualityReport R = duality_check_direct(f->H, zero_forcing(f->m), false);
  EXPECT_EQ(R.lhs, 0.0);
  EXPECT_EQ(R.rhs, 0.0);
  EXPECT_TRUE(R.pass || R.se == 0.0);
}

TEST(Duality, TruncationAtZeroAndChiAbsent) {
  auto f = lq_fixture(1500, 8, false);
  f->H.aux = solve_auxiliary_pq(f->m, f->H.E, f->H.B, f->H.opts.adjoint_basis, f->H.opts.ridge);
  DualityForcing fr = random_forcing(f->m, 11);
  const DualityReport R0 = duality_check(f->H, fr, 0, 0, false);
  EXPECT_TRUE(R0.pass) << R0.residual << " se " << R0.se;
  fr.chi *= 7.0;
  const DualityReport R1 = duality_check(f->H, fr, 0, 0, false);
  EXPECT_EQ(R0.lhs, R1.lhs);
  EXPECT_EQ(R0.rhs, R1.rhs);
}

TEST(Duality, ResidualSeHalvesWithFourTimesM) {
  auto a = lq_fixture(500, 9, false), b = lq_fixture(2000, 9, false);
  for (auto* f : {a.get(), b.get()})
    f->H.aux = solve_auxiliary_pq(f->m, f->H.E, f->H.B, f->H.opts.adjoint_basis, f->H.opts.ridge);
  const DualityForcing fr = random_forcing(a->m, 12);
  const double r = duality_check_direct(a->H, fr, false).se / duality_check_direct(b->H, fr, false).se;
  EXPECT_NEAR(r, 2.0, 0.5);
}

TEST(Duality, LadderRejectsEntryAboveNW) {
  auto f = lq_fixture(100, 10, false);
  f->H.aux = solve_auxiliary_pq(f->m, f->H.E, f->H.B, f->H.opts.adjoint_basis, f->H.opts.ridge);
  try {
    duality_check_truncated(f->H, zero_forcing(f->m), {2, 8}, false);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("n = 8"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("n_W = 4"), std::string::npos);
  }
}

TEST(Gradient, VanishesWhenControlIsInert) {
  const ModelSpec m = make_affine_model(inert_control(4, 2, marks2()));
  const TimeGrid g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::affine_y, 2, 1, 1, 1.0);
  HatBundle H;
  build_hat(H, m, pp, g, 300, 13, SolverOptions{});
  const SmpGradient G = smp_gradient(H);
  EXPECT_EQ(G.G.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(G.norm, 0.0);
}

TEST(Gradient, MatchesFirstVariation) {
  auto f = lq_fixture(1500, 14);
  const SmpGradient G = smp_gradient(f->H);
  Vec dth(4);
  dth << 0.7, -0.3, 0.2, 0.6;
  const VariationReport R = first_variation_I(f->H, dth);
  const double se_g = mean_se(Vec(G.samples * dth)).se;
  EXPECT_LE(std::abs(G.G.dot(dth) - R.I_v), 3.0 * std::hypot(se_g, R.se));
}

TEST(Gradient, PathwiseSeKeepsValuesAndFeedsBoxFaces) {
  auto f = lq_fixture(400, 15);
  SmpGradient G = smp_gradient(f->H);
  const Vec G0 = G.G;
  const Vec I = attach_pathwise_se(f->H, G);
  EXPECT_EQ((G.G - G0).norm(), 0.0);
  EXPECT_EQ(G.path_samples.rows(), 400);
  for (int a = 0; a < 4; ++a) EXPECT_LE(std::abs(I[a] - G.G[a]), 3.0 * G.se[a] + 1e-12);
  const auto faces = box_face_check(G, f->H);
  EXPECT_EQ(faces.size(), 4u);
  for (const auto& c : faces) EXPECT_GT(c.se, 0.0);
}

TEST(Gradient, DescentStepLowersCost) {
  auto f = lq_fixture(2000, 16);
  const SmpGradient G = smp_gradient(f->H);
  const CostReport c0 = hat_cost(f->H);
  const CostReport c1 = perturbed_cost(f->H, f->pp.theta - 0.5 * G.G);
  EXPECT_LT(c1.J, c0.J + 2.0 * c1.se);
}

TEST(Certificate, QuadraticSolveAgreesWithLineSearch) {
  LqParams lp;
  lp.preset = "certificate";
  const auto sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  const TimeGrid g = make_time_grid(1.0, 64);
  const auto pp = make_policy(PolicyFeatures::affine_y, 4, 1, 1, 1.0);
  const LqCertificate C = lq_certificate_optimum(lp, sp, g, pp);
  EXPECT_LE(C.line_gap, 1e-6);
  for (int a = 0; a < 4; ++a) {
    Vec u = C.u_star;
    u[a] += 1e-3;
    EXPECT_GT(lq_certificate_cost(lp, sp, g, pp, u), C.J_star);
  }
  EXPECT_NEAR(C.theta[pp.index(2, 0, 0)], C.u_star[2], 0.0);
  EXPECT_EQ(C.theta[pp.index(2, 0, 1)], 0.0);
}

TEST(Optimizer, StopsImmediatelyWhenStationary) {
  LqParams lp;
  lp.preset = "certificate";
  lp.dim_h = 4;
  lp.n_W = 4;
  const auto sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  const ModelSpec m = make_lq_model(lp, sp, marks2());
  const TimeGrid g = make_time_grid(1.0, 32);
  auto pp = make_policy(PolicyFeatures::affine_y, 2, 1, 1, 1.0);
  pp.theta = lq_certificate_optimum(lp, sp, g, pp).theta;
  OptimizerOptions oo;
  oo.M = 1000;
  oo.seed = 3;
  const OptimizerResult R = optimize_policy(m, pp, g, SolverOptions{}, oo);
  EXPECT_EQ(R.stop_reason, "stationary");
  EXPECT_EQ(R.log.size(), 1u);
  EXPECT_EQ((R.pp.theta - pp.theta).norm(), 0.0);
}

TEST(Optimizer, DeterministicQuadraticMatchesScalarDescent) {
  LqParams lp;
  lp.preset = "certificate";
  lp.dim_h = 4;
  lp.n_W = 4;
  lp.sigma = 0.0;
  lp.obs_noise_gain = 0.0;
  const auto sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  const ModelSpec m = make_lq_model(lp, sp, JumpMeasureSpec{});
  const TimeGrid g = make_time_grid(1.0, 32);
  auto pp = make_policy(PolicyFeatures::constant, 1, 1, 1, 1.0);
  const double u_star = lq_certificate_optimum(lp, sp, g, pp).u_star[0];
  auto J = [&](double u) { return lq_certificate_cost(lp, sp, g, pp, Vec::Constant(1, u)); };
  const double curv = J(1.0) + J(-1.0) - 2.0 * J(0.0), slope0 = 0.5 * (J(1.0) - J(-1.0));
  OptimizerOptions oo;
  oo.M = 200;
  oo.iters = 40;
  oo.step = 0.5 / curv;
  const OptimizerResult R = optimize_policy(m, pp, g, SolverOptions{}, oo);
  ASSERT_GE(R.log.size(), 2u);
  EXPECT_NEAR(R.log[0].grad_norm, std::abs(slope0), 1e-8);
  // a full step of plain gradient descent from 0
  EXPECT_NEAR(R.log[1].theta[0], -oo.step * slope0, 1e-8);
  EXPECT_NEAR(R.pp.theta[0], u_star, 1e-6);
  for (std::size_t a = 1; a < R.log.size(); ++a) EXPECT_LE(R.log[a].J, R.log[a - 1].J);
}
