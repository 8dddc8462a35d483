#include <gtest/gtest.h>

#include "spdc/malliavin.hpp"

using namespace spdc;

namespace {

JumpMeasureSpec marks2() { return {{0.3, 0.7}, {0.6, 0.4}}; }

LqParams small_lq() {
  LqParams lp;
  lp.dim_h = 4;
  lp.n_W = 4;
  return lp;
}

struct Small {
  SpectralSpace sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  TimeGrid g = make_time_grid(1.0, 16);
  ModelSpec m;
  PolicyParams pp;
  Small(const ModelSpec& mm) : m(mm) {
    pp = make_policy(PolicyFeatures::affine_y, 2, m.p, 1, 1.0);
    pp.theta.setConstant(0.2);
  }
};

PathFunctional cheap(std::function<Vec(const NoiseGrid&)> f) { return {std::move(f), PathFunctional::Cost::cheap}; }

Vec scalar(double v) { return Vec::Constant(1, v); }

}  // namespace

TEST(MalliavinOps, WOfOwnIncrementIsIndicator) {
  const TimeGrid g = make_time_grid(1.0, 8);
  const NoiseGrid ng = sample_noise(g, 3, 1, marks2(), 1, 0);
  const auto F = cheap([](const NoiseGrid& n) { return scalar(n.dW(1, 5)); });
  const double h = default_bump(g);
  EXPECT_NEAR(malliavin_W(F, ng, g, 5, 1, h)[0], 1.0, 1e-9);
  EXPECT_EQ(malliavin_W(F, ng, g, 4, 1, h)[0], 0.0);
  EXPECT_EQ(malliavin_W(F, ng, g, 5, 2, h)[0], 0.0);
  EXPECT_EQ(malliavin_B(F, ng, g, 5, 0, h)[0], 0.0);
}

TEST(MalliavinOps, BOfOwnIncrementIsIndicator) {
  const TimeGrid g = make_time_grid(1.0, 8);
  const NoiseGrid ng = sample_noise(g, 2, 2, marks2(), 2, 0);
  const auto F = cheap([](const NoiseGrid& n) { return scalar(n.dB(1, 3)); });
  const double h = default_bump(g);
  EXPECT_NEAR(malliavin_B(F, ng, g, 3, 1, h)[0], 1.0, 1e-9);
  EXPECT_EQ(malliavin_B(F, ng, g, 3, 0, h)[0], 0.0);
  EXPECT_EQ(malliavin_W(F, ng, g, 3, 1, h)[0], 0.0);
}

TEST(MalliavinOps, AddOneJumpCountsItsMark) {
  const TimeGrid g = make_time_grid(1.0, 8);
  const NoiseGrid ng = sample_noise(g, 2, 1, marks2(), 3, 0);
  const auto count1 = cheap([](const NoiseGrid& n) { return scalar(double(n.counts.row(1).sum())); });
  EXPECT_EQ(malliavin_N(count1, ng, g, 0.4, 1)[0], 1.0);
  EXPECT_EQ(malliavin_N(count1, ng, g, 0.4, 0)[0], 0.0);
  const auto wonly = cheap([](const NoiseGrid& n) { return scalar(n.dW.sum()); });
  EXPECT_EQ(malliavin_N(wonly, ng, g, 1.0, 0)[0], 0.0);
}

TEST(MalliavinOps, RejectsBadArguments) {
  const TimeGrid g = make_time_grid(1.0, 8);
  const NoiseGrid ng = sample_noise(g, 2, 1, marks2(), 4, 0);
  const auto F = cheap([](const NoiseGrid& n) { return scalar(n.dW(0, 0)); });
  EXPECT_THROW(malliavin_W(F, ng, g, 0, 0, 0.0), std::invalid_argument);
  EXPECT_THROW(malliavin_B(F, ng, g, 0, 0, -1e-3), std::invalid_argument);
  EXPECT_THROW(malliavin_N(F, ng, g, 0.0, 0), std::out_of_range);
  EXPECT_THROW(malliavin_N(F, ng, g, 1.5, 0), std::out_of_range);
  const auto blow = cheap([](const NoiseGrid& n) { return scalar(n.dW(0, 0) > 0.0 ? HUGE_VAL : 0.0); });
  NoiseGrid at0 = ng;
  at0.dW(0, 0) = 0.0;
  EXPECT_THROW(malliavin_W(blow, at0, g, 0, 0, 1e-3), NumericalAbort);
}

TEST(MalliavinDuality, SmallLqAllThreeKinds) {
  Small s(make_lq_model(small_lq(), build_spectral_space(4, 1.0, BasisKind::neumann_cosine), marks2()));
  const auto T = tanh_test(default_test_weights(s.m.n()));
  const auto noise = sample_noise_ensemble(s.g, s.m.n_W, s.m.d, marks2(), 3000, 21);
  const IbpReport w = malliavin_duality_W(s.m, s.pp, s.g, noise, T);
  const IbpReport b = malliavin_duality_B(s.m, s.pp, s.g, noise, T);
  const std::vector<NoiseGrid> few(noise.begin(), noise.begin() + 1000);
  const IbpReport nr = malliavin_duality_N(s.m, s.pp, s.g, few, T);
  for (const IbpReport& r : {w, b, nr}) {
    EXPECT_TRUE(r.pass) << r.kind << " residual " << r.residual << " se " << r.se;
    EXPECT_NE(r.lhs, 0.0) << r.kind;
  }
}

TEST(MalliavinDuality, RandomModelWAndB) {
  const auto sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  Small s(make_random_bounded_model(RandomBoundedParams{7}, sp, 4, 1, marks2()));
  const auto T = tanh_test(default_test_weights(s.m.n()));
  const auto noise = sample_noise_ensemble(s.g, s.m.n_W, s.m.d, marks2(), 3000, 22);
  EXPECT_TRUE(malliavin_duality_W(s.m, s.pp, s.g, noise, T).pass);
  EXPECT_TRUE(malliavin_duality_B(s.m, s.pp, s.g, noise, T).pass);
}

TEST(MalliavinDuality, NRequiresMarks) {
  Small s(make_lq_model(small_lq(), build_spectral_space(4, 1.0, BasisKind::neumann_cosine), JumpMeasureSpec{}));
  const auto noise = sample_noise_ensemble(s.g, s.m.n_W, s.m.d, JumpMeasureSpec{}, 4, 1);
  EXPECT_THROW(malliavin_duality_N(s.m, s.pp, s.g, noise, tanh_test(default_test_weights(4))), std::invalid_argument);
}

TEST(MalliavinState, AdaptedAndChainRule) {
  const auto sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  Small s(make_harvesting_model(HarvestingParams{}, sp, 4, marks2()));
  const auto noise = sample_noise_ensemble(s.g, s.m.n_W, s.m.d, marks2(), 2, 5);
  EXPECT_LE(adaptedness_defect(s.m, s.pp, s.g, noise, {3, 10}), 1e-9);
  EXPECT_LE(chain_rule_defect(s.m, s.pp, s.g, noise, tanh_test(default_test_weights(4)), {0, 7, 15}), 1e-5);
}

TEST(MalliavinSmp, ZeroCostsGiveZeroAdjoints) {
  AffineModelParams P;
  P.zero(build_spectral_space(4, 1.0, BasisKind::neumann_cosine), 4, 1, 1, marks2());
  P.B(0, 0) = 1.0;
  for (int i = 0; i < 4; ++i) P.c1(i, i) = 0.3;
  P.b2(0, 0) = 0.2;
  P.H(0, 0) = 0.7;
  P.x0 = Vec::LinSpaced(4, 1.0, 0.0);
  P.gx[0] = 0.2;
  P.gy = -0.3;
  P.R.setZero();
  P.psi1 = 0.0;
  const ModelSpec m = make_affine_model(P);
  const TimeGrid g = make_time_grid(1.0, 8);
  auto pp = make_policy(PolicyFeatures::affine_y, 2, 1, 1, 1.0);
  pp.theta.setConstant(0.2);
  HatBundle H;
  build_hat(H, m, pp, g, 200, 6, SolverOptions{});
  const MalliavinSmpBundle B = assemble_malliavin_smp(H);
  for (const MalliavinPath& p : B.paths) {
    EXPECT_EQ(p.Pi.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(p.aleph.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(p.Mv.cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_EQ(B.grad.G.cwiseAbs().maxCoeff(), 0.0);
}

TEST(MalliavinSmp, InertControlHasZeroBracket) {
  AffineModelParams P;
  P.zero(build_spectral_space(4, 1.0, BasisKind::neumann_cosine), 2, 1, 1, marks2());
  for (int i = 0; i < 2; ++i) P.c1(i, i) = 0.3;
  P.b2(0, 0) = 0.2;
  P.H(0, 0) = 0.7;
  P.x0 = Vec::LinSpaced(4, 1.0, 0.0);
  P.fx[0] = 0.5;
  P.gy = -0.3;
  P.Q = Mat::Identity(4, 4) * 0.5;
  P.R.setZero();
  P.Phi(0, 0) = 0.5;
  const ModelSpec m = make_affine_model(P);
  const TimeGrid g = make_time_grid(1.0, 8);
  auto pp = make_policy(PolicyFeatures::affine_y, 2, 1, 1, 1.0);
  HatBundle H;
  build_hat(H, m, pp, g, 200, 7, SolverOptions{});
  const MalliavinSmpBundle B = assemble_malliavin_smp(H);
  EXPECT_EQ(B.grad.G.cwiseAbs().maxCoeff(), 0.0);
  for (const MalliavinPath& p : B.paths) EXPECT_EQ(p.bracket.cwiseAbs().maxCoeff(), 0.0);
}

TEST(MalliavinSmp, DeterministicMatchesSmpGradient) {
  LqParams lp = small_lq();
  lp.sigma = 0.0;
  lp.obs_noise_gain = 0.0;
  lp.sensor = 0.0;
  lp.sensor_u = 0.0;
  const auto sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  const ModelSpec m = make_lq_model(lp, sp, JumpMeasureSpec{});
  const TimeGrid g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::constant, 2, 1, 1, 1.0);
  pp.theta << 0.3, -0.2;
  HatBundle H;
  build_hat(H, m, pp, g, 200, 8, SolverOptions{});
  const MalliavinSmpBundle B = assemble_malliavin_smp(H);
  const SmpGradient G = smp_gradient(H);
  for (int a = 0; a < pp.size(); ++a) EXPECT_NEAR(B.grad.G[a], G.G[a], 1e-7 * std::max(1.0, std::abs(G.G[a])));
}

TEST(MalliavinSmp, AgreesWithSmpAndPsiIsConsistent) {
  const LqParams lp = small_lq();
  const auto sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  const ModelSpec m = make_lq_model(lp, sp, JumpMeasureSpec{});
  const TimeGrid g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::affine_y, 2, 1, 1, 1.0);
  for (int a = 0; a < pp.size(); ++a) pp.theta[a] = 0.1 * (a + 1);
  HatBundle H;
  build_hat(H, m, pp, g, 600, 9, SolverOptions{});
  const MalliavinSmpBundle B = assemble_malliavin_smp(H);
  SmpGradient G = smp_gradient(H);
  attach_pathwise_se(H, G);
  EXPECT_LE(B.m_consistency, 1e-10);
  EXPECT_GT(B.resim_steps, 0);
  for (int a = 0; a < pp.size(); ++a)
    EXPECT_LE(std::abs(B.grad.G[a] - G.G[a]), 3.0 * std::hypot(B.grad.se[a], G.se[a]) + 1e-9) << "parameter " << a;
}

TEST(MalliavinSmp, BudgetIsEnforced) {
  const auto sp = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  const ModelSpec m = make_random_bounded_model(RandomBoundedParams{7}, sp, 4, 1, marks2());
  const TimeGrid g = make_time_grid(1.0, 16);
  auto pp = make_policy(PolicyFeatures::affine_y, 2, m.p, 1, 1.0);
  HatBundle H;
  build_hat(H, m, pp, g, 100, 10, SolverOptions{});
  MalliavinOptions o;
  o.budget = 1000;
  try {
    assemble_malliavin_smp(H, o);
    FAIL() << "expected a budget abort";
  } catch (const NumericalAbort& e) {
    EXPECT_NE(std::string(e.what()).find("resimulation budget exceeded"), std::string::npos);
  }
}
