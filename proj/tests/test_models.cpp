#include <gtest/gtest.h>

#include "spdc/models.hpp"

using namespace spdc;

namespace {

void expect_derivatives_ok(const ModelSpec& m, double tol) {
  for (const auto& c : check_model_derivatives(m, 6, 17, 0.3))
    EXPECT_LE(c.max_rel_err, tol) << m.name << " " << c.name;
}

JumpMeasureSpec two_marks() { return {{0.3, 0.6}, {0.8, 0.4}}; }

}  // namespace

TEST(Models, LqDerivatives) {
  auto s = build_spectral_space(6, 1.0, BasisKind::neumann_cosine);
  LqParams lp;
  lp.dim_h = 6;
  lp.n_W = 3;
  lp.d = 2;
  expect_derivatives_ok(make_lq_model(lp, s, two_marks()), 1e-6);
  lp.preset = "certificate";
  expect_derivatives_ok(make_lq_model(lp, s, JumpMeasureSpec{{0.5}, {1.0}}), 1e-6);
}

TEST(Models, LqWithoutMarks) {
  auto s = build_spectral_space(5, 1.0, BasisKind::neumann_cosine);
  LqParams lp;
  lp.dim_h = 5;
  lp.n_W = 2;
  auto m = make_lq_model(lp, s, JumpMeasureSpec{});
  ASSERT_EQ(m.mark_nodes().size(), 1u);
  EXPECT_EQ(m.mark_nodes()[0].m, -1);
  expect_derivatives_ok(m, 1e-6);
}

TEST(Models, RandomBoundedDerivativesAndBounds) {
  auto s = build_spectral_space(8, 1.0, BasisKind::neumann_cosine);
  RandomBoundedParams rp;
  rp.seed = 5;
  auto m = make_random_bounded_model(rp, s, 4, 2, two_marks());
  expect_derivatives_ok(m, 1e-6);
  const Vec x = Vec::Random(8), u = Vec::Zero(2);
  EXPECT_LE(operator_norm(m.F_x(0.0, x, u)), 1.0 + 1e-12);
  for (const auto& K : m.G1_x(0.0, x, u)) EXPECT_LE(operator_norm(K), 1.0 + 1e-12);
  EXPECT_LE(sampled_h_sup(m, 200, 3), m.h_bound + 1e-12);
}

TEST(Models, RandomBoundedDeterministicAndNested) {
  RandomBoundedParams rp;
  rp.seed = 9;
  auto s8 = build_spectral_space(8, 1.0, BasisKind::neumann_cosine);
  auto s16 = build_spectral_space(16, 1.0, BasisKind::neumann_cosine);
  auto a = make_random_bounded_model(rp, s8, 3, 1, two_marks());
  auto b = make_random_bounded_model(rp, s8, 3, 1, two_marks());
  auto c = make_random_bounded_model(rp, s16, 3, 1, two_marks());
  const Vec x = Vec::LinSpaced(8, -0.5, 0.5), u = Vec::Constant(2, 0.1);
  EXPECT_TRUE(a.F(0.2, x, u) == b.F(0.2, x, u));
  EXPECT_TRUE(a.x0 == b.x0);
  EXPECT_TRUE(a.x0 == c.x0.head(8));
  rp.seed = 10;
  auto e = make_random_bounded_model(rp, s8, 3, 1, two_marks());
  EXPECT_FALSE(a.x0 == e.x0);
}

TEST(Models, HarvestingDerivatives) {
  auto s = build_spectral_space(6, 1.0, BasisKind::neumann_cosine, 0.5);
  HarvestingParams hp;
  auto m = make_harvesting_model(hp, s, 3, two_marks());
  expect_derivatives_ok(m, 1e-5);
  EXPECT_EQ(m.u_lo[0], 0.0);
  EXPECT_EQ(m.u_hi[0], hp.u_max);
  EXPECT_THROW(make_harvesting_model(hp, s, 3, JumpMeasureSpec{{1.5}, {1.0}}), std::invalid_argument);
}

TEST(Models, HuberAndLogistic) {
  EXPECT_EQ(huber(0.0, 0.5, 1.0), 0.0);
  EXPECT_EQ(huber_prime(0.0, 0.5, 1.0), 0.0);
  EXPECT_NEAR(huber(1e-4, 2.0, 1.0), 1e-8, 1e-14);
  EXPECT_NEAR(huber_prime(1e6, 2.0, 1.0), 2.0, 1e-9);
  for (double s : {-2.0, -0.3, 0.4, 3.0}) {
    const double fd = (huber(s + 1e-6, 0.7, 0.5) - huber(s - 1e-6, 0.7, 0.5)) / 2e-6;
    EXPECT_NEAR(huber_prime(s, 0.7, 0.5), fd, 1e-7);
  }
  HarvestingParams hp;
  hp.c_a = 2.0;
  EXPECT_EQ(logistic(0.0, hp), 0.0);
  EXPECT_EQ(logistic(2.0, hp), 0.0);
  EXPECT_GT(logistic(1.0, hp), 0.0);
  EXPECT_LT(logistic(3.0, hp), 0.0);
}

TEST(Models, PolicyAdaptedAndProjected) {
  auto s = build_spectral_space(4, 1.0, BasisKind::neumann_cosine);
  LqParams lp;
  lp.dim_h = 4;
  lp.n_W = 2;
  auto m = make_lq_model(lp, s, JumpMeasureSpec{});
  auto pp = make_policy(PolicyFeatures::affine_y_qv, 4, m.p, m.d, 1.0);
  pp.theta.setConstant(1.0);
  Mat Y = Mat::Random(m.d, 9);
  const Vec u1 = evaluate_policy(pp, m, 0.3, Y.leftCols(4));
  Mat Y2 = Y;
  Y2.rightCols(5).setConstant(100.0);
  EXPECT_TRUE(u1 == evaluate_policy(pp, m, 0.3, Y2.leftCols(4)));
  pp.theta.setConstant(1e3);
  const Vec uc = evaluate_policy(pp, m, 0.9, Mat::Ones(m.d, 3));
  EXPECT_TRUE(uc == m.u_hi);
  EXPECT_THROW(evaluate_policy(pp, m, 1.5, Y), std::invalid_argument);
  EXPECT_EQ(pp.knot_of(0.0), 0);
  EXPECT_EQ(pp.knot_of(1.0), 3);
  EXPECT_EQ(pp.knot_of_step(63, 64), 3);
}
