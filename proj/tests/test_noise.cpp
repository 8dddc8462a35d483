#include <gtest/gtest.h>

#include "spdc/noise.hpp"

#include <cstdio>

using namespace spdc;

namespace {
JumpMeasureSpec three_marks() { return {{0.2, 0.4, 0.6}, {0.5, 1.0, 0.5}}; }
}

TEST(Noise, Deterministic) {
  auto g = make_time_grid(1.0, 32);
  auto a = sample_noise(g, 4, 2, three_marks(), 11, 5);
  auto b = sample_noise(g, 4, 2, three_marks(), 11, 5);
  EXPECT_TRUE(a.dW == b.dW);
  EXPECT_TRUE(a.dB == b.dB);
  ASSERT_EQ(a.jumps.size(), b.jumps.size());
  for (std::size_t i = 0; i < a.jumps.size(); ++i) EXPECT_EQ(a.jumps[i].t, b.jumps[i].t);
  auto c = sample_noise(g, 4, 2, three_marks(), 11, 6);
  EXPECT_FALSE(a.dW == c.dW);
}

TEST(Noise, NoActivityNoJumps) {
  auto g = make_time_grid(1.0, 16);
  auto a = sample_noise(g, 2, 1, JumpMeasureSpec{}, 1, 0);
  EXPECT_TRUE(a.jumps.empty());
  EXPECT_EQ(a.counts.rows(), 0);
  EXPECT_THROW(sample_noise(g, 0, 1, JumpMeasureSpec{}, 1, 0), std::invalid_argument);
}

TEST(Noise, PoissonMeanCount) {
  auto g = make_time_grid(1.0, 8);
  JumpMeasureSpec jm{{0.3, 0.7}, {1.5, 0.5}};
  const int M = 100000;
  double s = 0.0;
  for (int i = 0; i < M; ++i) s += sample_noise(g, 1, 1, jm, 99, i).jumps.size();
  EXPECT_NEAR(s / M, 2.0, 3.0 * std::sqrt(2.0 / M));
}

TEST(Noise, MomentsAndIndependence) {
  auto g = make_time_grid(1.0, 16);
  const double dt = g.dt();
  const int M = 10000;
  std::vector<NoiseGrid> e;
  for (int i = 0; i < M; ++i) e.push_back(sample_noise(g, 3, 1, three_marks(), 5, i));
  for (int k : {0, 7, 15}) {
    for (int i = 0; i < 3; ++i) {
      double m = 0, v = 0;
      for (auto& n : e) m += n.dW(i, k);
      m /= M;
      for (auto& n : e) v += (n.dW(i, k) - m) * (n.dW(i, k) - m);
      v /= (M - 1);
      EXPECT_LE(std::abs(m), 4.0 * std::sqrt(dt / M));
      EXPECT_NEAR(v / dt, 1.0, 0.05);
    }
    double c = 0, cj = 0;
    for (auto& n : e) {
      c += n.dW(0, k) * n.dB(0, k);
      cj += n.dB(0, k) * (n.counts(1, k) - 1.0 * dt);
    }
    EXPECT_LE(std::abs(c / M) / dt, 4.0 / std::sqrt(double(M)));
    EXPECT_LE(std::abs(cj / M) / std::sqrt(dt * 1.0 * dt), 4.0 / std::sqrt(double(M)));
  }
}

TEST(Noise, PerturbationInverseAndJumps) {
  auto g = make_time_grid(1.0, 16);
  auto a = sample_noise(g, 3, 2, three_marks(), 2, 3);
  auto b = apply_perturbation(apply_perturbation(a, NoisePerturbation::W(4, 1, 0.25), g),
                              NoisePerturbation::W(4, 1, -0.25), g);
  EXPECT_LE((a.dW - b.dW).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NE(apply_perturbation(a, NoisePerturbation::B(2, 1, 0.5), g).dB(1, 2), a.dB(1, 2));
  EXPECT_THROW(apply_perturbation(a, NoisePerturbation::W(16, 0, 0.1), g), std::out_of_range);
  EXPECT_THROW(apply_perturbation(a, NoisePerturbation::B(0, 2, 0.1), g), std::out_of_range);
  EXPECT_THROW(apply_perturbation(a, NoisePerturbation::jump(0.5, 3), g), std::out_of_range);

  auto empty = sample_noise(g, 1, 1, JumpMeasureSpec{{0.5}, {0.0}}, 1, 1);
  auto one = apply_perturbation(empty, NoisePerturbation::jump(0.5, 0), g);
  ASSERT_EQ(one.jumps.size(), 1u);
  EXPECT_EQ(one.jumps[0].t, 0.5);
  EXPECT_EQ(one.counts(0, g.cell(0.5)), 1);
  EXPECT_TRUE(empty.jumps.empty());

  for (double t : {0.01, 0.33, 0.5, 0.77, 1.0}) {
    auto c = apply_perturbation(a, NoisePerturbation::jump(t, 2), g);
    for (std::size_t i = 1; i < c.jumps.size(); ++i) EXPECT_LT(c.jumps[i - 1].t, c.jumps[i].t);
    EXPECT_EQ(c.jumps.size(), a.jumps.size() + 1);
  }
}

TEST(Noise, GirsanovShift) {
  auto g = make_time_grid(1.0, 20);
  auto a = sample_noise(g, 1, 1, JumpMeasureSpec{}, 4, 0);
  Mat h = Mat::Constant(1, 20, 0.7);
  auto b = girsanov_shift(a, h, g.dt());
  EXPECT_NEAR(b.dB.sum() - a.dB.sum(), 0.7 * g.T, 1e-13);
  auto c = girsanov_shift(b, -h, g.dt());
  EXPECT_LE((c.dB - a.dB).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_TRUE(girsanov_shift(a, Mat::Zero(1, 20), g.dt()).dB == a.dB);
  EXPECT_THROW(girsanov_shift(a, Mat::Zero(2, 20), g.dt()), std::invalid_argument);
}

TEST(Noise, DumpRoundTrip) {
  auto g = make_time_grid(1.0, 8);
  std::vector<NoiseGrid> e;
  for (int i = 0; i < 4; ++i) e.push_back(sample_noise(g, 2, 1, three_marks(), 8, i));
  const std::string f = ::testing::TempDir() + "noise_dump.bin";
  write_noise_dump(f, e);
  auto r = read_noise_dump(f, g);
  ASSERT_EQ(r.size(), e.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_TRUE(r[i].dW == e[i].dW);
    EXPECT_TRUE(r[i].counts == e[i].counts);
    EXPECT_EQ(r[i].path_index, e[i].path_index);
  }
  std::remove(f.c_str());
}
