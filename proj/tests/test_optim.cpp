#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "po2q/optim.hpp"
#include "po2q/rng.hpp"

using namespace po2q;

TEST(Adam, ZeroGradientLeavesParameter) {
  const RealTensor p = RealTensor::vector({1.0, -2.0, 3.5});
  auto [next, st] = adam_step(p, RealTensor(p.shape(), 0.0), make_adam_state(p.shape()), 0.1);
  EXPECT_EQ(next, p);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  const RealTensor p = RealTensor::vector({0.0, 0.0, 0.0});
  const RealTensor g = RealTensor::vector({3.0, -0.01, 250.0});
  auto [next, st] = adam_step(p, g, make_adam_state(p.shape()), 0.05);
  EXPECT_NEAR(next[0], -0.05, 1e-9);
  EXPECT_NEAR(next[1], 0.05, 1e-6);
  EXPECT_NEAR(next[2], -0.05, 1e-9);
}

TEST(Adam, MatchesIndependentRecurrenceOnQuadratic) {
  // Minimize 0.5 * p^2 from p = 1 and replay the textbook recurrence in long double.
  RealTensor p = RealTensor::vector({1.0});
  AdamState st = make_adam_state(p.shape());
  long double q = 1.0L, m = 0.0L, v = 0.0L;
  for (int t = 1; t <= 100; ++t) {
    const RealTensor g = RealTensor::vector({p[0]});
    std::tie(p, st) = adam_step(p, g, st, 0.1);
    const long double gq = q;
    m = 0.9L * m + 0.1L * gq;
    v = 0.999L * v + 0.001L * gq * gq;
    const long double mh = m / (1.0L - std::pow(0.9L, t));
    const long double vh = v / (1.0L - std::pow(0.999L, t));
    q -= 0.1L * mh / (std::sqrt(vh) + 1e-8L);
    EXPECT_NEAR(p[0], static_cast<double>(q), 1e-9) << "step " << t;
  }
  EXPECT_LT(std::abs(p[0]), 0.05);
}

TEST(Adam, GradientScaleInvariance) {
  Rng rng(1);
  RealTensor p(Shape{16}), g(Shape{16});
  for (std::size_t i = 0; i < 16; ++i) {
    p[i] = rng.normal();
    g[i] = rng.normal();
  }
  RealTensor g_big = g;
  for (double& x : g_big) x *= 1000.0;
  AdamState a = make_adam_state(p.shape(), 0.9, 0.999, 0.0);
  AdamState b = a;
  RealTensor pa = p, pb = p;
  for (int t = 0; t < 20; ++t) {
    std::tie(pa, a) = adam_step(pa, g, a, 0.01);
    std::tie(pb, b) = adam_step(pb, g_big, b, 0.01);
  }
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(pa[i], pb[i], 1e-12);
}

TEST(Adam, RejectsBadInput) {
  const RealTensor p = RealTensor::vector({1.0, 2.0});
  EXPECT_THROW(adam_step(p, RealTensor::vector({1.0}), make_adam_state(p.shape()), 0.1), ShapeMismatch);
  EXPECT_THROW(adam_step(p, RealTensor::vector({1.0, 0.0}), make_adam_state(p.shape()), 0.0), InvalidConfig);
  EXPECT_THROW(adam_step(p, RealTensor::vector({std::nan(""), 0.0}), make_adam_state(p.shape()), 0.1),
               DomainError);
}

TEST(ScalarAdam, AgreesWithTensorVersion) {
  ScalarAdam s;
  RealTensor p = RealTensor::vector({0.5});
  AdamState st = make_adam_state(p.shape());
  double x = 0.5;
  for (int t = 0; t < 50; ++t) {
    const double g = std::sin(t * 0.3);
    x = s.step(x, g, 0.02);
    std::tie(p, st) = adam_step(p, RealTensor::vector({g}), st, 0.02);
    EXPECT_EQ(x, p[0]);
  }
}

TEST(CosineDecay, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_decay(0.1, 0, 1000), 0.1);
  EXPECT_NEAR(cosine_decay(0.1, 1000, 1000), 0.1 * 0.001, 1e-15);
  EXPECT_NEAR(cosine_decay(0.1, 5000, 1000), 0.1 * 0.001, 1e-15);
  EXPECT_NEAR(cosine_decay(0.1, 500, 1000), 0.1 * (0.999 * 0.5 + 0.001), 1e-15);
  EXPECT_EQ(cosine_decay(0.3, 7, 0), 0.3);
}

TEST(CosineDecay, MonotoneNonIncreasing) {
  double prev = cosine_decay(1.0, 0, 777);
  for (std::uint64_t t = 1; t <= 800; ++t) {
    const double cur = cosine_decay(1.0, t, 777);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}
