#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "worked_example.hpp"
#include "po2q/grad_quant.hpp"
#include "random_tensors.hpp"

using namespace po2q;

namespace {

const QuantConfig kInt4 = QuantConfig::signed_bits(4);

GradScaleState state_at(double delta_log2, RoundingMode mode) {
  return make_grad_scale_state(delta_log2, mode);
}

}  // namespace

TEST(RoundingModeNames, RoundTrip) {
  for (auto m : {RoundingMode::ceil, RoundingMode::round, RoundingMode::rtlm}) {
    EXPECT_EQ(parse_rounding_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_rounding_mode("floor"), InvalidConfig);
}

TEST(GradScaleStateInit, DefaultsAndValidation) {
  const GradScaleState s = make_grad_scale_state(-1.4, RoundingMode::ceil);
  EXPECT_EQ(s.ema_log2, -1.4);
  EXPECT_FALSE(s.frozen);
  EXPECT_EQ(s.ema_decay, 0.99);
  EXPECT_THROW(make_grad_scale_state(0.0, RoundingMode::ceil, 1.0), InvalidConfig);
  EXPECT_THROW(make_grad_scale_state(std::nan(""), RoundingMode::ceil), DomainError);
}

TEST(InitDeltaLog2, DynamicRange) {
  EXPECT_DOUBLE_EQ(init_delta_log2(testdata::worked_example_matrix(), kInt4), std::log2(8.75 / 7.0));
  EXPECT_EQ(init_delta_log2(RealTensor(Shape{3}, 0.0), kInt4), 0.0);
}

TEST(EffectiveScale, WorkedExamples) {
  const RealTensor w(Shape{4}, 0.5);
  EXPECT_EQ(effective_scale(state_at(-0.3, RoundingMode::ceil), w, nullptr, kInt4).exponent(), 0);
  EXPECT_EQ(effective_scale(state_at(-0.3, RoundingMode::round), w, nullptr, kInt4).exponent(), 0);
  EXPECT_EQ(effective_scale(state_at(-0.7, RoundingMode::round), w, nullptr, kInt4).exponent(), -1);
  GradScaleState frozen = state_at(3.0, RoundingMode::ceil);
  frozen.ema_log2 = -1.2;
  frozen.frozen = true;
  EXPECT_EQ(effective_scale(frozen, w, nullptr, kInt4).exponent(), -1);
}

TEST(EffectiveScale, CeilNeverBelowRound) {
  Rng rng(2);
  const RealTensor w(Shape{1}, 1.0);
  for (int i = 0; i < 10000; ++i) {
    const double d = rng.uniform(-30.0, 30.0);
    EXPECT_GE(effective_scale(state_at(d, RoundingMode::ceil), w, nullptr, kInt4),
              effective_scale(state_at(d, RoundingMode::round), w, nullptr, kInt4));
  }
}

TEST(EffectiveScale, FrozenIsConstantAcrossInputs) {
  Rng rng(4);
  for (auto mode : {RoundingMode::ceil, RoundingMode::round, RoundingMode::rtlm}) {
    GradScaleState s = state_at(0.4, mode);
    s.ema_log2 = -2.6;
    s.frozen = true;
    for (int i = 0; i < 100; ++i) {
      s.delta_log2 = rng.uniform(-10, 10);
      const RealTensor w = testdata::mixed_distribution(rng, 32);
      EXPECT_EQ(effective_scale(s, w, nullptr, kInt4).exponent(), -3);
    }
  }
}

TEST(Forward, WorkedExamples) {
  Rng rng(6);
  RealTensor w(Shape{100});
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  const ForwardResult r = forward(w, state_at(0.0, RoundingMode::ceil), kInt4);
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_EQ(r.w_q[i], std::round(w[i]));
    EXPECT_LE(std::abs(r.w_q[i]), 1.0);
  }
  EXPECT_EQ(forward(RealTensor::vector({10.0}), state_at(0.0, RoundingMode::round), kInt4).w_q[0], 7.0);
  const RealTensor a = testdata::worked_example_matrix();
  const ForwardResult two = forward(a, state_at(1.0, RoundingMode::round), kInt4);
  EXPECT_EQ(two.scale.exponent(), 1);
  EXPECT_EQ(two.w_q, quantize(a, Po2Scale(1), kInt4));
}

TEST(Backward, ClippedElement) {
  GradScaleState s = state_at(0.0, RoundingMode::round);
  const BackwardResult b = backward(RealTensor::vector({10.0}), s, RealTensor::vector({1.0}), kInt4);
  EXPECT_EQ(b.grad_w[0], 0.0);
  EXPECT_DOUBLE_EQ(b.grad_delta_log2, 7.0 * std::numbers::ln2);
  const BackwardResult lo = backward(RealTensor::vector({-10.0}), s, RealTensor::vector({1.0}), kInt4);
  EXPECT_DOUBLE_EQ(lo.grad_delta_log2, -7.0 * std::numbers::ln2);
}

TEST(Backward, InRangeElement) {
  const BackwardResult b =
      backward(RealTensor::vector({0.3}), state_at(0.0, RoundingMode::round), RealTensor::vector({1.0}), kInt4);
  EXPECT_EQ(b.grad_w[0], 1.0);
  EXPECT_DOUBLE_EQ(b.grad_delta_log2, -0.3 * std::numbers::ln2);
}

TEST(Backward, LatticeHasZeroScaleGradient) {
  GradScaleState s = state_at(-1.0, RoundingMode::round);
  s.last_po2 = Po2Scale(-1);
  const RealTensor w = RealTensor::vector({0.5, -1.5, 3.0, 0.0, -3.5});
  const BackwardResult b = backward(w, s, RealTensor(w.shape(), 0.7), kInt4);
  EXPECT_EQ(b.grad_delta_log2, 0.0);
  for (double g : b.grad_w) EXPECT_EQ(g, 0.7);
}

TEST(Backward, FrozenHasZeroScaleGradient) {
  GradScaleState s = state_at(0.0, RoundingMode::ceil);
  s.frozen = true;
  const BackwardResult b = backward(RealTensor::vector({0.3, 10.0}), s, RealTensor::vector({1.0, 1.0}), kInt4);
  EXPECT_EQ(b.grad_delta_log2, 0.0);
  EXPECT_EQ(b.grad_w[0], 1.0);
}

TEST(BackwardProperty, MatchesPiecewiseDefinition) {
  Rng rng(123);
  for (int trial = 0; trial < 2000; ++trial) {
    const int bits = static_cast<int>(rng.uniform_int(2, 8));
    const bool sgn = rng.uniform() < 0.7;
    const auto cfg = sgn ? QuantConfig::signed_bits(bits) : QuantConfig::unsigned_bits(bits);
    const double d = rng.uniform(-12.0, 12.0);
    GradScaleState s = state_at(d, RoundingMode::ceil);
    s.last_po2 = Po2Scale(static_cast<int>(std::ceil(d)));
    const double step = s.last_po2.value();
    RealTensor w(Shape{8}), up(Shape{8});
    for (std::size_t i = 0; i < 8; ++i) {
      // Mix generic points with ones just either side of the clipping edges.
      const double edge = (rng.uniform() < 0.5 ? cfg.q_max + 0.5 : cfg.q_min - 0.5) * step;
      w[i] = rng.uniform() < 0.5 ? rng.normal(0.0, 4.0 * step) : std::nextafter(edge, rng.uniform() < 0.5 ? 0.0 : edge * 2);
      up[i] = rng.normal();
    }
    const BackwardResult b = backward(w, s, up, cfg);
    double acc = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const double x = w[i] / step;
      const double r = std::round(x);
      double g = 0.0;
      bool pass = false;
      if (r > cfg.q_max) {
        g = static_cast<double>(cfg.q_max);
      } else if (r < cfg.q_min) {
        g = static_cast<double>(cfg.q_min);
      } else {
        g = r - x;
        pass = true;
      }
      EXPECT_EQ(b.grad_w[i], pass ? up[i] : 0.0);
      acc += up[i] * g;
    }
    EXPECT_NEAR(b.grad_delta_log2, std::numbers::ln2 * std::exp2(d) * acc,
                1e-12 * std::max(1.0, std::abs(b.grad_delta_log2)));
  }
}

TEST(ChainFactor, MatchesFiniteDifference) {
  for (double x = -20.0; x <= 20.0; x += 0.25) {
    const double h = 1e-6;
    const double fd = (std::exp2(x + h) - std::exp2(x - h)) / (2.0 * h);
    EXPECT_NEAR(log2_chain_factor(x) / fd, 1.0, 1e-6) << x;
  }
}

TEST(Rtlm, IntegerLog2ReturnsThatExponent) {
  Rng rng(3);
  const RealTensor w = testdata::gaussian(rng, 50);
  for (int e : {-3, 0, 2}) {
    EXPECT_EQ(rtlm_select(w, e, RealTensor(w.shape(), 1.0), kInt4).exponent(), e);
  }
}

TEST(Rtlm, PrefersMsqeOptimalFloor) {
  Rng rng(10);
  const RealTensor w = testdata::gaussian(rng, 1000);
  // Precondition: at unit spread the 4-bit optimum over all exponents is 2^-1.
  int best = 0;
  double best_m = 1e300;
  for (int e = -20; e <= 20; ++e) {
    const double m = msqe_at(w, Po2Scale(e), kInt4);
    if (m < best_m) {
      best_m = m;
      best = e;
    }
  }
  ASSERT_EQ(best, -1);
  EXPECT_EQ(rtlm_select(w, -0.05, RealTensor(w.shape(), 1.0), kInt4).exponent(), -1);
  EXPECT_EQ(effective_scale(state_at(-0.05, RoundingMode::ceil), w, nullptr, kInt4).exponent(), 0);
  EXPECT_EQ(effective_scale(state_at(-0.05, RoundingMode::rtlm), w, nullptr, kInt4).exponent(), -1);
}

TEST(Rtlm, SingleWeightedElementDecides) {
  // Only the first element carries weight. 0.6 lands on 0.5 at scale 2^-1
  // (residual 0.1) and on 1.0 at scale 1 (residual 0.4).
  const RealTensor w = RealTensor::vector({0.6, 3.1, -2.2});
  const RealTensor v = RealTensor::vector({1.0, 0.0, 0.0});
  EXPECT_EQ(rtlm_select(w, -0.5, v, kInt4).exponent(), -1);
  // 0.9 rounds to 1.0 on both grids: a tie keeps the floor.
  const RealTensor w2 = RealTensor::vector({0.9, 3.1, -2.2});
  EXPECT_EQ(rtlm_select(w2, -0.5, v, kInt4).exponent(), -1);
  // 2.9 clips to 1.75 at 2^-2 but lands on 3.0 at 2^-1, so the ceil wins.
  const RealTensor w3 = RealTensor::vector({2.9, 0.1, 0.0});
  EXPECT_EQ(rtlm_select(w3, -1.2, v, kInt4).exponent(), -1);
  EXPECT_EQ(rtlm_select(RealTensor::vector({0.3, 2.9}), -1.2, RealTensor::vector({0.0, 1.0}), kInt4).exponent(),
            -1);
}

TEST(Rtlm, MaskExcludesElementsBeyondRange) {
  // Bound is q_max * 2^-0.5 = 4.95; the huge element is ignored even with weight.
  const RealTensor w = RealTensor::vector({0.6, 400.0});
  EXPECT_EQ(rtlm_select(w, -0.5, RealTensor(w.shape(), 1.0), kInt4).exponent(), -1);
}

TEST(RtlmProperty, NeverWorseThanCeil) {
  Rng rng(44);
  for (int trial = 0; trial < 500; ++trial) {
    const RealTensor w = testdata::mixed_distribution(rng, 64);
    RealTensor v(w.shape());
    for (double& x : v) x = rng.uniform();
    const double d = std::log2(max_abs(w) / 7.0) + rng.uniform(-2.0, 2.0);
    const Po2Scale got = rtlm_select(w, d, v, kInt4);
    const Po2Scale ceil_scale(static_cast<int>(std::ceil(d)));
    const double bound = 7.0 * std::exp2(d);
    auto weighted = [&](Po2Scale s) {
      double m = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (std::abs(w[i]) >= bound) continue;
        const double r = v[i] * (quantize_value(w[i], s, kInt4) - w[i]);
        m += r * r;
      }
      return m;
    };
    EXPECT_LE(weighted(got), weighted(ceil_scale));
    EXPECT_TRUE(got.exponent() == static_cast<int>(std::floor(d)) || got == ceil_scale);
  }
}

TEST(FreezeStep, FrozenHoldsRoundedEma) {
  GradScaleState s = state_at(0.0, RoundingMode::ceil);
  s.ema_log2 = -0.7;
  s.frozen = true;
  for (int i = 0; i < 100; ++i) {
    auto [next, used] = freeze_step(s, Po2Scale(i % 5));
    EXPECT_EQ(used.exponent(), -1);
    EXPECT_EQ(next.ema_log2, -0.7);
    s = next;
  }
}

TEST(FreezeStep, LiveEmaStep) {
  GradScaleState s = state_at(0.0, RoundingMode::ceil);
  auto [next, used] = freeze_step(s, Po2Scale(-1));
  EXPECT_NEAR(next.ema_log2, -0.01, 1e-15);
  EXPECT_EQ(used.exponent(), -1);
}

TEST(FreezeStep, DutyCycleSettlesOnMajorityExponent) {
  GradScaleState s = state_at(0.0, RoundingMode::ceil);
  for (int i = 0; i < 10000; ++i) {
    s = freeze_step(s, Po2Scale(i % 10 < 7 ? -1 : 0)).first;
  }
  EXPECT_NEAR(s.ema_log2, -0.7, 0.05);
  s.frozen = true;
  EXPECT_EQ(freeze_step(s, Po2Scale(0)).second.exponent(), -1);
}
