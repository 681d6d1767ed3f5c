#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "worked_example.hpp"
#include "po2q/core_quant.hpp"
#include "po2q/rng.hpp"

using namespace po2q;

namespace {

// Plain reference for Eq. (1) on a real step size, written without the library helpers.
double reference_quantize(double w, double delta, std::int64_t qmin, std::int64_t qmax) {
  double r = std::floor(std::abs(w / delta) + 0.5);
  if (w < 0) r = -r;
  r = std::min(std::max(r, static_cast<double>(qmin)), static_cast<double>(qmax));
  return delta * r;
}

RealTensor random_tensor(Rng& rng, std::size_t n, double sd) {
  RealTensor t(Shape{n});
  for (double& x : t) x = rng.normal(0.0, sd);
  return t;
}

}  // namespace

TEST(QRange, SignedAndUnsignedRanges) {
  EXPECT_EQ(qrange(4, true), std::make_pair(std::int64_t{-7}, std::int64_t{7}));
  EXPECT_EQ(qrange(8, false), std::make_pair(std::int64_t{0}, std::int64_t{255}));
  EXPECT_EQ(qrange(2, true), std::make_pair(std::int64_t{-1}, std::int64_t{1}));
  EXPECT_EQ(qrange(QuantConfig::signed_bits(8)), std::make_pair(std::int64_t{-127}, std::int64_t{127}));
}

TEST(QRange, RejectsTooFewBits) {
  EXPECT_THROW(qrange(1, true), InvalidConfig);
  EXPECT_THROW(QuantConfig::unsigned_bits(0), InvalidConfig);
}

TEST(Po2Scale, ValueIsExactPowerOfTwo) {
  EXPECT_EQ(Po2Scale(-3).value(), 0.125);
  EXPECT_EQ(Po2Scale(5).value(), 32.0);
  EXPECT_THROW(Po2Scale(61), DomainError);
  EXPECT_THROW(Po2Scale(-61), DomainError);
}

TEST(Po2Project, WorkedExamples) {
  EXPECT_EQ(po2_project(91.31 / 83.0).exponent(), 0);
  EXPECT_EQ(po2_project(1.0).exponent(), 0);
  EXPECT_EQ(po2_project(3.0).exponent(), 2);
  EXPECT_EQ(po2_project(0.74).exponent(), 0);  // log2(0.74) = -0.43
  EXPECT_EQ(po2_project(0.7).exponent(), -1);  // log2(0.7) = -0.51
}

TEST(Po2Project, RejectsNonPositiveAndNonFinite) {
  EXPECT_THROW(po2_project(0.0), DomainError);
  EXPECT_THROW(po2_project(-1.0), DomainError);
  EXPECT_THROW(po2_project(std::numeric_limits<double>::infinity()), DomainError);
  EXPECT_THROW(po2_project(std::nan("")), DomainError);
  EXPECT_THROW(po2_project(std::ldexp(1.0, 70)), DomainError);
}

TEST(Po2Project, FixedPointOnPowersOfTwo) {
  for (int s = -30; s <= 30; ++s) EXPECT_EQ(po2_project(std::ldexp(1.0, s)).exponent(), s) << s;
}

TEST(Po2Project, AgreesWithRoundedLog2) {
  Rng rng(3);
  for (int i = 0; i < 20000; ++i) {
    const double d = std::exp2(rng.uniform(-40.0, 40.0));
    const double l = std::log2(d);
    // Skip values whose log2 sits within rounding noise of a .5 boundary.
    if (std::abs(l - std::floor(l) - 0.5) < 1e-12) continue;
    EXPECT_EQ(po2_project(d).exponent(), static_cast<int>(std::lround(l))) << d;
  }
}

TEST(Quantize, WorkedExamples) {
  const auto cfg = QuantConfig::signed_bits(4);
  EXPECT_EQ(quantize_value(-8.75, Po2Scale(0), cfg), -7.0);
  EXPECT_EQ(quantize_value(2.58, Po2Scale(0), cfg), 3.0);
  for (int e : {-5, 0, 3}) {
    EXPECT_EQ(quantize_value(0.0, Po2Scale(e), cfg), 0.0);
    EXPECT_EQ(quantize_value(0.0, Po2Scale(e), QuantConfig::unsigned_bits(3)), 0.0);
  }
  EXPECT_EQ(quant_codes(RealTensor::vector({0.74}), Po2Scale(-1), cfg)[0], 1);
}

TEST(Quantize, TiesRoundAwayFromZero) {
  const auto cfg = QuantConfig::signed_bits(8);
  EXPECT_EQ(quantize_value(2.5, Po2Scale(0), cfg), 3.0);
  EXPECT_EQ(quantize_value(-2.5, Po2Scale(0), cfg), -3.0);
  EXPECT_EQ(quantize_value(0.25, Po2Scale(-1), cfg), 0.5);
}

TEST(Quantize, WorkedExampleCodesAtUnitScale) {
  const auto codes = quant_codes(testdata::worked_example_matrix(), Po2Scale(0), QuantConfig::signed_bits(4));
  const std::vector<std::int64_t> expected{0, 3, -7, -4, 2, 0, 2, -1, 0};
  EXPECT_EQ(codes.values(), expected);
  EXPECT_EQ(codes.shape(), (Shape{3, 3}));
}

TEST(Quantize, LatticePointsAreFixed) {
  const auto cfg = QuantConfig::signed_bits(5);
  for (int e : {-4, 0, 2}) {
    for (std::int64_t k = cfg.q_min; k <= cfg.q_max; ++k) {
      const double w = std::ldexp(static_cast<double>(k), e);
      EXPECT_EQ(quant_codes(RealTensor::vector({w}), Po2Scale(e), cfg)[0], k);
    }
  }
}

TEST(Quantize, NonFiniteInputIsAnError) {
  const auto cfg = QuantConfig::signed_bits(4);
  EXPECT_THROW(quantize(RealTensor::vector({1.0, std::nan("")}), Po2Scale(0), cfg), DomainError);
  EXPECT_THROW(quant_codes(RealTensor::vector({std::numeric_limits<double>::infinity()}), Po2Scale(0), cfg),
               DomainError);
}

TEST(QuantizeProperty, MatchesReferenceAndCodesTimesScale) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const int bits = static_cast<int>(rng.uniform_int(2, 9));
    const bool sgn = rng.uniform() < 0.5;
    const auto cfg = sgn ? QuantConfig::signed_bits(bits) : QuantConfig::unsigned_bits(bits);
    const Po2Scale s(static_cast<int>(rng.uniform_int(-8, 4)));
    const RealTensor w = random_tensor(rng, 64, std::ldexp(1.0, static_cast<int>(rng.uniform_int(-6, 6))));
    const RealTensor wq = quantize(w, s, cfg);
    const CodeTensor q = quant_codes(w, s, cfg);
    ASSERT_EQ(wq.shape(), w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_EQ(wq[i], reference_quantize(w[i], s.value(), cfg.q_min, cfg.q_max));
      EXPECT_EQ(wq[i], s.value() * static_cast<double>(q[i]));
      EXPECT_GE(q[i], cfg.q_min);
      EXPECT_LE(q[i], cfg.q_max);
    }
    EXPECT_EQ(dequantize(q, s), wq);
    // Idempotence.
    EXPECT_EQ(quantize(wq, s, cfg), wq);
    if (sgn) {
      RealTensor neg = w;
      for (double& x : neg) x = -x;
      const RealTensor nq = quantize(neg, s, cfg);
      for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(nq[i], -wq[i]);
    }
  }
}

TEST(ClipFraction, CountsOutOfRangeCodes) {
  const auto cfg = QuantConfig::signed_bits(4);
  const auto w = RealTensor::vector({0.0, 7.4, 7.5, -7.6, 100.0});
  EXPECT_DOUBLE_EQ(clip_fraction(w, Po2Scale(0), cfg), 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(clip_fraction(w, Po2Scale(4), cfg), 0.0);
}

TEST(Msqe, ZeroResidual) {
  const auto w = testdata::worked_example_matrix();
  EXPECT_EQ(msqe(w, w), 0.0);
}

TEST(Msqe, WorkedExampleGoldenTable) {
  // Exact rational evaluations of sum_j (Q(w_j, delta) - w_j)^2, 4-bit signed.
  const auto w = testdata::worked_example_matrix();
  const auto cfg = QuantConfig::signed_bits(4);
  const std::vector<std::pair<int, double>> golden{{-2, 53.1532}, {-1, 27.6757}, {0, 4.0557},
                                                   {1, 2.0357},   {2, 9.3557},   {3, 27.6757}};
  for (const auto& [e, expected] : golden) {
    EXPECT_NEAR(msqe_at(w, Po2Scale(e), cfg), expected, 1e-12) << e;
    EXPECT_NEAR(msqe(w, quantize(w, Po2Scale(e), cfg)), expected, 1e-12) << e;
  }
  EXPECT_LT(msqe_at(w, Po2Scale(1), cfg), msqe_at(w, Po2Scale(0), cfg));
}

TEST(Msqe, WeightedSum) {
  const auto w = RealTensor::vector({0.3, 1.2, -0.6});
  const auto wq = RealTensor::vector({0.0, 1.0, -1.0});
  const auto f = RealTensor::vector({2.0, 0.0, 0.5});
  EXPECT_NEAR(msqe(w, wq, &f), 2.0 * 0.09 + 0.5 * 0.16, 1e-15);
  const auto neg = RealTensor::vector({1.0, -1.0, 1.0});
  EXPECT_THROW(msqe(w, wq, &neg), InvalidWeights);
  EXPECT_THROW(msqe(w, RealTensor::vector({1.0})), ShapeMismatch);
}

TEST(Msqe, MsqeAtMatchesMaterializedResidual) {
  Rng rng(5);
  const auto cfg = QuantConfig::signed_bits(4);
  for (int trial = 0; trial < 50; ++trial) {
    const RealTensor w = random_tensor(rng, 200, 1.0);
    RealTensor f(w.shape());
    for (double& x : f) x = rng.uniform();
    const Po2Scale s(static_cast<int>(rng.uniform_int(-4, 1)));
    EXPECT_EQ(msqe_at(w, s, cfg, &f), msqe(w, quantize(w, s, cfg), &f));
  }
}

TEST(CoveringPo2, SmallestScaleWithoutClipping) {
  const auto cfg = QuantConfig::signed_bits(8);
  EXPECT_EQ(covering_po2(127.0, cfg).exponent(), 0);
  EXPECT_EQ(covering_po2(127.5, cfg).exponent(), 1);
  EXPECT_EQ(covering_po2(1.0, cfg).exponent(), -6);  // 127 / 64 >= 1 > 127 / 128
  EXPECT_EQ(covering_po2(0.0, cfg).exponent(), 0);
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double m = std::exp2(rng.uniform(-20, 20));
    const Po2Scale s = covering_po2(m, cfg);
    EXPECT_GE(127.0 * s.value(), m);
    EXPECT_LT(127.0 * s.value() / 2.0, m);
  }
}

TEST(FoldBatchnorm, IdentityFold) {
  const double eps = 1e-3;
  const RealTensor w(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const auto b = RealTensor::vector({0.5, -0.5});
  const BnParams bn{{1, 1}, {0, 0}, {0, 0}, {1 - eps, 1 - eps}, eps};
  const auto [fw, fb] = fold_batchnorm(w, b, bn);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(fw[i], w[i], 1e-15);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(fb[i], b[i], 1e-15);
  EXPECT_EQ(fw.channel_axis(), 0u);
}

TEST(FoldBatchnorm, UnitScaleWhenGammaMatchesStd) {
  const RealTensor w(Shape{1, 2}, std::vector<double>{3.0, -1.0});
  const BnParams bn{{2.0}, {0.0}, {0.0}, {3.0}, 1.0};
  const auto [fw, fb] = fold_batchnorm(w, RealTensor::vector({0.0}), bn);
  EXPECT_EQ(fw[0], 3.0);
  EXPECT_EQ(fw[1], -1.0);
}

TEST(FoldBatchnorm, ChannelMismatchRejected) {
  const RealTensor w(Shape{2, 2}, 1.0);
  const BnParams bn{{1, 1, 1}, {0, 0, 0}, {0, 0, 0}, {1, 1, 1}, 1e-3};
  EXPECT_THROW(fold_batchnorm(w, RealTensor::vector({0, 0}), bn), ShapeMismatch);
  const BnParams ragged{{1, 1}, {0}, {0, 0}, {1, 1}, 1e-3};
  EXPECT_THROW(fold_batchnorm(w, RealTensor::vector({0, 0}), ragged), ShapeMismatch);
}

TEST(FoldBatchnorm, FoldedForwardMatchesTwoStep) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t out = 3, in = static_cast<std::size_t>(rng.uniform_int(1, 8));
    RealTensor w(Shape{out, in});
    for (double& x : w) x = rng.normal();
    RealTensor b(Shape{out});
    for (double& x : b) x = rng.normal();
    BnParams bn;
    for (std::size_t c = 0; c < out; ++c) {
      bn.gamma.push_back(rng.uniform(0.1, 3.0));
      bn.beta.push_back(rng.normal());
      bn.moving_mean.push_back(rng.normal());
      bn.moving_var.push_back(rng.uniform(0.01, 4.0));
    }
    const auto [fw, fb] = fold_batchnorm(w, b, bn);
    for (int s = 0; s < 10; ++s) {
      std::vector<double> x(in);
      for (double& v : x) v = rng.normal();
      for (std::size_t c = 0; c < out; ++c) {
        double z = b[c], folded = fb[c];
        for (std::size_t i = 0; i < in; ++i) {
          z += w.at(c, i) * x[i];
          folded += fw.at(c, i) * x[i];
        }
        const double two_step =
            bn.gamma[c] * (z - bn.moving_mean[c]) / std::sqrt(bn.moving_var[c] + bn.epsilon) + bn.beta[c];
        EXPECT_NEAR(folded, two_step, 1e-10);
      }
    }
  }
}
