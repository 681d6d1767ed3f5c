#pragma once

// Uniform symmetric per-tensor quantization with power-of-2 scaling factors.
//
//   Q(w, d) = d * clip(round(w / d), q_min, q_max)
//
// round() is round-half-away-from-zero everywhere (std::round), for codes and
// for the PO2 exponent.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "po2q/error.hpp"
#include "po2q/tensor.hpp"

namespace po2q {

inline constexpr int kMinExponent = -60;
inline constexpr int kMaxExponent = 60;
inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 32;

/// Integer code range for a bit width. Signed ranges are symmetric (-2^(b-1)+1 .. 2^(b-1)-1).
inline std::pair<std::int64_t, std::int64_t> qrange(int bit_width, bool is_signed) {
  if (bit_width < kMinBits || bit_width > kMaxBits) {
    throw InvalidConfig("bit width must be in [" + std::to_string(kMinBits) + ", " +
                        std::to_string(kMaxBits) + "], got " + std::to_string(bit_width));
  }
  if (is_signed) {
    const std::int64_t half = std::int64_t{1} << (bit_width - 1);
    return {-half + 1, half - 1};
  }
  return {0, (std::int64_t{1} << bit_width) - 1};
}

struct QuantConfig {
  int bit_width = 4;
  bool is_signed = true;
  std::int64_t q_min = -7;
  std::int64_t q_max = 7;

  QuantConfig() = default;
  QuantConfig(int bits, bool signed_codes) : bit_width(bits), is_signed(signed_codes) {
    std::tie(q_min, q_max) = qrange(bits, signed_codes);
  }

  static QuantConfig signed_bits(int bits) { return {bits, true}; }
  static QuantConfig unsigned_bits(int bits) { return {bits, false}; }

  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

inline std::pair<std::int64_t, std::int64_t> qrange(const QuantConfig& cfg) {
  return qrange(cfg.bit_width, cfg.is_signed);
}

/// A scaling factor constrained to 2^exponent.
class Po2Scale {
 public:
  Po2Scale() = default;

  explicit Po2Scale(int exponent) : exponent_(exponent) {
    if (exponent < kMinExponent || exponent > kMaxExponent) {
      throw DomainError("PO2 exponent " + std::to_string(exponent) + " outside [" +
                        std::to_string(kMinExponent) + ", " + std::to_string(kMaxExponent) + "]");
    }
  }

  int exponent() const noexcept { return exponent_; }
  double value() const noexcept { return std::ldexp(1.0, exponent_); }

  friend bool operator==(const Po2Scale&, const Po2Scale&) = default;
  friend auto operator<=>(const Po2Scale&, const Po2Scale&) = default;

 private:
  int exponent_ = 0;
};

inline double round_half_away(double x) { return std::round(x); }

/// Exponent of the nearest power of two in the log2 domain, i.e. round(log2(delta)).
///
/// Uses the exact binary decomposition delta = m * 2^e with m in [1, 2); log2(delta)
/// rounds up exactly when m >= sqrt(2). An exact .5 fractional part is impossible for
/// a double, so this agrees with round-half-away(log2(delta)) and is exactly
/// equivariant under multiplication by powers of two.
inline int po2_exponent(double delta) {
  if (!(delta > 0.0) || !std::isfinite(delta)) {
    throw DomainError("PO2 projection needs a positive finite value, got " + std::to_string(delta));
  }
  int e = 0;
  const double m = std::frexp(delta, &e);  // delta = m * 2^e, m in [0.5, 1)
  const double mantissa = 2.0 * m;         // [1, 2)
  return (e - 1) + (mantissa >= std::sqrt(2.0) ? 1 : 0);
}

inline Po2Scale po2_project(double delta) { return Po2Scale(po2_exponent(delta)); }

/// Smallest PO2 scale whose largest code still covers max_abs (no clipping).
inline Po2Scale covering_po2(double max_abs, const QuantConfig& cfg) {
  if (!std::isfinite(max_abs) || max_abs < 0.0) throw DomainError("covering_po2: invalid range");
  if (max_abs == 0.0) return Po2Scale(0);
  const double target = max_abs / static_cast<double>(cfg.q_max);
  int e = static_cast<int>(std::ceil(std::log2(target)));
  while (std::ldexp(static_cast<double>(cfg.q_max), e) < max_abs) ++e;
  while (std::ldexp(static_cast<double>(cfg.q_max), e - 1) >= max_abs) --e;
  return Po2Scale(std::clamp(e, kMinExponent, kMaxExponent));
}

namespace detail {

inline void require_finite(double w) {
  if (!std::isfinite(w)) throw DomainError("cannot quantize a non-finite value");
}

/// clip(round(w / delta)) for an arbitrary positive real delta.
inline std::int64_t code_of(double w, double delta, const QuantConfig& cfg) {
  require_finite(w);
  const double r = round_half_away(w / delta);
  const double c = std::clamp(r, static_cast<double>(cfg.q_min), static_cast<double>(cfg.q_max));
  return static_cast<std::int64_t>(c);
}

/// Division by 2^e is an exact exponent adjustment.
inline std::int64_t code_of(double w, Po2Scale scale, const QuantConfig& cfg) {
  require_finite(w);
  const double r = round_half_away(std::ldexp(w, -scale.exponent()));
  const double c = std::clamp(r, static_cast<double>(cfg.q_min), static_cast<double>(cfg.q_max));
  return static_cast<std::int64_t>(c);
}

}  // namespace detail

inline double quantize_value(double w, Po2Scale scale, const QuantConfig& cfg) {
  return std::ldexp(static_cast<double>(detail::code_of(w, scale, cfg)), scale.exponent());
}

inline CodeTensor quant_codes(const RealTensor& w, Po2Scale scale, const QuantConfig& cfg) {
  std::vector<std::int64_t> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = detail::code_of(w[i], scale, cfg);
  return CodeTensor(w.shape(), std::move(out));
}

inline RealTensor quantize(const RealTensor& w, Po2Scale scale, const QuantConfig& cfg) {
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = quantize_value(w[i], scale, cfg);
  RealTensor t(w.shape(), std::move(out));
  t.set_channel_axis(w.channel_axis());
  return t;
}

inline RealTensor dequantize(const CodeTensor& codes, Po2Scale scale) {
  std::vector<double> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    out[i] = std::ldexp(static_cast<double>(codes[i]), scale.exponent());
  }
  return RealTensor(codes.shape(), std::move(out));
}

/// Fraction of elements whose rounded code falls outside [q_min, q_max].
inline double clip_fraction(const RealTensor& w, Po2Scale scale, const QuantConfig& cfg) {
  if (w.empty()) return 0.0;
  std::size_t clipped = 0;
  for (double x : w) {
    const double r = round_half_away(std::ldexp(x, -scale.exponent()));
    if (r < static_cast<double>(cfg.q_min) || r > static_cast<double>(cfg.q_max)) ++clipped;
  }
  return static_cast<double>(clipped) / static_cast<double>(w.size());
}

/// Sum of (optionally weighted) squared quantization residuals: sum_j f_j (w_q,j - w_j)^2.
inline double msqe(const RealTensor& w, const RealTensor& w_q,
                   const RealTensor* weights = nullptr) {
  require_same_shape(w, w_q, "msqe");
  if (weights) require_same_shape(w, *weights, "msqe weights");
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double r = w_q[i] - w[i];
    if (weights) {
      const double f = (*weights)[i];
      if (!(f >= 0.0)) throw InvalidWeights("msqe weights must be nonnegative");
      total += f * (r * r);
    } else {
      total += r * r;
    }
  }
  return total;
}

/// MSQE of quantizing w at a given scale, without materializing w_q.
inline double msqe_at(const RealTensor& w, Po2Scale scale, const QuantConfig& cfg,
                      const RealTensor* weights = nullptr) {
  if (weights) require_same_shape(w, *weights, "msqe weights");
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double r = quantize_value(w[i], scale, cfg) - w[i];
    if (weights) {
      const double f = (*weights)[i];
      if (!(f >= 0.0)) throw InvalidWeights("msqe weights must be nonnegative");
      total += f * (r * r);
    } else {
      total += r * r;
    }
  }
  return total;
}

inline double max_abs(const RealTensor& w) {
  double m = 0.0;
  for (double x : w) m = std::max(m, std::abs(x));
  return m;
}

struct BnParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> moving_mean;
  std::vector<double> moving_var;
  double epsilon = 1e-3;

  std::size_t channels() const noexcept { return gamma.size(); }

  void validate() const {
    const std::size_t c = gamma.size();
    if (beta.size() != c || moving_mean.size() != c || moving_var.size() != c) {
      throw ShapeMismatch("batch-norm parameter arrays differ in length");
    }
    for (double v : moving_var) {
      if (!(v + epsilon > 0.0)) throw DomainError("moving_var + epsilon must be positive");
    }
  }
};

/**
 * Merge inference-mode batch normalization into the preceding linear layer.
 *
 * weight has the output channel on axis 0; every trailing element of row c is
 * scaled by gamma[c] / sqrt(var[c] + eps), and
 * bias'[c] = beta[c] + gamma[c] * (bias[c] - mean[c]) / sqrt(var[c] + eps).
 */
inline std::pair<RealTensor, RealTensor> fold_batchnorm(const RealTensor& weight,
                                                        const RealTensor& bias,
                                                        const BnParams& bn) {
  bn.validate();
  const std::size_t channels = weight.rank() == 0 ? 1 : weight.shape()[0];
  if (channels != bn.channels() || bias.size() != channels) {
    throw ShapeMismatch("fold_batchnorm: weight has " + std::to_string(channels) +
                        " output channels, bias " + std::to_string(bias.size()) + ", bn " +
                        std::to_string(bn.channels()));
  }
  const std::size_t row = weight.size() / channels;
  RealTensor w_out = weight;
  RealTensor b_out = bias;
  for (std::size_t c = 0; c < channels; ++c) {
    const double s = bn.gamma[c] / std::sqrt(bn.moving_var[c] + bn.epsilon);
    for (std::size_t k = 0; k < row; ++k) w_out[c * row + k] = s * weight[c * row + k];
    b_out[c] = bn.beta[c] + s * (bias[c] - bn.moving_mean[c]);
  }
  w_out.set_channel_axis(std::size_t{0});
  return {std::move(w_out), std::move(b_out)};
}

}  // namespace po2q
