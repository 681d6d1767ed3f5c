#pragma once

// Integer-only execution of a single dense layer with PO2 scales.
//
// Accumulation is pure integer arithmetic and the only rescale is a shift by
// (weight_exp + input_exp - output_exp). Right shifts round half away from
// zero so that the result is bit-identical to requantizing the real-valued
// layer output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>

#include "po2q/core_quant.hpp"
#include "po2q/error.hpp"
#include "po2q/tensor.hpp"

namespace po2q {

/// value * 2^shift with round-half-away-from-zero when shift < 0.
inline std::int64_t shift_round(std::int64_t value, int shift) {
  if (shift >= 0) {
    if (shift >= 63) {
      if (value == 0) return 0;
      throw Overflow("left shift by " + std::to_string(shift) + " overflows");
    }
    const std::int64_t limit = std::numeric_limits<std::int64_t>::max() >> shift;
    if (value > limit || value < -limit) throw Overflow("left shift overflows 64 bits");
    return value * (std::int64_t{1} << shift);
  }
  const int r = -shift;
  if (r >= 64) {
    // |value| <= 2^63, so only INT64_MIN at r == 64 reaches the rounding half.
    return (r == 64 && value == std::numeric_limits<std::int64_t>::min()) ? -1 : 0;
  }
  const std::uint64_t mag = value < 0 ? static_cast<std::uint64_t>(-(value + 1)) + 1
                                      : static_cast<std::uint64_t>(value);
  const std::uint64_t half = std::uint64_t{1} << (r - 1);
  const std::uint64_t q = (mag >> r) + ((mag & ((std::uint64_t{1} << r) - 1)) >= half ? 1 : 0);
  return value < 0 ? -static_cast<std::int64_t>(q) : static_cast<std::int64_t>(q);
}

struct QuantizedLayer {
  CodeTensor weight_codes;  // [out, in]
  Po2Scale weight_scale;
  QuantConfig weight_cfg;
  CodeTensor bias_codes;  // [out]
  Po2Scale bias_scale;
  QuantConfig bias_cfg = QuantConfig::signed_bits(8);
  Po2Scale input_scale;
  QuantConfig input_cfg;
  Po2Scale output_scale;
  QuantConfig output_cfg;

  std::size_t in_features() const { return weight_codes.shape()[1]; }
  std::size_t out_features() const { return weight_codes.shape()[0]; }

  /// Exponent applied to the accumulator to land on the output grid.
  int output_shift() const {
    return weight_scale.exponent() + input_scale.exponent() - output_scale.exponent();
  }
};

namespace detail {

inline void check_codes(const CodeTensor& codes, const QuantConfig& cfg, const char* what) {
  for (std::int64_t c : codes) {
    if (c < cfg.q_min || c > cfg.q_max) {
      throw InvalidConfig(std::string(what) + " code " + std::to_string(c) + " outside [" +
                          std::to_string(cfg.q_min) + ", " + std::to_string(cfg.q_max) + "]");
    }
  }
}

inline std::int64_t max_magnitude(const QuantConfig& cfg) {
  return std::max(std::abs(cfg.q_min), std::abs(cfg.q_max));
}

}  // namespace detail

/**
 * Validate and build a layer: shapes, code ranges, bias alignment
 * (bias exponent == weight exponent + input exponent), and a worst-case
 * accumulator bound that must stay below 2^62 after the output shift.
 */
inline QuantizedLayer make_quantized_layer(CodeTensor weight_codes, Po2Scale weight_scale,
                                           QuantConfig weight_cfg, CodeTensor bias_codes,
                                           Po2Scale bias_scale, Po2Scale input_scale,
                                           QuantConfig input_cfg, Po2Scale output_scale,
                                           QuantConfig output_cfg,
                                           QuantConfig bias_cfg = QuantConfig::signed_bits(8)) {
  if (weight_codes.rank() != 2) throw ShapeMismatch("weight codes must be [out, in]");
  if (bias_codes.rank() != 1 || bias_codes.size() != weight_codes.shape()[0]) {
    throw ShapeMismatch("bias codes must be [out]");
  }
  if (bias_scale.exponent() != weight_scale.exponent() + input_scale.exponent()) {
    throw InvalidConfig("bias exponent must equal weight exponent + input exponent");
  }
  detail::check_codes(weight_codes, weight_cfg, "weight");
  detail::check_codes(bias_codes, bias_cfg, "bias");

  QuantizedLayer layer{std::move(weight_codes), weight_scale, weight_cfg, std::move(bias_codes),
                       bias_scale, bias_cfg, input_scale, input_cfg, output_scale, output_cfg};

  // Worst-case |acc| = in * max|w| * max|x| + max|b|, computed in long double to avoid wrap.
  const long double bound =
      static_cast<long double>(layer.in_features()) * detail::max_magnitude(weight_cfg) *
          detail::max_magnitude(input_cfg) +
      detail::max_magnitude(bias_cfg);
  const int shift = std::max(layer.output_shift(), 0);
  if (std::ldexp(bound, shift) >= std::ldexp(1.0L, 62)) {
    throw Overflow("accumulator bound exceeds 64-bit range for this layer");
  }
  return layer;
}

namespace detail {

inline std::size_t batch_rows(const QuantizedLayer& layer, const CodeTensor& input) {
  const std::size_t in = layer.in_features();
  if (input.rank() == 1 && input.size() == in) return 1;
  if (input.rank() == 2 && input.shape()[1] == in) return input.shape()[0];
  throw ShapeMismatch("input must be [in] or [batch, in] with in=" + std::to_string(in));
}

inline Shape output_shape(const QuantizedLayer& layer, const CodeTensor& input, std::size_t rows) {
  if (input.rank() == 1) return {layer.out_features()};
  return {rows, layer.out_features()};
}

}  // namespace detail

/// Integer-only forward pass: output codes on the output grid.
inline CodeTensor int_forward(const QuantizedLayer& layer, const CodeTensor& input_codes) {
  const std::size_t rows = detail::batch_rows(layer, input_codes);
  detail::check_codes(input_codes, layer.input_cfg, "input");
  const std::size_t in = layer.in_features();
  const std::size_t out = layer.out_features();
  const int shift = layer.output_shift();
  CodeTensor result(detail::output_shape(layer, input_codes, rows), 0);
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      std::int64_t acc = layer.bias_codes[o];
      for (std::size_t i = 0; i < in; ++i) {
        acc += layer.weight_codes.at(o, i) * input_codes[b * in + i];
      }
      const std::int64_t shifted = shift_round(acc, shift);
      result[b * out + o] = std::clamp(shifted, layer.output_cfg.q_min, layer.output_cfg.q_max);
    }
  }
  return result;
}

/// Same layer evaluated on dequantized reals, then requantized. Oracle for int_forward.
inline CodeTensor float_reference_forward(const QuantizedLayer& layer, const CodeTensor& input_codes) {
  const std::size_t rows = detail::batch_rows(layer, input_codes);
  const std::size_t in = layer.in_features();
  const std::size_t out = layer.out_features();
  const double ws = layer.weight_scale.value();
  const double xs = layer.input_scale.value();
  const double bs = layer.bias_scale.value();
  const double ys = layer.output_scale.value();
  CodeTensor result(detail::output_shape(layer, input_codes, rows), 0);
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      double y = static_cast<double>(layer.bias_codes[o]) * bs;
      for (std::size_t i = 0; i < in; ++i) {
        const double w = static_cast<double>(layer.weight_codes.at(o, i)) * ws;
        const double x = static_cast<double>(input_codes[b * in + i]) * xs;
        y += w * x;
      }
      const double r = round_half_away(y / ys);
      const double c = std::clamp(r, static_cast<double>(layer.output_cfg.q_min),
                                  static_cast<double>(layer.output_cfg.q_max));
      result[b * out + o] = static_cast<std::int64_t>(c);
    }
  }
  return result;
}

/// Index of the first differing element, if any.
inline std::optional<std::size_t> first_mismatch(const CodeTensor& a, const CodeTensor& b) {
  if (a.shape() != b.shape()) return 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return i;
  }
  return std::nullopt;
}

}  // namespace po2q
