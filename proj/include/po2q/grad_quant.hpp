#pragma once

// Gradient-based PO2 quantizer with the scale learned in the log2 domain.
//
//   delta_po2 = 2^{rounding(delta_log2)}
//   d w_q / d delta_log2 = d w_q / d delta_po2 * 2^{delta_log2} * ln 2
//
// The straight-through estimator treats round() as identity. The per-element
// d w_q / d delta_po2 term is the TQT/LSQ form and lives in ste_scale_terms().

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "po2q/core_quant.hpp"
#include "po2q/error.hpp"
#include "po2q/msqe_opt.hpp"
#include "po2q/tensor.hpp"

namespace po2q {

enum class RoundingMode { ceil, round, rtlm };

inline std::string_view to_string(RoundingMode m) {
  switch (m) {
    case RoundingMode::ceil: return "ceil";
    case RoundingMode::round: return "round";
    case RoundingMode::rtlm: return "rtlm";
  }
  return "?";
}

inline RoundingMode parse_rounding_mode(std::string_view s) {
  if (s == "ceil") return RoundingMode::ceil;
  if (s == "round") return RoundingMode::round;
  if (s == "rtlm") return RoundingMode::rtlm;
  throw InvalidConfig("unknown rounding mode '" + std::string(s) + "' (expected ceil|round|rtlm)");
}

struct GradScaleState {
  double delta_log2 = 0.0;
  RoundingMode rounding_mode = RoundingMode::ceil;
  /// Running average of the applied exponent, log2(delta_po2).
  double ema_log2 = 0.0;
  double ema_decay = 0.99;
  bool frozen = false;
  Po2Scale last_po2;
};

inline int checked_exponent(double e) {
  if (!std::isfinite(e) || e < kMinExponent || e > kMaxExponent) {
    throw DomainError("scale exponent " + std::to_string(e) + " out of range");
  }
  return static_cast<int>(e);
}

inline GradScaleState make_grad_scale_state(double delta_log2, RoundingMode mode,
                                            double ema_decay = 0.99) {
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw InvalidConfig("ema_decay must be in (0, 1)");
  if (!std::isfinite(delta_log2)) throw DomainError("delta_log2 must be finite");
  GradScaleState s;
  s.delta_log2 = delta_log2;
  s.rounding_mode = mode;
  s.ema_log2 = delta_log2;
  s.ema_decay = ema_decay;
  s.last_po2 = Po2Scale(checked_exponent(round_half_away(delta_log2)));
  return s;
}

/// Dynamic-range initialization: log2(max|w| / q_max), or 0 for an all-zero tensor.
inline double init_delta_log2(const RealTensor& w, const QuantConfig& cfg) {
  const double m = max_abs(w);
  if (m == 0.0) return 0.0;
  return std::log2(m / static_cast<double>(cfg.q_max));
}

/**
 * Round-to-lower-MSQE: pick between the floor and ceil PO2 neighbours of
 * delta_log2 by masked, v_w-weighted quantization error.
 *
 * msqe = || M (.) v_w (.) (Q(w, d) - w) ||^2 with M_j = [|w_j| < q_max * 2^delta_log2].
 * v_w sits inside the square as written. Ceil wins only when strictly lower.
 */
inline Po2Scale rtlm_select(const RealTensor& w, double delta_log2, const RealTensor& v_w,
                            const QuantConfig& cfg) {
  require_same_shape(w, v_w, "rtlm_select");
  const int lo = checked_exponent(std::floor(delta_log2));
  const int hi = checked_exponent(std::ceil(delta_log2));
  if (lo == hi) return Po2Scale(lo);
  const Po2Scale floor_scale(lo);
  const Po2Scale ceil_scale(hi);
  const double bound = static_cast<double>(cfg.q_max) * std::exp2(delta_log2);
  double msqe_floor = 0.0;
  double msqe_ceil = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!(std::abs(w[i]) < bound)) continue;
    const double v = v_w[i];
    if (!(v >= 0.0)) throw InvalidWeights("rtlm_select: v_w must be nonnegative");
    const double rf = v * (quantize_value(w[i], floor_scale, cfg) - w[i]);
    const double rc = v * (quantize_value(w[i], ceil_scale, cfg) - w[i]);
    msqe_floor += rf * rf;
    msqe_ceil += rc * rc;
  }
  return msqe_ceil < msqe_floor ? ceil_scale : floor_scale;
}

/// PO2 scale the quantizer would apply right now.
inline Po2Scale effective_scale(const GradScaleState& state, const RealTensor& w,
                                const GvaState* gva, const QuantConfig& cfg) {
  if (state.frozen) return Po2Scale(checked_exponent(round_half_away(state.ema_log2)));
  switch (state.rounding_mode) {
    case RoundingMode::ceil: return Po2Scale(checked_exponent(std::ceil(state.delta_log2)));
    case RoundingMode::round: return Po2Scale(checked_exponent(round_half_away(state.delta_log2)));
    case RoundingMode::rtlm: {
      const RealTensor v = gva ? gva_msqe_weights(*gva) : RealTensor(w.shape(), 1.0);
      return rtlm_select(w, state.delta_log2, v, cfg);
    }
  }
  throw InvalidConfig("unknown rounding mode");
}

struct ForwardResult {
  RealTensor w_q;
  Po2Scale scale;
};

inline ForwardResult forward(const RealTensor& w, const GradScaleState& state, const QuantConfig& cfg,
                             const GvaState* gva = nullptr) {
  const Po2Scale s = effective_scale(state, w, gva, cfg);
  return {quantize(w, s, cfg), s};
}

/// Per-element STE pieces at a fixed scale: pass-through mask and d w_q / d delta_po2.
struct SteTerms {
  RealTensor pass;   // 1 where q_min <= round(x) <= q_max
  RealTensor scale;  // round(x) - x inside, q_max above, q_min below
};

inline SteTerms ste_scale_terms(const RealTensor& w, Po2Scale scale, const QuantConfig& cfg) {
  SteTerms t{RealTensor(w.shape(), 0.0), RealTensor(w.shape(), 0.0)};
  const double qmin = static_cast<double>(cfg.q_min);
  const double qmax = static_cast<double>(cfg.q_max);
  for (std::size_t i = 0; i < w.size(); ++i) {
    detail::require_finite(w[i]);
    const double x = std::ldexp(w[i], -scale.exponent());
    const double r = round_half_away(x);
    if (r > qmax) {
      t.scale[i] = qmax;
    } else if (r < qmin) {
      t.scale[i] = qmin;
    } else {
      t.pass[i] = 1.0;
      t.scale[i] = r - x;
    }
  }
  return t;
}

/// d delta_po2 / d delta_log2 as used by the backward pass.
inline double log2_chain_factor(double delta_log2) {
  return std::numbers::ln2 * std::exp2(delta_log2);
}

struct BackwardResult {
  RealTensor grad_w;
  double grad_delta_log2 = 0.0;
};

/**
 * Straight-through backward pass at the scale recorded in state.last_po2.
 *
 * grad_w is upstream masked to in-range elements. grad_delta_log2 is
 * ln2 * 2^delta_log2 * sum_j upstream_j * g_j, and exactly zero once frozen.
 */
inline BackwardResult backward(const RealTensor& w, const GradScaleState& state,
                               const RealTensor& upstream, const QuantConfig& cfg) {
  require_same_shape(w, upstream, "backward");
  const SteTerms t = ste_scale_terms(w, state.last_po2, cfg);
  BackwardResult out{RealTensor(w.shape(), 0.0), 0.0};
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    out.grad_w[i] = t.pass[i] != 0.0 ? upstream[i] : 0.0;
    acc += upstream[i] * t.scale[i];
  }
  out.grad_delta_log2 = state.frozen ? 0.0 : log2_chain_factor(state.delta_log2) * acc;
  return out;
}

/**
 * Running-average PO2 step size. While live, the EMA of the exponent absorbs
 * the observed scale and the observed scale is used. Once frozen the EMA
 * stops moving and 2^round(EMA) is used instead.
 */
inline std::pair<GradScaleState, Po2Scale> freeze_step(GradScaleState state, Po2Scale observed) {
  if (state.frozen) {
    return {state, Po2Scale(checked_exponent(round_half_away(state.ema_log2)))};
  }
  const double b = state.ema_decay;
  state.ema_log2 = b * state.ema_log2 + (1.0 - b) * static_cast<double>(observed.exponent());
  return {state, observed};
}

}  // namespace po2q
