#pragma once

// MSQE-based PO2 scale fitting: the iterative least-squares fit, the
// exponent line search, outlier masking, and gradient-variance-aware (GVA)
// weighting from the running second moment of weight gradients.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "po2q/core_quant.hpp"
#include "po2q/error.hpp"
#include "po2q/tensor.hpp"

namespace po2q {

struct MsqeFitConfig {
  int n_iters = 2;
  int line_search_range = 2;
  /// Unset (or +inf) disables the outlier mask.
  std::optional<double> sigma_outlier = 2.0;
  bool use_gva = false;

  void validate() const {
    if (n_iters < 1) throw InvalidConfig("n_iters must be >= 1");
    if (line_search_range < 0) throw InvalidConfig("line_search_range must be >= 0");
    if (sigma_outlier && !(*sigma_outlier > 0.0)) throw InvalidConfig("sigma_outlier must be > 0");
  }
};

/// One pass of the least-squares loop: delta = numerator / denominator, then PO2 projection.
struct FitIteration {
  double numerator = 0.0;    // q^T w
  double denominator = 0.0;  // q^T q
  double delta = 0.0;        // unconstrained optimum
  Po2Scale projected;
};

struct FitTrace {
  Po2Scale scale;
  std::vector<FitIteration> iterations;
};

namespace detail {

inline std::vector<double> codes_as_real(const RealTensor& w, double delta, const QuantConfig& cfg) {
  std::vector<double> q(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) q[i] = static_cast<double>(code_of(w[i], delta, cfg));
  return q;
}

inline std::vector<double> codes_as_real(const RealTensor& w, Po2Scale scale, const QuantConfig& cfg) {
  std::vector<double> q(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) q[i] = static_cast<double>(code_of(w[i], scale, cfg));
  return q;
}

// Shared by the plain and weighted fits. With sqrt_f == nullptr the loop is the
// unweighted one; with all-ones factors every product is multiplied by exactly
// 1.0 so both paths produce bit-identical results.
inline FitTrace fit_loop(const RealTensor& w, double delta_init, int n_iters, const QuantConfig& cfg,
                         const std::vector<double>* sqrt_f) {
  if (!(delta_init > 0.0) || !std::isfinite(delta_init)) {
    throw DomainError("delta_init must be positive and finite");
  }
  if (n_iters < 1) throw InvalidConfig("n_iters must be >= 1");
  if (w.empty()) throw InvalidConfig("cannot fit a scale to an empty tensor");

  std::vector<double> ws(w.begin(), w.end());
  if (sqrt_f) {
    for (std::size_t i = 0; i < ws.size(); ++i) ws[i] = ws[i] * (*sqrt_f)[i];
  }
  auto weigh = [&](std::vector<double>& q) {
    if (!sqrt_f) return;
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = q[i] * (*sqrt_f)[i];
  };

  std::vector<double> q = codes_as_real(w, delta_init, cfg);
  weigh(q);
  double current_delta = delta_init;

  FitTrace trace;
  for (int it = 0; it < n_iters; ++it) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      num += q[i] * ws[i];
      den += q[i] * q[i];
    }
    if (den == 0.0) throw DegenerateCodes(current_delta);
    const double delta = num / den;
    if (!(delta > 0.0) || !std::isfinite(delta)) {
      throw DomainError("least-squares scale is not positive: " + std::to_string(delta));
    }
    const Po2Scale projected = po2_project(delta);
    trace.iterations.push_back({num, den, delta, projected});
    trace.scale = projected;
    current_delta = projected.value();
    q = codes_as_real(w, projected, cfg);
    weigh(q);
  }
  return trace;
}

inline std::vector<double> validated_sqrt_weights(const RealTensor& w, const RealTensor& f) {
  require_same_shape(w, f, "MSQE weight factors");
  std::vector<double> s(f.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!(f[i] >= 0.0) || !std::isfinite(f[i])) {
      throw InvalidWeights("MSQE weight factors must be finite and nonnegative");
    }
    sum += f[i];
    s[i] = std::sqrt(f[i]);
  }
  if (!(sum > 0.0)) throw InvalidWeights("MSQE weight factors are all zero");
  return s;
}

}  // namespace detail

/// Iterative least-squares PO2 fit, returning every intermediate regression.
inline FitTrace fit_scale_msqe_traced(const RealTensor& w, double delta_init, int n_iters,
                                      const QuantConfig& cfg) {
  return detail::fit_loop(w, delta_init, n_iters, cfg, nullptr);
}

/**
 * Fit a PO2 scale by alternating code assignment and closed-form regression.
 *
 * q <- codes(w, delta_init); then n_iters times: delta = q.w / q.q,
 * delta_po2 = PO2(delta), q <- codes(w, delta_po2). Returns the last delta_po2.
 * Throws DegenerateCodes when every code is zero.
 */
inline Po2Scale fit_scale_msqe(const RealTensor& w, double delta_init, int n_iters,
                               const QuantConfig& cfg) {
  return fit_scale_msqe_traced(w, delta_init, n_iters, cfg).scale;
}

inline FitTrace weighted_fit_scale_traced(const RealTensor& w, double delta_init, int n_iters,
                                          const RealTensor& f_msqe, const QuantConfig& cfg) {
  const std::vector<double> sqrt_f = detail::validated_sqrt_weights(w, f_msqe);
  return detail::fit_loop(w, delta_init, n_iters, cfg, &sqrt_f);
}

/// Weighted least-squares variant: codes and weights are both scaled by sqrt(f_msqe).
inline Po2Scale weighted_fit_scale(const RealTensor& w, double delta_init, int n_iters,
                                   const RealTensor& f_msqe, const QuantConfig& cfg) {
  return weighted_fit_scale_traced(w, delta_init, n_iters, f_msqe, cfg).scale;
}

/// Exhaustive search over exponents init +/- n_range; smaller exponent wins ties.
inline Po2Scale line_search(const RealTensor& w, Po2Scale init, int n_range, const QuantConfig& cfg,
                            const RealTensor* weights = nullptr) {
  if (n_range < 0) throw InvalidConfig("line search range must be >= 0");
  if (weights) (void)detail::validated_sqrt_weights(w, *weights);
  Po2Scale best = init;
  double best_msqe = std::numeric_limits<double>::infinity();
  for (int k = -n_range; k <= n_range; ++k) {
    const int e = init.exponent() + k;
    if (e < kMinExponent || e > kMaxExponent) continue;
    const Po2Scale candidate(e);
    const double m = msqe_at(w, candidate, cfg, weights);
    if (m < best_msqe) {
      best_msqe = m;
      best = candidate;
    }
  }
  return best;
}

/// 1 where |w| < sigma_outlier * stddev(w), else 0. Population stddev; a constant tensor has no outliers.
inline RealTensor outlier_mask(const RealTensor& w, double sigma_outlier) {
  if (!(sigma_outlier > 0.0)) throw InvalidConfig("sigma_outlier must be > 0");
  RealTensor mask(w.shape(), 1.0);
  if (std::isinf(sigma_outlier) || w.empty()) return mask;
  double mean = 0.0;
  for (double x : w) mean += x;
  mean /= static_cast<double>(w.size());
  double var = 0.0;
  for (double x : w) var += (x - mean) * (x - mean);
  var /= static_cast<double>(w.size());
  const double sd = std::sqrt(var);
  if (sd == 0.0) return mask;
  const double threshold = sigma_outlier * sd;
  for (std::size_t i = 0; i < w.size(); ++i) mask[i] = std::abs(w[i]) < threshold ? 1.0 : 0.0;
  return mask;
}

/// Running average of squared weight gradients (diagonal empirical Fisher).
struct GvaState {
  RealTensor v;
  double decay = 0.99;
  std::uint64_t step_count = 0;
};

inline GvaState make_gva_state(const Shape& shape, double decay = 0.99) {
  if (!(decay > 0.0 && decay < 1.0)) throw InvalidConfig("GVA decay must be in (0, 1)");
  return GvaState{RealTensor(shape, 0.0), decay, 0};
}

inline GvaState gva_update(GvaState state, const RealTensor& grad) {
  require_same_shape(state.v, grad, "gva_update");
  const double d = state.decay;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    if (!std::isfinite(g)) throw DomainError("gva_update: non-finite gradient");
    state.v[i] = d * state.v[i] + (1.0 - d) * (g * g);
  }
  ++state.step_count;
  return state;
}

/// MSQE weight factors from the GVA moments, optionally multiplied by a mask.
/// Before the first update the factors fall back to all ones.
inline RealTensor gva_msqe_weights(const GvaState& state, const RealTensor* mask = nullptr) {
  RealTensor f = state.step_count == 0 ? RealTensor(state.v.shape(), 1.0) : state.v;
  if (mask) {
    require_same_shape(f, *mask, "gva mask");
    for (std::size_t i = 0; i < f.size(); ++i) f[i] *= (*mask)[i];
  }
  return f;
}

/// Combined MSQE weight factors for a fit configuration, or nullopt for an unweighted fit.
inline std::optional<RealTensor> msqe_weight_factors(const RealTensor& w, const MsqeFitConfig& fit,
                                                     const GvaState* gva) {
  std::optional<RealTensor> mask;
  if (fit.sigma_outlier && std::isfinite(*fit.sigma_outlier)) {
    mask = outlier_mask(w, *fit.sigma_outlier);
  }
  if (fit.use_gva && gva) {
    return gva_msqe_weights(*gva, mask ? &*mask : nullptr);
  }
  return mask;
}

/**
 * Full MSQE quantizer step: outlier mask and GVA factors (as configured),
 * weighted least-squares fit, then the weighted line search.
 */
inline Po2Scale fit_po2_scale(const RealTensor& w, double delta_init, const MsqeFitConfig& fit,
                              const QuantConfig& cfg, const GvaState* gva = nullptr) {
  fit.validate();
  const std::optional<RealTensor> f = msqe_weight_factors(w, fit, gva);
  const Po2Scale fitted = f ? weighted_fit_scale(w, delta_init, fit.n_iters, *f, cfg)
                            : fit_scale_msqe(w, delta_init, fit.n_iters, cfg);
  if (fit.line_search_range == 0) return fitted;
  return line_search(w, fitted, fit.line_search_range, cfg, f ? &*f : nullptr);
}

}  // namespace po2q
