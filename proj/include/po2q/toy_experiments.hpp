#pragma once

// Single-quantizer toy studies. A learned log2 scale minimizes
// sum_j (w_j - Q(w_j, delta_po2))^2 with Adam while the input is either
// perturbed by fresh Gaussian noise each step or held fixed.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "po2q/core_quant.hpp"
#include "po2q/error.hpp"
#include "po2q/grad_quant.hpp"
#include "po2q/metrics.hpp"
#include "po2q/optim.hpp"
#include "po2q/rng.hpp"
#include "po2q/tensor.hpp"

namespace po2q {

enum class ToyInput {
  /// Gaussian sample scaled so the noise-averaged STE scale gradient at delta = 1 vanishes.
  balanced,
  /// Integer codes, i.e. exactly on the delta = 1 grid.
  lattice,
  /// Gaussian sample scaled so the unconstrained MSQE optimum equals target_delta.
  target_optimum,
};

inline std::string_view to_string(ToyInput k) {
  switch (k) {
    case ToyInput::balanced: return "balanced";
    case ToyInput::lattice: return "lattice";
    case ToyInput::target_optimum: return "target_optimum";
  }
  return "?";
}

inline ToyInput parse_toy_input(std::string_view s) {
  if (s == "balanced") return ToyInput::balanced;
  if (s == "lattice") return ToyInput::lattice;
  if (s == "target_optimum") return ToyInput::target_optimum;
  throw InvalidConfig("unknown toy input kind '" + std::string(s) + "'");
}

struct ToyQuantizerExperimentConfig {
  std::size_t n_elements = 1000;
  double noise_sigma = 0.05;
  /// Unset means dynamic-range initialization log2(max|w| / q_max).
  std::optional<double> init_delta_log2 = -0.01;
  std::int64_t steps = 1000;
  double lr = 0.01;
  RoundingMode mode = RoundingMode::ceil;
  std::uint64_t seed = 0;
  std::optional<std::int64_t> freeze_at;
  int bits = 4;
  /// Code range of the trained quantizer. Generated toy inputs are always symmetric.
  bool is_signed = true;
  ToyInput input = ToyInput::balanced;
  /// Seed for the fixed base input; noise uses `seed`.
  std::uint64_t input_seed = 12345;
  double target_delta = 0.9;
  double ema_decay = 0.99;

  void validate() const {
    if (n_elements == 0) throw InvalidConfig("n_elements must be positive");
    if (steps < 1) throw InvalidConfig("steps must be >= 1");
    if (!(noise_sigma >= 0.0)) throw InvalidConfig("noise_sigma must be >= 0");
    if (!(lr > 0.0)) throw InvalidConfig("lr must be > 0");
    if (!(target_delta > 0.0)) throw InvalidConfig("target_delta must be > 0");
    if (freeze_at && *freeze_at < 0) throw InvalidConfig("freeze_at must be >= 0");
    (void)qrange(bits, is_signed);
  }
};

struct ToyRun {
  MetricSeries exponent{"exponent"};
  MetricSeries delta_log2{"delta_log2"};
  MetricSeries ema_log2{"ema_log2"};
  MetricSeries msqe{"msqe"};
  MetricSeries clip_fraction{"clip_fraction"};
  RealTensor base;
  double initial_delta_log2 = 0.0;
};

/// Brute-force unconstrained MSQE optimum over a log-spaced grid of real scales.
inline double continuous_msqe_optimum(const RealTensor& w, const QuantConfig& cfg, double lo,
                                      double hi, std::size_t points = 4000) {
  double best = lo;
  double best_err = std::numeric_limits<double>::infinity();
  const double a = std::log(lo);
  const double b = std::log(hi);
  for (std::size_t k = 0; k < points; ++k) {
    const double d = std::exp(a + (b - a) * static_cast<double>(k) / static_cast<double>(points - 1));
    double err = 0.0;
    for (double x : w) {
      const double r = d * static_cast<double>(detail::code_of(x, d, cfg)) - x;
      err += r * r;
    }
    if (err < best_err) {
      best_err = err;
      best = d;
    }
  }
  return best;
}

namespace detail {

inline RealTensor scaled_tensor(const std::vector<double>& z, double c) {
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = c * z[i];
  return RealTensor::vector(std::move(out));
}

/// Sum_j dL/dw_q,j * g_j at a fixed scale for L = sum (w - w_q)^2.
inline double toy_scale_gradient(const RealTensor& w, Po2Scale scale, const QuantConfig& cfg) {
  const SteTerms t = ste_scale_terms(w, scale, cfg);
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += 2.0 * (quantize_value(w[i], scale, cfg) - w[i]) * t.scale[i];
  }
  return acc;
}

inline double std_normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

inline double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/**
 * E over y ~ N(x, sigma^2) of 2 (Q(y) - y) g(y) at delta = 1, the expected
 * per-element scale gradient under input noise. Each rounding cell
 * [k - 1/2, k + 1/2) contributes the second moment of (k - y) over the cell;
 * the clipped tails contribute 2 (q - y) q.
 */
inline double expected_unit_scale_gradient(double x, double sigma, const QuantConfig& cfg) {
  const double qmin = static_cast<double>(cfg.q_min);
  const double qmax = static_cast<double>(cfg.q_max);
  // Truncated moments of u = y - x over [a, b): P, E[u], E[u^2].
  auto moments = [&](double a, double b, double& p, double& m1, double& m2) {
    const double al = (a - x) / sigma;
    const double be = (b - x) / sigma;
    const double pa = std::isinf(al) ? 0.0 : std_normal_pdf(al);
    const double pb = std::isinf(be) ? 0.0 : std_normal_pdf(be);
    const double aa = std::isinf(al) ? 0.0 : al * pa;
    const double bb = std::isinf(be) ? 0.0 : be * pb;
    p = std_normal_cdf(be) - std_normal_cdf(al);
    m1 = sigma * (pa - pb);
    m2 = sigma * sigma * (p + aa - bb);
  };
  const double reach = 10.0 * sigma + 1.0;
  double total = 0.0;
  const auto k_lo = static_cast<std::int64_t>(std::max(qmin, std::floor(x - reach)));
  const auto k_hi = static_cast<std::int64_t>(std::min(qmax, std::ceil(x + reach)));
  for (std::int64_t k = k_lo; k <= k_hi; ++k) {
    double p, m1, m2;
    moments(static_cast<double>(k) - 0.5, static_cast<double>(k) + 0.5, p, m1, m2);
    const double d = static_cast<double>(k) - x;
    total += 2.0 * (d * d * p - 2.0 * d * m1 + m2);
  }
  double p, m1, m2;
  if (x + reach > qmax + 0.5) {
    moments(qmax + 0.5, std::numeric_limits<double>::infinity(), p, m1, m2);
    total += 2.0 * qmax * ((qmax - x) * p - m1);
  }
  if (x - reach < qmin - 0.5) {
    moments(-std::numeric_limits<double>::infinity(), qmin - 0.5, p, m1, m2);
    total += 2.0 * qmin * ((qmin - x) * p - m1);
  }
  return total;
}

inline double expected_toy_gradient(const std::vector<double>& z, double c, double sigma,
                                    const QuantConfig& cfg) {
  if (sigma == 0.0) return toy_scale_gradient(scaled_tensor(z, c), Po2Scale(0), cfg);
  double acc = 0.0;
  for (double x : z) acc += expected_unit_scale_gradient(c * x, sigma, cfg);
  return acc;
}

}  // namespace detail

inline RealTensor make_toy_input(const ToyQuantizerExperimentConfig& cfg) {
  const QuantConfig qc = QuantConfig::signed_bits(cfg.bits);
  Rng rng(cfg.input_seed);
  std::vector<double> z(cfg.n_elements);
  switch (cfg.input) {
    case ToyInput::lattice: {
      for (double& x : z) x = static_cast<double>(rng.uniform_int(qc.q_min, qc.q_max));
      return RealTensor::vector(std::move(z));
    }
    case ToyInput::balanced: {
      for (double& x : z) x = rng.normal();
      // Rounding error pushes the scale down, clipping pushes it up; find the
      // spread where they cancel at delta = 1 in expectation over the noise.
      double lo = 0.01;
      double hi = 1000.0;
      if (detail::expected_toy_gradient(z, hi, cfg.noise_sigma, qc) > 0.0) {
        throw InvalidConfig("balanced toy input: clipping never dominates");
      }
      for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (detail::expected_toy_gradient(z, mid, cfg.noise_sigma, qc) > 0.0) {
          lo = mid;
        } else {
          hi = mid;
        }
      }
      return detail::scaled_tensor(z, hi);
    }
    case ToyInput::target_optimum: {
      for (double& x : z) x = rng.normal();
      const RealTensor base = RealTensor::vector(z);
      // The optimum scales linearly with the input, so one search fixes it.
      const double opt = continuous_msqe_optimum(base, qc, 1e-3, 10.0, 20000);
      return detail::scaled_tensor(z, cfg.target_delta / opt);
    }
  }
  throw InvalidConfig("unknown toy input kind");
}

/**
 * Train one log2-domain scale on a (possibly noisy) input and record its
 * trajectory. With freeze_at = t the scale is frozen at the start of step t.
 */
inline ToyRun run_toy_quantizer(const ToyQuantizerExperimentConfig& cfg, const RealTensor& base) {
  cfg.validate();
  const QuantConfig qc = cfg.is_signed ? QuantConfig::signed_bits(cfg.bits) : QuantConfig::unsigned_bits(cfg.bits);
  const double init = cfg.init_delta_log2 ? *cfg.init_delta_log2 : init_delta_log2(base, qc);
  GradScaleState state = make_grad_scale_state(init, cfg.mode, cfg.ema_decay);
  ScalarAdam opt;
  Rng noise(cfg.seed);

  ToyRun run;
  run.base = base;
  run.initial_delta_log2 = init;
  RealTensor w = base;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    if (cfg.freeze_at && step == *cfg.freeze_at) state.frozen = true;
    if (cfg.noise_sigma > 0.0) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = base[i] + noise.normal(0.0, cfg.noise_sigma);
    }
    const Po2Scale observed = effective_scale(state, w, nullptr, qc);
    auto [next, used] = freeze_step(state, observed);
    state = next;
    state.last_po2 = used;

    const RealTensor w_q = quantize(w, used, qc);
    RealTensor upstream(w.shape(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) upstream[i] = 2.0 * (w_q[i] - w[i]);
    const BackwardResult g = backward(w, state, upstream, qc);

    run.exponent.push(step, used.exponent());
    run.delta_log2.push(step, state.delta_log2);
    run.ema_log2.push(step, state.ema_log2);
    run.msqe.push(step, msqe(w, w_q));
    run.clip_fraction.push(step, clip_fraction(w, used, qc));

    if (!state.frozen) state.delta_log2 = opt.step(state.delta_log2, g.grad_delta_log2, cfg.lr);
  }
  return run;
}

/// Noise-perturbed study around a locally MSQE-optimal scale of 1.0.
inline ToyRun toy_rtlm_experiment(const ToyQuantizerExperimentConfig& cfg) {
  return run_toy_quantizer(cfg, make_toy_input(cfg));
}

/// Default configuration for the oscillation-at-convergence study.
inline ToyQuantizerExperimentConfig default_convergence_config() {
  ToyQuantizerExperimentConfig cfg;
  cfg.input = ToyInput::target_optimum;
  cfg.target_delta = 0.9;
  cfg.noise_sigma = 0.0;
  cfg.init_delta_log2.reset();
  cfg.steps = 3000;
  cfg.mode = RoundingMode::ceil;
  return cfg;
}

/// Fixed input whose unconstrained optimum sits between two PO2 scales.
inline ToyRun toy_convergence_experiment(const ToyQuantizerExperimentConfig& cfg) {
  return run_toy_quantizer(cfg, make_toy_input(cfg));
}

/// Replays the exponent EMA from a recorded trajectory (steps before `until`).
inline double replay_exponent_ema(double initial, double decay, const MetricSeries& exponents,
                                  std::int64_t until) {
  double ema = initial;
  const auto& steps = exponents.steps();
  const auto& vals = exponents.values();
  for (std::size_t i = 0; i < vals.size() && steps[i] < until; ++i) {
    ema = decay * ema + (1.0 - decay) * vals[i];
  }
  return ema;
}

/**
 * True when every window of `window` consecutive recorded steps that starts
 * at or after `warmup` contains both exponent values `a` and `b`.
 */
inline bool visits_both_in_every_window(const MetricSeries& exponents, double a, double b,
                                        std::int64_t warmup, std::int64_t window) {
  if (window < 1) throw InvalidConfig("window must be >= 1");
  const auto& steps = exponents.steps();
  const auto& vals = exponents.values();
  std::size_t first = 0;
  while (first < steps.size() && steps[first] < warmup) ++first;
  const auto w = static_cast<std::size_t>(window);
  if (steps.size() - first < w) return false;
  std::size_t count_a = 0, count_b = 0;
  for (std::size_t i = first; i < steps.size(); ++i) {
    count_a += vals[i] == a;
    count_b += vals[i] == b;
    if (i >= first + w) {
      count_a -= vals[i - w] == a;
      count_b -= vals[i - w] == b;
    }
    if (i + 1 >= first + w && (count_a == 0 || count_b == 0)) return false;
  }
  return true;
}

}  // namespace po2q
