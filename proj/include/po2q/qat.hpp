#pragma once

// Toy quantization-aware training on synthetic Gaussian clusters.
//
// The model is a stack of dense layers. Hidden layers carry batch
// normalization, which is folded into the weights every step with the current
// batch statistics before the weight quantizer sees them. The batch
// statistics are treated as constants in the backward pass. Hidden
// activations go through unsigned learned-scale quantizers, and biases are
// quantized on their own PO2 grid at higher precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "po2q/core_quant.hpp"
#include "po2q/error.hpp"
#include "po2q/grad_quant.hpp"
#include "po2q/metrics.hpp"
#include "po2q/msqe_opt.hpp"
#include "po2q/optim.hpp"
#include "po2q/rng.hpp"
#include "po2q/tensor.hpp"

namespace po2q {

// ---------------------------------------------------------------- data

struct QatDataConfig {
  std::size_t n_train = 8000;
  std::size_t n_val = 2000;
  std::size_t dim = 16;
  std::size_t classes = 4;
  std::size_t clusters_per_class = 2;
  /// Standard deviation of the cluster centres per coordinate.
  double separation = 1.0;
  /// Standard deviation of the points around their centre.
  double noise = 1.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (n_train == 0 || n_val == 0) throw InvalidConfig("dataset sizes must be positive");
    if (dim == 0) throw InvalidConfig("dim must be positive");
    if (classes < 2) throw InvalidConfig("need at least two classes");
    if (clusters_per_class == 0) throw InvalidConfig("clusters_per_class must be positive");
    if (!(separation > 0.0) || !(noise >= 0.0)) throw InvalidConfig("invalid cluster geometry");
  }
};

struct ClassificationData {
  RealTensor features;  // [n, dim]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.shape()[1]; }
};

/// Train and validation splits drawn from the same cluster mixture.
inline std::pair<ClassificationData, ClassificationData> make_cluster_data(const QatDataConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t n_centres = cfg.classes * cfg.clusters_per_class;
  std::vector<double> centres(n_centres * cfg.dim);
  for (double& c : centres) c = rng.normal(0.0, cfg.separation);

  auto draw = [&](std::size_t n) {
    ClassificationData d{RealTensor(Shape{n, cfg.dim}, 0.0), std::vector<int>(n)};
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n_centres) - 1));
      d.labels[i] = static_cast<int>(k % cfg.classes);
      for (std::size_t j = 0; j < cfg.dim; ++j) {
        d.features.at(i, j) = centres[k * cfg.dim + j] + rng.normal(0.0, cfg.noise);
      }
    }
    return d;
  };
  ClassificationData train = draw(cfg.n_train);
  ClassificationData val = draw(cfg.n_val);
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------- configs

struct QatModelConfig {
  std::vector<std::size_t> hidden = {32, 32};
  bool batch_norm = true;
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-3;
  std::uint64_t init_seed = 1;

  void validate() const {
    for (std::size_t h : hidden) {
      if (h == 0) throw InvalidConfig("hidden widths must be positive");
    }
    if (!(bn_momentum > 0.0 && bn_momentum < 1.0)) throw InvalidConfig("bn_momentum must be in (0, 1)");
    if (!(bn_epsilon > 0.0)) throw InvalidConfig("bn_epsilon must be > 0");
  }
};

enum class WeightQuantizer { none, msqe, grad };

inline std::string_view to_string(WeightQuantizer k) {
  switch (k) {
    case WeightQuantizer::none: return "none";
    case WeightQuantizer::msqe: return "msqe";
    case WeightQuantizer::grad: return "grad";
  }
  return "?";
}

inline WeightQuantizer parse_weight_quantizer(std::string_view s) {
  if (s == "none") return WeightQuantizer::none;
  if (s == "msqe") return WeightQuantizer::msqe;
  if (s == "grad") return WeightQuantizer::grad;
  throw InvalidConfig("unknown weight quantizer '" + std::string(s) + "'");
}

struct QatQuantizerConfig {
  WeightQuantizer weight = WeightQuantizer::grad;
  /// Quantize hidden activations with learned unsigned PO2 scales.
  bool quantize_activations = true;
  int weight_bits = 4;
  int activation_bits = 4;
  int bias_bits = 8;
  MsqeFitConfig msqe{};
  RoundingMode grad_mode = RoundingMode::rtlm;
  /// Weight the RTLM decision by the GVA moments.
  bool grad_use_gva = false;
  double gva_decay = 0.99;
  double ema_decay = 0.99;
  /// Freeze every learned scale at this fraction of the run.
  std::optional<double> freeze_fraction = 0.94;

  bool quantizes_anything() const { return weight != WeightQuantizer::none || quantize_activations; }

  void validate() const {
    (void)qrange(weight_bits, true);
    (void)qrange(activation_bits, false);
    (void)qrange(bias_bits, true);
    msqe.validate();
    if (!(gva_decay > 0.0 && gva_decay < 1.0)) throw InvalidConfig("gva_decay must be in (0, 1)");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw InvalidConfig("ema_decay must be in (0, 1)");
    if (freeze_fraction && !(*freeze_fraction >= 0.0 && *freeze_fraction <= 1.0)) {
      throw InvalidConfig("freeze_fraction must be in [0, 1]");
    }
  }

  /// Full-precision reference: nothing quantized.
  static QatQuantizerConfig float_baseline() {
    QatQuantizerConfig q;
    q.weight = WeightQuantizer::none;
    q.quantize_activations = false;
    q.freeze_fraction.reset();
    return q;
  }
};

/// Multiplies the largest-magnitude weights of one layer by a factor that
/// ramps linearly from 1 to `factor`, then holds it there.
struct OutlierInjection {
  std::size_t layer = 0;
  std::int64_t start_step = 300;
  std::int64_t ramp_steps = 100;
  double factor = 50.0;
  double fraction = 0.001;
};

struct QatTrainConfig {
  std::int64_t steps = 1500;
  std::size_t batch_size = 128;
  double lr = 0.01;
  /// Learning rate for learned log2 scales; both follow the same cosine decay.
  double scale_lr = 0.01;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 100;
  std::optional<OutlierInjection> injection;

  void validate() const {
    if (steps < 1) throw InvalidConfig("steps must be >= 1");
    if (batch_size == 0) throw InvalidConfig("batch_size must be positive");
    if (!(lr > 0.0) || !(scale_lr > 0.0)) throw InvalidConfig("learning rates must be > 0");
    if (eval_every < 1) throw InvalidConfig("eval_every must be >= 1");
    if (injection) {
      if (injection->start_step < 0 || injection->ramp_steps < 1) {
        throw InvalidConfig("injection needs start_step >= 0 and ramp_steps >= 1");
      }
      if (!(injection->factor > 0.0)) throw InvalidConfig("injection factor must be > 0");
      if (!(injection->fraction > 0.0 && injection->fraction <= 1.0)) {
        throw InvalidConfig("injection fraction must be in (0, 1]");
      }
    }
  }
};

// ---------------------------------------------------------------- model

struct DenseLayer {
  RealTensor weight;  // [out, in]
  RealTensor bias;    // [out]; only trained when there is no batch norm
  bool has_bn = false;
  RealTensor gamma;
  RealTensor beta;
  std::vector<double> moving_mean;
  std::vector<double> moving_var;

  AdamState weight_opt;
  AdamState bias_opt;
  AdamState gamma_opt;
  AdamState beta_opt;

  std::size_t in() const { return weight.shape()[1]; }
  std::size_t out() const { return weight.shape()[0]; }
};

struct WeightQuantizerState {
  bool initialized = false;
  GradScaleState grad;
  ScalarAdam grad_opt;
  Po2Scale scale;
  GvaState gva;
  RealTensor prev_w_q;
  bool has_prev = false;
};

struct ActivationQuantizerState {
  bool initialized = false;
  GradScaleState grad;
  ScalarAdam opt;
};

/// Folded weight and bias of one layer in its exported (inference) form.
struct FoldedLayer {
  RealTensor weight;
  RealTensor bias;
  std::optional<Po2Scale> weight_scale;
  std::optional<Po2Scale> bias_scale;
};

struct QatResult {
  double final_train_accuracy = 0.0;
  double final_val_accuracy = 0.0;
  std::optional<std::int64_t> divergence_step;
  std::string divergence_reason;
  std::vector<MetricSeries> series;

  const MetricSeries& find(const std::string& name) const {
    for (const auto& s : series) {
      if (s.name() == name) return s;
    }
    throw InvalidConfig("no metric series named '" + name + "'");
  }
};

namespace detail {

/// y = x W^T + b for x [n, in], W [out, in].
inline RealTensor dense(const RealTensor& x, const RealTensor& w, const RealTensor& b) {
  const std::size_t n = x.shape()[0], in = w.shape()[1], out = w.shape()[0];
  RealTensor y(Shape{n, out}, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += x.at(r, i) * w.at(o, i);
      y.at(r, o) = acc;
    }
  }
  return y;
}

inline std::vector<double> column_mean(const RealTensor& z) {
  const std::size_t n = z.shape()[0], m = z.shape()[1];
  std::vector<double> mu(m, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) mu[c] += z.at(r, c);
  }
  for (double& v : mu) v /= static_cast<double>(n);
  return mu;
}

inline std::vector<double> column_var(const RealTensor& z, const std::vector<double>& mu) {
  const std::size_t n = z.shape()[0], m = z.shape()[1];
  std::vector<double> var(m, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) var[c] += (z.at(r, c) - mu[c]) * (z.at(r, c) - mu[c]);
  }
  for (double& v : var) v /= static_cast<double>(n);
  return var;
}

inline double mean_or_nan(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return mean_of(v);
}

struct SoftmaxLoss {
  double loss = 0.0;
  std::size_t correct = 0;
  RealTensor grad;  // d mean-loss / d logits
};

inline SoftmaxLoss softmax_cross_entropy(const RealTensor& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  SoftmaxLoss out{0.0, 0, RealTensor(logits.shape(), 0.0)};
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (logits.at(r, c) > mx) {
        mx = logits.at(r, c);
        arg = c;
      }
    }
    if (arg == static_cast<std::size_t>(labels[r])) ++out.correct;
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(logits.at(r, c) - mx);
    const double log_z = mx + std::log(z);
    out.loss += log_z - logits.at(r, static_cast<std::size_t>(labels[r]));
    for (std::size_t c = 0; c < k; ++c) {
      const double p = std::exp(logits.at(r, c) - log_z);
      out.grad.at(r, c) = (p - (c == static_cast<std::size_t>(labels[r]) ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  out.loss /= static_cast<double>(n);
  return out;
}

inline std::size_t count_correct(const RealTensor& logits, const std::vector<int>& labels) {
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < logits.shape()[1]; ++c) {
      if (logits.at(r, c) > logits.at(r, arg)) arg = c;
    }
    if (arg == static_cast<std::size_t>(labels[r])) ++correct;
  }
  return correct;
}

}  // namespace detail

/**
 * Stateful trainer. `toy_qat_train` drives it end to end; tests use it
 * directly to inspect the model between steps.
 */
class QatTrainer {
 public:
  QatTrainer(QatModelConfig model, QatQuantizerConfig quant, QatDataConfig data, QatTrainConfig train)
      : model_cfg_(std::move(model)),
        quant_cfg_(std::move(quant)),
        data_cfg_(std::move(data)),
        train_cfg_(std::move(train)),
        weight_q_(QuantConfig::signed_bits(quant_cfg_.weight_bits)),
        act_q_(QuantConfig::unsigned_bits(quant_cfg_.activation_bits)),
        bias_q_(QuantConfig::signed_bits(quant_cfg_.bias_bits)),
        batch_rng_(train_cfg_.seed) {
    model_cfg_.validate();
    quant_cfg_.validate();
    data_cfg_.validate();
    train_cfg_.validate();
    std::tie(train_, val_) = make_cluster_data(data_cfg_);
    build_model();
    if (train_cfg_.injection && train_cfg_.injection->layer >= layers_.size()) {
      throw InvalidConfig("injection layer index out of range");
    }
    if (quant_cfg_.freeze_fraction) {
      freeze_at_ = static_cast<std::int64_t>(
          std::llround(*quant_cfg_.freeze_fraction * static_cast<double>(train_cfg_.steps)));
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      series_.emplace_back("layer" + std::to_string(l) + "_weight_exponent");
    }
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
      series_.emplace_back("layer" + std::to_string(l) + "_activation_exponent");
    }
    for (const char* name : {"loss", "train_batch_accuracy", "quant_error_variance",
                             "fluctuation_variance", "dynamic_range_ratio", "second_moment_ratio",
                             "val_accuracy"}) {
      series_.emplace_back(name);
    }
  }

  std::size_t num_layers() const { return layers_.size(); }
  const DenseLayer& layer(std::size_t i) const { return layers_.at(i); }
  const WeightQuantizerState& weight_quantizer(std::size_t i) const { return wq_.at(i); }
  const ActivationQuantizerState& activation_quantizer(std::size_t i) const { return aq_.at(i); }
  const ClassificationData& train_data() const { return train_; }
  const ClassificationData& val_data() const { return val_; }
  std::int64_t step_index() const { return step_; }
  std::optional<std::int64_t> freeze_at() const { return freeze_at_; }
  bool diverged() const { return divergence_step_.has_value(); }
  const std::vector<std::size_t>& injected_indices() const { return injected_; }

  /// One optimization step. Returns false (and records the step) on divergence.
  bool step() {
    if (diverged()) return false;
    const std::int64_t t = step_;
    try {
      run_step(t);
    } catch (const Error& e) {
      divergence_step_ = t;
      divergence_reason_ = e.what();
    }
    ++step_;
    return !diverged();
  }

  /// Train for the configured number of steps (or until divergence).
  QatResult run() {
    while (step_ < train_cfg_.steps && step()) {
    }
    QatResult r;
    if (!diverged()) {
      r.final_train_accuracy = accuracy(train_);
      r.final_val_accuracy = accuracy(val_);
      record("val_accuracy", step_, r.final_val_accuracy);
    }
    r.divergence_step = divergence_step_;
    r.divergence_reason = divergence_reason_;
    r.series = series_;
    return r;
  }

  /**
   * Inference-form layers: batch norm folded with the moving statistics and,
   * when quantization is on, weights and biases snapped to their grids.
   */
  std::vector<FoldedLayer> export_folded() const {
    std::vector<FoldedLayer> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      FoldedLayer f;
      std::tie(f.weight, f.bias) = fold_eval(l);
      if (quant_cfg_.weight != WeightQuantizer::none) {
        const Po2Scale s = eval_weight_scale(l, f.weight);
        f.weight = quantize(f.weight, s, weight_q_);
        f.weight_scale = s;
      }
      if (quant_cfg_.quantizes_anything()) {
        const Po2Scale bs = covering_po2(max_abs(f.bias), bias_q_);
        f.bias = quantize(f.bias, bs, bias_q_);
        f.bias_scale = bs;
      }
      out.push_back(std::move(f));
    }
    return out;
  }

  /// Activation scale used at inference after hidden layer l, if quantized.
  std::optional<Po2Scale> eval_activation_scale(std::size_t l) const {
    if (!quant_cfg_.quantize_activations) return std::nullopt;
    const auto& a = aq_.at(l);
    if (!a.initialized) return std::nullopt;
    if (a.grad.frozen) return Po2Scale(checked_exponent(round_half_away(a.grad.ema_log2)));
    return a.grad.last_po2;
  }

  /// Inference logits from the exported folded layers.
  RealTensor eval_logits(const RealTensor& x) const {
    const auto folded = export_folded();
    RealTensor a = x;
    for (std::size_t l = 0; l < folded.size(); ++l) {
      RealTensor y = detail::dense(a, folded[l].weight, folded[l].bias);
      if (l + 1 == folded.size()) return y;
      for (double& v : y) v = std::max(v, 0.0);
      if (const auto s = eval_activation_scale(l)) y = quantize(y, *s, act_q_);
      a = std::move(y);
    }
    return a;
  }

  /**
   * Full-precision inference the long way: linear layer, then batch norm
   * with moving statistics as a separate step. Matches eval_logits when
   * nothing is quantized.
   */
  RealTensor unfolded_eval_logits(const RealTensor& x) const {
    RealTensor a = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const DenseLayer& L = layers_[l];
      RealTensor y = detail::dense(a, L.weight, L.bias);
      if (L.has_bn) {
        for (std::size_t r = 0; r < y.shape()[0]; ++r) {
          for (std::size_t c = 0; c < L.out(); ++c) {
            const double xhat = (y.at(r, c) - L.moving_mean[c]) / std::sqrt(L.moving_var[c] + model_cfg_.bn_epsilon);
            y.at(r, c) = L.gamma[c] * xhat + L.beta[c];
          }
        }
      }
      if (l + 1 == layers_.size()) return y;
      for (double& v : y) v = std::max(v, 0.0);
      a = std::move(y);
    }
    return a;
  }

  double accuracy(const ClassificationData& d) const {
    return static_cast<double>(detail::count_correct(eval_logits(d.features), d.labels)) /
           static_cast<double>(d.size());
  }

 private:
  void build_model() {
    Rng rng(model_cfg_.init_seed);
    std::vector<std::size_t> widths{data_cfg_.dim};
    widths.insert(widths.end(), model_cfg_.hidden.begin(), model_cfg_.hidden.end());
    widths.push_back(data_cfg_.classes);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const std::size_t in = widths[l], out = widths[l + 1];
      DenseLayer L;
      L.weight = RealTensor(Shape{out, in}, 0.0);
      const double sd = std::sqrt(2.0 / static_cast<double>(in));
      for (double& w : L.weight) w = rng.normal(0.0, sd);
      L.bias = RealTensor(Shape{out}, 0.0);
      L.has_bn = model_cfg_.batch_norm && l + 2 < widths.size();
      L.gamma = RealTensor(Shape{out}, 1.0);
      L.beta = RealTensor(Shape{out}, 0.0);
      L.moving_mean.assign(out, 0.0);
      L.moving_var.assign(out, 1.0);
      L.weight_opt = make_adam_state(L.weight.shape());
      L.bias_opt = make_adam_state(L.bias.shape());
      L.gamma_opt = make_adam_state(L.gamma.shape());
      L.beta_opt = make_adam_state(L.beta.shape());
      layers_.push_back(std::move(L));

      WeightQuantizerState w;
      w.gva = make_gva_state(Shape{out, in}, quant_cfg_.gva_decay);
      wq_.push_back(std::move(w));
      if (l + 2 < widths.size()) aq_.emplace_back();
    }
  }

  std::pair<RealTensor, RealTensor> fold_eval(std::size_t l) const {
    const DenseLayer& L = layers_[l];
    if (!L.has_bn) return {L.weight, L.bias};
    BnParams bn{L.gamma.values(), L.beta.values(), L.moving_mean, L.moving_var, model_cfg_.bn_epsilon};
    return fold_batchnorm(L.weight, RealTensor(Shape{L.out()}, 0.0), bn);
  }

  Po2Scale eval_weight_scale(std::size_t l, const RealTensor& w_f) const {
    const WeightQuantizerState& q = wq_[l];
    if (quant_cfg_.weight == WeightQuantizer::grad) {
      if (q.grad.frozen) return Po2Scale(checked_exponent(round_half_away(q.grad.ema_log2)));
      return effective_scale(q.grad, w_f, quant_cfg_.grad_use_gva ? &q.gva : nullptr, weight_q_);
    }
    return msqe_scale(l, w_f);
  }

  Po2Scale msqe_scale(std::size_t l, const RealTensor& w_f) const {
    const WeightQuantizerState& q = wq_[l];
    const double fresh = max_abs(w_f) / static_cast<double>(weight_q_.q_max);
    const double init = q.initialized ? q.scale.value() : fresh;
    const GvaState* gva = quant_cfg_.msqe.use_gva ? &q.gva : nullptr;
    try {
      return fit_po2_scale(w_f, init, quant_cfg_.msqe, weight_q_, gva);
    } catch (const DegenerateCodes&) {
      // The previous scale rounds everything to zero; restart from the range.
      return fit_po2_scale(w_f, fresh, quant_cfg_.msqe, weight_q_, gva);
    }
  }

  void record(const std::string& name, std::int64_t step, double value) {
    for (auto& s : series_) {
      if (s.name() == name) {
        s.push(step, value);
        return;
      }
    }
  }

  void apply_injection(std::int64_t t) {
    const auto& inj = *train_cfg_.injection;
    if (t < inj.start_step) return;
    RealTensor& w = layers_[inj.layer].weight;
    if (injected_.empty()) {
      const auto k = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(inj.fraction * static_cast<double>(w.size()))));
      std::vector<std::size_t> idx(w.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      std::stable_sort(idx.begin(), idx.end(),
                       [&](std::size_t a, std::size_t b) { return std::abs(w[a]) > std::abs(w[b]); });
      injected_.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
      for (std::size_t i : injected_) injected_base_.push_back(w[i]);
    }
    const double progress =
        std::min(1.0, static_cast<double>(t - inj.start_step + 1) / static_cast<double>(inj.ramp_steps));
    const double factor = 1.0 + (inj.factor - 1.0) * progress;
    for (std::size_t k = 0; k < injected_.size(); ++k) w[injected_[k]] = injected_base_[k] * factor;
  }

  std::vector<std::size_t> sample_batch() {
    const std::size_t n = train_.size();
    std::vector<std::size_t> idx(train_cfg_.batch_size);
    for (auto& i : idx) i = static_cast<std::size_t>(batch_rng_.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    return idx;
  }

  // Per-layer tensors kept from the forward pass for the backward pass.
  struct Cache {
    RealTensor input;     // a, [B, in]
    RealTensor w_f;       // folded weight before quantization
    RealTensor w_used;    // weight actually multiplied
    Po2Scale w_scale;
    std::vector<double> mu, inv_std, scale;  // batch statistics; scale = gamma * inv_std
    RealTensor pre;       // y, [B, out]
    RealTensor relu;      // max(y, 0)
  };

  void run_step(std::int64_t t) {
    if (freeze_at_ && t == *freeze_at_) {
      for (auto& q : wq_) q.grad.frozen = true;
      for (auto& a : aq_) a.grad.frozen = true;
    }
    if (train_cfg_.injection) apply_injection(t);

    const double decay = cosine_decay(1.0, static_cast<std::uint64_t>(t),
                                      static_cast<std::uint64_t>(train_cfg_.steps));
    const double lr = train_cfg_.lr * decay;
    const double scale_lr = train_cfg_.scale_lr * decay;

    const auto batch = sample_batch();
    const std::size_t B = batch.size();
    RealTensor a(Shape{B, data_cfg_.dim}, 0.0);
    std::vector<int> labels(B);
    for (std::size_t r = 0; r < B; ++r) {
      labels[r] = train_.labels[batch[r]];
      for (std::size_t j = 0; j < data_cfg_.dim; ++j) a.at(r, j) = train_.features.at(batch[r], j);
    }

    const bool quant_w = quant_cfg_.weight != WeightQuantizer::none;
    const bool quant_any = quant_cfg_.quantizes_anything();
    std::vector<Cache> cache(layers_.size());
    std::vector<double> qerr, fluct, drr, smr;

    // Forward.
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      DenseLayer& L = layers_[l];
      Cache& c = cache[l];
      c.input = a;
      RealTensor b_f = L.bias;
      c.w_f = L.weight;
      if (L.has_bn) {
        const RealTensor z = detail::dense(a, L.weight, RealTensor(Shape{L.out()}, 0.0));
        c.mu = detail::column_mean(z);
        const std::vector<double> var = detail::column_var(z, c.mu);
        c.scale.resize(L.out());
        c.inv_std.resize(L.out());
        const double m = model_cfg_.bn_momentum;
        for (std::size_t o = 0; o < L.out(); ++o) {
          c.inv_std[o] = 1.0 / std::sqrt(var[o] + model_cfg_.bn_epsilon);
          c.scale[o] = L.gamma[o] * c.inv_std[o];
          for (std::size_t i = 0; i < L.in(); ++i) c.w_f.at(o, i) = c.scale[o] * L.weight.at(o, i);
          b_f[o] = L.beta[o] - c.scale[o] * c.mu[o];
          L.moving_mean[o] = m * L.moving_mean[o] + (1.0 - m) * c.mu[o];
          L.moving_var[o] = m * L.moving_var[o] + (1.0 - m) * var[o];
        }
      }

      c.w_used = c.w_f;
      WeightQuantizerState& q = wq_[l];
      if (quant_w) {
        if (quant_cfg_.weight == WeightQuantizer::grad) {
          if (!q.initialized) {
            q.grad = make_grad_scale_state(init_delta_log2(c.w_f, weight_q_), quant_cfg_.grad_mode,
                                           quant_cfg_.ema_decay);
          }
          const Po2Scale observed =
              effective_scale(q.grad, c.w_f, quant_cfg_.grad_use_gva ? &q.gva : nullptr, weight_q_);
          auto [next, used] = freeze_step(q.grad, observed);
          q.grad = next;
          q.grad.last_po2 = used;
          q.scale = used;
        } else {
          q.scale = msqe_scale(l, c.w_f);
        }
        q.initialized = true;
        c.w_scale = q.scale;
        c.w_used = quantize(c.w_f, q.scale, weight_q_);
        record("layer" + std::to_string(l) + "_weight_exponent", t, q.scale.exponent());
        qerr.push_back(metric_quant_error_variance(c.w_f, c.w_used));
        if (q.has_prev) fluct.push_back(metric_fluctuation_variance(c.w_used, q.prev_w_q));
        q.prev_w_q = c.w_used;
        q.has_prev = true;
      }
      if (quant_any) {
        const double mb = max_abs(b_f);
        b_f = quantize(b_f, covering_po2(mb, bias_q_), bias_q_);
      }
      if (c.w_f.size() > 0) {
        try {
          drr.push_back(metric_dynamic_range_ratio(c.w_f, 0));
        } catch (const UndefinedRatio&) {
        }
      }

      c.pre = detail::dense(a, c.w_used, b_f);
      if (l + 1 == layers_.size()) break;
      c.relu = c.pre;
      for (double& v : c.relu) v = std::max(v, 0.0);
      a = c.relu;
      if (quant_cfg_.quantize_activations) {
        ActivationQuantizerState& aq = aq_[l];
        if (!aq.initialized) {
          aq.grad = make_grad_scale_state(init_delta_log2(c.relu, act_q_), RoundingMode::ceil,
                                          quant_cfg_.ema_decay);
          aq.initialized = true;
        }
        const Po2Scale observed = effective_scale(aq.grad, c.relu, nullptr, act_q_);
        auto [next, used] = freeze_step(aq.grad, observed);
        aq.grad = next;
        aq.grad.last_po2 = used;
        a = quantize(c.relu, used, act_q_);
        record("layer" + std::to_string(l) + "_activation_exponent", t, used.exponent());
      }
    }

    const detail::SoftmaxLoss loss = detail::softmax_cross_entropy(cache.back().pre, labels);
    if (!std::isfinite(loss.loss)) throw DomainError("non-finite loss");

    // Backward.
    RealTensor dy = loss.grad;
    for (std::size_t li = layers_.size(); li-- > 0;) {
      DenseLayer& L = layers_[li];
      Cache& c = cache[li];
      const std::size_t in = L.in(), out = L.out();
      RealTensor dw_q(Shape{out, in}, 0.0);
      RealTensor db(Shape{out}, 0.0);
      RealTensor da(Shape{B, in}, 0.0);
      for (std::size_t r = 0; r < B; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
          const double g = dy.at(r, o);
          if (g == 0.0) continue;
          db[o] += g;
          for (std::size_t i = 0; i < in; ++i) {
            dw_q.at(o, i) += g * c.input.at(r, i);
            da.at(r, i) += g * c.w_used.at(o, i);
          }
        }
      }

      WeightQuantizerState& q = wq_[li];
      RealTensor dw_f = dw_q;
      if (quant_w) {
        if (quant_cfg_.weight == WeightQuantizer::grad) {
          const BackwardResult g = backward(c.w_f, q.grad, dw_q, weight_q_);
          dw_f = g.grad_w;
          if (!q.grad.frozen) q.grad.delta_log2 = q.grad_opt.step(q.grad.delta_log2, g.grad_delta_log2, scale_lr);
        } else {
          const SteTerms ste = ste_scale_terms(c.w_f, c.w_scale, weight_q_);
          for (std::size_t i = 0; i < dw_f.size(); ++i) dw_f[i] *= ste.pass[i];
        }
        q.gva = gva_update(std::move(q.gva), dw_f);
        const RealTensor mask = outlier_mask(c.w_f, quant_cfg_.msqe.sigma_outlier.value_or(2.0));
        try {
          smr.push_back(metric_second_moment_ratio(q.gva.v, mask));
        } catch (const UndefinedRatio&) {
        }
      }

      if (L.has_bn) {
        RealTensor dw(Shape{out, in}, 0.0);
        RealTensor dgamma(Shape{out}, 0.0);
        RealTensor dbeta(Shape{out}, 0.0);
        for (std::size_t o = 0; o < out; ++o) {
          double ds = -c.mu[o] * db[o];
          for (std::size_t i = 0; i < in; ++i) {
            dw.at(o, i) = c.scale[o] * dw_f.at(o, i);
            ds += dw_f.at(o, i) * L.weight.at(o, i);
          }
          dgamma[o] = ds * c.inv_std[o];
          dbeta[o] = db[o];
        }
        std::tie(L.weight, L.weight_opt) = adam_step(std::move(L.weight), dw, std::move(L.weight_opt), lr);
        std::tie(L.gamma, L.gamma_opt) = adam_step(std::move(L.gamma), dgamma, std::move(L.gamma_opt), lr);
        std::tie(L.beta, L.beta_opt) = adam_step(std::move(L.beta), dbeta, std::move(L.beta_opt), lr);
      } else {
        std::tie(L.weight, L.weight_opt) = adam_step(std::move(L.weight), dw_f, std::move(L.weight_opt), lr);
        std::tie(L.bias, L.bias_opt) = adam_step(std::move(L.bias), db, std::move(L.bias_opt), lr);
      }

      if (li == 0) break;
      // Through the activation quantizer and ReLU of the previous layer.
      Cache& p = cache[li - 1];
      RealTensor dr = da;
      if (quant_cfg_.quantize_activations) {
        ActivationQuantizerState& aq = aq_[li - 1];
        const BackwardResult g = backward(p.relu, aq.grad, da, act_q_);
        dr = g.grad_w;
        if (!aq.grad.frozen) aq.grad.delta_log2 = aq.opt.step(aq.grad.delta_log2, g.grad_delta_log2, scale_lr);
      }
      for (std::size_t i = 0; i < dr.size(); ++i) {
        if (!(p.pre[i] > 0.0)) dr[i] = 0.0;
      }
      dy = std::move(dr);
    }

    record("loss", t, loss.loss);
    record("train_batch_accuracy", t, static_cast<double>(loss.correct) / static_cast<double>(B));
    if (!qerr.empty()) record("quant_error_variance", t, mean_of(qerr));
    if (!fluct.empty()) record("fluctuation_variance", t, mean_of(fluct));
    if (!drr.empty()) record("dynamic_range_ratio", t, mean_of(drr));
    if (!smr.empty()) record("second_moment_ratio", t, mean_of(smr));
    if ((t + 1) % train_cfg_.eval_every == 0 && t + 1 < train_cfg_.steps) {
      record("val_accuracy", t, accuracy(val_));
    }
  }

  QatModelConfig model_cfg_;
  QatQuantizerConfig quant_cfg_;
  QatDataConfig data_cfg_;
  QatTrainConfig train_cfg_;
  QuantConfig weight_q_;
  QuantConfig act_q_;
  QuantConfig bias_q_;
  Rng batch_rng_;

  ClassificationData train_;
  ClassificationData val_;
  std::vector<DenseLayer> layers_;
  std::vector<WeightQuantizerState> wq_;
  std::vector<ActivationQuantizerState> aq_;
  std::vector<MetricSeries> series_;

  std::int64_t step_ = 0;
  std::optional<std::int64_t> freeze_at_;
  std::optional<std::int64_t> divergence_step_;
  std::string divergence_reason_;
  std::vector<std::size_t> injected_;
  std::vector<double> injected_base_;
};

/// Train a toy model end to end and return final accuracies and all metric series.
inline QatResult toy_qat_train(const QatModelConfig& model, const QatQuantizerConfig& quant,
                               const QatDataConfig& data, const QatTrainConfig& train = {}) {
  QatTrainer trainer(model, quant, data, train);
  return trainer.run();
}

}  // namespace po2q
