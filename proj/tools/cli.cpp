#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "po2q/po2q.hpp"

namespace po2q::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Raised for runs that finish but must be reported as failed (e.g. divergence).
class RunFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------ json helpers

/// Reads known keys from an object and rejects anything it did not consume.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw InvalidConfig(where_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& dst) {
    if (const json* v = take(key)) dst = v->get<T>();
  }

  /// null clears the optional.
  template <typename T>
  void get_optional(const char* key, std::optional<T>& dst) {
    if (const json* v = take(key)) {
      if (v->is_null()) {
        dst.reset();
      } else {
        dst = v->get<T>();
      }
    }
  }

  const json* take(const char* key) {
    const auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw InvalidConfig(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

double parse_sigma(const std::string& s) {
  if (s == "inf" || s == "Inf" || s == "INF") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw InvalidConfig("sigma_outlier must be a positive number or 'inf', got '" + s + "'");
  }
  if (used != s.size() || !(v > 0.0)) {
    throw InvalidConfig("sigma_outlier must be a positive number or 'inf', got '" + s + "'");
  }
  return v;
}

json sigma_to_json(const std::optional<double>& s) {
  if (!s) return nullptr;
  if (std::isinf(*s)) return "inf";
  return *s;
}

std::optional<double> sigma_from_json(const json& v) {
  if (v.is_null()) return std::nullopt;
  if (v.is_string()) return parse_sigma(v.get<std::string>());
  return parse_sigma(std::to_string(v.get<double>()));
}

std::optional<std::int64_t> parse_step_or_none(const std::string& s) {
  if (s == "none") return std::nullopt;
  std::size_t used = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    throw InvalidConfig("expected a step index or 'none', got '" + s + "'");
  }
  if (used != s.size() || v < 0) throw InvalidConfig("expected a step index or 'none', got '" + s + "'");
  return v;
}

// ------------------------------------------------------------ config <-> json

json to_json(const ToyQuantizerExperimentConfig& c) {
  json j;
  j["n_elements"] = c.n_elements;
  j["noise_sigma"] = c.noise_sigma;
  j["init_delta_log2"] = c.init_delta_log2 ? json(*c.init_delta_log2) : json(nullptr);
  j["steps"] = c.steps;
  j["lr"] = c.lr;
  j["mode"] = std::string(to_string(c.mode));
  j["seed"] = c.seed;
  j["freeze_at"] = c.freeze_at ? json(*c.freeze_at) : json(nullptr);
  j["bits"] = c.bits;
  j["signed"] = c.is_signed;
  j["input"] = std::string(to_string(c.input));
  j["input_seed"] = c.input_seed;
  j["target_delta"] = c.target_delta;
  j["ema_decay"] = c.ema_decay;
  return j;
}

void from_json(const json& j, ToyQuantizerExperimentConfig& c, const std::string& where) {
  Fields f(j, where);
  f.get("n_elements", c.n_elements);
  f.get("noise_sigma", c.noise_sigma);
  f.get_optional("init_delta_log2", c.init_delta_log2);
  f.get("steps", c.steps);
  f.get("lr", c.lr);
  if (const json* v = f.take("mode")) c.mode = parse_rounding_mode(v->get<std::string>());
  f.get("seed", c.seed);
  f.get_optional("freeze_at", c.freeze_at);
  f.get("bits", c.bits);
  f.get("signed", c.is_signed);
  if (const json* v = f.take("input")) c.input = parse_toy_input(v->get<std::string>());
  f.get("input_seed", c.input_seed);
  f.get("target_delta", c.target_delta);
  f.get("ema_decay", c.ema_decay);
  f.finish();
  c.validate();
}

json to_json(const MsqeFitConfig& c) {
  return {{"n_iters", c.n_iters},
          {"line_search_range", c.line_search_range},
          {"sigma_outlier", sigma_to_json(c.sigma_outlier)},
          {"use_gva", c.use_gva}};
}

void from_json(const json& j, MsqeFitConfig& c, const std::string& where) {
  Fields f(j, where);
  f.get("n_iters", c.n_iters);
  f.get("line_search_range", c.line_search_range);
  if (const json* v = f.take("sigma_outlier")) c.sigma_outlier = sigma_from_json(*v);
  f.get("use_gva", c.use_gva);
  f.finish();
}

json to_json(const QatModelConfig& c) {
  return {{"hidden", c.hidden},
          {"batch_norm", c.batch_norm},
          {"bn_momentum", c.bn_momentum},
          {"bn_epsilon", c.bn_epsilon},
          {"init_seed", c.init_seed}};
}

void from_json(const json& j, QatModelConfig& c) {
  Fields f(j, "model");
  f.get("hidden", c.hidden);
  f.get("batch_norm", c.batch_norm);
  f.get("bn_momentum", c.bn_momentum);
  f.get("bn_epsilon", c.bn_epsilon);
  f.get("init_seed", c.init_seed);
  f.finish();
}

json to_json(const QatQuantizerConfig& c) {
  return {{"weight", std::string(to_string(c.weight))},
          {"quantize_activations", c.quantize_activations},
          {"weight_bits", c.weight_bits},
          {"activation_bits", c.activation_bits},
          {"bias_bits", c.bias_bits},
          {"msqe", to_json(c.msqe)},
          {"grad_mode", std::string(to_string(c.grad_mode))},
          {"grad_use_gva", c.grad_use_gva},
          {"gva_decay", c.gva_decay},
          {"ema_decay", c.ema_decay},
          {"freeze_fraction", c.freeze_fraction ? json(*c.freeze_fraction) : json(nullptr)}};
}

void from_json(const json& j, QatQuantizerConfig& c) {
  Fields f(j, "quantizer");
  if (const json* v = f.take("weight")) c.weight = parse_weight_quantizer(v->get<std::string>());
  f.get("quantize_activations", c.quantize_activations);
  f.get("weight_bits", c.weight_bits);
  f.get("activation_bits", c.activation_bits);
  f.get("bias_bits", c.bias_bits);
  if (const json* v = f.take("msqe")) from_json(*v, c.msqe, "quantizer.msqe");
  if (const json* v = f.take("grad_mode")) c.grad_mode = parse_rounding_mode(v->get<std::string>());
  f.get("grad_use_gva", c.grad_use_gva);
  f.get("gva_decay", c.gva_decay);
  f.get("ema_decay", c.ema_decay);
  f.get_optional("freeze_fraction", c.freeze_fraction);
  f.finish();
}

json to_json(const QatDataConfig& c) {
  return {{"n_train", c.n_train},       {"n_val", c.n_val},
          {"dim", c.dim},               {"classes", c.classes},
          {"clusters_per_class", c.clusters_per_class},
          {"separation", c.separation}, {"noise", c.noise},
          {"seed", c.seed}};
}

void from_json(const json& j, QatDataConfig& c) {
  Fields f(j, "data");
  f.get("n_train", c.n_train);
  f.get("n_val", c.n_val);
  f.get("dim", c.dim);
  f.get("classes", c.classes);
  f.get("clusters_per_class", c.clusters_per_class);
  f.get("separation", c.separation);
  f.get("noise", c.noise);
  f.get("seed", c.seed);
  f.finish();
}

json to_json(const QatTrainConfig& c) {
  json j{{"steps", c.steps},   {"batch_size", c.batch_size}, {"lr", c.lr},
         {"scale_lr", c.scale_lr}, {"seed", c.seed},          {"eval_every", c.eval_every}};
  if (c.injection) {
    j["injection"] = {{"layer", c.injection->layer},
                      {"start_step", c.injection->start_step},
                      {"ramp_steps", c.injection->ramp_steps},
                      {"factor", c.injection->factor},
                      {"fraction", c.injection->fraction}};
  } else {
    j["injection"] = nullptr;
  }
  return j;
}

void from_json(const json& j, QatTrainConfig& c) {
  Fields f(j, "train");
  f.get("steps", c.steps);
  f.get("batch_size", c.batch_size);
  f.get("lr", c.lr);
  f.get("scale_lr", c.scale_lr);
  f.get("seed", c.seed);
  f.get("eval_every", c.eval_every);
  if (const json* v = f.take("injection")) {
    if (v->is_null()) {
      c.injection.reset();
    } else {
      OutlierInjection inj;
      Fields g(*v, "train.injection");
      g.get("layer", inj.layer);
      g.get("start_step", inj.start_step);
      g.get("ramp_steps", inj.ramp_steps);
      g.get("factor", inj.factor);
      g.get("fraction", inj.fraction);
      g.finish();
      c.injection = inj;
    }
  }
  f.finish();
}

// ------------------------------------------------------------ file helpers

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open config " + path);
  return json::parse(in);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_series_csv(const fs::path& path, const MetricSeries& s) {
  std::ostringstream os;
  os << std::setprecision(17) << "step," << s.name() << "\n";
  for (std::size_t i = 0; i < s.size(); ++i) os << s.steps()[i] << "," << s.values()[i] << "\n";
  write_text(path, os.str());
}

fs::path prepare_out_dir(const std::string& dir) {
  fs::path p(dir);
  fs::create_directories(p);
  return p;
}

QuantConfig quant_config(int bits, bool is_signed) {
  (void)qrange(bits, is_signed);
  return is_signed ? QuantConfig::signed_bits(bits) : QuantConfig::unsigned_bits(bits);
}

// ------------------------------------------------------------ subcommands

struct FitScaleArgs {
  std::string input;
  int bits = 4;
  bool is_signed = true;
  int n_iters = 2;
  int line_search = 0;
  std::string sigma_outlier;
  std::string gva_state;
  std::optional<double> delta_init;
};

int cmd_fit_scale(const FitScaleArgs& a, std::ostream& out) {
  const RealTensor w = read_real_tensor(a.input);
  const QuantConfig cfg = quant_config(a.bits, a.is_signed);
  MsqeFitConfig fit;
  fit.n_iters = a.n_iters;
  fit.line_search_range = a.line_search;
  fit.sigma_outlier = a.sigma_outlier.empty() ? std::nullopt : std::optional<double>(parse_sigma(a.sigma_outlier));
  std::optional<GvaState> gva;
  if (!a.gva_state.empty()) {
    RealTensor v = read_real_tensor(a.gva_state);
    require_same_shape(w, v, "--gva-state");
    gva = GvaState{std::move(v), 0.99, 1};
    fit.use_gva = true;
  }
  fit.validate();

  const double delta_init = a.delta_init ? *a.delta_init : max_abs(w) / static_cast<double>(cfg.q_max);
  if (!(delta_init > 0.0) || !std::isfinite(delta_init)) {
    throw InvalidConfig("delta_init must be positive and finite (is the input all zeros?)");
  }
  const std::optional<RealTensor> f = msqe_weight_factors(w, fit, gva ? &*gva : nullptr);
  const FitTrace trace = f ? weighted_fit_scale_traced(w, delta_init, fit.n_iters, *f, cfg)
                           : fit_scale_msqe_traced(w, delta_init, fit.n_iters, cfg);
  const Po2Scale chosen = fit.line_search_range > 0
                              ? line_search(w, trace.scale, fit.line_search_range, cfg, f ? &*f : nullptr)
                              : trace.scale;

  json iters = json::array();
  for (const auto& it : trace.iterations) {
    iters.push_back({{"numerator", it.numerator},
                     {"denominator", it.denominator},
                     {"delta", it.delta},
                     {"exponent", it.projected.exponent()}});
  }
  const Po2Scale initial = po2_project(delta_init);
  json j{{"exponent", chosen.exponent()},
         {"scale", chosen.value()},
         {"delta_init", delta_init},
         {"fit_exponent", trace.scale.exponent()},
         {"msqe_before", msqe_at(w, initial, cfg)},
         {"msqe_fit", msqe_at(w, trace.scale, cfg)},
         {"msqe_after", msqe_at(w, chosen, cfg)},
         {"clip_fraction", clip_fraction(w, chosen, cfg)},
         {"iterations", iters}};
  out << j.dump(2) << "\n";
  return kOk;
}

struct QuantizeArgs {
  std::string input;
  int bits = 4;
  bool is_signed = true;
  std::optional<int> exponent;
  int n_iters = 2;
  std::string out;
  std::string codes_out;
};

int cmd_quantize(const QuantizeArgs& a, std::ostream& out) {
  const RealTensor w = read_real_tensor(a.input);
  const QuantConfig cfg = quant_config(a.bits, a.is_signed);
  Po2Scale s;
  if (a.exponent) {
    s = Po2Scale(*a.exponent);
  } else {
    const double init = max_abs(w) / static_cast<double>(cfg.q_max);
    if (!(init > 0.0)) throw InvalidConfig("cannot fit a scale to an all-zero tensor; pass --exponent");
    s = fit_scale_msqe(w, init, a.n_iters, cfg);
  }
  const CodeTensor codes = quant_codes(w, s, cfg);
  if (!a.out.empty()) write_tensor(a.out, dequantize(codes, s));
  if (!a.codes_out.empty()) write_tensor(a.codes_out, codes);
  json j{{"exponent", s.exponent()},
         {"scale", s.value()},
         {"msqe", msqe_at(w, s, cfg)},
         {"clip_fraction", clip_fraction(w, s, cfg)}};
  out << j.dump(2) << "\n";
  return kOk;
}

struct GradFitArgs {
  std::string input;
  int bits = 4;
  bool is_signed = true;
  std::string mode = "ceil";
  std::int64_t steps = 1000;
  double lr = 0.01;
  std::string freeze_at = "none";
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;
  std::optional<double> init_delta_log2;
  double ema_decay = 0.99;
  std::string out;
};

int cmd_grad_fit(const GradFitArgs& a, std::ostream& out) {
  const RealTensor w = read_real_tensor(a.input);
  ToyQuantizerExperimentConfig c;
  c.n_elements = w.size();
  c.noise_sigma = a.noise_sigma;
  c.init_delta_log2 = a.init_delta_log2;
  c.steps = a.steps;
  c.lr = a.lr;
  c.mode = parse_rounding_mode(a.mode);
  c.seed = a.seed;
  c.freeze_at = parse_step_or_none(a.freeze_at);
  c.bits = a.bits;
  c.is_signed = a.is_signed;
  c.ema_decay = a.ema_decay;
  const ToyRun run = run_toy_quantizer(c, w);

  std::ostringstream os;
  os << std::setprecision(17) << "step,delta_log2,exponent,msqe,clip_fraction\n";
  for (std::size_t i = 0; i < run.exponent.size(); ++i) {
    os << run.exponent.steps()[i] << "," << run.delta_log2.values()[i] << "," << run.exponent.values()[i]
       << "," << run.msqe.values()[i] << "," << run.clip_fraction.values()[i] << "\n";
  }
  if (a.out.empty()) {
    out << os.str();
  } else {
    write_text(a.out, os.str());
  }
  return kOk;
}

struct RunArgs {
  std::string config;
  std::string out;
  std::optional<std::int64_t> steps;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<int> num_seeds;
  std::optional<std::string> mode;
  std::optional<std::string> freeze_at;
  std::optional<std::string> weight_quantizer;
};

int cmd_toy_rtlm(const RunArgs& a, std::ostream& out) {
  std::vector<double> sigmas{0.01, 0.05, 0.1};
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 20; ++s) seeds.push_back(s);
  std::vector<std::string> modes{"ceil", "rtlm"};
  ToyQuantizerExperimentConfig base;

  if (!a.config.empty()) {
    const json j = load_json(a.config);
    Fields f(j, "toy-rtlm config");
    f.get("sigmas", sigmas);
    f.get("seeds", seeds);
    f.get("modes", modes);
    if (const json* v = f.take("experiment")) from_json(*v, base, "experiment");
    f.finish();
  }
  if (a.steps) base.steps = *a.steps;
  if (a.lr) base.lr = *a.lr;
  if (a.num_seeds) {
    if (*a.num_seeds < 1) throw InvalidConfig("--seeds must be >= 1");
    seeds.clear();
    for (int s = 0; s < *a.num_seeds; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
  }
  if (sigmas.empty() || seeds.empty() || modes.empty()) throw InvalidConfig("sweep lists must be non-empty");
  for (const auto& m : modes) (void)parse_rounding_mode(m);
  for (double s : sigmas) {
    if (!(s >= 0.0)) throw InvalidConfig("noise sigmas must be >= 0");
  }
  base.validate();

  const fs::path dir = prepare_out_dir(a.out);
  const json resolved{{"sigmas", sigmas}, {"seeds", seeds}, {"modes", modes}, {"experiment", to_json(base)}};
  write_json(dir / "config.json", resolved);

  json summary{{"sigmas", json::array()}};
  std::ostringstream transitions;
  transitions << "sigma,mode,seed,transitions\n";
  bool all_ordered = true;
  for (double sigma : sigmas) {
    ToyQuantizerExperimentConfig c = base;
    c.noise_sigma = sigma;
    const RealTensor input = make_toy_input(c);
    json per_sigma{{"sigma", sigma}, {"mean_transitions", json::object()}};
    for (const auto& m : modes) {
      c.mode = parse_rounding_mode(m);
      std::vector<double> counts;
      std::vector<ToyRun> runs;
      for (std::uint64_t seed : seeds) {
        c.seed = seed;
        runs.push_back(run_toy_quantizer(c, input));
        const auto n = metric_scale_transitions(runs.back().exponent);
        counts.push_back(static_cast<double>(n));
        transitions << std::setprecision(17) << sigma << "," << m << "," << seed << "," << n << "\n";
      }
      per_sigma["mean_transitions"][m] = mean_of(counts);

      // One exponent CSV per (sigma, mode): a column per seed.
      std::ostringstream os;
      os << "step";
      for (std::uint64_t seed : seeds) os << ",seed" << seed;
      os << "\n";
      for (std::size_t i = 0; i < runs.front().exponent.size(); ++i) {
        os << runs.front().exponent.steps()[i];
        for (const auto& r : runs) os << "," << r.exponent.values()[i];
        os << "\n";
      }
      std::ostringstream name;
      name << "exponent_sigma" << sigma << "_" << m << ".csv";
      write_text(dir / name.str(), os.str());
    }
    const auto& mt = per_sigma["mean_transitions"];
    if (mt.contains("ceil") && mt.contains("rtlm")) {
      const bool ordered = mt["rtlm"].get<double>() < mt["ceil"].get<double>();
      per_sigma["rtlm_below_ceil"] = ordered;
      all_ordered = all_ordered && ordered;
    }
    summary["sigmas"].push_back(per_sigma);
  }
  summary["rtlm_below_ceil_all"] = all_ordered;
  write_text(dir / "transitions.csv", transitions.str());
  write_json(dir / "summary.json", summary);
  out << summary.dump(2) << "\n";
  return kOk;
}

int cmd_toy_converge(const RunArgs& a, std::ostream& out) {
  ToyQuantizerExperimentConfig c = default_convergence_config();
  std::int64_t warmup = 500;
  std::int64_t window = 500;
  if (!a.config.empty()) {
    const json j = load_json(a.config);
    Fields f(j, "toy-converge config");
    if (const json* v = f.take("experiment")) from_json(*v, c, "experiment");
    f.get("warmup", warmup);
    f.get("window", window);
    f.finish();
  }
  if (a.steps) c.steps = *a.steps;
  if (a.lr) c.lr = *a.lr;
  if (a.seed) c.seed = *a.seed;
  if (a.mode) c.mode = parse_rounding_mode(*a.mode);
  if (a.freeze_at) c.freeze_at = parse_step_or_none(*a.freeze_at);
  if (warmup < 0 || window < 1) throw InvalidConfig("warmup must be >= 0 and window >= 1");
  c.validate();

  const fs::path dir = prepare_out_dir(a.out);
  write_json(dir / "config.json", {{"experiment", to_json(c)}, {"warmup", warmup}, {"window", window}});

  const RealTensor input = make_toy_input(c);
  const ToyRun run = run_toy_quantizer(c, input);
  for (const MetricSeries* s : {&run.exponent, &run.delta_log2, &run.ema_log2, &run.msqe, &run.clip_fraction}) {
    write_series_csv(dir / (s->name() + ".csv"), *s);
  }

  const QuantConfig qc = quant_config(c.bits, c.is_signed);
  json summary{{"transitions", metric_scale_transitions(run.exponent)},
               {"mean_scale_fluctuation", metric_scale_fluctuation(run.exponent)},
               {"unconstrained_optimum", continuous_msqe_optimum(input, qc, 1e-3, 10.0, 20000)},
               {"initial_delta_log2", run.initial_delta_log2}};
  const std::int64_t horizon = c.freeze_at ? std::min(*c.freeze_at, c.steps) : c.steps;
  MetricSeries live("exponent");
  for (std::size_t i = 0; i < run.exponent.size() && run.exponent.steps()[i] < horizon; ++i) {
    live.push(run.exponent.steps()[i], run.exponent.values()[i]);
  }
  summary["visits_minus1_and_0_every_window"] = visits_both_in_every_window(live, -1.0, 0.0, warmup, window);
  if (c.freeze_at && *c.freeze_at < c.steps) {
    const auto t = static_cast<std::size_t>(*c.freeze_at);
    std::int64_t changes = 0;
    for (std::size_t i = t + 1; i < run.exponent.size(); ++i) {
      changes += run.exponent.values()[i] != run.exponent.values()[i - 1];
    }
    const double replay = replay_exponent_ema(run.initial_delta_log2, c.ema_decay, run.exponent, *c.freeze_at);
    summary["frozen_exponent"] = run.exponent.values()[t];
    summary["replayed_ema"] = replay;
    summary["post_freeze_changes"] = changes;
    summary["frozen_matches_replay"] = run.exponent.values()[t] == round_half_away(replay);
  } else {
    summary["frozen_exponent"] = nullptr;
  }
  write_json(dir / "summary.json", summary);
  out << summary.dump(2) << "\n";
  return kOk;
}

int cmd_qat(const RunArgs& a, std::ostream& out) {
  QatModelConfig model;
  QatQuantizerConfig quant;
  QatDataConfig data;
  QatTrainConfig train;
  if (!a.config.empty()) {
    const json j = load_json(a.config);
    Fields f(j, "qat config");
    if (const json* v = f.take("model")) from_json(*v, model);
    if (const json* v = f.take("quantizer")) from_json(*v, quant);
    if (const json* v = f.take("data")) from_json(*v, data);
    if (const json* v = f.take("train")) from_json(*v, train);
    f.finish();
  }
  if (a.steps) train.steps = *a.steps;
  if (a.lr) train.lr = *a.lr;
  if (a.seed) train.seed = *a.seed;
  if (a.weight_quantizer) quant.weight = parse_weight_quantizer(*a.weight_quantizer);
  if (a.mode) quant.grad_mode = parse_rounding_mode(*a.mode);
  model.validate();
  quant.validate();
  data.validate();
  train.validate();

  const fs::path dir = prepare_out_dir(a.out);
  write_json(dir / "config.json", {{"model", to_json(model)},
                                   {"quantizer", to_json(quant)},
                                   {"data", to_json(data)},
                                   {"train", to_json(train)}});

  const QatResult r = toy_qat_train(model, quant, data, train);
  json transitions = json::object();
  json fluctuation = json::object();
  for (const auto& s : r.series) {
    write_series_csv(dir / (s.name() + ".csv"), s);
    if (s.name().find("_exponent") != std::string::npos) {
      transitions[s.name()] = metric_scale_transitions(s);
      fluctuation[s.name()] = metric_scale_fluctuation(s);
    }
  }
  json summary{{"final_train_accuracy", r.final_train_accuracy},
               {"final_val_accuracy", r.final_val_accuracy},
               {"divergence_step", r.divergence_step ? json(*r.divergence_step) : json(nullptr)},
               {"divergence_reason", r.divergence_reason},
               {"transition_counts", transitions},
               {"mean_scale_fluctuation", fluctuation}};
  write_json(dir / "summary.json", summary);
  out << summary.dump(2) << "\n";
  if (r.divergence_step) throw RunFailed("training diverged at step " + std::to_string(*r.divergence_step));
  return kOk;
}

struct SimulateArgs {
  std::string layer;
  std::string input;
  std::string out;
  bool check = false;
};

QuantizedLayer load_layer(const std::string& path) {
  const json j = load_json(path);
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };

  Fields f(j, "layer");
  std::string weight_codes, bias_codes;
  int weight_exponent = 0, bias_exponent = 0, input_exponent = 0, output_exponent = 0;
  int weight_bits = 4, bias_bits = 8, input_bits = 8, output_bits = 8;
  bool weight_signed = true, bias_signed = true, input_signed = true, output_signed = true;
  const json* wc = f.take("weight_codes");
  const json* bc = f.take("bias_codes");
  if (!wc || !bc) throw InvalidConfig("layer: weight_codes and bias_codes are required");
  weight_codes = wc->get<std::string>();
  bias_codes = bc->get<std::string>();
  f.get("weight_exponent", weight_exponent);
  f.get("bias_exponent", bias_exponent);
  f.get("input_exponent", input_exponent);
  f.get("output_exponent", output_exponent);
  f.get("weight_bits", weight_bits);
  f.get("bias_bits", bias_bits);
  f.get("input_bits", input_bits);
  f.get("output_bits", output_bits);
  f.get("weight_signed", weight_signed);
  f.get("bias_signed", bias_signed);
  f.get("input_signed", input_signed);
  f.get("output_signed", output_signed);
  f.finish();

  return make_quantized_layer(read_code_tensor(resolve(weight_codes)), Po2Scale(weight_exponent),
                              quant_config(weight_bits, weight_signed), read_code_tensor(resolve(bias_codes)),
                              Po2Scale(bias_exponent), Po2Scale(input_exponent),
                              quant_config(input_bits, input_signed), Po2Scale(output_exponent),
                              quant_config(output_bits, output_signed), quant_config(bias_bits, bias_signed));
}

int cmd_simulate_int(const SimulateArgs& a, std::ostream& out) {
  const QuantizedLayer layer = load_layer(a.layer);
  const CodeTensor input = read_code_tensor(a.input);
  const CodeTensor y = int_forward(layer, input);
  if (!a.out.empty()) write_tensor(a.out, y);
  if (!a.check) {
    out << json{{"output_shape", y.shape()}, {"shift", layer.output_shift()}}.dump(2) << "\n";
    return kOk;
  }
  const CodeTensor ref = float_reference_forward(layer, input);
  if (const auto i = first_mismatch(y, ref)) {
    out << "FAIL first mismatch at index " << *i << ": int=" << y[*i] << " reference=" << ref[*i] << "\n";
    return kRuntime;
  }
  out << "PASS " << y.size() << " outputs match the float reference\n";
  return kOk;
}

void add_quant_flags(CLI::App* sub, int& bits, bool& is_signed) {
  sub->add_option("--bits", bits, "Bit width")->capture_default_str();
  sub->add_flag("--signed,!--unsigned", is_signed, "Signed (default) or unsigned code range");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Power-of-two quantization toolkit", "po2q"};
  app.require_subcommand(1);

  FitScaleArgs fit;
  auto* fit_cmd = app.add_subcommand("fit-scale", "Fit a PO2 scale by iterative least squares");
  fit_cmd->add_option("--input", fit.input, "Weight tensor (PQT1)")->required();
  add_quant_flags(fit_cmd, fit.bits, fit.is_signed);
  fit_cmd->add_option("--n-iters", fit.n_iters, "Least-squares iterations")->capture_default_str();
  fit_cmd->add_option("--line-search", fit.line_search, "Exponent search radius (0 = off)")->capture_default_str();
  fit_cmd->add_option("--sigma-outlier", fit.sigma_outlier, "Outlier threshold in std devs, or 'inf'");
  fit_cmd->add_option("--gva-state", fit.gva_state, "Second-moment tensor (PQT1) weighting the fit");
  fit_cmd->add_option("--delta-init", fit.delta_init, "Initial real scale (default max|w| / q_max)");

  QuantizeArgs qz;
  auto* qz_cmd = app.add_subcommand("quantize", "Quantize a tensor with a PO2 scale");
  qz_cmd->add_option("--input", qz.input, "Real tensor (PQT1)")->required();
  add_quant_flags(qz_cmd, qz.bits, qz.is_signed);
  qz_cmd->add_option("--exponent", qz.exponent, "Scale exponent (default: least-squares fit)");
  qz_cmd->add_option("--n-iters", qz.n_iters, "Fit iterations when no exponent is given")->capture_default_str();
  qz_cmd->add_option("--out", qz.out, "Dequantized output tensor (f64)");
  qz_cmd->add_option("--codes-out", qz.codes_out, "Integer code tensor (i64)");

  GradFitArgs gf;
  auto* gf_cmd = app.add_subcommand("grad-fit", "Learn a log2 scale by gradient descent on MSQE");
  gf_cmd->add_option("--input", gf.input, "Weight tensor (PQT1)")->required();
  add_quant_flags(gf_cmd, gf.bits, gf.is_signed);
  gf_cmd->add_option("--mode", gf.mode, "ceil | round | rtlm")->capture_default_str();
  gf_cmd->add_option("--steps", gf.steps, "Optimizer steps")->capture_default_str();
  gf_cmd->add_option("--lr", gf.lr, "Adam learning rate")->capture_default_str();
  gf_cmd->add_option("--freeze-at", gf.freeze_at, "Step at which to freeze, or 'none'")->capture_default_str();
  gf_cmd->add_option("--seed", gf.seed, "Noise seed")->capture_default_str();
  gf_cmd->add_option("--noise-sigma", gf.noise_sigma, "Per-step Gaussian input noise")->capture_default_str();
  gf_cmd->add_option("--init-delta-log2", gf.init_delta_log2, "Initial log2 scale (default from range)");
  gf_cmd->add_option("--ema-decay", gf.ema_decay, "Exponent EMA decay")->capture_default_str();
  gf_cmd->add_option("--out", gf.out, "CSV path (default stdout)");

  RunArgs rtlm, conv, qat;
  auto add_run_flags = [](CLI::App* sub, RunArgs& r) {
    sub->add_option("--config", r.config, "JSON config file");
    sub->add_option("--out", r.out, "Output directory")->required();
    sub->add_option("--steps", r.steps, "Override the step count");
    sub->add_option("--lr", r.lr, "Override the learning rate");
  };
  auto* rtlm_cmd = app.add_subcommand("toy-rtlm", "Noise-perturbed rounding-mode stability sweep");
  add_run_flags(rtlm_cmd, rtlm);
  rtlm_cmd->add_option("--seeds", rtlm.num_seeds, "Use seeds 0..N-1");

  auto* conv_cmd = app.add_subcommand("toy-converge", "Oscillation at convergence and EMA freeze");
  add_run_flags(conv_cmd, conv);
  conv_cmd->add_option("--seed", conv.seed, "Override the seed");
  conv_cmd->add_option("--mode", conv.mode, "ceil | round | rtlm");
  conv_cmd->add_option("--freeze-at", conv.freeze_at, "Step at which to freeze, or 'none'");

  auto* qat_cmd = app.add_subcommand("qat", "Toy quantization-aware training");
  add_run_flags(qat_cmd, qat);
  qat_cmd->add_option("--seed", qat.seed, "Override the training seed");
  qat_cmd->add_option("--weight-quantizer", qat.weight_quantizer, "none | msqe | grad");
  qat_cmd->add_option("--mode", qat.mode, "GRAD rounding mode: ceil | round | rtlm");

  SimulateArgs sim;
  auto* sim_cmd = app.add_subcommand("simulate-int", "Integer-only single layer inference");
  sim_cmd->add_option("--layer", sim.layer, "Layer JSON (tensor paths relative to it)")->required();
  sim_cmd->add_option("--input", sim.input, "Input codes (PQT1, i64)")->required();
  sim_cmd->add_option("--out", sim.out, "Output codes (PQT1, i64)");
  sim_cmd->add_flag("--check", sim.check, "Compare against the float reference");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kOk;
    if (argc <= 1) err << app.help();
    return kUsage;
  }

  try {
    if (*fit_cmd) return cmd_fit_scale(fit, out);
    if (*qz_cmd) return cmd_quantize(qz, out);
    if (*gf_cmd) return cmd_grad_fit(gf, out);
    if (*rtlm_cmd) return cmd_toy_rtlm(rtlm, out);
    if (*conv_cmd) return cmd_toy_converge(conv, out);
    if (*qat_cmd) return cmd_qat(qat, out);
    if (*sim_cmd) return cmd_simulate_int(sim, out);
  } catch (const InvalidConfig& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeMismatch& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const InvalidWeights& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const json::exception& e) {
    err << "error: bad JSON: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace po2q::cli
