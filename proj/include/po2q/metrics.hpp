#pragma once

// Stability metrics recorded during training runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "po2q/error.hpp"
#include "po2q/tensor.hpp"

namespace po2q {

class MetricSeries {
 public:
  MetricSeries() = default;
  explicit MetricSeries(std::string name) : name_(std::move(name)) {}

  void push(std::int64_t step, double value) {
    if (!steps_.empty() && step <= steps_.back()) {
      throw InvalidConfig("metric series '" + name_ + "': steps must be strictly increasing");
    }
    steps_.push_back(step);
    values_.push_back(value);
  }

  const std::string& name() const noexcept { return name_; }
  const std::vector<std::int64_t>& steps() const noexcept { return steps_; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  friend bool operator==(const MetricSeries&, const MetricSeries&) = default;

 private:
  std::string name_;
  std::vector<std::int64_t> steps_;
  std::vector<double> values_;
};

namespace detail {

inline double population_variance(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  return var / static_cast<double>(x.size());
}

inline double variance_of_difference(const RealTensor& a, const RealTensor& b, const char* what) {
  require_same_shape(a, b, what);
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return population_variance(d);
}

}  // namespace detail

/// Population variance of the quantization residual w_q - w.
inline double metric_quant_error_variance(const RealTensor& w, const RealTensor& w_q) {
  return detail::variance_of_difference(w_q, w, "metric_quant_error_variance");
}

/// Population variance of the step-to-step change in the quantized weight.
inline double metric_fluctuation_variance(const RealTensor& w_q_t, const RealTensor& w_q_prev) {
  return detail::variance_of_difference(w_q_t, w_q_prev, "metric_fluctuation_variance");
}

/// Largest over smallest per-channel max|w|.
inline double metric_dynamic_range_ratio(const RealTensor& w, std::size_t channel_axis) {
  if (channel_axis >= w.rank()) throw ShapeMismatch("channel axis out of range");
  const Shape& s = w.shape();
  const std::size_t channels = s[channel_axis];
  std::size_t inner = 1;
  for (std::size_t d = channel_axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t outer = w.size() / (channels * inner);
  std::vector<double> range(channels, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t k = 0; k < inner; ++k) {
        const double x = std::abs(w[(o * channels + c) * inner + k]);
        range[c] = std::max(range[c], x);
      }
    }
  }
  const auto [lo, hi] = std::minmax_element(range.begin(), range.end());
  if (!(*lo > 0.0)) throw UndefinedRatio("dynamic range ratio undefined: a channel is all zero");
  return *hi / *lo;
}

/// mean(v over mask == 0) / mean(v over mask == 1).
inline double metric_second_moment_ratio(const RealTensor& v, const RealTensor& mask) {
  require_same_shape(v, mask, "metric_second_moment_ratio");
  double out_sum = 0.0, in_sum = 0.0;
  std::size_t out_n = 0, in_n = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask[i] == 0.0) {
      out_sum += v[i];
      ++out_n;
    } else {
      in_sum += v[i];
      ++in_n;
    }
  }
  if (out_n == 0 || in_n == 0) throw UndefinedRatio("second moment ratio needs both outliers and inliers");
  const double in_mean = in_sum / static_cast<double>(in_n);
  if (in_mean == 0.0) throw UndefinedRatio("inlier second moment is zero");
  return (out_sum / static_cast<double>(out_n)) / in_mean;
}

/// Number of consecutive entries whose value differs.
inline std::int64_t metric_scale_transitions(const MetricSeries& series) {
  const auto& v = series.values();
  std::int64_t n = 0;
  for (std::size_t i = 1; i < v.size(); ++i) n += v[i] != v[i - 1] ? 1 : 0;
  return n;
}

/// Mean |value(t) - value(t-1)| per step.
inline double metric_scale_fluctuation(const MetricSeries& series) {
  const auto& v = series.values();
  if (v.size() < 2) return 0.0;
  double total = 0.0;
  for (std::size_t i = 1; i < v.size(); ++i) total += std::abs(v[i] - v[i - 1]);
  return total / static_cast<double>(v.size() - 1);
}

inline double mean_of(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

}  // namespace po2q
