#pragma once

// Regression and classification metrics, the boundary discontinuity
// measure, an MC-dropout baseline and a latency harness.

#include "ntkmoe/calibration.hpp"
#include "ntkmoe/common.hpp"
#include "ntkmoe/moe_pipeline.hpp"
#include "ntkmoe/nn_core.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace ntkmoe {

// Mean over all entries of 0.5 log(2 pi s2) + (y - mu)^2 / (2 s2).
inline double nll_regression(const Eigen::Ref<const Matrix>& means, const Eigen::Ref<const Matrix>& variances,
                             const Eigen::Ref<const Matrix>& targets) {
  require_dims(means.rows() == targets.rows() && means.cols() == targets.cols() && variances.rows() == targets.rows() &&
                   variances.cols() == targets.cols(),
               "nll_regression: shape mismatch");
  require(targets.size() >= 1, "nll_regression: empty input");
  if (!(variances.array() > 0.0).all()) throw NumericalError("nll_regression: variances must be > 0");
  const auto r2 = (targets - means).array().square();
  const auto terms = 0.5 * (2.0 * std::numbers::pi * variances.array()).log() + r2 / (2.0 * variances.array());
  return terms.sum() / static_cast<double>(targets.size());
}

inline double rmse(const Eigen::Ref<const Matrix>& means, const Eigen::Ref<const Matrix>& targets) {
  require_dims(means.rows() == targets.rows() && means.cols() == targets.cols(), "rmse: shape mismatch");
  require(targets.size() >= 1, "rmse: empty input");
  return std::sqrt((targets - means).squaredNorm() / static_cast<double>(targets.size()));
}

inline double entropy(const Eigen::Ref<const Vector>& p) {
  double h = 0.0;
  for (Index i = 0; i < p.size(); ++i)
    if (p(i) > 0) h -= p(i) * std::log(p(i));
  return h;
}

struct EntropyHistograms {
  std::vector<long> in_dist;
  std::vector<long> ood;
  double mean_in = 0.0;
  double mean_ood = 0.0;
  std::vector<double> entropies_in;
  std::vector<double> entropies_ood;
};

// Counts of calibrated-prediction entropies in equal-width bins on [0, log C].
inline EntropyHistograms entropy_histogram(const MoeModel& model, const Eigen::Ref<const Matrix>& X_in,
                                           const Eigen::Ref<const Matrix>& X_ood, int bins) {
  require(bins >= 1, "entropy_histogram: bins must be >= 1");
  const double top = std::log(static_cast<double>(model.output_dim()));
  EntropyHistograms h;
  h.in_dist.assign(bins, 0);
  h.ood.assign(bins, 0);
  auto fill = [&](const Eigen::Ref<const Matrix>& X, std::vector<long>& counts, std::vector<double>& values) {
    double sum = 0.0;
    for (Index i = 0; i < X.rows(); ++i) {
      const double e = entropy(predict_calibrated(model, X.row(i).transpose()).probs);
      values.push_back(e);
      sum += e;
      int b = top > 0 ? static_cast<int>(e / top * bins) : 0;
      counts[std::clamp(b, 0, bins - 1)] += 1;
    }
    return X.rows() ? sum / static_cast<double>(X.rows()) : 0.0;
  };
  h.mean_in = fill(X_in, h.in_dist, h.entropies_in);
  h.mean_ood = fill(X_ood, h.ood, h.entropies_ood);
  return h;
}

// Largest jump between consecutive entries.
inline double max_abs_step(const std::vector<double>& values) {
  double worst = 0.0;
  for (std::size_t t = 1; t < values.size(); ++t) worst = std::max(worst, std::abs(values[t] - values[t - 1]));
  return worst;
}

// Largest change of the predictive standard deviation (first output)
// between consecutive points of a uniformly spaced path.
inline double discontinuity_metric(const MoeModel& model, const Eigen::Ref<const Matrix>& path) {
  require(path.rows() >= 2, "discontinuity_metric: need at least two path points");
  const double step = (path.row(1) - path.row(0)).norm();
  for (Index t = 2; t < path.rows(); ++t) {
    const double s = (path.row(t) - path.row(t - 1)).norm();
    require(std::abs(s - step) <= 1e-6 * std::max(1.0, step), "discontinuity_metric: path spacing is not uniform");
  }
  std::vector<double> sd;
  sd.reserve(path.rows());
  for (Index t = 0; t < path.rows(); ++t) sd.push_back(std::sqrt(predict_moe(model, path.row(t).transpose()).variance(0)));
  return max_abs_step(sd);
}

struct DropoutPrediction {
  Vector mean;
  Vector variance;
};

// S stochastic passes with inverted dropout on the hidden activations.
inline DropoutPrediction mc_dropout_baseline(const MlpParams& mlp, const Eigen::Ref<const Vector>& x, double rate,
                                             int samples, std::uint64_t seed) {
  require(rate > 0 && rate < 1, "mc_dropout_baseline: rate must lie in (0, 1)");
  require(samples >= 2, "mc_dropout_baseline: need at least two samples");
  require_dims(x.size() == mlp.spec.input_dim(), "mc_dropout_baseline: input dimension mismatch");
  const int layers = mlp.spec.weight_layers();
  const int K = mlp.spec.output_dim();
  const double scale = 1.0 / (1.0 - rate);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix outs(K, samples);
  Vector a;
  for (int s = 0; s < samples; ++s) {
    a = x;
    for (int l = 0; l < layers; ++l) {
      Vector z = mlp.weights(l) * a + mlp.bias(l);
      if (l + 1 < layers) {
        if (mlp.spec.activation == Activation::tanh) {
          z = z.array().tanh();
        } else {
          z = z.array().max(0.0);
        }
        for (Index j = 0; j < z.size(); ++j) z(j) = keep(rng) ? z(j) * scale : 0.0;
      }
      a = std::move(z);
    }
    outs.col(s) = a;
  }
  DropoutPrediction p;
  p.mean = outs.rowwise().mean();
  p.variance = (outs.colwise() - p.mean).array().square().rowwise().sum() / static_cast<double>(samples - 1);
  return p;
}

struct TimingReport {
  int inputs = 0;
  int dropout_samples = 0;
  double moe_median_us = 0.0;
  double dropout_median_us = 0.0;
  double speedup = 0.0;  // dropout latency / moe latency
};

namespace detail {

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Per-input latency of predict_moe against an S-sample MC-dropout pass,
// single threaded, medians over the rows of X after one warmup sweep.
inline TimingReport timing(const MoeModel& model, const Eigen::Ref<const Matrix>& X, double rate = 0.1,
                           int samples = 20, std::uint64_t seed = 0) {
  require(X.rows() >= 100, "timing: need at least 100 inputs");
  using Clock = std::chrono::steady_clock;
  double sink = 0.0;
  for (Index i = 0; i < X.rows(); ++i) {
    sink += predict_moe(model, X.row(i).transpose()).variance(0);
    sink += mc_dropout_baseline(model.mlp, X.row(i).transpose(), rate, samples, seed + i).variance(0);
  }
  std::vector<double> moe_us, drop_us;
  for (Index i = 0; i < X.rows(); ++i) {
    auto t0 = Clock::now();
    sink += predict_moe(model, X.row(i).transpose()).variance(0);
    auto t1 = Clock::now();
    sink += mc_dropout_baseline(model.mlp, X.row(i).transpose(), rate, samples, seed + i).variance(0);
    auto t2 = Clock::now();
    moe_us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
    drop_us.push_back(std::chrono::duration<double, std::micro>(t2 - t1).count());
  }
  if (!std::isfinite(sink)) log()->warn("timing: non-finite accumulator");
  TimingReport r;
  r.inputs = static_cast<int>(X.rows());
  r.dropout_samples = samples;
  r.moe_median_us = detail::median(moe_us);
  r.dropout_median_us = detail::median(drop_us);
  r.speedup = r.dropout_median_us / std::max(r.moe_median_us, 1e-9);
  return r;
}

struct MetricReport {
  double nll = 0.0;
  double rmse = 0.0;
  double mean_variance = 0.0;
  int clamped = 0;
  std::map<std::string, double> runtime_ms;
};

// NLL with the network mean and the routed expert's variance.
inline MetricReport evaluate_regression(const MoeModel& model, const LabeledDataset& data) {
  require_dims(data.input_dim() == model.mlp.spec.input_dim() && data.output_dim() == model.output_dim(),
               "evaluate_regression: dataset dimensions do not match the model");
  const auto t0 = std::chrono::steady_clock::now();
  Matrix mean(data.size(), data.output_dim());
  Matrix var(data.size(), data.output_dim());
  MetricReport r;
  for (Index i = 0; i < data.size(); ++i) {
    const PredictiveDist p = predict_moe(model, data.X.row(i).transpose());
    mean.row(i) = p.mean.transpose();
    var.row(i) = p.variance.transpose();
    r.clamped += p.clamped;
  }
  r.runtime_ms["predict"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  r.nll = nll_regression(mean, var, data.Y);
  r.rmse = rmse(mean, data.Y);
  r.mean_variance = var.mean();
  return r;
}

}  // namespace ntkmoe
