#pragma once

// Variance-driven temperature scaling for classifiers built on a mixture
// of NTK experts.

#include "ntkmoe/common.hpp"
#include "ntkmoe/moe_pipeline.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace ntkmoe {

inline double temperature(double sigma2, double lambda0) {
  require(sigma2 >= 0 && lambda0 >= 0, "temperature: inputs must be >= 0");
  return std::sqrt(1.0 + lambda0 * sigma2);
}

inline Vector calibrated_probs(const Eigen::Ref<const Vector>& logits, double T) {
  require(T >= 1.0, "calibrated_probs: temperature must be >= 1");
  Vector z = logits / T;
  z.array() -= z.maxCoeff();
  Vector p = z.array().exp();
  return p / p.sum();
}

// Mean over class outputs of the routed expert's predictive variance.
inline double classification_variance(const PredictiveDist& pred) { return pred.variance.mean(); }

inline double classification_variance(const MoeModel& model, const Eigen::Ref<const Vector>& x) {
  return classification_variance(predict_moe(model, x));
}

// Scaling constant that applies to a prediction served by `expert` (of
// the first partition group).
inline double lambda_for(const CalibrationParams& c, int expert) {
  if (!c.per_expert.empty()) return c.per_expert.at(static_cast<std::size_t>(expert));
  return c.lambda0;
}

struct CalibratedPrediction {
  Vector logits;
  Vector probs;
  double variance = 0.0;
  double temperature = 1.0;
  int expert = 0;
};

inline CalibratedPrediction predict_calibrated(const MoeModel& model, const Eigen::Ref<const Vector>& x,
                                               const CalibrationParams& c) {
  const PredictiveDist pred = predict_moe(model, x);
  CalibratedPrediction out;
  out.logits = pred.mean;
  out.variance = classification_variance(pred);
  out.expert = pred.experts.front();
  out.temperature = temperature(out.variance, lambda_for(c, out.expert));
  out.probs = calibrated_probs(out.logits, out.temperature);
  return out;
}

inline CalibratedPrediction predict_calibrated(const MoeModel& model, const Eigen::Ref<const Vector>& x) {
  return predict_calibrated(model, x, model.calibration);
}

// Mean of -sum_c y_c log p_c.
inline double classification_nll(const Eigen::Ref<const Matrix>& probs, const Eigen::Ref<const Matrix>& Y) {
  require_dims(probs.rows() == Y.rows() && probs.cols() == Y.cols(), "classification_nll: shape mismatch");
  require(Y.rows() >= 1, "classification_nll: empty input");
  double total = 0.0;
  for (Index i = 0; i < Y.rows(); ++i)
    for (Index c = 0; c < Y.cols(); ++c)
      if (Y(i, c) != 0.0) total -= Y(i, c) * std::log(std::max(probs(i, c), std::numeric_limits<double>::min()));
  return total / static_cast<double>(Y.rows());
}

inline std::vector<double> lambda_grid() {
  std::vector<double> grid{0.0};
  for (int g = -6; g <= 6; ++g) grid.push_back(std::pow(10.0, 0.5 * g));
  return grid;
}

namespace detail {

// Grid point with the lowest NLL over rows `ids`; ties keep the smaller value.
inline double best_lambda(const Matrix& logits, const Vector& variance, const Matrix& Y, const std::vector<int>& ids) {
  double best = 0.0;
  double best_nll = std::numeric_limits<double>::infinity();
  Matrix probs(static_cast<Index>(ids.size()), logits.cols());
  Matrix labels(static_cast<Index>(ids.size()), logits.cols());
  for (double lambda : lambda_grid()) {
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const int i = ids[r];
      probs.row(static_cast<Index>(r)) =
          calibrated_probs(logits.row(i).transpose(), temperature(variance(i), lambda)).transpose();
      labels.row(static_cast<Index>(r)) = Y.row(i);
    }
    const double nll = classification_nll(probs, labels);
    if (nll < best_nll) {
      best_nll = nll;
      best = lambda;
    }
  }
  return best;
}

}  // namespace detail

// Grid search over {0} and 10^g, g = -3, -2.5, ..., 3, minimizing the
// validation NLL. With per_expert set (shared partitions only) every expert
// gets its own value from the validation points routed to it; experts
// without validation points fall back to the global value.
inline CalibrationParams fit_lambda0(const MoeModel& model, const LabeledDataset& validation, bool per_expert = false) {
  require(validation.size() >= 1, "fit_lambda0: empty validation set");
  require_dims(validation.output_dim() == model.output_dim(), "fit_lambda0: label width mismatch");
  const Index n = validation.size();
  Matrix logits(n, model.output_dim());
  Vector variance(n);
  std::vector<int> routed(n);
  for (Index i = 0; i < n; ++i) {
    const PredictiveDist pred = predict_moe(model, validation.X.row(i).transpose());
    logits.row(i) = pred.mean.transpose();
    variance(i) = classification_variance(pred);
    routed[i] = pred.experts.front();
  }
  std::vector<int> all(n);
  for (Index i = 0; i < n; ++i) all[i] = static_cast<int>(i);
  CalibrationParams c;
  c.lambda0 = detail::best_lambda(logits, variance, validation.Y, all);
  if (per_expert) {
    require(model.groups.size() == 1, "per-expert calibration needs a shared partition");
    const int M = model.groups.front().gating.experts();
    c.per_expert.assign(M, c.lambda0);
    for (int m = 0; m < M; ++m) {
      std::vector<int> ids;
      for (Index i = 0; i < n; ++i)
        if (routed[i] == m) ids.push_back(static_cast<int>(i));
      if (!ids.empty()) c.per_expert[m] = detail::best_lambda(logits, variance, validation.Y, ids);
    }
  }
  return c;
}

}  // namespace ntkmoe
