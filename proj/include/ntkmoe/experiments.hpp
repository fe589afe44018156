#pragma once

// End-to-end experiment recipes shared by the command-line tool and the
// acceptance suite. Every recipe is a pure function of its config and seed
// apart from the measured timings.

#include "ntkmoe/calibration.hpp"
#include "ntkmoe/common.hpp"
#include "ntkmoe/datasets.hpp"
#include "ntkmoe/metrics.hpp"
#include "ntkmoe/moe_pipeline.hpp"
#include "ntkmoe/nn_core.hpp"
#include "ntkmoe/ntk_features.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace ntkmoe {

inline double median_of(std::vector<double> v) { return detail::median(std::move(v)); }

// ---------------------------------------------------------------------------
// 1D toy with a removed interval.

struct ToyRecipe {
  int n = 200;
  double noise = 0.2;
  double gap_lo = 2.5;
  double gap_hi = 3.5;
  int test_points = 501;
  std::vector<int> hidden{200};
  Activation activation = Activation::tanh;
  TrainConfig train{.loss = Loss::mse,
                    .l2_delta = 1e-3,
                    .learning_rate = 0.01,
                    .epochs = 1500,
                    .batch_size = 8,
                    .seed = 0,
                    .optimizer = Optimizer::adam};
  MoeConfig moe{.experts = 8, .pca_subset = 200, .pca_dims = 4, .neighbors = 2, .boundary_fraction = 0.25,
                .boundary_budget = 8};
  double edge_margin = 0.25;  // distance kept from the edges of the training support
  double pruned_keep = 0.5;   // stage-two keep fraction compared against 1.0
};

struct ToyNetwork {
  ToyData data;
  MlpParams mlp;
  TrainConfig train;
  TrainReport report;
};

inline ToyNetwork train_toy_network(const ToyRecipe& r, std::uint64_t seed) {
  ToyNetwork net;
  net.data = gen_toy1d_gap(r.n, seed, r.noise, r.gap_lo, r.gap_hi, r.test_points);
  MlpSpec spec;
  spec.layer_widths.push_back(1);
  spec.layer_widths.insert(spec.layer_widths.end(), r.hidden.begin(), r.hidden.end());
  spec.layer_widths.push_back(1);
  spec.activation = r.activation;
  net.train = r.train;
  net.train.seed = seed;
  net.mlp = train_map(init_mlp(spec, seed), net.data.train, net.train, &net.report);
  return net;
}

// Test-grid indices inside the data-dense part of the training support.
inline std::vector<int> toy_dense_indices(const ToyRecipe& r, const Matrix& X) {
  std::vector<int> ids;
  for (Index i = 0; i < X.rows(); ++i) {
    const double x = X(i, 0);
    const bool left = x >= r.edge_margin && x <= r.gap_lo - r.edge_margin;
    const bool right = x >= r.gap_hi + r.edge_margin && x <= 6.0 - r.edge_margin;
    if (left || right) ids.push_back(static_cast<int>(i));
  }
  return ids;
}

inline std::vector<int> toy_gap_indices(const ToyRecipe& r, const Matrix& X) {
  std::vector<int> ids;
  for (Index i = 0; i < X.rows(); ++i)
    if (X(i, 0) > r.gap_lo && X(i, 0) < r.gap_hi) ids.push_back(static_cast<int>(i));
  return ids;
}

// The two uniformly spaced stretches of the test grid on either side of the
// gap; expert boundaries inside the training support lie on them.
inline std::vector<Matrix> toy_boundary_paths(const ToyRecipe& r, const Matrix& X) {
  std::vector<Matrix> paths;
  for (auto [lo, hi] : {std::pair{r.edge_margin, r.gap_lo - r.edge_margin},
                        std::pair{r.gap_hi + r.edge_margin, 6.0 - r.edge_margin}}) {
    std::vector<int> ids;
    for (Index i = 0; i < X.rows(); ++i)
      if (X(i, 0) >= lo && X(i, 0) <= hi) ids.push_back(static_cast<int>(i));
    if (ids.size() >= 2) paths.push_back(select_rows(X, ids));
  }
  return paths;
}

inline double toy_discontinuity(const ToyRecipe& r, const MoeModel& model, const Matrix& X) {
  double worst = 0.0;
  for (const Matrix& path : toy_boundary_paths(r, X)) worst = std::max(worst, discontinuity_metric(model, path));
  return worst;
}

struct ToyCurvePoint {
  double x = 0.0;
  double target = 0.0;
  double mean = 0.0;
  double var_patch = 0.0;
  double var_no_patch = 0.0;
  int expert_patch = 0;
  int expert_no_patch = 0;
};

struct ToySeedResult {
  std::uint64_t seed = 0;
  double train_rmse = 0.0;
  double gap_mean_var = 0.0;
  double dense_mean_var = 0.0;
  double dense_max_var = 0.0;
  double var_at_end = 0.0;  // last grid point, x = 8
  bool shape_ok = false;
  double disc_patch = 0.0;
  double disc_no_patch = 0.0;
  double nll_full = 0.0;
  double nll_pruned = 0.0;
  double prune_change = 0.0;  // |nll_pruned - nll_full| / |nll_full|
  std::vector<ToyCurvePoint> curve;
};

inline ToySeedResult run_toy_seed(const ToyRecipe& r, std::uint64_t seed, int workers = 1) {
  const ToyNetwork net = train_toy_network(r, seed);
  const Matrix& X = net.data.test.X;
  MoeConfig cfg = r.moe;
  cfg.seed = seed;
  const MoeModel with_patch = fit_moe(net.mlp, net.data.train, net.train, cfg, workers);
  MoeConfig no_patch_cfg = cfg;
  no_patch_cfg.patch_enabled = false;
  const MoeModel no_patch = fit_moe(net.mlp, net.data.train, net.train, no_patch_cfg, workers);
  MoeConfig pruned_cfg = cfg;
  pruned_cfg.prune_expert = r.pruned_keep;
  const MoeModel pruned = fit_moe(net.mlp, net.data.train, net.train, pruned_cfg, workers);

  ToySeedResult res;
  res.seed = seed;
  res.train_rmse = net.report.train_rmse;
  Vector var(X.rows());
  for (Index i = 0; i < X.rows(); ++i) {
    const PredictiveDist a = predict_moe(with_patch, X.row(i).transpose());
    const PredictiveDist b = predict_moe(no_patch, X.row(i).transpose());
    var(i) = a.variance(0);
    res.curve.push_back({X(i, 0), net.data.test.Y(i, 0), a.mean(0), a.variance(0), b.variance(0), a.experts[0],
                         b.experts[0]});
  }
  const auto dense = toy_dense_indices(r, X);
  const auto gap = toy_gap_indices(r, X);
  const Vector dv = select_entries(var, dense);
  res.gap_mean_var = select_entries(var, gap).mean();
  res.dense_mean_var = dv.mean();
  res.dense_max_var = dv.maxCoeff();
  res.var_at_end = var(X.rows() - 1);
  res.shape_ok = res.gap_mean_var >= 2.0 * res.dense_mean_var && res.var_at_end > res.dense_max_var;
  res.disc_patch = toy_discontinuity(r, with_patch, X);
  res.disc_no_patch = toy_discontinuity(r, no_patch, X);
  res.nll_full = evaluate_regression(with_patch, net.data.test).nll;
  res.nll_pruned = evaluate_regression(pruned, net.data.test).nll;
  res.prune_change = std::abs(res.nll_pruned - res.nll_full) / std::max(std::abs(res.nll_full), 1e-12);
  return res;
}

struct ToySummary {
  std::vector<ToySeedResult> seeds;
  int shape_passes = 0;
  double median_disc_patch = 0.0;
  double median_disc_no_patch = 0.0;
  double disc_ratio = 0.0;
  double median_prune_change = 0.0;
};

inline ToySummary summarize_toy(std::vector<ToySeedResult> seeds) {
  ToySummary s;
  std::vector<double> dp, dn, pc;
  for (const auto& r : seeds) {
    s.shape_passes += r.shape_ok;
    dp.push_back(r.disc_patch);
    dn.push_back(r.disc_no_patch);
    pc.push_back(r.prune_change);
  }
  s.seeds = std::move(seeds);
  s.median_disc_patch = median_of(dp);
  s.median_disc_no_patch = median_of(dn);
  s.disc_ratio = s.median_disc_patch / std::max(s.median_disc_no_patch, 1e-300);
  s.median_prune_change = median_of(pc);
  return s;
}

// ---------------------------------------------------------------------------
// Teacher-student regression: expert-count ablation and parallel scaling.

struct TeacherRecipe {
  int D = 10;
  int K = 1;
  int n = 4000;
  int n_test = 1000;
  std::vector<int> teacher_widths{32, 32};
  std::vector<int> hidden{32, 32};
  double noise = 0.1;
  TrainConfig train{.loss = Loss::mse,
                    .l2_delta = 1e-3,
                    .learning_rate = 0.003,
                    .epochs = 60,
                    .batch_size = 32,
                    .seed = 0,
                    .optimizer = Optimizer::adam};
  MoeConfig moe{.experts = 8, .pca_subset = 256, .pca_dims = 8, .neighbors = 2, .boundary_fraction = 0.25,
                .boundary_budget = 16};
  std::vector<int> expert_counts{4, 8, 16, 32, 64};
};

struct TeacherNetwork {
  LabeledDataset train;
  LabeledDataset test;
  MlpParams mlp;
  TrainConfig train_cfg;
  TrainReport report;
};

inline TeacherNetwork train_teacher_network(const TeacherRecipe& r, std::uint64_t seed) {
  TeacherNetwork net;
  net.train = gen_teacher_regression(r.D, r.K, r.n, r.teacher_widths, r.noise, seed);
  net.test = gen_teacher_regression(r.D, r.K, r.n_test, r.teacher_widths, r.noise, mix_seed(seed, 0x7e57));
  MlpSpec spec;
  spec.layer_widths.push_back(r.D);
  spec.layer_widths.insert(spec.layer_widths.end(), r.hidden.begin(), r.hidden.end());
  spec.layer_widths.push_back(r.K);
  spec.activation = Activation::tanh;
  net.train_cfg = r.train;
  net.train_cfg.seed = seed;
  net.mlp = train_map(init_mlp(spec, seed), net.train, net.train_cfg, &net.report);
  return net;
}

struct AblationRow {
  std::uint64_t seed = 0;
  int experts = 0;
  double nll = 0.0;
  double rmse = 0.0;
  double mean_variance = 0.0;
  double mean_final_mll = 0.0;
  double fit_ms = 0.0;
};

inline std::vector<AblationRow> run_ablation_seed(const TeacherRecipe& r, std::uint64_t seed, int workers = 1) {
  const TeacherNetwork net = train_teacher_network(r, seed);
  std::vector<AblationRow> rows;
  for (int M : r.expert_counts) {
    MoeConfig cfg = r.moe;
    cfg.experts = M;
    cfg.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    const MoeModel model = fit_moe(net.mlp, net.train, net.train_cfg, cfg, workers);
    AblationRow row;
    row.fit_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const MetricReport rep = evaluate_regression(model, net.test);
    row.seed = seed;
    row.experts = M;
    row.nll = rep.nll;
    row.rmse = rep.rmse;
    row.mean_variance = rep.mean_variance;
    double mll = 0.0;
    int count = 0;
    for (const auto& info : model.metadata.experts)
      for (double v : info.final_mll) mll += v, ++count;
    row.mean_final_mll = count ? mll / count : 0.0;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Block-diagonal kernel approximation error against a brute-force sum.

struct ApproxErrorRow {
  int instance = 0;
  int n = 0;
  int experts = 0;
  double identity = 0.0;
  double brute = 0.0;
  double residual = 0.0;
};

inline double brute_force_offdiag(const Matrix& K, const PartitionLabels& labels) {
  double s = 0.0;
  for (Index i = 0; i < K.rows(); ++i)
    for (Index j = 0; j < K.cols(); ++j)
      if (labels.label[i] != labels.label[j]) s += K(i, j) * K(i, j);
  return s;
}

inline std::vector<ApproxErrorRow> run_approx_error(int instances, std::uint64_t seed) {
  std::vector<ApproxErrorRow> rows;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int t = 0; t < instances; ++t) {
    const int n = std::uniform_int_distribution<int>(2, 50)(rng);
    const int p = std::uniform_int_distribution<int>(1, 30)(rng);
    const int M = std::uniform_int_distribution<int>(1, std::min(n, 8))(rng);
    Matrix Phi(n, p);
    for (Index i = 0; i < Phi.size(); ++i) Phi.data()[i] = g(rng);
    const Matrix K = kernel_matrix(Phi, 0.5 + std::uniform_real_distribution<double>(0.0, 2.0)(rng));
    PartitionLabels labels;
    labels.num_experts = M;
    labels.label.resize(n);
    for (int i = 0; i < n; ++i) labels.label[i] = i < M ? i : std::uniform_int_distribution<int>(0, M - 1)(rng);
    ApproxErrorRow row;
    row.instance = t;
    row.n = n;
    row.experts = M;
    row.identity = kernel_approx_error(K, labels);
    row.brute = brute_force_offdiag(K, labels);
    row.residual = std::abs(row.identity - row.brute);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Cluster classification: temperature calibration and OOD entropy.

struct CalibrationRecipe {
  int classes = 4;
  int n = 400;
  int n_valid = 400;
  double separation = 3.0;
  std::vector<int> hidden{64, 64};
  TrainConfig train{.loss = Loss::cross_entropy,
                    .l2_delta = 1e-3,
                    .learning_rate = 0.01,
                    .epochs = 200,
                    .batch_size = 32,
                    .seed = 0,
                    .optimizer = Optimizer::adam};
  MoeConfig moe{.experts = 4, .pca_subset = 256, .pca_dims = 4, .neighbors = 2, .boundary_fraction = 0.25,
                .boundary_budget = 8};
  int bins = 10;
};

struct CalibrationSeedResult {
  std::uint64_t seed = 0;
  double lambda0 = 0.0;
  double valid_nll_fitted = 0.0;
  double valid_nll_zero = 0.0;
  bool argmax_invariant = true;
  double mean_entropy_in = 0.0;
  double mean_entropy_ood = 0.0;
  double mean_var_in = 0.0;
  double mean_var_ood = 0.0;
  double train_accuracy = 0.0;
  EntropyHistograms hist;
};

inline CalibrationSeedResult run_calibration_seed(const CalibrationRecipe& r, std::uint64_t seed, int workers = 1) {
  const ClusterData data = gen_cluster_classification(r.classes, r.n, r.separation, seed);
  const ClusterData valid = gen_cluster_classification(r.classes, r.n_valid, r.separation, mix_seed(seed, 0x5a11d), 0);
  MlpSpec spec;
  spec.layer_widths.push_back(2);
  spec.layer_widths.insert(spec.layer_widths.end(), r.hidden.begin(), r.hidden.end());
  spec.layer_widths.push_back(r.classes);
  spec.activation = Activation::relu;
  TrainConfig tc = r.train;
  tc.seed = seed;
  TrainReport report;
  const MlpParams mlp = train_map(init_mlp(spec, seed), data.train, tc, &report);
  MoeConfig cfg = r.moe;
  cfg.seed = seed;
  MoeModel model = fit_moe(mlp, data.train, tc, cfg, workers);

  CalibrationSeedResult res;
  res.seed = seed;
  res.train_accuracy = report.train_accuracy;
  model.calibration = fit_lambda0(model, valid.train);
  res.lambda0 = model.calibration.lambda0;

  auto nll_at = [&](double lambda) {
    Matrix probs(valid.train.size(), r.classes);
    for (Index i = 0; i < valid.train.size(); ++i) {
      const PredictiveDist p = predict_moe(model, valid.train.X.row(i).transpose());
      probs.row(i) = calibrated_probs(p.mean, temperature(classification_variance(p), lambda)).transpose();
    }
    return classification_nll(probs, valid.train.Y);
  };
  res.valid_nll_fitted = nll_at(res.lambda0);
  res.valid_nll_zero = nll_at(0.0);

  for (const Matrix* X : {&data.test_in.X, &data.test_ood.X}) {
    for (Index i = 0; i < X->rows(); ++i) {
      const CalibratedPrediction p = predict_calibrated(model, X->row(i).transpose());
      Index a = 0, b = 0;
      p.logits.maxCoeff(&a);
      p.probs.maxCoeff(&b);
      if (a != b) res.argmax_invariant = false;
      (X == &data.test_in.X ? res.mean_var_in : res.mean_var_ood) += p.variance / static_cast<double>(X->rows());
    }
  }
  res.hist = entropy_histogram(model, data.test_in.X, data.test_ood.X, r.bins);
  res.mean_entropy_in = res.hist.mean_in;
  res.mean_entropy_ood = res.hist.mean_ood;
  return res;
}

// ---------------------------------------------------------------------------
// Latency against MC dropout on the toy model.

struct TimingRecipe {
  ToyRecipe toy;
  double dropout_rate = 0.1;
  int dropout_samples = 20;
};

inline TimingReport run_timing_seed(const TimingRecipe& r, std::uint64_t seed) {
  const ToyNetwork net = train_toy_network(r.toy, seed);
  MoeConfig cfg = r.toy.moe;
  cfg.seed = seed;
  const MoeModel model = fit_moe(net.mlp, net.data.train, net.train, cfg, 1);
  return timing(model, net.data.test.X, r.dropout_rate, r.dropout_samples, seed);
}

}  // namespace ntkmoe
