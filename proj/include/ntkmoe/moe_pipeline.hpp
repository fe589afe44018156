#pragma once

// Builds a mixture of NTK GP experts around a trained network and routes
// predictions: the mean is the network output, the variance comes from the
// single expert the gating selects.

#include "ntkmoe/common.hpp"
#include "ntkmoe/gating.hpp"
#include "ntkmoe/gp_expert.hpp"
#include "ntkmoe/nn_core.hpp"
#include "ntkmoe/ntk_features.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace ntkmoe {

enum class PartitionMode { shared, per_output };

inline std::string to_string(PartitionMode m) { return m == PartitionMode::shared ? "shared" : "per_output"; }

inline PartitionMode parse_partition_mode(const std::string& s) {
  if (s == "shared") return PartitionMode::shared;
  if (s == "per_output") return PartitionMode::per_output;
  throw SpecificationError("unknown partition mode '" + s + "'");
}

inline constexpr int kUnlimitedBudget = std::numeric_limits<int>::max();

struct MoeConfig {
  int experts = 8;                   // M
  int pca_subset = 256;              // S, clipped to N
  int pca_dims = 8;                  // d, clipped to S
  int neighbors = 2;                 // L
  double boundary_fraction = 0.25;   // rho
  int boundary_budget = 16;          // B per neighbor; kUnlimitedBudget keeps every candidate
  double prune_global = 1.0;
  double prune_expert = 1.0;
  int mll_iterations = 100;
  bool patch_enabled = true;
  PartitionMode partition_mode = PartitionMode::shared;
  std::uint64_t seed = 0;
  double classification_sigma0 = 1.0;  // fixed noise for cross-entropy models

  void validate() const {
    require(experts >= 1, "experts must be >= 1");
    require(pca_subset >= 1, "pca subset must be >= 1");
    require(pca_dims >= 1, "pca dims must be >= 1");
    require(neighbors >= 0, "neighbors must be >= 0");
    require(boundary_fraction > 0 && boundary_fraction <= 1, "boundary fraction must lie in (0, 1]");
    require(boundary_budget >= 0, "boundary budget must be >= 0");
    require(prune_global > 0 && prune_global <= 1, "global keep fraction must lie in (0, 1]");
    require(prune_expert > 0 && prune_expert <= 1, "expert keep fraction must lie in (0, 1]");
    require(mll_iterations >= 0, "mll iterations must be >= 0");
    require(classification_sigma0 > 0, "classification sigma0 must be > 0");
  }
};

// One gating partition and its experts. Shared mode has a single group
// covering every output; per-output mode has one group per output.
struct PartitionGroup {
  std::vector<int> outputs;
  GatingModel gating;
  PartitionLabels labels;
  NeighborGraph neighbors;
  std::vector<ExpertGp> experts;
};

struct CalibrationParams {
  double lambda0 = 0.0;
  std::vector<double> per_expert;  // empty unless fitted per expert (shared mode)
};

struct ExpertBuildInfo {
  int group = 0;
  int expert = 0;
  int members = 0;
  int boundary = 0;
  std::vector<double> initial_mll;
  std::vector<double> final_mll;
};

struct BuildMetadata {
  std::vector<ExpertBuildInfo> experts;
  int jitter_escalations = 0;
  std::map<std::string, double> timings_ms;  // not serialized
};

struct MoeModel {
  MlpParams mlp;
  TrainConfig train_config;
  MoeConfig config;
  PruneMask global_mask;
  std::vector<PartitionGroup> groups;
  Matrix train_inputs;
  CalibrationParams calibration;
  BuildMetadata metadata;

  int output_dim() const { return mlp.spec.output_dim(); }
};

// Runs fn(i) for i in [0, count) on `workers` threads. Every index is
// processed independently, so the results do not depend on scheduling.
// The exception of the lowest failing index is rethrown.
inline void parallel_for(int count, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, count));
  std::vector<std::exception_ptr> errors(count);
  if (workers == 1) {
    for (int i = 0; i < count; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Network outputs, pseudo-outputs and globally pruned features for every sample.
struct PreparedData {
  Matrix outputs;        // N x K network outputs
  Matrix pseudo;         // N x K regression targets for the experts
  FeatureMatrix features;
};

inline PreparedData prepare(const MlpParams& mlp, const LabeledDataset& data, Loss loss, const PruneMask& mask,
                            int workers) {
  const Index N = data.size();
  const int K = mlp.spec.output_dim();
  PreparedData p;
  p.outputs.resize(N, K);
  p.pseudo.resize(N, K);
  p.features.mask = mask;
  p.features.per_output.assign(K, Matrix(N, mask.size()));
  p.features.ids.resize(N);
  std::iota(p.features.ids.begin(), p.features.ids.end(), 0);
  constexpr int chunk = 64;
  const int chunks = static_cast<int>((N + chunk - 1) / chunk);
  parallel_for(chunks, workers, [&](int c) {
    for (Index i = static_cast<Index>(c) * chunk; i < std::min<Index>(N, (c + 1) * chunk); ++i) {
      auto [f, J] = forward_and_jacobian(mlp, data.X.row(i).transpose());
      p.outputs.row(i) = f.transpose();
      if (loss == Loss::mse) {
        const Vector y = data.Y.row(i).transpose();
        // J theta_hat - H^{-1} R with H = I, R = f - y.
        const Vector pseudo = J * mlp.theta - (f - y);
        if (!pseudo.allFinite()) throw NumericalError("non-finite pseudo-output at sample " + std::to_string(i));
        p.pseudo.row(i) = pseudo.transpose();
      } else {
        p.pseudo.row(i).setZero();
      }
      for (int k = 0; k < K; ++k)
        for (int col = 0; col < mask.size(); ++col) p.features.per_output[k](i, col) = J(k, mask.kept[col]);
    }
  });
  return p;
}

}  // namespace detail

// Division (gating), conquer (patched local GPs) and compression (two-stage
// pruning, active boundary selection). Experts are fitted on `workers`
// threads; the model is bit-identical for any worker count.
inline MoeModel fit_moe(const MlpParams& mlp, const LabeledDataset& data, const TrainConfig& train_cfg,
                        const MoeConfig& cfg, int workers = 1) {
  using detail::Clock;
  mlp.validate();
  cfg.validate();
  require(workers >= 1, "workers must be >= 1");
  require(train_cfg.l2_delta > 0, "the training delta must be > 0");
  data.validate(train_cfg.loss == Loss::cross_entropy);
  require_dims(data.input_dim() == mlp.spec.input_dim() && data.output_dim() == mlp.spec.output_dim(),
               "fit_moe: dataset dimensions do not match the network");
  const int N = static_cast<int>(data.size());
  require(cfg.experts <= N, "fit_moe: more experts than samples");
  const int K = mlp.spec.output_dim();
  const bool regression = train_cfg.loss == Loss::mse;

  MoeModel model;
  model.mlp = mlp;
  model.train_config = train_cfg;
  model.config = cfg;
  model.train_inputs = data.X;

  auto t0 = Clock::now();
  model.global_mask = global_prune(mlp.theta, cfg.prune_global);
  const detail::PreparedData prep = detail::prepare(mlp, data, train_cfg.loss, model.global_mask, workers);
  model.metadata.timings_ms["features"] = detail::ms_since(t0);

  // Initial noise per output: the network's mean squared training residual.
  std::vector<GpHyper> init(K);
  for (int k = 0; k < K; ++k) {
    double s0 = cfg.classification_sigma0;
    if (regression) {
      const double mse = (prep.outputs.col(k) - data.Y.col(k)).squaredNorm() / N;
      const double var = (data.Y.col(k).array() - data.Y.col(k).mean()).square().mean();
      s0 = std::max({mse, 1e-6 * var, 1e-12});
    }
    init[k] = {std::log(train_cfg.l2_delta), std::log(s0)};
  }

  std::vector<std::vector<int>> group_outputs;
  if (cfg.partition_mode == PartitionMode::shared || K == 1) {
    group_outputs.emplace_back(K);
    std::iota(group_outputs.back().begin(), group_outputs.back().end(), 0);
  } else {
    for (int k = 0; k < K; ++k) group_outputs.push_back({k});
  }

  t0 = Clock::now();
  std::vector<Matrix> embeddings;
  std::vector<Matrix> gate_features;
  for (std::size_t gi = 0; gi < group_outputs.size(); ++gi) {
    PartitionGroup group;
    group.outputs = group_outputs[gi];
    gate_features.push_back(prep.features.concatenated(group.outputs));
    GatingConfig gc;
    gc.experts = cfg.experts;
    gc.landmarks = std::min(cfg.pca_subset, N);
    gc.dims = std::min(cfg.pca_dims, gc.landmarks);
    gc.seed = mix_seed(cfg.seed, 0x9a7e, gi);
    gc.delta = train_cfg.l2_delta;
    GatingFit gf = fit_gating(gate_features.back(), gc);
    if (auto empty = gf.labels.empty_clusters(); !empty.empty()) {
      throw NumericalError("fit_moe: expert " + std::to_string(empty.front()) + " is empty after k-means repair");
    }
    group.gating = std::move(gf.model);
    group.labels = std::move(gf.labels);
    group.neighbors = cfg.patch_enabled ? neighbor_graph(group.gating, cfg.neighbors) : NeighborGraph{std::vector<std::vector<int>>(cfg.experts)};
    group.experts.resize(cfg.experts);
    embeddings.push_back(std::move(gf.embeddings));
    model.groups.push_back(std::move(group));
  }
  model.metadata.timings_ms["gating"] = detail::ms_since(t0);

  t0 = Clock::now();
  const int G = static_cast<int>(model.groups.size());
  std::vector<ExpertBuildInfo> infos(static_cast<std::size_t>(G) * cfg.experts);
  parallel_for(G * cfg.experts, workers, [&](int task) {
    const int gi = task / cfg.experts;
    const int m = task % cfg.experts;
    PartitionGroup& group = model.groups[gi];
    const Matrix& gate = gate_features[gi];
    try {
      ExpertGp expert;
      expert.member_ids = group.labels.members(m);
      if (cfg.patch_enabled) {
        double mean_s0 = 0.0;
        for (int k : group.outputs) mean_s0 += init[k].sigma0();
        const GpHyper select_hyper{std::log(train_cfg.l2_delta), std::log(mean_s0 / group.outputs.size())};
        std::mt19937_64 rng(mix_seed(cfg.seed, 0xb0b0 + gi, m));
        for (int b : group.neighbors.neighbors[m]) {
          const std::vector<int> cand =
              boundary_candidates(embeddings[gi], group.labels, group.gating.centroids, m, b, cfg.boundary_fraction);
          if (cand.empty() || cfg.boundary_budget == 0) continue;
          if (cfg.boundary_budget >= static_cast<int>(cand.size())) {
            expert.boundary_ids.insert(expert.boundary_ids.end(), cand.begin(), cand.end());
            continue;
          }
          // Seed GP: the expert's current rows plus a small random subset of
          // the candidates; the remaining candidates form the pool.
          const int budget = cfg.boundary_budget;
          const int initial = std::min({32, static_cast<int>(cand.size()) / 4, budget});
          std::vector<int> shuffled = cand;
          std::shuffle(shuffled.begin(), shuffled.end(), rng);
          std::vector<int> seed_ids = expert.member_ids;
          seed_ids.insert(seed_ids.end(), expert.boundary_ids.begin(), expert.boundary_ids.end());
          std::vector<int> chosen(shuffled.begin(), shuffled.begin() + initial);
          seed_ids.insert(seed_ids.end(), chosen.begin(), chosen.end());
          std::vector<int> pool;
          for (int c : cand)
            if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) pool.push_back(c);
          const auto picked = active_select(select_rows(gate, seed_ids), select_rows(gate, pool), pool, budget - initial,
                                            select_hyper);
          chosen.insert(chosen.end(), picked.begin(), picked.end());
          expert.boundary_ids.insert(expert.boundary_ids.end(), chosen.begin(), chosen.end());
        }
      }

      std::vector<int> rows = expert.member_ids;
      rows.insert(rows.end(), expert.boundary_ids.begin(), expert.boundary_ids.end());
      ExpertBuildInfo& info = infos[task];
      info.group = gi;
      info.expert = m;
      info.members = static_cast<int>(expert.member_ids.size());
      info.boundary = static_cast<int>(expert.boundary_ids.size());
      for (int k : group.outputs) {
        const Matrix patch = select_rows(prep.features.per_output[k], rows);
        Vector targets(static_cast<Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) targets(static_cast<Index>(r)) = prep.pseudo(rows[r], k);
        const PruneMask local = expert_prune(patch, cfg.prune_expert);
        Matrix phi = local.stage == PruneStage::none ? patch : select_cols(patch, local.kept);
        GpHyper hyper = init[k];
        if (regression && cfg.mll_iterations > 0) {
          const MllOptimization opt = optimize_mll(phi, targets, init[k], cfg.mll_iterations);
          hyper = opt.hyper;
          info.initial_mll.push_back(opt.initial_mll);
          info.final_mll.push_back(opt.final_mll);
        }
        LocalGp gp = fit_expert(std::move(phi), std::move(targets), hyper);
        gp.mask = model.global_mask.compose(local);
        if (local.stage == PruneStage::none) gp.mask.stage = model.global_mask.stage;
        expert.outputs.push_back(std::move(gp));
      }
      group.experts[m] = std::move(expert);
    } catch (const std::exception& e) {
      throw NumericalError("expert " + std::to_string(m) + " (group " + std::to_string(gi) + "): " + e.what());
    }
  });
  model.metadata.timings_ms["experts"] = detail::ms_since(t0);
  model.metadata.experts = std::move(infos);
  for (const auto& group : model.groups)
    for (const auto& e : group.experts)
      for (const auto& gp : e.outputs) model.metadata.jitter_escalations += gp.jitter > 0;
  return model;
}

struct PredictiveDist {
  Vector mean;          // network output
  Vector variance;      // routed expert's predictive variance, per output
  Vector gp_mean;       // routed expert's GP mean; diagnostic only
  std::vector<int> experts;  // routed expert per partition group
  int clamped = 0;
};

inline PredictiveDist predict_moe(const MoeModel& model, const Eigen::Ref<const Vector>& x) {
  auto [f, J] = forward_and_jacobian(model.mlp, x);
  const int K = model.output_dim();
  PredictiveDist out;
  out.mean = std::move(f);
  out.variance.resize(K);
  out.gp_mean.resize(K);
  const auto& kept = model.global_mask.kept;
  const Index width = static_cast<Index>(kept.size());
  for (const auto& group : model.groups) {
    Vector psi(width * static_cast<Index>(group.outputs.size()));
    for (std::size_t j = 0; j < group.outputs.size(); ++j) {
      const int k = group.outputs[j];
      for (Index c = 0; c < width; ++c) psi(static_cast<Index>(j) * width + c) = J(k, kept[c]);
    }
    const int m = assign_embedding(group.gating, group.gating.project(psi));
    out.experts.push_back(m);
    const ExpertGp& expert = group.experts[m];
    for (std::size_t j = 0; j < group.outputs.size(); ++j) {
      const int k = group.outputs[j];
      const LocalGp& gp = expert.outputs[j];
      Vector phi(gp.mask.size());
      for (int c = 0; c < gp.mask.size(); ++c) phi(c) = J(k, gp.mask.kept[c]);
      const GpPrediction p = predict(gp, phi);
      out.variance(k) = p.variance;
      out.gp_mean(k) = p.mean;
      out.clamped += p.clamped;
    }
  }
  return out;
}

// Average expert size N / M, rounded to the nearest integer.
inline long average_expert_size(long N, long M) {
  require(M >= 1, "average_expert_size: M must be >= 1");
  return std::lround(static_cast<double>(N) / static_cast<double>(M));
}

}  // namespace ntkmoe
