#pragma once

// Hard gating: landmark NTK kernel PCA, k-means in the embedding space,
// nearest-centroid routing, the expert neighbor graph and the boundary
// candidates that feed the patchwork prior.

#include "ntkmoe/common.hpp"
#include "ntkmoe/ntk_features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace ntkmoe {

struct GatingConfig {
  int landmarks = 256;  // S
  int dims = 8;         // d
  int experts = 4;      // M
  std::uint64_t seed = 0;
  double delta = 1.0;
};

struct GatingModel {
  Matrix landmark_features;  // S x F
  std::vector<int> landmark_ids;
  Matrix alpha;     // S x d, unit-norm eigenvectors of the centered landmark kernel
  Vector eigvals;   // d, descending
  Matrix centroids; // M x d
  GatingConfig config;

  // Centering statistics of the landmark kernel.
  Vector landmark_col_mean;
  double landmark_grand_mean = 0.0;

  // The NTK is linear in the features, so the embedding is an affine map
  // v = projection * phi - offset. Derived from the fields above.
  Matrix projection;  // d x F
  Vector offset;      // d

  int dims() const { return static_cast<int>(eigvals.size()); }
  int experts() const { return static_cast<int>(centroids.rows()); }
  Index feature_width() const { return landmark_features.cols(); }

  void finalize() {
    const double delta = config.delta;
    const Index S = landmark_features.rows();
    const Matrix K = kernel_matrix(landmark_features, delta);
    landmark_col_mean = K.colwise().mean().transpose();
    landmark_grand_mean = K.mean();
    const Vector inv_sqrt = eigvals.array().rsqrt();
    // alpha^T (I - 11^T/S): remove each eigenvector's mean.
    Matrix centered_alpha = alpha;
    centered_alpha.rowwise() -= alpha.colwise().mean();
    projection = inv_sqrt.asDiagonal() * centered_alpha.transpose() * landmark_features / delta;
    offset = inv_sqrt.asDiagonal() * (alpha.transpose() * (landmark_col_mean - Vector::Constant(S, landmark_grand_mean)));
  }

  Vector project(const Eigen::Ref<const Vector>& phi) const { return projection * phi - offset; }

  Matrix project_rows(const Eigen::Ref<const Matrix>& Phi) const {
    Matrix V = Phi * projection.transpose();
    V.rowwise() -= offset.transpose();
    return V;
  }
};

// Landmark-centered kernel PCA embedding, evaluated as a kernel sum:
// v_k = lambda_k^{-1/2} sum_i alpha_ik ktilde(phi, landmark_i).
inline Vector embed(const GatingModel& g, const Eigen::Ref<const Vector>& phi) {
  require_dims(phi.size() == g.feature_width(), "embed: feature width mismatch");
  const Vector k = g.landmark_features * phi / g.config.delta;
  Vector kt = k.array() - k.mean();
  kt -= g.landmark_col_mean;
  kt.array() += g.landmark_grand_mean;
  return g.eigvals.array().rsqrt().matrix().asDiagonal() * (g.alpha.transpose() * kt);
}

struct KMeansResult {
  std::vector<int> labels;
  Matrix centroids;
  double objective = 0.0;
  std::vector<double> objective_history;  // after each Lloyd iteration
  int iterations = 0;
};

inline double kmeans_objective(const Eigen::Ref<const Matrix>& V, const std::vector<int>& labels,
                               const Eigen::Ref<const Matrix>& centroids) {
  double obj = 0.0;
  for (Index i = 0; i < V.rows(); ++i) obj += (V.row(i) - centroids.row(labels[i])).squaredNorm();
  return obj;
}

namespace detail {

inline int nearest_centroid(const Eigen::Ref<const Matrix>& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index m = 0; m < centroids.rows(); ++m) {
    const double d = (centroids.row(m) - v).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(m);
    }
  }
  return best;
}

}  // namespace detail

// k-means++ seeding and Lloyd iterations until the assignment stops
// changing (at most 300 rounds). An empty cluster takes the point of the
// largest cluster that lies farthest from that cluster's centroid.
inline KMeansResult kmeans(const Eigen::Ref<const Matrix>& V, int M, std::uint64_t seed) {
  const Index N = V.rows();
  require(M >= 1 && M <= N, "kmeans: need 1 <= M <= N");
  std::mt19937_64 rng(seed);

  Matrix C(M, V.cols());
  std::vector<char> chosen(N, 0);
  {
    std::uniform_int_distribution<Index> pick(0, N - 1);
    Index first = pick(rng);
    C.row(0) = V.row(first);
    chosen[first] = 1;
    Vector d2(N);
    for (Index i = 0; i < N; ++i) d2(i) = (V.row(i) - C.row(0)).squaredNorm();
    for (int m = 1; m < M; ++m) {
      Index next = -1;
      const double total = d2.sum();
      if (total > 0) {
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng);
        for (Index i = 0; i < N; ++i) {
          if (d2(i) <= 0) continue;
          next = i;
          r -= d2(i);
          if (r < 0) break;
        }
      }
      if (next < 0) {
        // Remaining points coincide with chosen centers; take the first unused one.
        for (Index i = 0; i < N; ++i)
          if (!chosen[i]) {
            next = i;
            break;
          }
      }
      chosen[next] = 1;
      C.row(m) = V.row(next);
      for (Index i = 0; i < N; ++i) d2(i) = std::min(d2(i), (V.row(i) - C.row(m)).squaredNorm());
    }
  }

  KMeansResult res;
  res.labels.assign(N, -1);
  for (int iter = 0; iter < 300; ++iter) {
    bool changed = false;
    for (Index i = 0; i < N; ++i) {
      const int m = detail::nearest_centroid(C, V.row(i));
      if (m != res.labels[i]) {
        res.labels[i] = m;
        changed = true;
      }
    }
    std::vector<int> counts(M, 0);
    for (int l : res.labels) ++counts[l];
    for (int m = 0; m < M; ++m) {
      if (counts[m] > 0) continue;
      const int largest = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(V.cols());
      for (Index i = 0; i < N; ++i)
        if (res.labels[i] == largest) mu += V.row(i);
      mu /= counts[largest];
      Index far = -1;
      double far_d = -1.0;
      for (Index i = 0; i < N; ++i) {
        if (res.labels[i] != largest) continue;
        const double d = (V.row(i) - mu).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      res.labels[far] = m;
      --counts[largest];
      counts[m] = 1;
      changed = true;
    }
    C.setZero();
    for (Index i = 0; i < N; ++i) C.row(res.labels[i]) += V.row(i);
    for (int m = 0; m < M; ++m) C.row(m) /= counts[m];
    res.iterations = iter + 1;
    res.objective_history.push_back(kmeans_objective(V, res.labels, C));
    if (!changed) break;
  }
  res.centroids = C;
  res.objective = res.objective_history.back();
  return res;
}

struct GatingFit {
  GatingModel model;
  PartitionLabels labels;
  Matrix embeddings;  // N x d
  double kmeans_objective = 0.0;
};

// Two-step approximate kernel k-means: kernel PCA on S sampled landmarks,
// projection of all N points, k-means in the embedding space.
// `features` holds one row per sample (outputs already concatenated).
inline GatingFit fit_gating(const Eigen::Ref<const Matrix>& features, GatingConfig cfg) {
  const Index N = features.rows();
  require(cfg.experts >= 1, "fit_gating: need at least one expert");
  require(cfg.experts <= N, "fit_gating: more experts than samples");
  require(cfg.landmarks >= 1 && cfg.landmarks <= N, "fit_gating: need 1 <= S <= N");
  require(cfg.dims >= 1 && cfg.dims <= cfg.landmarks, "fit_gating: need 1 <= d <= S");
  require(cfg.delta > 0, "fit_gating: delta must be > 0");

  GatingFit fit;
  GatingModel& g = fit.model;
  std::vector<int> ids(N);
  std::iota(ids.begin(), ids.end(), 0);
  if (cfg.landmarks < N) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x1a4d));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(cfg.landmarks);
    std::sort(ids.begin(), ids.end());
  }
  g.landmark_ids = ids;
  g.landmark_features = select_rows(features, ids);

  const Matrix Kc = center_kernel(kernel_matrix(g.landmark_features, cfg.delta));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(Kc);
  if (eig.info() != Eigen::Success) throw NumericalError("fit_gating: eigendecomposition failed");
  const Index S = Kc.rows();
  const double top = eig.eigenvalues()(S - 1);
  int usable = 0;
  for (int k = 0; k < cfg.dims; ++k) {
    const double lam = eig.eigenvalues()(S - 1 - k);
    if (!(top > 0) || lam <= 1e-10 * top) break;
    ++usable;
  }
  if (usable == 0) {
    throw NumericalError("fit_gating: the centered landmark kernel has no usable principal components "
                         "(features are identical)");
  }
  if (usable < cfg.dims) {
    log()->warn("fit_gating: only {} of {} requested principal components are numerically usable", usable, cfg.dims);
    cfg.dims = usable;
  }
  g.config = cfg;
  g.eigvals.resize(usable);
  g.alpha.resize(S, usable);
  for (int k = 0; k < usable; ++k) {
    g.eigvals(k) = eig.eigenvalues()(S - 1 - k);
    g.alpha.col(k) = eig.eigenvectors().col(S - 1 - k);
  }
  g.finalize();

  fit.embeddings = g.project_rows(features);
  KMeansResult km = kmeans(fit.embeddings, cfg.experts, mix_seed(cfg.seed, 0x3e4a));
  g.centroids = km.centroids;
  fit.labels.label = std::move(km.labels);
  fit.labels.num_experts = cfg.experts;
  fit.kmeans_objective = km.objective;
  return fit;
}

// Nearest centroid in embedding space, ties to the lower id.
inline int assign_embedding(const GatingModel& g, const Eigen::Ref<const Vector>& v) {
  return detail::nearest_centroid(g.centroids, v.transpose());
}

inline int assign(const GatingModel& g, const Eigen::Ref<const Vector>& phi) {
  require_dims(phi.size() == g.feature_width(), "assign: feature width mismatch");
  return assign_embedding(g, g.project(phi));
}

struct NeighborGraph {
  std::vector<std::vector<int>> neighbors;  // nearest centroids first
};

inline NeighborGraph neighbor_graph(const Eigen::Ref<const Matrix>& centroids, int L) {
  require(L >= 0, "neighbor_graph: L must be >= 0");
  const int M = static_cast<int>(centroids.rows());
  NeighborGraph graph;
  graph.neighbors.resize(M);
  for (int m = 0; m < M; ++m) {
    std::vector<std::pair<double, int>> dist;
    for (int o = 0; o < M; ++o)
      if (o != m) dist.emplace_back((centroids.row(m) - centroids.row(o)).squaredNorm(), o);
    std::sort(dist.begin(), dist.end());
    const int take = std::min<int>(L, M - 1);
    for (int i = 0; i < take; ++i) graph.neighbors[m].push_back(dist[i].second);
  }
  return graph;
}

inline NeighborGraph neighbor_graph(const GatingModel& g, int L) { return neighbor_graph(g.centroids, L); }

// The ceil(rho * |b|) members of cluster b closest to centroid m, nearest first.
inline std::vector<int> boundary_candidates(const Eigen::Ref<const Matrix>& embeddings, const PartitionLabels& labels,
                                            const Eigen::Ref<const Matrix>& centroids, int m, int b, double rho) {
  require(rho > 0.0 && rho <= 1.0, "boundary_candidates: fraction must lie in (0, 1]");
  require(m != b, "boundary_candidates: an expert is not its own neighbor");
  std::vector<std::pair<double, int>> dist;
  for (int i : labels.members(b)) dist.emplace_back((embeddings.row(i) - centroids.row(m)).squaredNorm(), i);
  std::sort(dist.begin(), dist.end());
  const int take = static_cast<int>(std::ceil(rho * static_cast<double>(dist.size()) - 1e-12));
  std::vector<int> out;
  for (int i = 0; i < take; ++i) out.push_back(dist[i].second);
  return out;
}

}  // namespace ntkmoe
