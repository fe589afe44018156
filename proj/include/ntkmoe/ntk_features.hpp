#pragma once

// NTK feature maps (pruned Jacobian rows), kernels built from them,
// two-stage column pruning and the partition approximation error.

#include "ntkmoe/common.hpp"
#include "ntkmoe/nn_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace ntkmoe {

enum class PruneStage { none, global, global_plus_expert };

inline std::string to_string(PruneStage s) {
  switch (s) {
    case PruneStage::none: return "none";
    case PruneStage::global: return "global";
    default: return "global_plus_expert";
  }
}

inline PruneStage parse_prune_stage(const std::string& s) {
  if (s == "none") return PruneStage::none;
  if (s == "global") return PruneStage::global;
  if (s == "global_plus_expert") return PruneStage::global_plus_expert;
  throw FormatError("unknown prune stage '" + s + "'");
}

// Sorted column indices kept out of `total` columns.
struct PruneMask {
  std::vector<int> kept;
  PruneStage stage = PruneStage::none;
  int total = 0;

  static PruneMask identity(int total) {
    PruneMask m;
    m.kept.resize(total);
    std::iota(m.kept.begin(), m.kept.end(), 0);
    m.total = total;
    return m;
  }

  int size() const { return static_cast<int>(kept.size()); }

  void validate() const {
    for (std::size_t i = 0; i < kept.size(); ++i) {
      require(kept[i] >= 0 && kept[i] < total, "prune mask index out of range");
      require(i == 0 || kept[i] > kept[i - 1], "prune mask indices must be strictly increasing");
    }
    if (stage == PruneStage::none) require(size() == total, "stage 'none' must keep every column");
  }

  // `inner` indexes into this mask's kept columns; result indexes the originals.
  PruneMask compose(const PruneMask& inner) const {
    require(inner.total == size(), "composed mask does not match the outer mask width");
    PruneMask out;
    out.total = total;
    out.kept.reserve(inner.kept.size());
    for (int c : inner.kept) out.kept.push_back(kept[c]);
    out.stage = PruneStage::global_plus_expert;
    return out;
  }

  friend bool operator==(const PruneMask&, const PruneMask&) = default;
};

// One N x P_bar block per network output; row i of block k is the
// Jacobian row of output k at sample ids[i], restricted to mask.kept.
struct FeatureMatrix {
  std::vector<Matrix> per_output;
  PruneMask mask;
  std::vector<int> ids;

  Index rows() const { return per_output.empty() ? 0 : per_output.front().rows(); }
  Index cols() const { return per_output.empty() ? 0 : per_output.front().cols(); }
  int outputs() const { return static_cast<int>(per_output.size()); }

  // Output blocks side by side: the inner product of two concatenated
  // rows is the NTK summed over the selected outputs.
  Matrix concatenated(const std::vector<int>& outputs) const {
    Matrix out(rows(), cols() * static_cast<Index>(outputs.size()));
    for (std::size_t j = 0; j < outputs.size(); ++j) out.middleCols(static_cast<Index>(j) * cols(), cols()) = per_output[outputs[j]];
    return out;
  }
};

// Expert assignment of every sample; ids are 0-based.
struct PartitionLabels {
  std::vector<int> label;
  int num_experts = 0;

  void validate() const {
    for (int l : label) require(l >= 0 && l < num_experts, "partition label out of range");
  }

  std::vector<int> members(int m) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < label.size(); ++i)
      if (label[i] == m) out.push_back(static_cast<int>(i));
    return out;
  }

  std::vector<int> sizes() const {
    std::vector<int> out(num_experts, 0);
    for (int l : label) ++out[l];
    return out;
  }

  std::vector<int> empty_clusters() const {
    std::vector<int> out;
    auto s = sizes();
    for (int m = 0; m < num_experts; ++m)
      if (s[m] == 0) out.push_back(m);
    return out;
  }
};

inline FeatureMatrix extract_features(const MlpParams& params, const Eigen::Ref<const Matrix>& X, const PruneMask& mask) {
  params.validate();
  require_dims(X.cols() == params.spec.input_dim(), "feature extraction: input dimension mismatch");
  require(mask.total == params.spec.parameter_count(), "prune mask width does not match the parameter count");
  mask.validate();
  const int K = params.spec.output_dim();
  const Index N = X.rows();
  FeatureMatrix fm;
  fm.mask = mask;
  fm.per_output.assign(K, Matrix(N, mask.size()));
  fm.ids.resize(N);
  std::iota(fm.ids.begin(), fm.ids.end(), 0);
  for (Index i = 0; i < N; ++i) {
    const RowMatrix J = jacobian(params, X.row(i).transpose());
    for (int k = 0; k < K; ++k) {
      for (int c = 0; c < mask.size(); ++c) fm.per_output[k](i, c) = J(k, mask.kept[c]);
    }
  }
  return fm;
}

inline double ntk_value(const Eigen::Ref<const Vector>& phi_a, const Eigen::Ref<const Vector>& phi_b, double delta) {
  require_dims(phi_a.size() == phi_b.size(), "ntk_value: feature lengths differ");
  require(delta > 0, "ntk_value: delta must be > 0");
  return phi_a.dot(phi_b) / delta;
}

// Rows of A and B are feature vectors.
inline Matrix kernel_matrix(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B, double delta) {
  require_dims(A.cols() == B.cols(), "kernel_matrix: feature widths differ");
  require(delta > 0, "kernel_matrix: delta must be > 0");
  Matrix K = A * B.transpose();
  K /= delta;
  return K;
}

inline Matrix kernel_matrix(const Eigen::Ref<const Matrix>& A, double delta) {
  require(delta > 0, "kernel_matrix: delta must be > 0");
  Matrix K(A.rows(), A.rows());
  K.setZero();
  K.selfadjointView<Eigen::Lower>().rankUpdate(A, 1.0 / delta);
  K.triangularView<Eigen::StrictlyUpper>() = K.transpose();
  return K;
}

// Double centering K - O K - K O + O K O with O = ones / N.
inline Matrix center_kernel(const Eigen::Ref<const Matrix>& K) {
  require_dims(K.rows() == K.cols(), "center_kernel: matrix must be square");
  const Vector row_mean = K.rowwise().mean();
  const Vector col_mean = K.colwise().mean().transpose();
  const double grand = K.mean();
  Matrix C = K;
  C.colwise() -= row_mean;
  C.rowwise() -= col_mean.transpose();
  C.array() += grand;
  return C;
}

namespace detail {

// Indices of the ceil(f * n) largest scores, ties to the lower index, sorted.
inline std::vector<int> top_fraction(const Vector& scores, double fraction) {
  require(fraction > 0.0 && fraction <= 1.0, "keep fraction must lie in (0, 1]");
  const int n = static_cast<int>(scores.size());
  const int keep = std::min(n, static_cast<int>(std::ceil(fraction * n - 1e-12)));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace detail

// Stage one: magnitude pruning of the trained parameters.
inline PruneMask global_prune(const Eigen::Ref<const Vector>& theta_hat, double keep_fraction) {
  PruneMask m;
  m.total = static_cast<int>(theta_hat.size());
  m.kept = detail::top_fraction(theta_hat.cwiseAbs(), keep_fraction);
  m.stage = m.size() == m.total ? PruneStage::none : PruneStage::global;
  return m;
}

// Stage two: per-expert ranking by |column sum| of the expert's features.
// The mask indexes columns of Phi.
inline PruneMask expert_prune(const Eigen::Ref<const Matrix>& Phi, double keep_fraction) {
  PruneMask m;
  m.total = static_cast<int>(Phi.cols());
  const Vector scores = Phi.colwise().sum().transpose().cwiseAbs();
  m.kept = detail::top_fraction(scores, keep_fraction);
  m.stage = m.size() == m.total ? PruneStage::none : PruneStage::global_plus_expert;
  return m;
}

// Squared Frobenius mass of the cross-partition entries that a block
// diagonal approximation discards.
inline double kernel_approx_error(const Eigen::Ref<const Matrix>& K, const PartitionLabels& labels) {
  require_dims(K.rows() == K.cols(), "kernel_approx_error: matrix must be square");
  require_dims(static_cast<Index>(labels.label.size()) == K.rows(), "kernel_approx_error: label count mismatch");
  const double total = K.squaredNorm();
  double kept = 0.0;
  for (int m = 0; m < labels.num_experts; ++m) {
    const auto ids = labels.members(m);
    for (int i : ids)
      for (int j : ids) kept += K(i, j) * K(i, j);
  }
  return std::max(0.0, total - kept);
}

}  // namespace ntkmoe
