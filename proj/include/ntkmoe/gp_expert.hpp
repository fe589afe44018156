#pragma once

// A local GP expert over NTK features: patch assembly, Cholesky posterior,
// log marginal likelihood and its hyperparameter ascent, and greedy
// uncertainty sampling of boundary points.

#include "ntkmoe/common.hpp"
#include "ntkmoe/ntk_features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace ntkmoe {

// Prior precision delta and noise variance sigma0, both in log space.
struct GpHyper {
  double log_delta = 0.0;
  double log_sigma0 = 0.0;

  double delta() const { return std::exp(log_delta); }
  double sigma0() const { return std::exp(log_sigma0); }

  friend bool operator==(const GpHyper&, const GpHyper&) = default;
};

// Diagonal jitter tried in order, as multiples of mean(diag K).
struct JitterPolicy {
  std::vector<double> ladder{0.0, 1e-10, 1e-8, 1e-6};
};

struct LocalGp {
  Matrix features;  // n x P_bar_m, rows: members then boundary points
  Vector targets;
  GpHyper hyper;
  Matrix chol;      // lower factor of K + (sigma0 + jitter) I
  Vector coeffs;    // (K + (sigma0 + jitter) I)^{-1} targets
  double jitter = 0.0;
  PruneMask mask;   // columns of the full Jacobian row this expert reads

  Index size() const { return features.rows(); }
};

struct GpPrediction {
  double mean = 0.0;
  double variance = 0.0;
  bool clamped = false;
};

// Members first, then each neighbor's selected rows in neighbor order.
inline Matrix assemble_patch(const Eigen::Ref<const Matrix>& member_features, const std::vector<Matrix>& boundary_blocks) {
  Index rows = member_features.rows();
  for (const auto& b : boundary_blocks) {
    require_dims(b.cols() == member_features.cols(), "assemble_patch: feature widths differ");
    rows += b.rows();
  }
  Matrix out(rows, member_features.cols());
  out.topRows(member_features.rows()) = member_features;
  Index at = member_features.rows();
  for (const auto& b : boundary_blocks) {
    out.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  return out;
}

inline LocalGp fit_expert(Matrix Phi, Vector targets, const GpHyper& hyper, const JitterPolicy& jitter = {}) {
  require(Phi.rows() >= 1, "fit_expert: need at least one training row");
  require_dims(Phi.rows() == targets.size(), "fit_expert: feature rows and targets differ");
  require(targets.allFinite(), "fit_expert: non-finite targets");
  const double delta = hyper.delta();
  const double sigma0 = hyper.sigma0();
  require(std::isfinite(delta) && delta > 0 && std::isfinite(sigma0) && sigma0 >= 0, "fit_expert: invalid hyperparameters");

  const Index n = Phi.rows();
  Matrix K = kernel_matrix(Phi, delta);
  const double scale = K.trace() / static_cast<double>(n);
  for (double rel : jitter.ladder) {
    const double j = rel * scale;
    Matrix A = K;
    A.diagonal().array() += sigma0 + j;
    Eigen::LLT<Matrix> llt(A);
    if (llt.info() != Eigen::Success) continue;
    Matrix L = llt.matrixL();
    const Vector d = L.diagonal();
    if (!d.allFinite() || (d.array() <= 0).any()) continue;
    LocalGp gp;
    gp.coeffs = llt.solve(targets);
    gp.chol = std::move(L);
    gp.features = std::move(Phi);
    gp.targets = std::move(targets);
    gp.hyper = hyper;
    gp.jitter = j;
    gp.mask = PruneMask::identity(static_cast<int>(gp.features.cols()));
    return gp;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(K, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff() + sigma0;
  const double hi = eig.eigenvalues().maxCoeff() + sigma0;
  throw NumericalError("fit_expert: Cholesky failed at maximum jitter; eigenvalues of K + sigma0 I span [" +
                       std::to_string(lo) + ", " + std::to_string(hi) + "]");
}

// Posterior predictive at a feature vector already restricted to gp.mask.
inline GpPrediction predict(const LocalGp& gp, const Eigen::Ref<const Vector>& phi_star) {
  require_dims(phi_star.size() == gp.features.cols(), "predict: feature width mismatch");
  const double delta = gp.hyper.delta();
  const Vector k_star = gp.features * phi_star / delta;
  const double k_ss = phi_star.squaredNorm() / delta;
  GpPrediction p;
  p.mean = k_star.dot(gp.coeffs);
  const Vector v = gp.chol.triangularView<Eigen::Lower>().solve(k_star);
  double latent = k_ss - v.squaredNorm();
  if (latent < 0) {
    latent = 0;
    p.clamped = true;
  }
  p.variance = latent + gp.hyper.sigma0();
  return p;
}

inline double log_marginal_likelihood(const LocalGp& gp) {
  const double n = static_cast<double>(gp.size());
  return -0.5 * gp.targets.dot(gp.coeffs) - gp.chol.diagonal().array().log().sum() -
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

struct MllValue {
  double value = 0.0;
  Eigen::Vector2d gradient = Eigen::Vector2d::Zero();  // d/d(log delta), d/d(log sigma0)
};

// Dense evaluation with gradients from 0.5 tr((a a^T - Ky^{-1}) dKy).
inline MllValue mll_dense(const Eigen::Ref<const Matrix>& Phi, const Eigen::Ref<const Vector>& y, const GpHyper& hyper) {
  const Index n = Phi.rows();
  const double sigma0 = hyper.sigma0();
  const Matrix K = kernel_matrix(Phi, hyper.delta());
  Matrix Ky = K;
  Ky.diagonal().array() += sigma0;
  Eigen::LLT<Matrix> llt(Ky);
  if (llt.info() != Eigen::Success) throw NumericalError("mll_dense: Ky is not positive definite");
  const Vector a = llt.solve(y);
  const Matrix Kinv = llt.solve(Matrix::Identity(n, n));
  const Matrix W = a * a.transpose() - Kinv;
  const Matrix L = llt.matrixL();
  MllValue out;
  out.value = -0.5 * y.dot(a) - L.diagonal().array().log().sum() - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  out.gradient(0) = 0.5 * (W.cwiseProduct(-K)).sum();
  out.gradient(1) = 0.5 * sigma0 * W.trace();
  return out;
}

// The kernel only changes through (delta, sigma0), so one eigendecomposition
// of the Gram matrix gives the MLL and its gradient in O(rank) per query.
// Uses whichever of Phi Phi^T and Phi^T Phi is smaller.
class SpectralMll {
public:
  SpectralMll(const Eigen::Ref<const Matrix>& Phi, const Eigen::Ref<const Vector>& y)
      : n_(static_cast<double>(Phi.rows())) {
    require_dims(Phi.rows() == y.size(), "SpectralMll: feature rows and targets differ");
    const double yy = y.squaredNorm();
    if (Phi.cols() < Phi.rows()) {
      Matrix G = Phi.transpose() * Phi;
      Eigen::SelfAdjointEigenSolver<Matrix> eig(G);
      if (eig.info() != Eigen::Success) throw NumericalError("SpectralMll: eigendecomposition failed");
      const Vector proj = eig.eigenvectors().transpose() * (Phi.transpose() * y);
      const double smax = std::max(eig.eigenvalues().maxCoeff(), 0.0);
      std::vector<double> s, c2;
      double captured = 0.0;
      for (Index i = 0; i < G.rows(); ++i) {
        const double si = eig.eigenvalues()(i);
        if (si <= 1e-12 * smax || si <= 0) continue;
        s.push_back(si);
        c2.push_back(proj(i) * proj(i) / si);
        captured += c2.back();
      }
      s_ = Eigen::Map<Vector>(s.data(), static_cast<Index>(s.size()));
      c2_ = Eigen::Map<Vector>(c2.data(), static_cast<Index>(c2.size()));
      rest_ = std::max(0.0, yy - captured);
      null_dim_ = n_ - static_cast<double>(s.size());
    } else {
      Matrix G = Phi * Phi.transpose();
      Eigen::SelfAdjointEigenSolver<Matrix> eig(G);
      if (eig.info() != Eigen::Success) throw NumericalError("SpectralMll: eigendecomposition failed");
      s_ = eig.eigenvalues().cwiseMax(0.0);
      c2_ = (eig.eigenvectors().transpose() * y).array().square();
      rest_ = 0.0;
      null_dim_ = 0.0;
    }
  }

  MllValue evaluate(const GpHyper& hyper) const {
    const double delta = hyper.delta();
    const double sigma0 = hyper.sigma0();
    const Eigen::ArrayXd lam = s_.array() / delta + sigma0;
    const Eigen::ArrayXd dl = 0.5 * c2_.array() / lam.square() - 0.5 / lam;
    MllValue out;
    out.value = -0.5 * ((c2_.array() / lam).sum() + (rest_ > 0 ? rest_ / sigma0 : 0.0)) -
                0.5 * (lam.log().sum() + null_dim_ * std::log(sigma0)) - 0.5 * n_ * std::log(2.0 * std::numbers::pi);
    out.gradient(0) = (dl * (-s_.array() / delta)).sum();
    out.gradient(1) = (dl * sigma0).sum() + 0.5 * rest_ / sigma0 - 0.5 * null_dim_;
    return out;
  }

private:
  double n_;
  Vector s_;
  Vector c2_;
  double rest_ = 0.0;
  double null_dim_ = 0.0;
};

struct MllOptimization {
  GpHyper hyper;
  double initial_mll = 0.0;
  double final_mll = 0.0;
  int accepted_steps = 0;
};

// Gradient ascent on the per-sample MLL in (log delta, log sigma0): fixed
// step 0.05, halved whenever a step would lower the MLL (the step is then
// rejected). Returns the best hyperparameters seen.
inline MllOptimization optimize_mll(const Eigen::Ref<const Matrix>& Phi, const Eigen::Ref<const Vector>& y,
                                    const GpHyper& init, int iterations) {
  require(iterations >= 0, "optimize_mll: iterations must be >= 0");
  MllOptimization res;
  res.hyper = init;
  if (iterations == 0) {
    return res;
  }
  const SpectralMll mll(Phi, y);
  MllValue cur = mll.evaluate(init);
  if (!std::isfinite(cur.value)) throw NumericalError("optimize_mll: non-finite marginal likelihood at the initial hyperparameters");
  res.initial_mll = cur.value;
  const double n = static_cast<double>(Phi.rows());
  double step = 0.05;
  for (int it = 0; it < iterations; ++it) {
    GpHyper cand = res.hyper;
    cand.log_delta += step * cur.gradient(0) / n;
    cand.log_sigma0 += step * cur.gradient(1) / n;
    const MllValue next = mll.evaluate(cand);
    if (std::isfinite(next.value) && next.value >= cur.value) {
      res.hyper = cand;
      cur = next;
      ++res.accepted_steps;
    } else {
      step *= 0.5;
    }
  }
  res.final_mll = cur.value;
  return res;
}

// Greedy uncertainty sampling: condition on the seed rows, then repeatedly
// move the pool point with the largest predictive variance (ties to the
// lower id) into the training set. Returns ids in selection order.
inline std::vector<int> active_select(const Eigen::Ref<const Matrix>& seed_features,
                                      const Eigen::Ref<const Matrix>& pool_features, std::span<const int> pool_ids,
                                      int budget, const GpHyper& hyper) {
  require(budget >= 0, "active_select: budget must be >= 0");
  require_dims(static_cast<Index>(pool_ids.size()) == pool_features.rows(), "active_select: pool ids and rows differ");
  if (budget > 0 && pool_ids.empty()) throw SpecificationError("active_select: empty pool with a positive budget");
  require(budget <= static_cast<int>(pool_ids.size()), "active_select: budget exceeds the pool size");
  if (budget == 0) return {};

  const double delta = hyper.delta();
  const double sigma0 = hyper.sigma0();
  Matrix cov = kernel_matrix(pool_features, delta);
  if (seed_features.rows() > 0) {
    require_dims(seed_features.cols() == pool_features.cols(), "active_select: feature widths differ");
    Matrix Kss = kernel_matrix(seed_features, delta);
    const double scale = Kss.trace() / static_cast<double>(Kss.rows());
    const Matrix Ksp = kernel_matrix(seed_features, pool_features, delta);
    bool done = false;
    for (double rel : JitterPolicy{}.ladder) {
      Matrix A = Kss;
      A.diagonal().array() += sigma0 + rel * scale;
      Eigen::LLT<Matrix> llt(A);
      if (llt.info() != Eigen::Success) continue;
      const Matrix V = llt.matrixL().solve(Ksp);
      cov.noalias() -= V.transpose() * V;
      done = true;
      break;
    }
    if (!done) throw NumericalError("active_select: seed kernel factorization failed");
  }

  std::vector<char> taken(pool_ids.size(), 0);
  std::vector<int> selected;
  selected.reserve(budget);
  for (int round = 0; round < budget; ++round) {
    Index best = -1;
    for (Index i = 0; i < cov.rows(); ++i) {
      if (taken[i]) continue;
      if (best < 0 || cov(i, i) > cov(best, best) ||
          (cov(i, i) == cov(best, best) && pool_ids[i] < pool_ids[best])) {
        best = i;
      }
    }
    taken[best] = 1;
    selected.push_back(pool_ids[best]);
    const Vector c = cov.col(best);
    const double denom = c(best) + sigma0;
    if (denom > 0) cov.noalias() -= c * c.transpose() / denom;
  }
  return selected;
}

// One expert: shared member/boundary sets and one GP per served output.
struct ExpertGp {
  std::vector<int> member_ids;
  std::vector<int> boundary_ids;
  std::vector<LocalGp> outputs;
};

}  // namespace ntkmoe
