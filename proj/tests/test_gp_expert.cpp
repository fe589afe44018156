#include "ntkmoe/gp_expert.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

using namespace ntkmoe;

namespace {

Matrix random_matrix(Index r, Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// Posterior variance of a dense GP with kernel F F^T / delta, via an explicit inverse.
double dense_variance(const Matrix& F, const Vector& phi, double delta, double s0) {
  Matrix K = F * F.transpose() / delta;
  K.diagonal().array() += s0;
  const Vector k = F * phi / delta;
  return phi.squaredNorm() / delta - k.dot(K.inverse() * k) + s0;
}

}  // namespace

TEST(AssemblePatch, StacksMembersThenNeighbors) {
  const Matrix m = random_matrix(3, 4, 1);
  EXPECT_EQ(assemble_patch(m, {}), m);
  const Matrix b1 = random_matrix(2, 4, 2), b2 = random_matrix(1, 4, 3);
  const Matrix s = assemble_patch(m, {b1, b2});
  ASSERT_EQ(s.rows(), 6);
  EXPECT_EQ(Matrix(s.topRows(3)), m);
  EXPECT_EQ(Matrix(s.middleRows(3, 2)), b1);
  EXPECT_EQ(Matrix(s.bottomRows(1)), b2);
  EXPECT_THROW(assemble_patch(m, {random_matrix(1, 5, 4)}), DimensionError);
}

TEST(FitExpert, OnePointClosedForm) {
  // ||phi||^2 / delta = 2, sigma0 = 1, target 3.
  Matrix phi(1, 2);
  phi << 1.0, 1.0;
  Vector y(1);
  y << 3.0;
  const GpHyper h{0.0, 0.0};
  const LocalGp gp = fit_expert(phi, y, h);
  EXPECT_NEAR(gp.coeffs(0), 1.0, 1e-15);
  const GpPrediction p = predict(gp, phi.row(0).transpose());
  EXPECT_NEAR(p.variance, 5.0 / 3.0, 1e-14);
  EXPECT_NEAR(p.mean, 2.0, 1e-14);
  const double mll = -0.5 * 3.0 - 0.5 * std::log(3.0) - 0.5 * std::log(2 * std::numbers::pi);
  EXPECT_NEAR(log_marginal_likelihood(gp), mll, 1e-14);
}

TEST(FitExpert, ZeroTargetsAndOrthogonalPrior) {
  Matrix F = Matrix::Zero(3, 5);
  F.leftCols(3) = random_matrix(3, 3, 5);
  const GpHyper h{std::log(0.5), std::log(0.1)};
  const LocalGp gp = fit_expert(F, Vector::Zero(3), h);
  EXPECT_TRUE(gp.coeffs.isZero(0.0));
  Vector orth = Vector::Zero(5);
  orth(3) = 2.0;
  orth(4) = -1.0;
  const GpPrediction p = predict(gp, orth);
  EXPECT_EQ(p.mean, 0.0);
  EXPECT_NEAR(p.variance, orth.squaredNorm() / 0.5 + 0.1, 1e-12);
}

TEST(FitExpert, FactorAndSolveConsistency) {
  const Matrix F = random_matrix(12, 8, 6);
  const Vector y = random_matrix(12, 1, 7);
  const GpHyper h{std::log(0.7), std::log(0.05)};
  const LocalGp gp = fit_expert(F, y, h);
  Matrix A = F * F.transpose() / 0.7;
  A.diagonal().array() += 0.05 + gp.jitter;
  EXPECT_LE((gp.chol * gp.chol.transpose() - A).norm() / A.norm(), 1e-8);
  EXPECT_LE((A * gp.coeffs - y).norm() / y.norm(), 1e-8);
  EXPECT_TRUE((gp.chol.diagonal().array() > 0).all());
  EXPECT_TRUE(gp.chol.isLowerTriangular(0.0));
}

TEST(FitExpert, JitterEscalatesOnSingularKernel) {
  Matrix F = Matrix::Zero(3, 2);
  F.col(0).setOnes();  // rank one, no noise
  const LocalGp gp = fit_expert(F, Vector::Ones(3), GpHyper{0.0, std::log(1e-300)});
  EXPECT_GT(gp.jitter, 0.0);
}

TEST(FitExpert, FailureCarriesDiagnostic) {
  Matrix F = Matrix::Zero(2, 1);
  try {
    fit_expert(F, Vector::Ones(2), GpHyper{0.0, -std::numeric_limits<double>::infinity()}, JitterPolicy{{0.0}});
    FAIL() << "expected a factorization failure";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("eigenvalues"), std::string::npos);
  }
}

TEST(Predict, WeightSpaceDuality) {
  for (int t = 0; t < 50; ++t) {
    std::mt19937_64 rng(t);
    const int n = std::uniform_int_distribution<int>(1, 20)(rng);
    const int p = std::uniform_int_distribution<int>(1, 50)(rng);
    const double delta = std::exp(std::uniform_real_distribution<double>(-2, 2)(rng));
    const double s0 = std::exp(std::uniform_real_distribution<double>(-3, 1)(rng));
    const Matrix F = random_matrix(n, p, 100 + t);
    const Vector y = random_matrix(n, 1, 200 + t);
    const Vector q = random_matrix(p, 1, 300 + t);
    // Bayesian linear regression: prior N(0, I/delta), noise s0.
    Matrix A = F.transpose() * F / s0;
    A.diagonal().array() += delta;
    const Matrix S = A.inverse();
    const double mean_w = q.dot(S * F.transpose() * y / s0);
    const double var_w = q.dot(S * q) + s0;
    const GpPrediction pr = predict(fit_expert(F, y, GpHyper{std::log(delta), std::log(s0)}), q);
    EXPECT_LE(std::abs(pr.mean - mean_w), 1e-8 * std::max(1.0, std::abs(mean_w))) << t;
    EXPECT_LE(rel(pr.variance, var_w), 1e-8) << t;
  }
}

TEST(Predict, ContractionAndMonotoneInclusion) {
  const Matrix F = random_matrix(10, 6, 8);
  const Vector y = random_matrix(10, 1, 9);
  const GpHyper h{std::log(0.9), std::log(0.2)};
  const LocalGp full = fit_expert(F, y, h);
  const LocalGp fewer = fit_expert(F.topRows(7), y.head(7), h);
  for (Index i = 0; i < F.rows(); ++i) {
    const Vector phi = F.row(i).transpose();
    EXPECT_LE(predict(full, phi).variance, phi.squaredNorm() / 0.9 + 0.2);
    EXPECT_GE(predict(full, phi).variance, 0.2 * (1 - 1e-6));
  }
  const Matrix Q = random_matrix(20, 6, 10);
  for (Index i = 0; i < Q.rows(); ++i) {
    const Vector q = Q.row(i).transpose();
    EXPECT_LE(predict(full, q).variance, predict(fewer, q).variance + 1e-8);
    EXPECT_LE(rel(predict(full, q).variance, dense_variance(F, q, 0.9, 0.2)), 1e-8);
  }
}

TEST(LogMarginalLikelihood, DenseOracleAndPermutationInvariance) {
  for (int t = 0; t < 10; ++t) {
    const Matrix F = random_matrix(9, 5, 20 + t);
    const Vector y = random_matrix(9, 1, 40 + t);
    const GpHyper h{std::log(0.6), std::log(0.3)};
    const LocalGp gp = fit_expert(F, y, h);
    Matrix Ky = F * F.transpose() / 0.6;
    Ky.diagonal().array() += 0.3;
    const double oracle = -0.5 * y.dot(Ky.inverse() * y) - 0.5 * std::log(Ky.determinant()) -
                          4.5 * std::log(2 * std::numbers::pi);
    EXPECT_NEAR(log_marginal_likelihood(gp), oracle, 1e-10 * std::abs(oracle));
    EXPECT_NEAR(mll_dense(F, y, h).value, oracle, 1e-10 * std::abs(oracle));
    EXPECT_NEAR(SpectralMll(F, y).evaluate(h).value, oracle, 1e-8 * std::abs(oracle));
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(9);
    perm.setIdentity();
    std::shuffle(perm.indices().data(), perm.indices().data() + 9, std::mt19937_64(t));
    const LocalGp shuffled = fit_expert(perm * F, perm * y, h);
    EXPECT_NEAR(log_marginal_likelihood(shuffled), log_marginal_likelihood(gp), 1e-8);
  }
  // Zero targets: only the determinant and constant remain.
  const Matrix F = random_matrix(4, 3, 1);
  const LocalGp z = fit_expert(F, Vector::Zero(4), GpHyper{});
  EXPECT_NEAR(log_marginal_likelihood(z),
              -z.chol.diagonal().array().log().sum() - 2.0 * std::log(2 * std::numbers::pi), 1e-14);
}

TEST(Mll, GradientsMatchFiniteDifferences) {
  for (int t = 0; t < 10; ++t) {
    std::mt19937_64 rng(t);
    // Both spectral branches: wide and tall feature blocks.
    const Index n = t % 2 ? 6 : 14;
    const Matrix F = random_matrix(n, 9, 60 + t);
    const Vector y = random_matrix(n, 1, 80 + t);
    const GpHyper h{std::uniform_real_distribution<double>(-1, 1)(rng),
                    std::uniform_real_distribution<double>(-2, 0)(rng)};
    const double eps = 1e-5;
    for (int c = 0; c < 2; ++c) {
      GpHyper a = h, b = h;
      (c == 0 ? a.log_delta : a.log_sigma0) += eps;
      (c == 0 ? b.log_delta : b.log_sigma0) -= eps;
      const double fd = (mll_dense(F, y, a).value - mll_dense(F, y, b).value) / (2 * eps);
      EXPECT_LE(rel(mll_dense(F, y, h).gradient(c), fd), 1e-4) << t << " " << c;
      EXPECT_LE(rel(SpectralMll(F, y).evaluate(h).gradient(c), fd), 1e-4) << t << " " << c;
    }
  }
}

TEST(OptimizeMll, ZeroIterationsAndBestSeen) {
  const Matrix F = random_matrix(30, 10, 3);
  const Vector y = F * random_matrix(10, 1, 4) + 0.1 * random_matrix(30, 1, 5);
  const GpHyper init{std::log(5.0), std::log(1.0)};
  EXPECT_EQ(optimize_mll(F, y, init, 0).hyper, init);
  const MllOptimization r = optimize_mll(F, y, init, 100);
  EXPECT_GE(r.final_mll, r.initial_mll);
  EXPECT_GT(r.accepted_steps, 0);
  EXPECT_NEAR(r.final_mll, mll_dense(F, y, r.hyper).value, 1e-8 * std::abs(r.final_mll));
}

TEST(OptimizeMll, NonFiniteInitRejected) {
  const Matrix F = random_matrix(5, 3, 3);
  Vector y = Vector::Ones(5);
  y(0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(optimize_mll(F, y, GpHyper{}, 5), NumericalError);
}

TEST(ActiveSelect, BudgetOneIsExhaustiveArgmax) {
  const Matrix seed = random_matrix(4, 6, 11);
  const Matrix pool = random_matrix(15, 6, 12);
  const GpHyper h{std::log(1.2), std::log(0.1)};
  std::vector<int> ids(15);
  std::iota(ids.begin(), ids.end(), 100);
  const LocalGp gp = fit_expert(seed, Vector::Zero(4), h);
  int best = 0;
  for (int i = 1; i < 15; ++i)
    if (predict(gp, pool.row(i).transpose()).variance > predict(gp, pool.row(best).transpose()).variance) best = i;
  EXPECT_EQ(active_select(seed, pool, ids, 1, h), std::vector<int>({100 + best}));
}

TEST(ActiveSelect, GreedyOrderMatchesRefits) {
  const Matrix seed = random_matrix(3, 5, 13);
  const Matrix pool = random_matrix(8, 5, 14);
  const GpHyper h{0.0, std::log(0.2)};
  std::vector<int> ids{7, 3, 9, 1, 4, 8, 2, 6};
  const auto sel = active_select(seed, pool, ids, 8, h);
  ASSERT_EQ(sel.size(), 8u);
  // Oracle: refit the GP from scratch after every pick.
  Matrix cur = seed;
  std::vector<char> used(8, 0);
  for (int r = 0; r < 8; ++r) {
    const LocalGp gp = fit_expert(cur, Vector::Zero(cur.rows()), h);
    int best = -1;
    double bv = -1;
    for (int i = 0; i < 8; ++i) {
      if (used[i]) continue;
      const double v = predict(gp, pool.row(i).transpose()).variance;
      if (v > bv + 1e-12 || (std::abs(v - bv) <= 1e-12 && ids[i] < ids[best])) {
        bv = v;
        best = i;
      }
    }
    EXPECT_EQ(sel[r], ids[best]) << "round " << r;
    used[best] = 1;
    cur.conservativeResize(cur.rows() + 1, Eigen::NoChange);
    cur.row(cur.rows() - 1) = pool.row(best);
  }
}

TEST(ActiveSelect, DuplicateIsSelectedLast) {
  Matrix pool(3, 3);
  pool << 3, 0, 0, 3, 0, 0, 0, 1, 0;
  const GpHyper h{0.0, std::log(0.01)};
  const auto sel = active_select(Matrix(0, 3), pool, std::vector<int>{0, 1, 2}, 3, h);
  EXPECT_EQ(sel.front(), 0);
  EXPECT_EQ(sel.back(), 1);
}

TEST(ActiveSelect, Errors) {
  const Matrix pool(0, 2);
  EXPECT_THROW(active_select(Matrix(0, 2), pool, std::vector<int>{}, 1, GpHyper{}), SpecificationError);
  const Matrix p2 = random_matrix(2, 2, 1);
  EXPECT_THROW(active_select(Matrix(0, 2), p2, std::vector<int>{0, 1}, 3, GpHyper{}), SpecificationError);
  EXPECT_TRUE(active_select(Matrix(0, 2), p2, std::vector<int>{0, 1}, 0, GpHyper{}).empty());
}

TEST(ActiveSelect, PoolOrderDoesNotMatter) {
  const Matrix seed = random_matrix(2, 4, 21);
  const Matrix pool = random_matrix(10, 4, 22);
  std::vector<int> ids(10);
  std::iota(ids.begin(), ids.end(), 0);
  const GpHyper h{0.0, std::log(0.3)};
  const auto a = active_select(seed, pool, ids, 5, h);
  Matrix rev = pool.colwise().reverse();
  std::vector<int> rids(ids.rbegin(), ids.rend());
  EXPECT_EQ(active_select(seed, rev, rids, 5, h), a);
}
