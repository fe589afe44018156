#include "ntkmoe/datasets.hpp"
#include "ntkmoe/nn_core.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace ntkmoe;

namespace {

MlpParams random_net(const std::vector<int>& widths, Activation act, std::uint64_t seed) {
  MlpParams p{MlpSpec{widths, act}, {}};
  p.theta.resize(p.spec.parameter_count());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.7);
  for (Index i = 0; i < p.theta.size(); ++i) p.theta(i) = g(rng);
  return p;
}

Vector random_vec(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

// Central differences of the network output with respect to theta.
Matrix fd_jacobian(const MlpParams& p, const Vector& x, double h = 1e-5) {
  Matrix J(p.spec.output_dim(), p.theta.size());
  for (Index c = 0; c < p.theta.size(); ++c) {
    MlpParams a = p, b = p;
    a.theta(c) += h;
    b.theta(c) -= h;
    J.col(c) = (forward(a, x) - forward(b, x)) / (2 * h);
  }
  return J;
}

}  // namespace

TEST(MlpSpec, ParameterCount) {
  MlpSpec s{{1, 2, 1}, Activation::tanh};
  EXPECT_EQ(s.parameter_count(), 7);
  MlpSpec t{{3, 5, 4, 2}, Activation::relu};
  EXPECT_EQ(t.parameter_count(), (3 + 1) * 5 + (5 + 1) * 4 + (4 + 1) * 2);
}

TEST(MlpSpec, RejectsMissingHiddenLayerAndZeroWidth) {
  EXPECT_THROW(init_mlp(MlpSpec{{2, 1}, Activation::tanh}, 0), SpecificationError);
  EXPECT_THROW(init_mlp(MlpSpec{{2, 0, 1}, Activation::tanh}, 0), SpecificationError);
}

TEST(InitMlp, DeterministicWithZeroBiasesAndGlorotBounds) {
  MlpSpec s{{2, 3, 2}, Activation::tanh};
  const MlpParams a = init_mlp(s, 5);
  const MlpParams b = init_mlp(s, 5);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.theta.size(), 17);
  for (int l = 0; l < s.weight_layers(); ++l) {
    EXPECT_TRUE((a.bias(l).array() == 0.0).all());
    const double bound = std::sqrt(6.0 / (s.layer_widths[l] + s.layer_widths[l + 1]));
    EXPECT_LE(a.weights(l).cwiseAbs().maxCoeff(), bound);
  }
  EXPECT_NE(init_mlp(s, 6).theta, a.theta);
}

TEST(Forward, ZeroWeightsGiveZeroOutput) {
  MlpParams p{MlpSpec{{3, 4, 2}, Activation::tanh}, Vector::Zero(MlpSpec{{3, 4, 2}, Activation::tanh}.parameter_count())};
  EXPECT_TRUE(forward(p, random_vec(3, 1)).isZero(0.0));
}

TEST(Forward, HandEvaluatedScalarNet) {
  // [1,1,1]: w1, b1, w2, b2
  MlpParams p{MlpSpec{{1, 1, 1}, Activation::tanh}, Vector(4)};
  p.theta << 1.0, 0.0, 2.0, 0.5;
  EXPECT_DOUBLE_EQ(forward(p, Vector::Zero(1))(0), 0.5);
  Vector x(1);
  x << 0.3;
  EXPECT_DOUBLE_EQ(forward(p, x)(0), 2.0 * std::tanh(0.3) + 0.5);
}

TEST(Forward, DimensionMismatch) {
  const MlpParams p = init_mlp(MlpSpec{{2, 3, 1}, Activation::tanh}, 0);
  EXPECT_THROW(forward(p, Vector::Zero(3)), DimensionError);
}

TEST(Jacobian, MatchesCentralDifferences) {
  for (int t = 0; t < 20; ++t) {
    const Activation act = t % 2 ? Activation::relu : Activation::tanh;
    const MlpParams p = random_net({3, 5, 4, 2}, act, 100 + t);
    const Vector x = random_vec(3, 200 + t);
    const Matrix J = jacobian(p, x);
    const Matrix F = fd_jacobian(p, x);
    EXPECT_LE((J - F).norm() / std::max(F.norm(), 1e-12), 1e-4) << "net " << t;
  }
}

TEST(Jacobian, ZeroInputKillsFirstLayerWeights) {
  const MlpParams p = random_net({3, 4, 2}, Activation::tanh, 3);
  const RowMatrix J = jacobian(p, Vector::Zero(3));
  for (int c = 0; c < 3 * 4; ++c) EXPECT_EQ(J.col(c).norm(), 0.0);
}

TEST(Jacobian, OutputBiasColumns) {
  const MlpParams p = random_net({2, 3, 2}, Activation::relu, 4);
  const RowMatrix J = jacobian(p, random_vec(2, 5));
  const int boff = p.spec.bias_offset(1);
  EXPECT_EQ(J(0, boff), 1.0);
  EXPECT_EQ(J(1, boff), 0.0);
  EXPECT_EQ(J(0, boff + 1), 0.0);
  EXPECT_EQ(J(1, boff + 1), 1.0);
}

TEST(Jacobian, PureAndConsistentWithForwardAndJacobian) {
  const MlpParams p = random_net({2, 6, 3}, Activation::tanh, 9);
  const Vector x = random_vec(2, 10);
  const RowMatrix a = jacobian(p, x);
  const RowMatrix b = jacobian(p, x);
  EXPECT_EQ(a, b);
  auto [f, J] = forward_and_jacobian(p, x);
  EXPECT_EQ(J, a);
  EXPECT_EQ(f, forward(p, x));
}

TEST(LossDerivatives, MseAndCrossEntropy) {
  Vector y(1), f(1);
  y << 1.0;
  f << 2.0;
  auto d = loss_derivatives(f, y, Loss::mse);
  EXPECT_DOUBLE_EQ(d.residual(0), 1.0);
  EXPECT_DOUBLE_EQ(d.hessian(0, 0), 1.0);
  auto z = loss_derivatives(y, y, Loss::mse);
  EXPECT_TRUE(z.residual.isZero(0.0));

  Vector logits = Vector::Zero(2), onehot(2);
  onehot << 1.0, 0.0;
  auto c = loss_derivatives(logits, onehot, Loss::cross_entropy);
  EXPECT_DOUBLE_EQ(c.residual(0), -0.5);
  EXPECT_DOUBLE_EQ(c.residual(1), 0.5);
  EXPECT_TRUE(c.singular);
  EXPECT_LE((c.hessian - c.hessian.transpose()).norm(), 0.0);
}

TEST(PseudoOutput, MseIdentityAgainstDirectSolve) {
  for (int t = 0; t < 10; ++t) {
    const MlpParams p = random_net({2, 5, 2}, Activation::tanh, 40 + t);
    const Vector x = random_vec(2, 50 + t);
    const Vector y = random_vec(2, 60 + t);
    const Vector yt = pseudo_output(p, x, y, Loss::mse);
    const Vector f = forward(p, x);
    const Matrix J = jacobian(p, x);
    // H = I here, so H^{-1} R is the residual solved against an explicit identity.
    const Vector hr = Matrix::Identity(2, 2).fullPivLu().solve(f - y);
    EXPECT_LE((yt - (J * p.theta - hr)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((yt - J * p.theta - (y - f)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(PseudoOutput, ExactFitGivesLinearization) {
  const MlpParams p = random_net({2, 4, 1}, Activation::tanh, 7);
  const Vector x = random_vec(2, 8);
  const Vector f = forward(p, x);
  EXPECT_LE((pseudo_output(p, x, f, Loss::mse) - jacobian(p, x) * p.theta).norm(), 1e-12);
}

TEST(PseudoOutput, CrossEntropyUnsupported) {
  const MlpParams p = random_net({2, 4, 2}, Activation::relu, 7);
  Vector y(2);
  y << 1.0, 0.0;
  EXPECT_THROW(pseudo_output(p, random_vec(2, 1), y, Loss::cross_entropy), UnsupportedError);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  for (Loss loss : {Loss::mse, Loss::cross_entropy}) {
    MlpParams p = random_net({2, 4, 3}, Activation::tanh, 11);
    LabeledDataset d;
    d.X = Matrix::Random(6, 2);
    d.Y = Matrix::Zero(6, 3);
    for (int i = 0; i < 6; ++i) {
      if (loss == Loss::mse) {
        d.Y.row(i) = random_vec(3, 70 + i).transpose();
      } else {
        d.Y(i, i % 3) = 1.0;
      }
    }
    TrainConfig cfg;
    cfg.loss = loss;
    cfg.l2_delta = 0.3;
    const std::vector<int> batch{0, 2, 3, 5};
    const Vector g = objective_gradient(p, d, batch, cfg);
    Vector fd(p.theta.size());
    for (Index c = 0; c < p.theta.size(); ++c) {
      MlpParams a = p, b = p;
      a.theta(c) += 1e-5;
      b.theta(c) -= 1e-5;
      fd(c) = (objective_value(a, d, batch, cfg) - objective_value(b, d, batch, cfg)) / 2e-5;
    }
    EXPECT_LE((g - fd).norm() / fd.norm(), 1e-4);
  }
}

TEST(TrainMap, RejectsZeroEpochs) {
  const MlpParams p = init_mlp(MlpSpec{{1, 3, 1}, Activation::tanh}, 0);
  LabeledDataset d{Matrix::Zero(4, 1), Matrix::Zero(4, 1)};
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train_map(p, d, cfg), SpecificationError);
}

TEST(TrainMap, HugeRegularizerShrinksWeights) {
  const MlpParams p = init_mlp(MlpSpec{{1, 8, 1}, Activation::tanh}, 1);
  LabeledDataset d{Matrix::Random(16, 1), Matrix::Zero(16, 1)};
  TrainConfig cfg;
  cfg.l2_delta = 1e6;
  cfg.learning_rate = 1e-7;
  cfg.epochs = 5;
  cfg.batch_size = 4;
  const MlpParams q = train_map(p, d, cfg);
  EXPECT_LT(q.theta.norm(), p.theta.norm());
}

TEST(TrainMap, DivergenceIsReported) {
  const MlpParams p = init_mlp(MlpSpec{{1, 8, 1}, Activation::relu}, 1);
  LabeledDataset d{Matrix::Constant(16, 1, 3.0), Matrix::Constant(16, 1, 50.0)};
  TrainConfig cfg;
  cfg.learning_rate = 10.0;
  cfg.epochs = 200;
  EXPECT_THROW(train_map(p, d, cfg), NumericalError);
}

TEST(TrainMap, DeterministicGivenSeed) {
  const MlpParams p = init_mlp(MlpSpec{{1, 6, 1}, Activation::tanh}, 2);
  const ToyData t = gen_toy1d_gap(40, 3, 0.1, 2.5, 3.5);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 9;
  EXPECT_EQ(train_map(p, t.train, cfg).theta, train_map(p, t.train, cfg).theta);
  cfg.optimizer = Optimizer::adam;
  EXPECT_EQ(train_map(p, t.train, cfg).theta, train_map(p, t.train, cfg).theta);
}

// The toy recipe: one hidden layer of 200 tanh units, noise 0.2.
TEST(TrainMap, ToySinusoidFitsWithinNoiseBand) {
  const double noise = 0.2;
  const ToyData t = gen_toy1d_gap(200, 0, noise, 2.5, 3.5);
  TrainConfig cfg;
  cfg.optimizer = Optimizer::adam;
  cfg.learning_rate = 0.01;
  cfg.epochs = 1500;
  cfg.batch_size = 8;
  TrainReport rep;
  train_map(init_mlp(MlpSpec{{1, 200, 1}, Activation::tanh}, 0), t.train, cfg, &rep);
  EXPECT_LT(rep.train_rmse, 1.5 * noise);
}
