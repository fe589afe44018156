#pragma once

// Small trained networks shared by the pipeline, snapshot and acceptance tests.

#include "ntkmoe/datasets.hpp"
#include "ntkmoe/nn_core.hpp"

namespace fixtures {

struct TrainedToy {
  ntkmoe::ToyData data;
  ntkmoe::MlpParams mlp;
  ntkmoe::TrainConfig train;
};

inline TrainedToy small_toy(int n, std::uint64_t seed, int hidden = 16, int epochs = 150) {
  using namespace ntkmoe;
  TrainedToy t;
  t.data = gen_toy1d_gap(n, seed, 0.1, 2.5, 3.5, 101);
  t.train = TrainConfig{.loss = Loss::mse,
                        .l2_delta = 1e-3,
                        .learning_rate = 0.01,
                        .epochs = epochs,
                        .batch_size = 8,
                        .seed = seed,
                        .optimizer = Optimizer::adam};
  t.mlp = train_map(init_mlp(MlpSpec{{1, hidden, 1}, Activation::tanh}, seed), t.data.train, t.train);
  return t;
}

// Exact GP posterior over every training row with the full Jacobian as features.
struct DenseGp {
  ntkmoe::Matrix phi;
  ntkmoe::Vector targets;
  double delta = 1.0;
  double sigma0 = 1.0;

  std::pair<double, double> predict(const ntkmoe::Vector& phi_star) const {
    using namespace ntkmoe;
    Matrix K = phi * phi.transpose() / delta;
    K.diagonal().array() += sigma0;
    const Vector k = phi * phi_star / delta;
    const Eigen::FullPivLU<Matrix> lu(K);
    const double mean = k.dot(lu.solve(targets));
    const double var = phi_star.squaredNorm() / delta - k.dot(lu.solve(k)) + sigma0;
    return {mean, var};
  }
};

inline DenseGp dense_gp(const ntkmoe::MlpParams& mlp, const ntkmoe::LabeledDataset& data, double delta, double sigma0,
                        int output = 0) {
  using namespace ntkmoe;
  DenseGp g;
  g.delta = delta;
  g.sigma0 = sigma0;
  g.phi.resize(data.size(), mlp.spec.parameter_count());
  g.targets.resize(data.size());
  for (Index i = 0; i < data.size(); ++i) {
    const Vector x = data.X.row(i).transpose();
    g.phi.row(i) = jacobian(mlp, x).row(output);
    g.targets(i) = pseudo_output(mlp, x, data.Y.row(i).transpose(), Loss::mse)(output);
  }
  return g;
}

}  // namespace fixtures
