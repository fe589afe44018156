#pragma once

// Small multilayer perceptrons: forward pass, exact parameter Jacobians,
// regularized SGD training and the loss derivatives that define the
// neural linear model around a trained parameter vector.

#include "ntkmoe/common.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ntkmoe {

enum class Activation { tanh, relu };
enum class Loss { mse, cross_entropy };
enum class Optimizer { sgd, adam };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }
inline std::string to_string(Loss l) { return l == Loss::mse ? "mse" : "cross_entropy"; }

inline std::string to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw SpecificationError("unknown optimizer '" + s + "'");
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw SpecificationError("unknown activation '" + s + "'");
}

inline Loss parse_loss(const std::string& s) {
  if (s == "mse") return Loss::mse;
  if (s == "cross_entropy" || s == "ce") return Loss::cross_entropy;
  throw SpecificationError("unknown loss '" + s + "'");
}

// Layer widths [D, h_1, ..., h_L, K]; every hidden layer uses `activation`,
// the output layer is linear.
struct MlpSpec {
  std::vector<int> layer_widths;
  Activation activation = Activation::tanh;

  void validate() const {
    require(layer_widths.size() >= 3, "MlpSpec needs at least one hidden layer");
    for (int w : layer_widths) require(w >= 1, "MlpSpec layer widths must be >= 1");
  }

  int input_dim() const { return layer_widths.front(); }
  int output_dim() const { return layer_widths.back(); }
  int weight_layers() const { return static_cast<int>(layer_widths.size()) - 1; }

  int parameter_count() const {
    int p = 0;
    for (int l = 0; l < weight_layers(); ++l) p += (layer_widths[l] + 1) * layer_widths[l + 1];
    return p;
  }

  // Offset of layer l's weight block; its bias block follows immediately.
  int weight_offset(int l) const {
    int off = 0;
    for (int i = 0; i < l; ++i) off += (layer_widths[i] + 1) * layer_widths[i + 1];
    return off;
  }

  int bias_offset(int l) const { return weight_offset(l) + layer_widths[l] * layer_widths[l + 1]; }

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

// theta holds, layer by layer, the row-major (out x in) weight matrix
// followed by the bias vector.
struct MlpParams {
  MlpSpec spec;
  Vector theta;

  void validate() const {
    spec.validate();
    require(theta.size() == spec.parameter_count(), "theta length does not match the layer layout");
    require(theta.allFinite(), "theta has non-finite entries");
  }

  Eigen::Map<const RowMatrix> weights(int l) const {
    return {theta.data() + spec.weight_offset(l), spec.layer_widths[l + 1], spec.layer_widths[l]};
  }

  Eigen::Map<const Vector> bias(int l) const {
    return {theta.data() + spec.bias_offset(l), spec.layer_widths[l + 1]};
  }
};

struct TrainConfig {
  Loss loss = Loss::mse;
  double l2_delta = 1e-3;
  double learning_rate = 0.01;
  int epochs = 100;
  int batch_size = 32;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::sgd;

  void validate() const {
    require(l2_delta > 0, "l2_delta must be > 0");
    require(learning_rate > 0, "learning_rate must be > 0");
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
  }
};

struct LossDerivatives {
  Vector residual;
  Matrix hessian;
  bool singular = false;  // cross-entropy Hessians are rank deficient
};

// Rows of X and Y are samples.
struct LabeledDataset {
  Matrix X;
  Matrix Y;

  Index size() const { return X.rows(); }
  int input_dim() const { return static_cast<int>(X.cols()); }
  int output_dim() const { return static_cast<int>(Y.cols()); }

  void validate(bool classification = false) const {
    require(X.rows() >= 1, "dataset must contain at least one sample");
    require_dims(X.rows() == Y.rows(), "X and Y row counts differ");
    require(X.allFinite() && Y.allFinite(), "dataset contains non-finite entries");
    if (classification) {
      for (Index i = 0; i < Y.rows(); ++i) {
        require(std::abs(Y.row(i).sum() - 1.0) <= 1e-9, "classification row does not sum to 1");
      }
    }
  }

  LabeledDataset subset(const std::vector<int>& ids) const { return {select_rows(X, ids), select_rows(Y, ids)}; }
};

inline MlpParams init_mlp(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  MlpParams params{spec, Vector::Zero(spec.parameter_count())};
  std::mt19937_64 rng(seed);
  for (int l = 0; l < spec.weight_layers(); ++l) {
    const int fan_in = spec.layer_widths[l];
    const int fan_out = spec.layer_widths[l + 1];
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    const int off = spec.weight_offset(l);
    for (int i = 0; i < fan_in * fan_out; ++i) params.theta(off + i) = dist(rng);
  }
  return params;
}

namespace detail {

// act[0] is the input; act[l + 1] is the output of weight layer l.
struct ForwardTrace {
  std::vector<Vector> pre;
  std::vector<Vector> act;
};

inline ForwardTrace trace_forward(const MlpParams& params, const Eigen::Ref<const Vector>& x) {
  const MlpSpec& spec = params.spec;
  require_dims(x.size() == spec.input_dim(), "input dimension mismatch");
  const int layers = spec.weight_layers();
  ForwardTrace t;
  t.pre.reserve(layers);
  t.act.reserve(layers + 1);
  t.act.emplace_back(x);
  for (int l = 0; l < layers; ++l) {
    Vector z = params.weights(l) * t.act.back() + params.bias(l);
    Vector a = z;
    if (l + 1 < layers) {
      if (spec.activation == Activation::tanh) {
        a = z.array().tanh();
      } else {
        a = z.array().max(0.0);
      }
    }
    t.pre.push_back(std::move(z));
    t.act.push_back(std::move(a));
  }
  return t;
}

// Reverse accumulation of seed * d(output)/d(theta). `seed` is r x K,
// the result r x P (row-major so each row's weight block is contiguous).
inline RowMatrix backprop(const MlpParams& params, const ForwardTrace& t, const Eigen::Ref<const Matrix>& seed) {
  const MlpSpec& spec = params.spec;
  const int layers = spec.weight_layers();
  const Index rows = seed.rows();
  const Index P = spec.parameter_count();
  RowMatrix out(rows, P);
  Matrix G = seed;
  for (int l = layers - 1; l >= 0; --l) {
    const int in = spec.layer_widths[l];
    const int width = spec.layer_widths[l + 1];
    const int woff = spec.weight_offset(l);
    const int boff = spec.bias_offset(l);
    const Vector& a_in = t.act[l];
    for (Index r = 0; r < rows; ++r) {
      Eigen::Map<RowMatrix> block(out.data() + r * P + woff, width, in);
      block.noalias() = G.row(r).transpose() * a_in.transpose();
      out.row(r).segment(boff, width) = G.row(r);
    }
    if (l > 0) {
      Matrix next = G * params.weights(l);
      const Vector& z = t.pre[l - 1];
      const Vector& a = t.act[l];
      for (Index j = 0; j < next.cols(); ++j) {
        double d;
        if (spec.activation == Activation::tanh) {
          d = 1.0 - a(j) * a(j);
        } else {
          d = z(j) > 0.0 ? 1.0 : 0.0;  // subgradient at 0 is 0
        }
        next.col(j) *= d;
      }
      G = std::move(next);
    }
  }
  return out;
}

inline Vector softmax(const Eigen::Ref<const Vector>& z) {
  const double m = z.maxCoeff();
  Vector e = (z.array() - m).exp();
  return e / e.sum();
}

}  // namespace detail

inline Vector forward(const MlpParams& params, const Eigen::Ref<const Vector>& x) {
  return detail::trace_forward(params, x).act.back();
}

// K x P Jacobian d f / d theta with columns in theta order.
inline RowMatrix jacobian(const MlpParams& params, const Eigen::Ref<const Vector>& x) {
  auto t = detail::trace_forward(params, x);
  const int K = params.spec.output_dim();
  return detail::backprop(params, t, Matrix::Identity(K, K));
}

// Both the network output and its Jacobian from a single forward pass.
inline std::pair<Vector, RowMatrix> forward_and_jacobian(const MlpParams& params, const Eigen::Ref<const Vector>& x) {
  auto t = detail::trace_forward(params, x);
  const int K = params.spec.output_dim();
  RowMatrix J = detail::backprop(params, t, Matrix::Identity(K, K));
  return {std::move(t.act.back()), std::move(J)};
}

inline LossDerivatives loss_derivatives(const Eigen::Ref<const Vector>& y_pred, const Eigen::Ref<const Vector>& y,
                                        Loss loss) {
  require_dims(y_pred.size() == y.size(), "prediction/target dimension mismatch");
  const Index K = y.size();
  LossDerivatives d;
  if (loss == Loss::mse) {
    d.residual = y_pred - y;
    d.hessian = Matrix::Identity(K, K);
  } else {
    Vector p = detail::softmax(y_pred);
    d.residual = p - y;
    d.hessian = Matrix(p.asDiagonal()) - p * p.transpose();
    d.singular = true;
  }
  return d;
}

inline double loss_value(const Eigen::Ref<const Vector>& y_pred, const Eigen::Ref<const Vector>& y, Loss loss) {
  if (loss == Loss::mse) return 0.5 * (y_pred - y).squaredNorm();
  const double m = y_pred.maxCoeff();
  const double lse = m + std::log((y_pred.array() - m).exp().sum());
  return -(y.array() * (y_pred.array() - lse)).sum();
}

// J(x) theta_hat - H^{-1} R. Only the mse path has an invertible Hessian.
inline Vector pseudo_output(const MlpParams& params, const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y,
                            Loss loss) {
  if (loss != Loss::mse) {
    throw UnsupportedError("pseudo-outputs require an invertible loss Hessian; cross-entropy is singular");
  }
  auto [f, J] = forward_and_jacobian(params, x);
  const LossDerivatives d = loss_derivatives(f, y, loss);
  return J * params.theta - d.hessian.llt().solve(d.residual);
}

// Objective on a batch B of a dataset with N samples:
//   (1/|B|) sum_B L + (delta/2) theta^T theta / N
// so that delta is the prior precision of the full-batch posterior.
inline double objective_value(const MlpParams& params, const LabeledDataset& data, std::span<const int> batch,
                              const TrainConfig& cfg) {
  double total = 0.0;
  for (int i : batch) total += loss_value(forward(params, data.X.row(i).transpose()), data.Y.row(i).transpose(), cfg.loss);
  const double n = static_cast<double>(data.size());
  return total / static_cast<double>(batch.size()) + 0.5 * cfg.l2_delta * params.theta.squaredNorm() / n;
}

inline Vector objective_gradient(const MlpParams& params, const LabeledDataset& data, std::span<const int> batch,
                                 const TrainConfig& cfg, double* batch_loss = nullptr) {
  Vector grad = Vector::Zero(params.theta.size());
  double total = 0.0;
  for (int i : batch) {
    auto t = detail::trace_forward(params, data.X.row(i).transpose());
    const Vector& f = t.act.back();
    const Vector y = data.Y.row(i).transpose();
    const LossDerivatives d = loss_derivatives(f, y, cfg.loss);
    total += loss_value(f, y, cfg.loss);
    grad += detail::backprop(params, t, d.residual.transpose()).row(0).transpose();
  }
  const double b = static_cast<double>(batch.size());
  const double n = static_cast<double>(data.size());
  if (batch_loss) *batch_loss = total / b;
  return grad / b + cfg.l2_delta * params.theta / n;
}

struct TrainReport {
  double objective = 0.0;  // full-data objective at the returned theta
  double train_rmse = 0.0;
  double train_accuracy = 0.0;  // classification only
  int epochs = 0;
};

// Minibatch descent with a fixed learning rate and seeded shuffling:
// plain SGD by default, Adam (beta1 0.9, beta2 0.999) on request.
inline MlpParams train_map(MlpParams params, const LabeledDataset& data, const TrainConfig& cfg,
                           TrainReport* report = nullptr) {
  cfg.validate();
  params.validate();
  data.validate(cfg.loss == Loss::cross_entropy);
  require_dims(data.input_dim() == params.spec.input_dim(), "dataset input dim does not match the network");
  require_dims(data.output_dim() == params.spec.output_dim(), "dataset output dim does not match the network");

  const int n = static_cast<int>(data.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  Vector m1 = Vector::Zero(params.theta.size());
  Vector m2 = Vector::Zero(params.theta.size());
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int len = std::min(cfg.batch_size, n - start);
      std::span<const int> batch(order.data() + start, len);
      double batch_loss = 0.0;
      Vector g = objective_gradient(params, data, batch, cfg, &batch_loss);
      epoch_loss += batch_loss * len;
      if (cfg.optimizer == Optimizer::sgd) {
        params.theta -= cfg.learning_rate * g;
      } else {
        ++step;
        m1 = 0.9 * m1 + 0.1 * g;
        m2 = 0.999 * m2 + 0.001 * g.cwiseAbs2();
        const double c1 = 1.0 - std::pow(0.9, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(0.999, static_cast<double>(step));
        params.theta.array() -= cfg.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + 1e-8);
      }
    }
    if (!std::isfinite(epoch_loss) || !params.theta.allFinite()) {
      throw NumericalError("training diverged at epoch " + std::to_string(epoch) +
                           " (non-finite loss); lower the learning rate");
    }
  }

  if (report) {
    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    report->objective = objective_value(params, data, all, cfg);
    double se = 0.0;
    int correct = 0;
    for (int i = 0; i < n; ++i) {
      Vector f = forward(params, data.X.row(i).transpose());
      se += (f - data.Y.row(i).transpose()).squaredNorm();
      Index a, b;
      f.maxCoeff(&a);
      data.Y.row(i).maxCoeff(&b);
      correct += (a == b);
    }
    report->train_rmse = std::sqrt(se / (static_cast<double>(n) * data.output_dim()));
    report->train_accuracy = static_cast<double>(correct) / n;
    report->epochs = cfg.epochs;
  }
  return params;
}

}  // namespace ntkmoe
