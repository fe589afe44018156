#pragma once

// Seeded synthetic generators and CSV ingestion.

#include "ntkmoe/common.hpp"
#include "ntkmoe/nn_core.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace ntkmoe {

struct ToyData {
  LabeledDataset train;
  LabeledDataset test;  // dense grid on [-2, 8]
};

inline double toy_curve(double x) { return std::sin(2.0 * x) + 0.2 * std::sin(7.0 * x); }

// 1D regression with a removed interval (a, b) inside [0, 6]. The test grid
// spans [-2, 8] so it covers both the gap and the extrapolation tails.
inline ToyData gen_toy1d_gap(int n, std::uint64_t seed, double noise, double a, double b, int test_points = 501) {
  require(n >= 1, "gen_toy1d_gap: n must be >= 1");
  require(noise >= 0, "gen_toy1d_gap: noise must be >= 0");
  require(0.0 <= a && a < b && b <= 6.0, "gen_toy1d_gap: need 0 <= a < b <= 6");
  require(test_points >= 2, "gen_toy1d_gap: need at least two test points");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 6.0 - (b - a));
  std::normal_distribution<double> eps(0.0, 1.0);
  ToyData d;
  d.train.X.resize(n, 1);
  d.train.Y.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    double x = u(rng);
    if (x > a) x += b - a;
    d.train.X(i, 0) = x;
    d.train.Y(i, 0) = toy_curve(x) + noise * eps(rng);
  }
  std::mt19937_64 test_rng(mix_seed(seed, 0x7e57));
  d.test.X.resize(test_points, 1);
  d.test.Y.resize(test_points, 1);
  for (int i = 0; i < test_points; ++i) {
    const double x = -2.0 + 10.0 * i / (test_points - 1);
    d.test.X(i, 0) = x;
    d.test.Y(i, 0) = toy_curve(x) + noise * eps(test_rng);
  }
  return d;
}

// Random tanh teacher network, fixed by teacher_seed.
inline MlpParams make_teacher(int D, int K, const std::vector<int>& widths, std::uint64_t teacher_seed) {
  MlpSpec spec;
  spec.layer_widths.push_back(D);
  for (int w : widths) spec.layer_widths.push_back(w);
  spec.layer_widths.push_back(K);
  spec.activation = Activation::tanh;
  spec.validate();
  MlpParams p{spec, Vector::Zero(spec.parameter_count())};
  std::mt19937_64 rng(teacher_seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int l = 0; l < spec.weight_layers(); ++l) {
    const double scale = 1.5 / std::sqrt(static_cast<double>(spec.layer_widths[l]));
    const int woff = spec.weight_offset(l);
    for (int i = 0; i < spec.layer_widths[l] * spec.layer_widths[l + 1]; ++i) p.theta(woff + i) = scale * g(rng);
    const int boff = spec.bias_offset(l);
    for (int i = 0; i < spec.layer_widths[l + 1]; ++i) p.theta(boff + i) = 0.1 * g(rng);
  }
  return p;
}

// x ~ N(0, I_D), y = teacher(x) + noise.
inline LabeledDataset gen_teacher_regression(int D, int K, int n, const std::vector<int>& widths, double noise,
                                             std::uint64_t seed, std::uint64_t teacher_seed = 1234) {
  require(D >= 1 && K >= 1 && n >= 1, "gen_teacher_regression: invalid dimensions");
  require(!widths.empty(), "gen_teacher_regression: teacher needs a hidden layer");
  require(noise >= 0, "gen_teacher_regression: noise must be >= 0");
  const MlpParams teacher = make_teacher(D, K, widths, teacher_seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  LabeledDataset d;
  d.X.resize(n, D);
  d.Y.resize(n, K);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < D; ++j) d.X(i, j) = g(rng);
    const Vector y = forward(teacher, d.X.row(i).transpose());
    for (int k = 0; k < K; ++k) d.Y(i, k) = y(k) + noise * g(rng);
  }
  return d;
}

struct ClusterData {
  LabeledDataset train;
  LabeledDataset test_in;
  LabeledDataset test_ood;
  Matrix centers;  // C x 2
};

// C unit-variance 2D blobs on a regular polygon with neighboring centers
// `separation` apart. OOD samples lie at least 3 * separation from every
// center; they carry the label of the nearest blob.
inline ClusterData gen_cluster_classification(int C, int n, double separation, std::uint64_t seed, int n_test = -1) {
  require(C >= 2, "gen_cluster_classification: need at least two classes");
  require(n >= C, "gen_cluster_classification: need n >= C");
  require(separation > 0, "gen_cluster_classification: separation must be > 0");
  if (n_test < 0) n_test = n;
  ClusterData d;
  const double radius = separation / (2.0 * std::sin(std::numbers::pi / C));
  d.centers.resize(C, 2);
  for (int c = 0; c < C; ++c) {
    const double ang = 2.0 * std::numbers::pi * c / C;
    d.centers(c, 0) = radius * std::cos(ang);
    d.centers(c, 1) = radius * std::sin(ang);
  }
  std::normal_distribution<double> g(0.0, 1.0);
  auto blobs = [&](int count, std::mt19937_64& rng) {
    LabeledDataset s;
    s.X.resize(count, 2);
    s.Y = Matrix::Zero(count, C);
    for (int i = 0; i < count; ++i) {
      const int c = i % C;
      s.X(i, 0) = d.centers(c, 0) + g(rng);
      s.X(i, 1) = d.centers(c, 1) + g(rng);
      s.Y(i, c) = 1.0;
    }
    return s;
  };
  std::mt19937_64 rng(seed);
  d.train = blobs(n, rng);
  std::mt19937_64 test_rng(mix_seed(seed, 0x7e57));
  d.test_in = blobs(n_test, test_rng);

  std::mt19937_64 ood_rng(mix_seed(seed, 0x00d));
  std::uniform_real_distribution<double> ang(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> extra(0.0, separation);
  d.test_ood.X.resize(n_test, 2);
  d.test_ood.Y = Matrix::Zero(n_test, C);
  const double min_dist = 3.0 * separation;
  for (int i = 0; i < n_test;) {
    const double r = radius + min_dist + extra(ood_rng);
    const double a = ang(ood_rng);
    Eigen::RowVector2d p(r * std::cos(a), r * std::sin(a));
    Index nearest = 0;
    const double dmin = (d.centers.rowwise() - p).rowwise().norm().minCoeff(&nearest);
    if (dmin < min_dist) continue;
    d.test_ood.X.row(i) = p;
    d.test_ood.Y(i, nearest) = 1.0;
    ++i;
  }
  return d;
}

// ---------------------------------------------------------------------------
// CSV: header x0..x{D-1},y0..y{K-1}; one sample per line.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && s[i] == ' ') ++i;
  return s.substr(i);
}

}  // namespace detail

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void save_csv(const LabeledDataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  for (int j = 0; j < data.input_dim(); ++j) out << (j ? "," : "") << 'x' << j;
  for (int k = 0; k < data.output_dim(); ++k) out << ",y" << k;
  out << '\n';
  for (Index i = 0; i < data.size(); ++i) {
    for (int j = 0; j < data.input_dim(); ++j) out << (j ? "," : "") << format_double(data.X(i, j));
    for (int k = 0; k < data.output_dim(); ++k) out << ',' << format_double(data.Y(i, k));
    out << '\n';
  }
  if (!out) throw Error("write to '" + path + "' failed");
}

inline LabeledDataset parse_csv(std::istream& in, const std::string& name = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(name + ":1: missing header");
  const auto header = detail::split_csv_line(detail::trim(line));
  int D = 0, K = 0;
  for (const auto& raw : header) {
    const std::string h = detail::trim(raw);
    const std::string expect_x = "x" + std::to_string(D);
    const std::string expect_y = "y" + std::to_string(K);
    if (K == 0 && h == expect_x) {
      ++D;
    } else if (h == expect_y) {
      ++K;
    } else {
      throw FormatError(name + ":1: malformed header: unexpected column '" + h + "' (expected x0..x{D-1},y0..y{K-1})");
    }
  }
  if (D == 0) throw FormatError(name + ":1: malformed header: no x columns");
  if (K == 0) throw FormatError(name + ":1: malformed header: no y columns");

  std::vector<double> values;
  int line_no = 1;
  Index rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (static_cast<int>(cells.size()) != D + K) {
      throw FormatError(name + ":" + std::to_string(line_no) + ": ragged row: expected " + std::to_string(D + K) +
                        " cells, found " + std::to_string(cells.size()));
    }
    for (const auto& raw : cells) {
      const std::string c = detail::trim(raw);
      double v = 0.0;
      auto res = std::from_chars(c.data(), c.data() + c.size(), v);
      if (c.empty() || res.ec != std::errc() || res.ptr != c.data() + c.size() || !std::isfinite(v)) {
        throw FormatError(name + ":" + std::to_string(line_no) + ": non-numeric cell '" + c + "'");
      }
      values.push_back(v);
    }
    ++rows;
  }
  LabeledDataset d;
  d.X.resize(rows, D);
  d.Y.resize(rows, K);
  for (Index i = 0; i < rows; ++i) {
    for (int j = 0; j < D; ++j) d.X(i, j) = values[i * (D + K) + j];
    for (int k = 0; k < K; ++k) d.Y(i, k) = values[i * (D + K) + D + k];
  }
  return d;
}

inline LabeledDataset load_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return parse_csv(in, path);
}

}  // namespace ntkmoe
