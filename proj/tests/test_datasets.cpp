#include "ntkmoe/datasets.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

using namespace ntkmoe;

TEST(Toy1d, NoiselessPointsLieOnTheCurve) {
  const ToyData d = gen_toy1d_gap(100, 3, 0.0, 2.5, 3.5);
  for (Index i = 0; i < d.train.size(); ++i) EXPECT_DOUBLE_EQ(d.train.Y(i, 0), toy_curve(d.train.X(i, 0)));
  EXPECT_EQ(d.test.size(), 501);
  EXPECT_DOUBLE_EQ(d.test.X(0, 0), -2.0);
  EXPECT_DOUBLE_EQ(d.test.X(500, 0), 8.0);
}

TEST(Toy1d, GapIsEmptyAndSupportBounded) {
  const ToyData d = gen_toy1d_gap(2000, 11, 0.2, 2.5, 3.5);
  for (Index i = 0; i < d.train.size(); ++i) {
    const double x = d.train.X(i, 0);
    EXPECT_FALSE(x > 2.5 && x < 3.5) << x;
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 6.0);
  }
}

TEST(Toy1d, SeedDeterminism) {
  const ToyData a = gen_toy1d_gap(50, 42, 0.1, 1.0, 2.0);
  const ToyData b = gen_toy1d_gap(50, 42, 0.1, 1.0, 2.0);
  const ToyData c = gen_toy1d_gap(50, 43, 0.1, 1.0, 2.0);
  EXPECT_EQ(a.train.X, b.train.X);
  EXPECT_EQ(a.train.Y, b.train.Y);
  EXPECT_EQ(a.test.Y, b.test.Y);
  EXPECT_NE(a.train.X, c.train.X);
}

TEST(Toy1d, RejectsBadArguments) {
  EXPECT_THROW(gen_toy1d_gap(0, 1, 0.1, 1, 2), SpecificationError);
  EXPECT_THROW(gen_toy1d_gap(10, 1, -0.1, 1, 2), SpecificationError);
  EXPECT_THROW(gen_toy1d_gap(10, 1, 0.1, 3, 2), SpecificationError);
  EXPECT_THROW(gen_toy1d_gap(10, 1, 0.1, 5, 7), SpecificationError);
}

TEST(Teacher, SameInputsSameOutputs) {
  const LabeledDataset a = gen_teacher_regression(4, 2, 30, {8, 8}, 0.0, 1);
  const LabeledDataset b = gen_teacher_regression(4, 2, 30, {8, 8}, 0.0, 1);
  EXPECT_EQ(a.Y, b.Y);
  const MlpParams t = make_teacher(4, 2, {8, 8}, 1234);
  for (Index i = 0; i < a.size(); ++i) EXPECT_EQ(Vector(a.Y.row(i).transpose()), forward(t, a.X.row(i).transpose()));
}

TEST(Teacher, SignalExceedsNoise) {
  const double noise = 0.1;
  const LabeledDataset d = gen_teacher_regression(10, 1, 3000, {32, 32}, noise, 2);
  const double mean = d.Y.mean();
  const double var = (d.Y.array() - mean).square().mean();
  EXPECT_GT(var, noise * noise);
}

TEST(Clusters, SeparatedBlobsAreNearestNeighborSeparable) {
  const ClusterData d = gen_cluster_classification(4, 200, 20.0, 6);
  int correct = 0;
  for (Index i = 0; i < d.test_in.size(); ++i) {
    Index best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < d.train.size(); ++j) {
      const double dist = (d.train.X.row(j) - d.test_in.X.row(i)).squaredNorm();
      if (dist < bd) bd = dist, best = j;
    }
    Index a = 0, b = 0;
    d.train.Y.row(best).maxCoeff(&a);
    d.test_in.Y.row(i).maxCoeff(&b);
    correct += a == b;
  }
  EXPECT_GE(correct, static_cast<int>(0.99 * d.test_in.size()));
}

TEST(Clusters, GeometryAndLabels) {
  const double sep = 3.0;
  const ClusterData d = gen_cluster_classification(5, 100, sep, 9, 40);
  EXPECT_EQ(d.test_in.size(), 40);
  EXPECT_EQ(d.test_ood.size(), 40);
  for (int c = 0; c < 5; ++c) EXPECT_NEAR((d.centers.row(c) - d.centers.row((c + 1) % 5)).norm(), sep, 1e-12);
  for (const LabeledDataset* s : {&d.train, &d.test_in, &d.test_ood})
    for (Index i = 0; i < s->size(); ++i) {
      EXPECT_EQ(s->Y.row(i).sum(), 1.0);
      EXPECT_EQ(s->Y.row(i).maxCoeff(), 1.0);
    }
  for (Index i = 0; i < d.test_ood.size(); ++i) {
    const double dmin = (d.centers.rowwise() - d.test_ood.X.row(i)).rowwise().norm().minCoeff();
    EXPECT_GE(dmin, 3 * sep);
  }
}

TEST(Clusters, DeterministicAndDisjointStreams) {
  const ClusterData a = gen_cluster_classification(3, 30, 2.0, 4);
  const ClusterData b = gen_cluster_classification(3, 30, 2.0, 4);
  EXPECT_EQ(a.train.X, b.train.X);
  EXPECT_EQ(a.test_ood.X, b.test_ood.X);
  EXPECT_NE(a.train.X, a.test_in.X);
}

TEST(Csv, RoundTripIsExact) {
  const LabeledDataset d = gen_teacher_regression(3, 2, 25, {4}, 0.3, 8);
  const auto path = std::filesystem::temp_directory_path() / "ntkmoe_roundtrip.csv";
  save_csv(d, path.string());
  const LabeledDataset back = load_csv(path.string());
  EXPECT_EQ(back.X, d.X);
  EXPECT_EQ(back.Y, d.Y);
  std::filesystem::remove(path);
}

TEST(Csv, HandFixture) {
  std::istringstream in("x0,x1,y0\n1.5,-2,0.25\n\n3e-1, 4 ,5\r\n");
  const LabeledDataset d = parse_csv(in);
  ASSERT_EQ(d.size(), 2);
  EXPECT_EQ(d.input_dim(), 2);
  EXPECT_EQ(d.output_dim(), 1);
  EXPECT_EQ(d.X(0, 1), -2.0);
  EXPECT_EQ(d.X(1, 0), 0.3);
  EXPECT_EQ(d.X(1, 1), 4.0);
  EXPECT_EQ(d.Y(1, 0), 5.0);
}

namespace {

std::string parse_error(const std::string& text) {
  std::istringstream in(text);
  try {
    parse_csv(in, "f.csv");
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Csv, ErrorsCarryLineNumbers) {
  EXPECT_NE(parse_error("").find("f.csv:1"), std::string::npos);
  EXPECT_NE(parse_error("x0,z\n1,2\n").find("f.csv:1: malformed header"), std::string::npos);
  EXPECT_NE(parse_error("y0\n1\n").find("no x columns"), std::string::npos);
  EXPECT_NE(parse_error("x0,y0\n1,2\n3\n").find("f.csv:3: ragged row"), std::string::npos);
  EXPECT_NE(parse_error("x0,y0\n1,2\n3,4\nabc,1\n").find("f.csv:4: non-numeric cell 'abc'"), std::string::npos);
  EXPECT_NE(parse_error("x0,y0\n1,nan\n").find("f.csv:2"), std::string::npos);
  EXPECT_THROW(load_csv("/nonexistent/file.csv"), Error);
}

TEST(FormatDouble, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(-2.0), "-2");
  const double v = 1.0 / 3.0;
  EXPECT_EQ(std::stod(format_double(v)), v);
}
