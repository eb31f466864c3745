#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "distdesign/data.hpp"

using namespace distdesign;

namespace {

Dataset parse(const std::string& text, DatasetSchema schema = {}) {
  std::istringstream in(text);
  return parse_dataset_csv(in, schema, "test.csv");
}

std::string error_of(const std::string& text, DatasetSchema schema = {}) {
  try {
    parse(text, schema);
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Csv, ParsesNumericAndDetectsBinary) {
  const auto d = parse("age,smoker,W\n30.5,1,1\n41,0,0\n22,1,0\n");
  ASSERT_EQ(d.n_subjects(), 3u);
  ASSERT_EQ(d.n_covariates(), 2u);
  EXPECT_EQ(d.meta()[0].name, "age");
  EXPECT_EQ(d.meta()[0].kind, CovariateKind::continuous);
  EXPECT_EQ(d.meta()[1].kind, CovariateKind::binary);
  EXPECT_EQ(d.treatment(), (Treatment{1, 0, 0}));
  EXPECT_EQ(d.covariates()(0, 0), 30.5);
}

TEST(Csv, CategoricalBecomesSortedIndicatorsInPlace) {
  DatasetSchema s;
  s.categorical = {"site"};
  const auto d = parse("a,site,b,W\n1,north,2,1\n3,east,4,0\n5,north,6,0\n", s);
  ASSERT_EQ(d.n_covariates(), 4u);
  EXPECT_EQ(d.meta()[0].name, "a");
  EXPECT_EQ(d.meta()[1].name, "site=east");
  EXPECT_EQ(d.meta()[2].name, "site=north");
  EXPECT_EQ(d.meta()[3].name, "b");
  EXPECT_EQ(d.meta()[1].kind, CovariateKind::categorical_indicator);
  EXPECT_EQ(d.covariates()(1, 1), 1.0);
  EXPECT_EQ(d.covariates()(1, 2), 0.0);
}

TEST(Csv, IgnoredColumnsAreDropped) {
  DatasetSchema s;
  s.ignored = {"id", "Y"};
  const auto d = parse("id,x,Y,W\nA,1.5,NA,1\nB,2.5,,0\n", s);
  EXPECT_EQ(d.n_covariates(), 1u);
  EXPECT_EQ(d.meta()[0].name, "x");
}

TEST(Csv, MissingValueNamesLineAndColumn) {
  const auto msg = error_of("x,y,W\n1,2,1\n3,NA,0\n");
  EXPECT_NE(msg.find("line 3"), std::string::npos);
  EXPECT_NE(msg.find("'y'"), std::string::npos);
}

TEST(Csv, NonBinaryTreatmentRejected) {
  const auto msg = error_of("x,W\n1,1\n2,2\n");
  EXPECT_NE(msg.find("line 3"), std::string::npos);
  EXPECT_NE(msg.find("not binary"), std::string::npos);
}

TEST(Csv, EmptyAndHeaderOnlyRejected) {
  EXPECT_NE(error_of("").find("empty"), std::string::npos);
  EXPECT_NE(error_of("x,W\n").find("no data"), std::string::npos);
}

TEST(Csv, MissingTreatmentColumnRejected) { EXPECT_NE(error_of("x,T\n1,1\n").find("'W'"), std::string::npos); }

TEST(Csv, SingleArmRejected) { EXPECT_THROW(parse("x,W\n1,1\n2,1\n"), DataError); }

TEST(Csv, NonNumericSuggestsCategorical) {
  EXPECT_NE(error_of("x,W\nabc,1\n2,0\n").find("categorical"), std::string::npos);
}

TEST(Csv, RoundTripsBitwise) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::MatrixXd x(50, 4);
  Treatment w(50);
  for (int i = 0; i < 50; ++i) {
    w[static_cast<std::size_t>(i)] = i % 3 == 0;
    for (int j = 0; j < 4; ++j) x(i, j) = z(rng) * std::pow(10.0, j * 3 - 4);
  }
  const Dataset d(x, w);
  std::ostringstream out;
  write_dataset_csv(out, d);
  const auto back = parse(out.str());
  EXPECT_EQ(back.covariates(), d.covariates());
  EXPECT_EQ(back.treatment(), d.treatment());
}

TEST(Standardize, MeanZeroSdOne) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z(3.0, 2.0);
  Eigen::MatrixXd x(200, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  x.col(2).setConstant(7.0);
  const auto s = standardize(x);
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(s.values.col(j).mean(), 0.0, 1e-13);
    EXPECT_NEAR(std::sqrt(s.values.col(j).squaredNorm() / 199.0), 1.0, 1e-13);
  }
  EXPECT_TRUE(s.scales[2].constant);
  EXPECT_EQ(s.values.col(2).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_TRUE(invert_scales(s.values, s.scales).isApprox(x, 1e-14));
}

TEST(Partition, ValidationCatchesOverlapRangeAndFullBlock) {
  EXPECT_NO_THROW(validate_partition(PartitionSpec{2, {{0, 1}, {2}}}, 3));
  EXPECT_THROW(validate_partition(PartitionSpec{2, {{0, 1}, {1}}}, 3), DataError);
  EXPECT_THROW(validate_partition(PartitionSpec{2, {{0, 5}, {1}}}, 3), DataError);
  EXPECT_THROW(validate_partition(PartitionSpec{2, {{0, 1, 2}, {}}}, 3), DataError);
  EXPECT_THROW(validate_partition(PartitionSpec{3, {{0}, {1}}}, 3), DataError);
  // a single designer may hold everything
  EXPECT_NO_THROW(validate_partition(PartitionSpec{1, {{0, 1, 2}}}, 3));
}

TEST(Partition, UnassignedColumnsAreReported) {
  EXPECT_EQ(unassigned_columns(PartitionSpec{2, {{0}, {3}}}, 5), (std::vector<int>{1, 2, 4}));
}

TEST(Partition, BlocksCarryOnlyTheirColumns) {
  Eigen::MatrixXd x(3, 4);
  x << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
  const Dataset d(x, {1, 0, 1});
  const auto blocks = partition_covariates(d, PartitionSpec{2, {{3, 0}, {1, 2}}});
  ASSERT_EQ(blocks.size(), 2u);
  EXPECT_EQ(blocks[0].designer_id, 1);
  EXPECT_EQ(blocks[0].matrix.col(0), x.col(3));
  EXPECT_EQ(blocks[0].matrix.col(1), x.col(0));
  EXPECT_EQ(blocks[1].matrix.cols(), 2);
  EXPECT_EQ(blocks[1].treatment, d.treatment());
}

TEST(Partition, ContiguousSplit) {
  const auto p = contiguous_partition(7, 3);
  EXPECT_EQ(p.blocks, (std::vector<std::vector<int>>{{0, 1, 2}, {3, 4}, {5, 6}}));
}
