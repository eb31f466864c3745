#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "distdesign/balance.hpp"
#include "oracles/numeric_oracle.hpp"

using namespace distdesign;

namespace {

Dataset mixed_dataset(std::size_t n, std::size_t p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::bernoulli_distribution coin(0.4);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  Treatment w(n);
  std::vector<CovariateMeta> meta;
  for (std::size_t j = 0; j < p; ++j)
    meta.push_back({"V" + std::to_string(j + 1), j % 4 == 3 ? CovariateKind::binary : CovariateKind::continuous});
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = coin(rng);
    for (std::size_t j = 0; j < p; ++j) {
      const double shift = w[i] ? 0.3 : 0.0;
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          meta[j].kind == CovariateKind::binary ? static_cast<double>(z(rng) + shift > 0.5) : z(rng) + shift;
    }
  }
  return Dataset(std::move(x), std::move(w), std::move(meta));
}

DesignVector random_subclass_design(const Treatment& w, int k, std::mt19937_64& rng) {
  DesignVector d;
  d.kind = DesignKind::subclasses;
  d.assignments.resize(w.size());
  std::uniform_int_distribution<int> g(0, k);
  for (auto& a : d.assignments) a = g(rng);
  // guarantee both arms in every group
  for (int grp = 1; grp <= k; ++grp) {
    bool t = false, c = false;
    for (std::size_t i = 0; i < w.size(); ++i)
      if (d.assignments[i] == grp) (w[i] ? t : c) = true;
    for (std::size_t i = 0; i < w.size() && !(t && c); ++i)
      if (d.assignments[i] == 0 && ((!t && w[i]) || (!c && !w[i]))) {
        d.assignments[i] = grp;
        (w[i] ? t : c) = true;
      }
  }
  return d;
}

DesignVector random_pairs_design(const Treatment& w, std::mt19937_64& rng) {
  std::vector<int> t, c;
  for (std::size_t i = 0; i < w.size(); ++i) (w[i] ? t : c).push_back(static_cast<int>(i));
  std::shuffle(t.begin(), t.end(), rng);
  std::shuffle(c.begin(), c.end(), rng);
  DesignVector d;
  d.kind = DesignKind::matched_pairs;
  d.assignments.assign(w.size(), 0);
  const std::size_t k = std::min(t.size(), c.size()) / 2;
  for (std::size_t p = 0; p < k; ++p) {
    d.assignments[static_cast<std::size_t>(t[p])] = static_cast<int>(p + 1);
    d.assignments[static_cast<std::size_t>(c[p])] = static_cast<int>(p + 1);
  }
  return d;
}

std::vector<double> column(const Dataset& d, int j) {
  std::vector<double> v(d.n_subjects());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = d.covariates()(static_cast<Eigen::Index>(i), j);
  return v;
}

}  // namespace

TEST(StdDiff, BinaryArithmetic) {
  // p_t = 0.5, p_c = 0.3 in the full sample
  Eigen::VectorXd x(20);
  Treatment w(20);
  for (int i = 0; i < 10; ++i) {
    w[static_cast<std::size_t>(i)] = 1;
    x(i) = i < 5;
  }
  for (int i = 10; i < 20; ++i) x(i) = i < 13;
  const auto layout = design_layout(identity_design(20), w, SubclassWeighting::total_size);
  const auto r = std_diff_binary(x, w, layout);
  EXPECT_NEAR(r.value, 0.2 / std::sqrt((0.25 + 0.21) / 2), 1e-15);
  EXPECT_NEAR(r.value, 0.417, 5e-4);
}

TEST(StdDiff, IdenticalGroupsGiveZero) {
  Eigen::VectorXd x(6);
  x << 1, 2, 3, 1, 2, 3;
  Treatment w{1, 1, 1, 0, 0, 0};
  const auto layout = design_layout(identity_design(6), w, SubclassWeighting::total_size);
  EXPECT_EQ(std_diff_continuous(x, w, layout).value, 0.0);
}

TEST(StdDiff, KnownShiftOnPreDesignScale) {
  // treated and control share the sd; means differ by 0.465 sd
  Eigen::VectorXd x(8);
  Treatment w{1, 1, 1, 1, 0, 0, 0, 0};
  const double s = 1.3;
  x << 1, -1, 1, -1, 1, -1, 1, -1;
  x *= s;
  const double shift = 0.465 * std::sqrt((4 * s * s / 3 + 4 * s * s / 3) / 2);
  for (int i = 0; i < 4; ++i) x(i) += shift;
  const auto layout = design_layout(identity_design(8), w, SubclassWeighting::total_size);
  EXPECT_NEAR(std_diff_continuous(x, w, layout).value, 0.465, 1e-14);
}

TEST(StdDiff, ConstantColumnIsFlaggedZero) {
  Eigen::VectorXd x = Eigen::VectorXd::Constant(4, 2.0);
  Treatment w{1, 0, 1, 0};
  const auto layout = design_layout(identity_design(4), w, SubclassWeighting::total_size);
  const auto r = std_diff_continuous(x, w, layout);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.degenerate);
  const auto rb = std_diff_binary(Eigen::VectorXd::Ones(4), w, layout);
  EXPECT_TRUE(rb.degenerate);
}

TEST(StdDiff, SubclassWeightingMatchesUnitWeightOracle) {
  std::mt19937_64 rng(12);
  const auto data = mixed_dataset(500, 8, 1);
  for (int rep = 0; rep < 40; ++rep) {
    const auto d = random_subclass_design(data.treatment(), 1 + rep % 6, rng);
    for (auto weighting : {SubclassWeighting::total_size, SubclassWeighting::treated_share}) {
      const auto layout = design_layout(d, data.treatment(), weighting);
      for (int j = 0; j < 8; ++j) {
        const bool bin = data.meta()[static_cast<std::size_t>(j)].kind == CovariateKind::binary;
        const double got = std_diff(data.covariates().col(j), data.treatment(), layout, bin).value;
        const double want = oracle::unit_weight_std_diff(column(data, j), data.treatment(), d.assignments,
                                                         weighting == SubclassWeighting::treated_share, bin);
        EXPECT_NEAR(got, want, 1e-12);
      }
    }
  }
}

TEST(EvaluateBlock, IdentityDesignEqualsPreDesign) {
  const auto data = mixed_dataset(300, 6, 2);
  const auto pre = pre_design_balance(data);
  const auto r = evaluate_design(identity_design(300), data);
  EXPECT_EQ(pre.per_covariate, r.per_covariate);
  EXPECT_GT(pre.d_max, 0.1);
}

TEST(EvaluateBlock, AllConstantColumnsGiveZero) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Constant(10, 3, 4.0);
  Treatment w{1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
  const Dataset data(x, w);
  const auto r = evaluate_design(identity_design(10), data);
  EXPECT_EQ(r.d_max, 0.0);
  EXPECT_EQ(r.degenerate_columns.size(), 3u);
}

TEST(EvaluateBlock, EmptyDesignIsAnErrorNamingIt) {
  const auto data = mixed_dataset(50, 3, 3);
  DesignVector d;
  d.assignments.assign(50, 0);
  d.ref = {ScoreSource::designer, 4, DesignMethod::caliper};
  try {
    evaluate_design(d, data);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("M4/caliper"), std::string::npos);
  }
}

TEST(EvaluateBlock, DistributedEqualsMonolithicBitwise) {
  std::mt19937_64 rng(5);
  const auto data = mixed_dataset(400, 12, 4);
  const auto partition = PartitionSpec{3, {{0, 5, 7, 11}, {1, 2, 3, 4}, {6, 8, 9, 10}}};
  const auto blocks = partition_covariates(data, partition);
  for (int rep = 0; rep < 20; ++rep) {
    auto d = rep % 2 ? random_pairs_design(data.treatment(), rng)
                     : random_subclass_design(data.treatment(), 1 + rep % 5, rng);
    std::vector<PartialBalance> parts;
    for (const auto& b : blocks) parts.push_back(evaluate_design_block(d, b));
    const auto merged = aggregate_balance(parts, partition).front();
    const auto mono = evaluate_design(d, data);
    ASSERT_EQ(merged.per_covariate.size(), 12u);
    for (const auto& [j, v] : mono.per_covariate) EXPECT_EQ(std::bit_cast<std::uint64_t>(merged.per_covariate.at(j)), std::bit_cast<std::uint64_t>(v));
    EXPECT_EQ(merged.d_max, mono.d_max);
    EXPECT_EQ(merged.d_plus, mono.d_plus);
  }
}

TEST(EvaluateBlock, AffineInvariance) {
  const auto data = mixed_dataset(300, 4, 6);
  std::mt19937_64 rng(1);
  const auto d = random_subclass_design(data.treatment(), 4, rng);
  Eigen::MatrixXd x = data.covariates();
  x.col(0) = x.col(0) * 3.7 + Eigen::VectorXd::Constant(300, -12.0);
  x.col(1) = x.col(1) * 0.01 + Eigen::VectorXd::Constant(300, 5.0);
  const Dataset shifted(x, data.treatment(), data.meta());
  const auto a = evaluate_design(d, data), b = evaluate_design(d, shifted);
  EXPECT_NEAR(a.per_covariate.at(0), b.per_covariate.at(0), 1e-12);
  EXPECT_NEAR(a.per_covariate.at(1), b.per_covariate.at(1), 1e-12);
}

TEST(EvaluateBlock, InteractionTermsWithinBlock) {
  const auto data = mixed_dataset(200, 4, 7);
  const auto blocks = partition_covariates(data, PartitionSpec{2, {{0, 1}, {2, 3}}});
  const auto d = identity_design(200);
  const auto pb = evaluate_design_block(d, blocks[0], {interaction_term(0, 1)});
  ASSERT_EQ(pb.terms.size(), 1u);
  std::vector<double> prod(200);
  for (std::size_t i = 0; i < 200; ++i)
    prod[i] = data.covariates()(static_cast<Eigen::Index>(i), 0) * data.covariates()(static_cast<Eigen::Index>(i), 1);
  EXPECT_NEAR(pb.terms[0].d, oracle::unit_weight_std_diff(prod, data.treatment(), d.assignments, false, false), 1e-12);
  EXPECT_THROW(evaluate_design_block(d, blocks[0], {interaction_term(0, 2)}), DataError);
}

TEST(Aggregate, MissingCellIsRejectedWithGaps) {
  const auto data = mixed_dataset(100, 4, 8);
  const auto partition = PartitionSpec{2, {{0, 1}, {2, 3}}};
  const auto blocks = partition_covariates(data, partition);
  auto d = identity_design(100);
  d.ref = {ScoreSource::designer, 1, DesignMethod::nn};
  try {
    aggregate_balance({evaluate_design_block(d, blocks[0])}, partition);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("M1/nn x block 2"), std::string::npos);
  }
  const auto pb = evaluate_design_block(d, blocks[0]);
  EXPECT_THROW(aggregate_balance({pb, pb, evaluate_design_block(d, blocks[1])}, partition), DataError);
}

TEST(Aggregate, DPlusNonIncreasingInThreshold) {
  const auto data = mixed_dataset(300, 10, 9);
  const auto base = evaluate_design(identity_design(300), data);
  int prev = 1 << 30;
  for (double t = 0.0; t < 0.6; t += 0.02) {
    BalanceReport r = base;
    r.threshold = t;
    summarize(r);
    EXPECT_LE(r.d_plus, prev);
    prev = r.d_plus;
  }
}

namespace {
BalanceReport report(int designer, DesignMethod m, double dmax, int dplus, std::size_t n = 100) {
  BalanceReport r;
  r.design = {ScoreSource::designer, designer, m};
  r.d_max = dmax;
  r.d_plus = dplus;
  r.n_retained = n;
  return r;
}
}  // namespace

TEST(Select, SingleCandidateWins) {
  auto s = select_design({report(3, DesignMethod::nn, 0.4, 2)}, Criterion::d_max);
  EXPECT_EQ(s.winner.designer_id, 3);
}

TEST(Select, SmallerDMaxWins) {
  auto s = select_design({report(1, DesignMethod::subclass, 0.198, 0), report(2, DesignMethod::subclass, 0.183, 0)},
                         Criterion::d_max);
  EXPECT_EQ(s.winner.designer_id, 2);
}

TEST(Select, DPlusCriterion) {
  auto s = select_design({report(1, DesignMethod::subclass, 0.1, 1), report(2, DesignMethod::subclass, 0.3, 0)},
                         Criterion::d_plus);
  EXPECT_EQ(s.winner.designer_id, 2);
}

TEST(Select, TieBreaks) {
  // equal primary and secondary: more retained wins, then lower designer id
  auto s = select_design({report(1, DesignMethod::nn, 0.1, 0, 80), report(2, DesignMethod::nn, 0.1, 0, 90)},
                         Criterion::d_max);
  EXPECT_EQ(s.winner.designer_id, 2);
  s = select_design({report(2, DesignMethod::nn, 0.1, 0), report(1, DesignMethod::nn, 0.1, 0)}, Criterion::d_max);
  EXPECT_EQ(s.winner.designer_id, 1);
  s = select_design({report(1, DesignMethod::nn, 0.1, 1), report(2, DesignMethod::nn, 0.1, 0)}, Criterion::d_max);
  EXPECT_EQ(s.winner.designer_id, 2);
}

TEST(Select, BaselinesListedButDoNotWin) {
  auto base = report(0, DesignMethod::caliper, 0.01, 0);
  base.design.source = ScoreSource::oracle;
  auto s = select_design({base, report(1, DesignMethod::nn, 0.2, 1)}, Criterion::d_max);
  EXPECT_EQ(s.winner.designer_id, 1);
  EXPECT_EQ(s.table.size(), 2u);
}

TEST(Report, CsvHasOneRowPerCovariate) {
  const auto data = mixed_dataset(60, 5, 10);
  const auto r = evaluate_design(identity_design(60), data);
  std::ostringstream out;
  write_balance_csv(out, {r}, data.meta());
  const auto text = out.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 6);
  EXPECT_NE(text.find("V1"), std::string::npos);
}
