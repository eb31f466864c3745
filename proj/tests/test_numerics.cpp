#include <gtest/gtest.h>

#include <random>

#include <boost/math/special_functions/beta.hpp>

#include "distdesign/ols.hpp"
#include "distdesign/ttest.hpp"
#include "oracles/numeric_oracle.hpp"

using namespace distdesign;

TEST(Ols, MatchesNormalEquations) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 100 + rep * 10, k = 1 + rep % 8;
    Eigen::MatrixXd x(n, k);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng) + 2.0;
    for (int i = 0; i < n; ++i) y(i) = 0.3 + x.row(i).sum() * 0.1 + z(rng);
    const auto fit = fit_ols(x, y);
    EXPECT_FALSE(fit.rank_deficient);
    EXPECT_LE((fit.fitted - oracle::ols_normal_equations(x, y)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((predict(fit, x) - fit.fitted).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Ols, RankDeficientUsesMinimumNorm) {
  Eigen::MatrixXd x(6, 2);
  x << 1, 2, 2, 4, 3, 6, 4, 8, 5, 10, 6, 12;
  Eigen::VectorXd y(6);
  y << 1, 2, 2, 4, 5, 5;
  const auto fit = fit_ols(x, y);
  EXPECT_TRUE(fit.rank_deficient);
  EXPECT_EQ(fit.rank, 1);
  // minimum norm: coefficients proportional to (1, 2)
  EXPECT_NEAR(fit.coefficients(1), 2 * fit.coefficients(0), 1e-12);
  const auto single = fit_ols(x.col(0), y);
  EXPECT_LE((fit.fitted - single.fitted).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ols, TooManyPredictorsRejected) {
  EXPECT_THROW(fit_ols(Eigen::MatrixXd::Random(3, 3), Eigen::VectorXd::Random(3)), DataError);
  EXPECT_THROW(predict(fit_ols(Eigen::MatrixXd::Random(5, 2), Eigen::VectorXd::Random(5)), Eigen::MatrixXd::Random(5, 3)),
               DataError);
}

TEST(Ols, NoPredictorsGivesMean) {
  Eigen::VectorXd y(4);
  y << 1, 2, 3, 6;
  const auto fit = fit_ols(Eigen::MatrixXd(4, 0), y);
  EXPECT_EQ(fit.intercept, 3.0);
}

TEST(IncompleteBeta, AgreesWithBoost) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> shape(0.05, 400.0), unit(0.0, 1.0);
  for (int rep = 0; rep < 2000; ++rep) {
    const double a = shape(rng), b = shape(rng), x = unit(rng);
    EXPECT_NEAR(incomplete_beta(a, b, x), boost::math::ibeta(a, b, x), 1e-12) << a << ' ' << b << ' ' << x;
  }
  EXPECT_EQ(incomplete_beta(2, 3, 0.0), 0.0);
  EXPECT_EQ(incomplete_beta(2, 3, 1.0), 1.0);
  EXPECT_THROW(incomplete_beta(0, 1, 0.5), NumericError);
}

TEST(StudentT, SymmetryAndCenter) {
  for (double df : {1.0, 2.5, 30.0, 1e4}) {
    EXPECT_EQ(student_t_cdf(0.0, df), 0.5);
    for (double t : {0.1, 1.0, 3.0, 12.0}) EXPECT_NEAR(student_t_cdf(t, df) + student_t_cdf(-t, df), 1.0, 2.3e-16);
  }
  EXPECT_NEAR(student_t_cdf(1.0, 1.0), 0.75, 1e-15);  // Cauchy
}

TEST(Welch, PValuesAgreeWithQuadratureOn50Cases) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    std::normal_distribution<double> a(0.0, 1.0 + rep % 3), b(0.3 * (rep % 5), 1.0);
    const std::size_t na = 2 + rep * 3, nb = 3 + (rep * 7) % 40;
    std::vector<double> ga(na), gb(nb);
    for (auto& v : ga) v = a(rng);
    for (auto& v : gb) v = b(rng);
    const auto got = two_sample_t(ga, gb);
    const auto want = oracle::welch(ga, gb);
    EXPECT_NEAR(got.t_statistic, want.t, 1e-10);
    EXPECT_NEAR(got.degrees_of_freedom, want.df, 1e-8);
    EXPECT_NEAR(got.p_value, want.p, 1e-6) << "case " << rep;
  }
}

TEST(Welch, DegenerateGroupsThrow) {
  std::vector<double> one{1.0}, flat{2.0, 2.0, 2.0}, ok{1.0, 2.0, 3.0};
  EXPECT_THROW(two_sample_t(one, ok), NumericError);
  EXPECT_THROW(two_sample_t(flat, ok), NumericError);
}

TEST(Welch, IdenticalSamplesGivePOne) {
  std::vector<double> a{1, 2, 3, 4}, b{4, 3, 2, 1};
  EXPECT_EQ(two_sample_t(a, b).p_value, 1.0);
}
