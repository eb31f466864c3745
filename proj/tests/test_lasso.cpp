#include <gtest/gtest.h>

#include <random>

#include "distdesign/lasso_logistic.hpp"
#include "oracles/numeric_oracle.hpp"

using namespace distdesign;

namespace {

struct Problem {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
};

Problem logistic_problem(int n, int p, std::uint64_t seed, double signal = 0.8) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Problem pr{Eigen::MatrixXd(n, p), Eigen::VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    double eta = -0.5;
    for (int j = 0; j < p; ++j) {
      pr.x(i, j) = z(rng) * (1.0 + j) + j;
      if (j < 3) eta += signal * (pr.x(i, j) - j) / (1.0 + j);
    }
    pr.y(i) = u(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1.0 : 0.0;
  }
  return pr;
}

// Map an original-scale fit to the 1/N-standardized design and check KKT there.
double kkt_on_standardized(const Problem& pr, const LassoLogisticFit& fit, double lambda) {
  const auto n = static_cast<double>(pr.x.rows());
  Eigen::MatrixXd z(pr.x.rows(), pr.x.cols());
  Eigen::VectorXd beta(pr.x.cols());
  double b0 = fit.intercept;
  for (Eigen::Index j = 0; j < pr.x.cols(); ++j) {
    const double mean = pr.x.col(j).mean();
    const double sd = std::sqrt((pr.x.col(j).array() - mean).square().sum() / n);
    z.col(j) = (pr.x.col(j).array() - mean) / sd;
    beta(j) = fit.coefficients(j) * sd;
    b0 += fit.coefficients(j) * mean;
  }
  return oracle::lasso_kkt_violation(z, pr.y, b0, beta, lambda);
}

// Plain Newton-Raphson logistic regression.
Eigen::VectorXd newton_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  Eigen::MatrixXd a(x.rows(), x.cols() + 1);
  a << Eigen::VectorXd::Ones(x.rows()), x;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(a.cols());
  for (int it = 0; it < 50; ++it) {
    const Eigen::VectorXd p = (a * b).unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
    const Eigen::VectorXd wv = p.array() * (1.0 - p.array());
    const Eigen::MatrixXd h = a.transpose() * wv.asDiagonal() * a;
    b += h.ldlt().solve(a.transpose() * (y - p));
  }
  return b;
}

}  // namespace

TEST(Lasso, KktHoldsAcrossLambdas) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto pr = logistic_problem(400, 12, seed);
    LassoConfig cfg;
    cfg.cv_folds = 0;
    const auto full = fit_lasso_logistic(pr.x, pr.y, cfg);
    const double lmax = full.lambda_path(0);
    for (double frac : {0.9, 0.5, 0.1, 0.02}) {
      const auto fit = fit_lasso_logistic_at(pr.x, pr.y, frac * lmax, cfg);
      EXPECT_LE(kkt_on_standardized(pr, fit, frac * lmax), 1e-6) << "seed " << seed << " frac " << frac;
    }
  }
}

TEST(Lasso, CrossValidatedFitSatisfiesKkt) {
  const auto pr = logistic_problem(600, 20, 7);
  const auto fit = fit_lasso_logistic(pr.x, pr.y);
  EXPECT_LE(kkt_on_standardized(pr, fit, fit.lambda), 1e-6);
  EXPECT_LE(fit.kkt_residual, 1e-6);
}

TEST(Lasso, ObjectiveTraceNeverIncreases) {
  const auto pr = logistic_problem(500, 15, 9);
  std::vector<double> trace;
  LassoConfig cfg;
  fit_lasso_logistic_at(pr.x, pr.y, 0.01, cfg, &trace);
  ASSERT_GT(trace.size(), 2u);
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LE(trace[i], trace[i - 1] + 1e-12) << "step " << i;
}

TEST(Lasso, AboveLambdaMaxAllZero) {
  const auto pr = logistic_problem(300, 6, 11);
  LassoConfig cfg;
  cfg.cv_folds = 0;
  const double lmax = fit_lasso_logistic(pr.x, pr.y, cfg).lambda_path(0);
  const auto fit = fit_lasso_logistic_at(pr.x, pr.y, lmax * 1.0001, cfg);
  EXPECT_EQ(fit.coefficients.cwiseAbs().maxCoeff(), 0.0);
  const double ybar = pr.y.mean();
  EXPECT_NEAR(fit.intercept, std::log(ybar / (1 - ybar)), 1e-9);
  // just below lambda_max something enters
  EXPECT_GT(fit_lasso_logistic_at(pr.x, pr.y, lmax * 0.95, cfg).coefficients.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Lasso, ZeroPenaltyMatchesNewton) {
  const auto pr = logistic_problem(800, 4, 13, 0.5);
  const auto fit = fit_lasso_logistic_at(pr.x, pr.y, 0.0);
  const auto ref = newton_logistic(pr.x, pr.y);
  EXPECT_NEAR(fit.intercept, ref(0), 1e-6);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(fit.coefficients(j), ref(j + 1), 1e-6);
}

TEST(Lasso, CvPicksMinimumAndIsDeterministic) {
  const auto pr = logistic_problem(500, 10, 17);
  const auto a = fit_lasso_logistic(pr.x, pr.y);
  const auto b = fit_lasso_logistic(pr.x, pr.y);
  EXPECT_EQ(a.coefficients, b.coefficients);
  EXPECT_EQ(a.lambda, b.lambda);
  ASSERT_EQ(a.cv_deviance.size(), a.lambda_path.size());
  Eigen::Index best = 0;
  a.cv_deviance.minCoeff(&best);
  EXPECT_EQ(static_cast<std::size_t>(best), a.lambda_index);
  EXPECT_EQ(a.lambda, a.lambda_path(best));
  for (Eigen::Index l = 1; l < a.lambda_path.size(); ++l) EXPECT_LT(a.lambda_path(l), a.lambda_path(l - 1));
}

TEST(Lasso, ConstantColumnStaysZero) {
  auto pr = logistic_problem(300, 5, 19);
  pr.x.col(2).setConstant(4.0);
  const auto fit = fit_lasso_logistic(pr.x, pr.y);
  EXPECT_EQ(fit.coefficients(2), 0.0);
}

TEST(Lasso, SeparationIsFlagged) {
  auto pr = logistic_problem(200, 3, 23);
  for (Eigen::Index i = 0; i < pr.y.size(); ++i) pr.y(i) = pr.x(i, 0) > 0.0 ? 1.0 : 0.0;
  const auto fit = fit_lasso_logistic(pr.x, pr.y);
  EXPECT_TRUE(fit.separation);
  const auto p = predict_probability(fit, pr.x);
  for (Eigen::Index i = 0; i < p.size(); ++i) EXPECT_TRUE(std::isfinite(p(i)));
}

TEST(Lasso, BadInputsRejected) {
  const auto pr = logistic_problem(100, 3, 29);
  EXPECT_THROW(fit_lasso_logistic(pr.x, Eigen::VectorXd::Zero(100)), DataError);
  EXPECT_THROW(fit_lasso_logistic(pr.x, Eigen::VectorXd::Zero(50)), DataError);
  EXPECT_THROW(fit_lasso_logistic_at(pr.x, pr.y, -1.0), DataError);
  const auto fit = fit_lasso_logistic_at(pr.x, pr.y, 0.01);
  EXPECT_THROW(predict_probability(fit, Eigen::MatrixXd::Zero(5, 4)), DataError);
}
