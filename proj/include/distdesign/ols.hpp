#pragma once

#include <Eigen/Dense>

#include "distdesign/error.hpp"

namespace distdesign {

struct OlsFit {
  double intercept = 0.0;
  Eigen::VectorXd coefficients;
  Eigen::VectorXd fitted;
  int rank = 0;
  bool rank_deficient = false;  // minimum-norm solution was used
};

// Least squares with an unpenalized intercept. Predictors are centered before
// the solve so the intercept is exactly the response mean when they already are.
inline OlsFit fit_ols(const Eigen::MatrixXd& predictors, const Eigen::VectorXd& response) {
  const auto n = predictors.rows();
  const auto k = predictors.cols();
  if (response.size() != n) throw DataError("OLS response length does not match predictor rows");
  if (k >= n)
    throw DataError("OLS needs fewer predictors (" + std::to_string(k) + ") than subjects (" +
                    std::to_string(n) + ")");
  OlsFit fit;
  const double y_mean = response.mean();
  if (k == 0) {
    fit.intercept = y_mean;
    fit.coefficients.resize(0);
    fit.fitted = Eigen::VectorXd::Constant(n, y_mean);
    return fit;
  }
  const Eigen::RowVectorXd x_mean = predictors.colwise().mean();
  const Eigen::MatrixXd xc = predictors.rowwise() - x_mean;
  const Eigen::VectorXd yc = response.array() - y_mean;

  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(xc);
  fit.coefficients = cod.solve(yc);
  fit.rank = static_cast<int>(cod.rank());
  fit.rank_deficient = fit.rank < k;
  fit.intercept = y_mean - x_mean.dot(fit.coefficients);
  fit.fitted = (predictors * fit.coefficients).array() + fit.intercept;
  return fit;
}

inline Eigen::VectorXd predict(const OlsFit& fit, const Eigen::MatrixXd& predictors) {
  if (predictors.cols() != fit.coefficients.size())
    throw DataError("predictor columns (" + std::to_string(predictors.cols()) +
                    ") do not match OLS fit (" + std::to_string(fit.coefficients.size()) + ")");
  return (predictors * fit.coefficients).array() + fit.intercept;
}

}  // namespace distdesign
