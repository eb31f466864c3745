#pragma once

// L1-penalized logistic regression by cyclic coordinate descent on the
// binomial log-likelihood (IRLS outer loop, warm-started lambda path,
// sequential strong rules, stratified K-fold cross-validation).
//
// Penalized objective, on internally standardized predictors z (mean 0,
// 1/N variance):
//   -(1/N) sum_i [y_i eta_i - log(1 + exp(eta_i))] + lambda * sum_j |beta_j|
// The intercept is never penalized. Coefficients are reported on the
// original predictor scale.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "distdesign/error.hpp"
#include "distdesign/rng.hpp"

namespace distdesign {

struct LassoConfig {
  int n_lambda = 100;
  double path_ratio = 1e-3;
  int cv_folds = 10;
  int max_iter = 100000;  // coordinate sweeps allowed per lambda
  double tol = 1e-7;
  std::uint64_t seed = 1;
  // Stop the path once the deviance explained stops moving.
  bool truncate_path = true;
  // KKT residual the returned fit is polished to.
  double kkt_target = 1e-9;
  // Stop extending the CV path once this many consecutive lambdas past the
  // running CV minimum fail to improve it (0 = always scan the whole path).
  int cv_patience = 10;

  bool operator==(const LassoConfig&) const = default;
};

struct LassoLogisticFit {
  double intercept = 0.0;
  Eigen::VectorXd coefficients;
  double lambda = 0.0;
  std::size_t lambda_index = 0;
  Eigen::VectorXd lambda_path;
  Eigen::VectorXd cv_deviance;
  // Path stopped because fitted probabilities saturated (near separation).
  bool separation = false;
  // Max KKT violation at the returned fit, standardized scale.
  double kkt_residual = 0.0;
};

inline double sigmoid(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

namespace detail {

inline double soft_threshold(double u, double lambda) {
  if (u > lambda) return u - lambda;
  if (u < -lambda) return u + lambda;
  return 0.0;
}

inline double log1pexp(double eta) {
  return eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
}

struct InternalScale {
  Eigen::VectorXd mean;
  Eigen::VectorXd sd;  // 1/N convention; 0 marks a constant column
};

inline InternalScale internal_scale(const Eigen::MatrixXd& x) {
  const double n = static_cast<double>(x.rows());
  InternalScale s;
  s.mean = x.colwise().mean().transpose();
  s.sd.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double v = (x.col(j).array() - s.mean(j)).square().sum() / n;
    const double sd = std::sqrt(v);
    const double scale = std::max(1.0, x.col(j).cwiseAbs().maxCoeff());
    s.sd(j) = sd > 1e-13 * scale ? sd : 0.0;
  }
  return s;
}

inline Eigen::MatrixXd apply_internal_scale(const Eigen::MatrixXd& x, const InternalScale& s) {
  Eigen::MatrixXd z(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (s.sd(j) == 0.0)
      z.col(j).setZero();
    else
      z.col(j) = (x.col(j).array() - s.mean(j)) / s.sd(j);
  }
  return z;
}

inline double binomial_deviance(double y, double p) {
  p = std::clamp(p, 1e-5, 1.0 - 1e-5);
  return -2.0 * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

// Coordinate-descent state for one standardized design matrix.
class LogisticCoordinateDescent {
 public:
  LogisticCoordinateDescent(const Eigen::MatrixXd& z, const Eigen::VectorXd& y,
                            std::vector<std::uint8_t> excluded, const LassoConfig& cfg)
      : z_(z), y_(y), excluded_(std::move(excluded)), cfg_(cfg),
        n_(static_cast<double>(z.rows())) {
    const double ybar = y_.mean();
    b0_ = std::log(ybar / (1.0 - ybar));
    beta_ = Eigen::VectorXd::Zero(z_.cols());
    eta_ = Eigen::VectorXd::Constant(z_.rows(), b0_);
    update_probabilities();
  }

  double lambda_max() const {
    const Eigen::VectorXd g = z_.transpose() * (y_.array() - y_.mean()).matrix() / n_;
    double m = 0.0;
    for (Eigen::Index j = 0; j < g.size(); ++j)
      if (!excluded_[static_cast<std::size_t>(j)]) m = std::max(m, std::fabs(g(j)));
    return m;
  }

  double objective(double lambda) const {
    double loss = 0.0;
    for (Eigen::Index i = 0; i < eta_.size(); ++i) loss += log1pexp(eta_(i)) - y_(i) * eta_(i);
    return loss / n_ + lambda * beta_.lpNorm<1>();
  }

  double deviance() const {
    double d = 0.0;
    for (Eigen::Index i = 0; i < eta_.size(); ++i) d += 2.0 * (log1pexp(eta_(i)) - y_(i) * eta_(i));
    return d;
  }

  Eigen::VectorXd gradient() const { return z_.transpose() * (y_ - p_) / n_; }

  double kkt_residual(double lambda) const {
    const Eigen::VectorXd g = gradient();
    double worst = std::fabs((y_ - p_).mean());
    for (Eigen::Index j = 0; j < g.size(); ++j) {
      if (excluded_[static_cast<std::size_t>(j)]) continue;
      const double v = beta_(j) == 0.0 ? std::max(0.0, std::fabs(g(j)) - lambda)
                                       : std::fabs(g(j) - lambda * (beta_(j) > 0 ? 1.0 : -1.0));
      worst = std::max(worst, v);
    }
    return worst;
  }

  // Warm-started solve at one lambda; strong set screened against the
  // gradient of the previous solve, then verified by a full KKT scan.
  void fit(double lambda, double tol) {
    const auto k = z_.cols();
    std::vector<std::uint8_t> in_set(static_cast<std::size_t>(k), 0);
    std::vector<int> set;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (excluded_[static_cast<std::size_t>(j)]) continue;
      const bool keep = !has_gradient_ || beta_(j) != 0.0 ||
                        std::fabs(last_gradient_(j)) >= 2.0 * lambda - last_lambda_;
      if (keep) {
        in_set[static_cast<std::size_t>(j)] = 1;
        set.push_back(static_cast<int>(j));
      }
    }
    Eigen::VectorXd g;
    while (true) {
      solve_subset(set, lambda, tol);
      g = gradient();
      bool added = false;
      for (Eigen::Index j = 0; j < k; ++j) {
        if (excluded_[static_cast<std::size_t>(j)] || in_set[static_cast<std::size_t>(j)]) continue;
        if (std::fabs(g(j)) > lambda) {
          in_set[static_cast<std::size_t>(j)] = 1;
          set.push_back(static_cast<int>(j));
          added = true;
        }
      }
      if (!added) break;
      std::sort(set.begin(), set.end());
    }
    last_gradient_ = std::move(g);
    last_lambda_ = lambda;
    has_gradient_ = true;
  }

  void set_state(double b0, const Eigen::VectorXd& beta) {
    b0_ = b0;
    beta_ = beta;
    recompute_eta();
    has_gradient_ = false;
  }

  double intercept() const { return b0_; }
  const Eigen::VectorXd& beta() const { return beta_; }
  const Eigen::VectorXd& probabilities() const { return p_; }
  // Objective after every outer (IRLS) sweep, when enabled.
  std::vector<double>* objective_trace = nullptr;

 private:
  void update_probabilities() {
    p_.resize(eta_.size());
    for (Eigen::Index i = 0; i < eta_.size(); ++i) p_(i) = sigmoid(eta_(i));
  }

  void recompute_eta() {
    eta_.setConstant(b0_);
    for (Eigen::Index j = 0; j < beta_.size(); ++j)
      if (beta_(j) != 0.0) eta_.noalias() += beta_(j) * z_.col(j);
    update_probabilities();
  }

  // One cyclic pass over `coords`; returns the largest weighted squared step.
  double sweep(const std::vector<int>& coords, double lambda) {
    const double d0 = res_.sum() / w_sum_;
    b0_ += d0;
    res_.noalias() -= d0 * w_;
    double dlx = (w_sum_ / n_) * d0 * d0;
    for (int j : coords) {
      const double xv = xv_(j);
      if (xv <= 0.0) continue;
      const double grad = z_.col(j).dot(res_) / n_;
      const double updated = soft_threshold(grad + xv * beta_(j), lambda) / xv;
      const double delta = updated - beta_(j);
      if (delta == 0.0) continue;
      beta_(j) = updated;
      res_.noalias() -= delta * z_.col(j).cwiseProduct(w_);
      dlx = std::max(dlx, xv * delta * delta);
    }
    return dlx;
  }

  void solve_subset(const std::vector<int>& set, double lambda, double tol) {
    double obj = objective(lambda);
    long sweeps = 0;
    xv_ = Eigen::VectorXd::Zero(z_.cols());
    while (true) {
      w_ = (p_.array() * (1.0 - p_.array())).max(1e-5).matrix();
      w_sum_ = w_.sum();
      res_ = y_ - p_;
      for (int j : set) xv_(j) = z_.col(j).cwiseAbs2().dot(w_) / n_;
      const double old_b0 = b0_;
      const Eigen::VectorXd old_beta = beta_;
      const Eigen::VectorXd old_eta = eta_;

      while (true) {
        double dlx = sweep(set, lambda);
        ++sweeps;
        if (dlx < tol) break;
        std::vector<int> active;
        for (int j : set)
          if (beta_(j) != 0.0) active.push_back(j);
        while (dlx >= tol) {
          dlx = sweep(active, lambda);
          if (++sweeps > cfg_.max_iter) fail(lambda, sweeps);
        }
        if (sweeps > cfg_.max_iter) fail(lambda, sweeps);
      }

      recompute_eta();
      double new_obj = objective(lambda);
      // Step halving keeps the true objective non-increasing.
      const Eigen::VectorXd new_beta = beta_;
      const Eigen::VectorXd new_eta = eta_;
      const double new_b0 = b0_;
      double t = 1.0;
      for (int halvings = 0; new_obj > obj && halvings < 60; ++halvings) {
        t *= 0.5;
        beta_ = old_beta + t * (new_beta - old_beta);
        b0_ = old_b0 + t * (new_b0 - old_b0);
        eta_ = old_eta + t * (new_eta - old_eta);
        update_probabilities();
        new_obj = objective(lambda);
      }
      if (new_obj > obj) {
        beta_ = old_beta;
        b0_ = old_b0;
        eta_ = old_eta;
        update_probabilities();
        new_obj = obj;
      }
      if (objective_trace) objective_trace->push_back(new_obj);

      double change = (w_sum_ / n_) * (b0_ - old_b0) * (b0_ - old_b0);
      for (int j : set) {
        const double d = beta_(j) - old_beta(j);
        change = std::max(change, xv_(j) * d * d);
      }
      obj = new_obj;
      if (change < tol) break;
      if (++sweeps > cfg_.max_iter) fail(lambda, sweeps);
    }
  }

  [[noreturn]] static void fail(double lambda, long sweeps) {
    throw NumericError("lasso logistic coordinate descent did not converge at lambda=" +
                       std::to_string(lambda) + " after " + std::to_string(sweeps) + " sweeps");
  }

  const Eigen::MatrixXd& z_;
  const Eigen::VectorXd& y_;
  std::vector<std::uint8_t> excluded_;
  LassoConfig cfg_;
  double n_;

  double b0_ = 0.0;
  Eigen::VectorXd beta_, eta_, p_;
  Eigen::VectorXd w_, res_, xv_;
  double w_sum_ = 0.0;

  Eigen::VectorXd last_gradient_;
  double last_lambda_ = 0.0;
  bool has_gradient_ = false;
};

struct PathSolution {
  std::vector<double> lambdas;
  std::vector<double> intercepts;
  std::vector<Eigen::VectorXd> betas;
  bool saturated = false;
};

// The linear predictor itself is a separating hyperplane.
inline bool separates(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, double b0, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = (z * beta).array() + b0;
  for (Eigen::Index i = 0; i < eta.size(); ++i)
    if (y(i) == 1.0 ? !(eta(i) > 0.0) : !(eta(i) < 0.0)) return false;
  return true;
}

inline std::vector<std::uint8_t> constant_columns(const InternalScale& s) {
  std::vector<std::uint8_t> ex(static_cast<std::size_t>(s.sd.size()));
  for (Eigen::Index j = 0; j < s.sd.size(); ++j) ex[static_cast<std::size_t>(j)] = s.sd(j) == 0.0;
  return ex;
}

inline std::vector<double> lambda_sequence(double lambda_max, const LassoConfig& cfg) {
  if (!(lambda_max > 0.0)) return {0.0};
  const int n = std::max(1, cfg.n_lambda);
  std::vector<double> seq(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
    seq[static_cast<std::size_t>(i)] = lambda_max * std::pow(cfg.path_ratio, frac);
  }
  seq.front() = lambda_max;
  return seq;
}

// Fold labels depend on row contents, not row positions, so reordering the
// subjects reorders the folds with them. Values are hashed at single
// precision so last-bit differences from summation order do not matter.
// Classes are dealt round-robin.
inline std::vector<int> stratified_folds(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, int folds,
                                         std::uint64_t seed) {
  const std::uint64_t salt = derive_seed(seed, "cv-folds");
  std::vector<std::pair<std::uint64_t, int>> treated, control;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    std::uint64_t h = salt;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const float v = static_cast<float>(x(i, j));
      std::uint32_t bits = 0;
      std::memcpy(&bits, &v, sizeof bits);
      h = splitmix64(h ^ bits);
    }
    (y(i) > 0.5 ? treated : control).emplace_back(h, static_cast<int>(i));
  }
  std::sort(treated.begin(), treated.end());
  std::sort(control.begin(), control.end());
  std::vector<int> fold(static_cast<std::size_t>(y.size()));
  std::size_t counter = 0;
  for (const auto& t : treated) fold[static_cast<std::size_t>(t.second)] = static_cast<int>(counter++ % static_cast<std::size_t>(folds));
  for (const auto& c : control) fold[static_cast<std::size_t>(c.second)] = static_cast<int>(counter++ % static_cast<std::size_t>(folds));
  return fold;
}

inline void validate_labels(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  if (y.size() != x.rows()) throw DataError("label length does not match predictor rows");
  bool has0 = false, has1 = false;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) == 1.0)
      has1 = true;
    else if (y(i) == 0.0)
      has0 = true;
    else
      throw DataError("lasso logistic labels must be 0/1");
  }
  if (!has0 || !has1) throw DataError("lasso logistic labels need both classes");
}

inline LassoLogisticFit to_original_scale(const LogisticCoordinateDescent& cd, const InternalScale& s) {
  LassoLogisticFit fit;
  fit.coefficients = Eigen::VectorXd::Zero(cd.beta().size());
  fit.intercept = cd.intercept();
  for (Eigen::Index j = 0; j < cd.beta().size(); ++j) {
    if (s.sd(j) == 0.0 || cd.beta()(j) == 0.0) continue;
    fit.coefficients(j) = cd.beta()(j) / s.sd(j);
    fit.intercept -= fit.coefficients(j) * s.mean(j);
  }
  return fit;
}

inline void polish(LogisticCoordinateDescent& cd, double lambda, const LassoConfig& cfg) {
  double tol = cfg.tol;
  for (int round = 0; round < 12 && cd.kkt_residual(lambda) > cfg.kkt_target; ++round) {
    tol *= 1e-2;
    cd.fit(lambda, tol);
  }
}

}  // namespace detail

// Cross-validated lasso path; returns the fit at the lambda with minimum
// mean held-out binomial deviance. cv_folds < 2 selects the last path lambda,
// as does complete separation (flagged on the fit).
// Folds and the full-data path are extended in chunks, so the tail of the
// path past the CV minimum (plus patience) is never fitted.
inline LassoLogisticFit fit_lasso_logistic(const Eigen::MatrixXd& predictors, const Eigen::VectorXd& labels,
                                           const LassoConfig& cfg = {}) {
  detail::validate_labels(predictors, labels);
  const auto scale = detail::internal_scale(predictors);
  const Eigen::MatrixXd z = detail::apply_internal_scale(predictors, scale);
  const auto excluded = detail::constant_columns(scale);

  detail::LogisticCoordinateDescent cd(z, labels, excluded, cfg);
  const auto lambdas = detail::lambda_sequence(cd.lambda_max(), cfg);

  detail::PathSolution path;
  bool path_done = false;
  const double null_dev = cd.deviance();
  double prev_ratio = 0.0;
  auto extend_path = [&](std::size_t upto) {
    while (!path_done && path.lambdas.size() < upto) {
      const std::size_t l = path.lambdas.size();
      cd.fit(lambdas[l], cfg.tol);
      path.lambdas.push_back(lambdas[l]);
      path.intercepts.push_back(cd.intercept());
      path.betas.push_back(cd.beta());
      if (path.lambdas.size() == lambdas.size()) path_done = true;
      if (!cfg.truncate_path || null_dev <= 0.0) continue;
      const double ratio = 1.0 - cd.deviance() / null_dev;
      if (ratio > 0.999) {
        path.saturated = true;
        path_done = true;
      } else if (l >= 4 && ratio - prev_ratio < 1e-5 * ratio) {
        path_done = true;
      }
      prev_ratio = ratio;
    }
  };

  const bool use_cv = cfg.cv_folds >= 2;
  const bool patient = use_cv && cfg.cv_patience > 0;
  std::size_t limit = patient ? static_cast<std::size_t>(2 * cfg.cv_patience) : lambdas.size();
  extend_path(limit);

  std::vector<double> cv;
  std::size_t best = path.lambdas.size() - 1;
  if (use_cv) {
    struct FoldState {
      std::vector<Eigen::Index> train, test;
      double b0 = 0.0;
      Eigen::VectorXd beta;
      std::size_t done = 0;
    };
    const auto fold_of = detail::stratified_folds(predictors, labels, cfg.cv_folds, cfg.seed);
    std::vector<FoldState> folds(static_cast<std::size_t>(cfg.cv_folds));
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      for (std::size_t g = 0; g < folds.size(); ++g)
        (static_cast<int>(g) == fold_of[i] ? folds[g].test : folds[g].train)
            .push_back(static_cast<Eigen::Index>(i));
    }

    while (true) {
      const std::size_t upto = path.lambdas.size();
      cv.resize(upto, 0.0);
      for (auto& f : folds) {
        if (f.test.empty() || f.done >= upto) continue;
        const Eigen::MatrixXd x_train = predictors(f.train, Eigen::all);
        const Eigen::VectorXd y_train = labels(f.train);
        detail::validate_labels(x_train, y_train);
        const auto fs = detail::internal_scale(x_train);
        const Eigen::MatrixXd z_train = detail::apply_internal_scale(x_train, fs);
        detail::LogisticCoordinateDescent fcd(z_train, y_train, detail::constant_columns(fs), cfg);
        if (f.done > 0) fcd.set_state(f.b0, f.beta);
        const Eigen::MatrixXd x_test = predictors(f.test, Eigen::all);
        for (std::size_t l = f.done; l < upto; ++l) {
          fcd.fit(path.lambdas[l], cfg.tol);
          const auto orig = detail::to_original_scale(fcd, fs);
          const Eigen::VectorXd eta = (x_test * orig.coefficients).array() + orig.intercept;
          double dev = 0.0;
          for (std::size_t t = 0; t < f.test.size(); ++t)
            dev += detail::binomial_deviance(labels(f.test[t]), sigmoid(eta(static_cast<Eigen::Index>(t))));
          cv[l] += dev;
        }
        f.b0 = fcd.intercept();
        f.beta = fcd.beta();
        f.done = upto;
      }
      best = static_cast<std::size_t>(std::min_element(cv.begin(), cv.end()) - cv.begin());
      if (path_done || !patient) break;
      const std::size_t patience = static_cast<std::size_t>(cfg.cv_patience);
      if (best + patience < upto) break;
      limit = std::max(upto + patience, best + patience + 1);
      extend_path(limit);
    }
    for (auto& v : cv) v /= static_cast<double>(labels.size());
  }

  const bool separated =
      path.saturated || detail::separates(z, labels, path.intercepts.back(), path.betas.back());
  if (separated) best = path.lambdas.size() - 1;

  cd.set_state(path.intercepts[best], path.betas[best]);
  const double lambda = path.lambdas[best];
  cd.fit(lambda, cfg.tol);
  detail::polish(cd, lambda, cfg);

  auto fit = detail::to_original_scale(cd, scale);
  fit.lambda = lambda;
  fit.lambda_index = best;
  fit.lambda_path = Eigen::Map<const Eigen::VectorXd>(path.lambdas.data(),
                                                      static_cast<Eigen::Index>(path.lambdas.size()));
  fit.cv_deviance = use_cv ? Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(
                                 cv.data(), static_cast<Eigen::Index>(cv.size())))
                           : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(path.lambdas.size()));
  fit.separation = separated;
  fit.kkt_residual = cd.kkt_residual(lambda);
  return fit;
}

// Single-lambda fit from a cold start (no path, no CV).
inline LassoLogisticFit fit_lasso_logistic_at(const Eigen::MatrixXd& predictors, const Eigen::VectorXd& labels,
                                              double lambda, const LassoConfig& cfg = {},
                                              std::vector<double>* objective_trace = nullptr) {
  detail::validate_labels(predictors, labels);
  if (!(lambda >= 0.0)) throw DataError("lambda must be nonnegative");
  const auto scale = detail::internal_scale(predictors);
  const Eigen::MatrixXd z = detail::apply_internal_scale(predictors, scale);
  detail::LogisticCoordinateDescent cd(z, labels, detail::constant_columns(scale), cfg);
  cd.objective_trace = objective_trace;
  cd.fit(lambda, cfg.tol);
  detail::polish(cd, lambda, cfg);
  auto fit = detail::to_original_scale(cd, scale);
  fit.lambda = lambda;
  fit.lambda_path = Eigen::VectorXd::Constant(1, lambda);
  fit.kkt_residual = cd.kkt_residual(lambda);
  return fit;
}

// Penalized objective of an original-scale fit, evaluated on the internal
// standardization (the scale the penalty applies to).
inline double lasso_objective(const Eigen::MatrixXd& predictors, const Eigen::VectorXd& labels,
                              const LassoLogisticFit& fit, double lambda) {
  const auto s = detail::internal_scale(predictors);
  const Eigen::VectorXd eta = (predictors * fit.coefficients).array() + fit.intercept;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) loss += detail::log1pexp(eta(i)) - labels(i) * eta(i);
  return loss / static_cast<double>(labels.size()) + lambda * (fit.coefficients.cwiseProduct(s.sd)).lpNorm<1>();
}

inline Eigen::VectorXd predict_probability(const LassoLogisticFit& fit, const Eigen::MatrixXd& predictors) {
  if (predictors.cols() != fit.coefficients.size())
    throw DataError("predictor columns (" + std::to_string(predictors.cols()) +
                    ") do not match lasso fit (" + std::to_string(fit.coefficients.size()) + ")");
  Eigen::VectorXd eta = (predictors * fit.coefficients).array() + fit.intercept;
  for (Eigen::Index i = 0; i < eta.size(); ++i) eta(i) = sigmoid(eta(i));
  return eta;
}

}  // namespace distdesign
