#pragma once

// Conditional and final propensity scores, trimming, logit linearization.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "distdesign/data.hpp"
#include "distdesign/error.hpp"
#include "distdesign/lasso_logistic.hpp"
#include "distdesign/ols.hpp"
#include "distdesign/rng.hpp"

namespace distdesign {

enum class ModelKind { lasso_logistic, ols };

inline std::string to_string(ModelKind k) { return k == ModelKind::ols ? "ols" : "lasso-logistic"; }

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "lasso-logistic" || s == "lasso") return ModelKind::lasso_logistic;
  if (s == "ols") return ModelKind::ols;
  throw UsageError("unknown model kind '" + s + "'");
}

enum class ScoreSource { designer, all_data, oracle };
enum class ScoreStage { conditional, final, truth };

struct ScoreVector {
  Eigen::VectorXd values;
  ScoreSource source = ScoreSource::designer;
  int designer_id = 0;  // 1..M for designer scores
  ScoreStage stage = ScoreStage::conditional;
  ModelKind model = ModelKind::lasso_logistic;

  // OLS fits may leave (0,1); everything else is a probability.
  bool logistic_provenance() const { return model != ModelKind::ols || stage == ScoreStage::truth; }
};

struct FeatureExpansion {
  std::vector<int> base_columns;  // block-local indices
  std::vector<int> squared_terms;
  std::vector<std::pair<int, int>> interaction_pairs;
  std::vector<int> shared_score_ids;

  std::size_t term_count() const {
    return base_columns.size() + squared_terms.size() + interaction_pairs.size() + shared_score_ids.size();
  }
};

struct PropensityConfig {
  ModelKind model = ModelKind::lasso_logistic;
  LassoConfig lasso;
  bool squares = true;
  bool interactions = true;
  // Keep at most this many interaction pairs, ranked by |corr(product, W)|.
  // Negative means no cap.
  int interaction_cap = -1;
  // Extra seed salt so distinct designers draw distinct CV folds.
  std::uint64_t seed = 1;

  bool operator==(const PropensityConfig&) const = default;
};

namespace detail {

inline Eigen::VectorXd treatment_as_vector(const Treatment& w) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(w.size()));
  for (std::size_t i = 0; i < w.size(); ++i) y(static_cast<Eigen::Index>(i)) = w[i];
  return y;
}

inline double abs_correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::ArrayXd ac = a.array() - a.mean();
  const Eigen::ArrayXd bc = b.array() - b.mean();
  const double den = std::sqrt((ac * ac).sum() * (bc * bc).sum());
  return den > 0.0 ? std::fabs((ac * bc).sum()) / den : 0.0;
}

inline void validate_scores_in_unit_interval(const ScoreVector& s) {
  for (Eigen::Index i = 0; i < s.values.size(); ++i)
    if (!(s.values(i) > 0.0 && s.values(i) < 1.0))
      throw NumericError("logistic score outside (0,1) at subject " + std::to_string(i + 1));
}

}  // namespace detail

// Squares and pairwise products of the block's covariates. The interaction
// cap, when set, keeps the pairs whose products correlate most with W.
inline FeatureExpansion build_expansion(const Eigen::MatrixXd& standardized_block, const Treatment& w,
                                        const PropensityConfig& cfg) {
  FeatureExpansion fx;
  const int k = static_cast<int>(standardized_block.cols());
  for (int j = 0; j < k; ++j) fx.base_columns.push_back(j);
  if (cfg.model == ModelKind::ols) return fx;
  if (cfg.squares)
    for (int j = 0; j < k; ++j) fx.squared_terms.push_back(j);
  if (!cfg.interactions) return fx;
  for (int a = 0; a < k; ++a)
    for (int b = a + 1; b < k; ++b) fx.interaction_pairs.emplace_back(a, b);
  if (cfg.interaction_cap >= 0 && fx.interaction_pairs.size() > static_cast<std::size_t>(cfg.interaction_cap)) {
    const Eigen::VectorXd y = detail::treatment_as_vector(w);
    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(fx.interaction_pairs.size());
    for (std::size_t q = 0; q < fx.interaction_pairs.size(); ++q) {
      const auto [a, b] = fx.interaction_pairs[q];
      const Eigen::VectorXd prod = standardized_block.col(a).cwiseProduct(standardized_block.col(b));
      ranked.emplace_back(-detail::abs_correlation(prod, y), q);
    }
    std::stable_sort(ranked.begin(), ranked.end());
    ranked.resize(static_cast<std::size_t>(cfg.interaction_cap));
    std::vector<std::size_t> keep;
    for (const auto& r : ranked) keep.push_back(r.second);
    std::sort(keep.begin(), keep.end());
    std::vector<std::pair<int, int>> pairs;
    for (auto q : keep) pairs.push_back(fx.interaction_pairs[q]);
    fx.interaction_pairs = std::move(pairs);
  }
  return fx;
}

inline Eigen::MatrixXd expand_features(const Eigen::MatrixXd& standardized_block, const FeatureExpansion& fx,
                                       const Eigen::MatrixXd& shared = Eigen::MatrixXd()) {
  const auto n = standardized_block.rows();
  if (shared.size() > 0 && shared.rows() != n) throw DataError("shared score length does not match subjects");
  if (static_cast<std::size_t>(shared.cols()) != fx.shared_score_ids.size() && shared.size() > 0)
    throw DataError("shared score count does not match expansion");
  Eigen::MatrixXd f(n, static_cast<Eigen::Index>(fx.term_count()));
  Eigen::Index c = 0;
  for (int j : fx.base_columns) f.col(c++) = standardized_block.col(j);
  for (int j : fx.squared_terms) f.col(c++) = standardized_block.col(j).cwiseAbs2();
  for (auto [a, b] : fx.interaction_pairs)
    f.col(c++) = standardized_block.col(a).cwiseProduct(standardized_block.col(b));
  for (Eigen::Index s = 0; s < shared.cols(); ++s) f.col(c++) = shared.col(s);
  return f;
}

struct LinearizedScores {
  Eigen::VectorXd values;
  std::size_t clamped = 0;  // entries moved into [1e-6, 1 - 1e-6] first
};

// Logit transform. OLS-provenance scores are clamped to [1e-6, 1 - 1e-6].
inline LinearizedScores linearize(const ScoreVector& scores) {
  LinearizedScores out;
  out.values.resize(scores.values.size());
  const bool clamp = !scores.logistic_provenance();
  for (Eigen::Index i = 0; i < scores.values.size(); ++i) {
    double v = scores.values(i);
    if (clamp) {
      const double c = std::clamp(v, 1e-6, 1.0 - 1e-6);
      if (c != v) ++out.clamped;
      v = c;
    }
    out.values(i) = std::log(v / (1.0 - v));
  }
  return out;
}

namespace detail {

inline ScoreVector fit_scores(const Eigen::MatrixXd& features, const Treatment& w, const PropensityConfig& cfg,
                              int designer_id, ScoreStage stage) {
  const Eigen::VectorXd y = treatment_as_vector(w);
  ScoreVector out;
  out.designer_id = designer_id;
  out.stage = stage;
  out.model = cfg.model;
  if (cfg.model == ModelKind::ols) {
    out.values = fit_ols(features, y).fitted;
    return out;
  }
  LassoConfig lc = cfg.lasso;
  lc.seed = derive_seed(cfg.seed, "designer-cv", static_cast<std::uint64_t>(designer_id));
  const auto fit = fit_lasso_logistic(features, y, lc);
  out.values = predict_probability(fit, features);
  // Keep the values strictly inside (0,1) when the linear predictor saturates.
  for (Eigen::Index i = 0; i < out.values.size(); ++i) out.values(i) = std::clamp(out.values(i), 1e-15, 1.0 - 1e-15);
  return out;
}

inline Eigen::MatrixXd standardized_block(const CovariateBlock& block) {
  return standardize(block.matrix).values;
}

}  // namespace detail

// Propensity model on the designer's own covariates (plus squares and
// pairwise products for the lasso model).
inline ScoreVector estimate_conditional_scores(const CovariateBlock& block, const Treatment& w,
                                               const PropensityConfig& cfg) {
  if (static_cast<Eigen::Index>(w.size()) != block.matrix.rows())
    throw DataError("treatment length does not match block rows");
  const Eigen::MatrixXd z = detail::standardized_block(block);
  const auto fx = build_expansion(z, w, cfg);
  return detail::fit_scores(expand_features(z, fx), w, cfg, block.designer_id, ScoreStage::conditional);
}

// Own expansion plus the other designers' conditional scores (logit scale
// for logistic scores, raw for OLS).
inline ScoreVector estimate_final_scores(const CovariateBlock& block, const std::vector<ScoreVector>& shared,
                                         const Treatment& w, const PropensityConfig& cfg) {
  const auto n = block.matrix.rows();
  if (static_cast<Eigen::Index>(w.size()) != n) throw DataError("treatment length does not match block rows");
  std::set<int> seen;
  for (const auto& s : shared) {
    if (s.values.size() != n)
      throw DataError("shared scores from designer " + std::to_string(s.designer_id) + " have length " +
                      std::to_string(s.values.size()) + ", expected " + std::to_string(n));
    if (s.designer_id == block.designer_id)
      throw DataError("designer " + std::to_string(block.designer_id) + " received its own scores as shared");
    if (!seen.insert(s.designer_id).second)
      throw DataError("duplicate shared scores from designer " + std::to_string(s.designer_id));
  }
  const Eigen::MatrixXd z = detail::standardized_block(block);
  auto fx = build_expansion(z, w, cfg);
  Eigen::MatrixXd shared_features(n, static_cast<Eigen::Index>(shared.size()));
  for (std::size_t s = 0; s < shared.size(); ++s) {
    fx.shared_score_ids.push_back(shared[s].designer_id);
    shared_features.col(static_cast<Eigen::Index>(s)) =
        cfg.model == ModelKind::ols ? shared[s].values : linearize(shared[s]).values;
  }
  const Eigen::MatrixXd features =
      shared.empty() ? expand_features(z, fx) : expand_features(z, fx, shared_features);
  return detail::fit_scores(features, w, cfg, block.designer_id, ScoreStage::final);
}

// Drops treated subjects outside the control score range and controls
// outside the treated range, both ranges taken before anything is dropped.
inline Mask trim_extremes(const Eigen::VectorXd& scores, const Treatment& w) {
  const auto n = static_cast<std::size_t>(scores.size());
  if (w.size() != n) throw DataError("treatment length does not match scores");
  double tmin = INFINITY, tmax = -INFINITY, cmin = INFINITY, cmax = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = scores(static_cast<Eigen::Index>(i));
    if (w[i] == 1) {
      tmin = std::min(tmin, s);
      tmax = std::max(tmax, s);
    } else {
      cmin = std::min(cmin, s);
      cmax = std::max(cmax, s);
    }
  }
  if (tmin > tmax || cmin > cmax) throw DataError("trimming needs both treated and control subjects");
  Mask keep(n, 0);
  std::size_t nt = 0, nc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = scores(static_cast<Eigen::Index>(i));
    const bool inside = w[i] == 1 ? (s >= cmin && s <= cmax) : (s >= tmin && s <= tmax);
    keep[i] = inside;
    if (inside) ++(w[i] == 1 ? nt : nc);
  }
  if (nt == 0 || nc == 0) throw DataError("trimming left no treated or no control subjects");
  return keep;
}

inline Mask trim_extremes(const ScoreVector& scores, const Treatment& w) { return trim_extremes(scores.values, w); }

}  // namespace distdesign
