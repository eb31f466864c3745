#pragma once

// What one designer does between messages: scores, trimming, candidate
// designs, and block-local balance of every candidate.

#include <string>
#include <vector>

#include "distdesign/balance.hpp"
#include "distdesign/data.hpp"
#include "distdesign/design.hpp"
#include "distdesign/matching.hpp"
#include "distdesign/propensity.hpp"
#include "distdesign/subclassification.hpp"

namespace distdesign {

struct DesignerConfig {
  PropensityConfig propensity;
  std::vector<DesignMethod> methods{std::begin(kAllMethods), std::end(kAllMethods)};
  double caliper_multiplier = 0.2;
  double caliper_inflation = 1.0;
  SubclassParams subclass;
  BalanceConfig balance;

  bool operator==(const DesignerConfig&) const = default;
};

inline void validate_designer_config(const DesignerConfig& cfg) {
  if (cfg.methods.empty()) throw UsageError("no design methods enabled");
  for (std::size_t i = 0; i < cfg.methods.size(); ++i)
    for (std::size_t k = 0; k < i; ++k)
      if (cfg.methods[i] == cfg.methods[k])
        throw UsageError("design method '" + to_string(cfg.methods[i]) + "' listed twice");
  if (!(cfg.caliper_multiplier > 0.0)) throw UsageError("caliper multiplier must be positive");
  if (!(cfg.caliper_inflation >= 1.0)) throw UsageError("caliper inflation must be >= 1");
  if (!(cfg.subclass.p_threshold > 0.0 && cfg.subclass.p_threshold <= 1.0))
    throw UsageError("subclass p threshold must lie in (0, 1]");
  if (cfg.subclass.min_subclass == 0 || cfg.subclass.min_group == 0)
    throw UsageError("subclass size floors must be positive");
  if (!(cfg.balance.threshold > 0.0)) throw UsageError("balance threshold must be positive");
  if (cfg.propensity.lasso.n_lambda < 1) throw UsageError("n_lambda must be at least 1");
  if (!(cfg.propensity.lasso.path_ratio > 0.0 && cfg.propensity.lasso.path_ratio < 1.0))
    throw UsageError("lambda path ratio must lie in (0, 1)");
}

// Trim on the scores, then one candidate per enabled method.
inline std::vector<DesignVector> build_designs(const ScoreVector& scores, const Treatment& w, const DesignerConfig& cfg,
                                               ScoreSource source, int designer_id) {
  const Mask keep = trim_extremes(scores, w);
  std::size_t trimmed = 0;
  for (auto k : keep) trimmed += k == 0;
  const Eigen::VectorXd logit_scores = linearize(scores).values;

  std::vector<DesignVector> out;
  for (DesignMethod method : cfg.methods) {
    DesignVector d;
    switch (method) {
      case DesignMethod::subclass:
        d = iterative_subclassification(scores, w, keep, cfg.subclass);
        break;
      case DesignMethod::nn:
        d = nearest_neighbor_match(logit_scores, w, keep);
        break;
      case DesignMethod::caliper:
        d = caliper_match(logit_scores, w, keep, cfg.caliper_multiplier);
        break;
      case DesignMethod::optimal_caliper:
        d = optimal_caliper_match(logit_scores, w, keep, cfg.caliper_inflation);
        break;
    }
    d.ref = DesignRef{source, designer_id, method};
    d.params["n_trimmed"] = static_cast<double>(trimmed);
    validate_design(d, w);
    out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<PartialBalance> evaluate_candidates(const std::vector<DesignVector>& designs,
                                                       const CovariateBlock& block, const BalanceConfig& cfg) {
  std::vector<PartialBalance> out;
  out.reserve(designs.size());
  for (const auto& d : designs) out.push_back(evaluate_design_block(d, block, {}, cfg));
  return out;
}

// Baseline candidates plus their full-data balance.
struct BaselineResult {
  ScoreVector scores;
  std::vector<DesignVector> designs;
  std::vector<BalanceReport> reports;
};

// One designer holding every covariate. Interaction pairs are capped
// (negative cap means none), and CV folds are drawn as designer 1 would.
inline BaselineResult run_all_data(const Dataset& data, const DesignerConfig& cfg, int interaction_cap = 200) {
  validate_designer_config(cfg);
  std::vector<int> all(data.n_covariates());
  std::iota(all.begin(), all.end(), 0);
  const auto block = extract_block(data, 1, all);
  DesignerConfig local = cfg;
  local.propensity.interaction_cap = interaction_cap;
  BaselineResult r;
  r.scores = estimate_conditional_scores(block, data.treatment(), local.propensity);
  r.scores.source = ScoreSource::all_data;
  r.scores.designer_id = 0;
  r.designs = build_designs(r.scores, data.treatment(), cfg, ScoreSource::all_data, 0);
  for (const auto& d : r.designs) r.reports.push_back(evaluate_design(d, data, {}, cfg.balance));
  return r;
}

// Designs from externally supplied (true) scores.
inline BaselineResult run_oracle(const Dataset& data, const ScoreVector& true_scores, const DesignerConfig& cfg) {
  validate_designer_config(cfg);
  if (static_cast<std::size_t>(true_scores.values.size()) != data.n_subjects())
    throw DataError("true scores have length " + std::to_string(true_scores.values.size()) + ", expected " +
                    std::to_string(data.n_subjects()));
  detail::validate_scores_in_unit_interval(true_scores);
  BaselineResult r;
  r.scores = true_scores;
  r.scores.source = ScoreSource::oracle;
  r.scores.designer_id = 0;
  r.designs = build_designs(r.scores, data.treatment(), cfg, ScoreSource::oracle, 0);
  for (const auto& d : r.designs) r.reports.push_back(evaluate_design(d, data, {}, cfg.balance));
  return r;
}

}  // namespace distdesign
