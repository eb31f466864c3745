#pragma once

// Iterative median-split subclassification on estimated propensity scores.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "distdesign/design.hpp"
#include "distdesign/error.hpp"
#include "distdesign/propensity.hpp"
#include "distdesign/ttest.hpp"

namespace distdesign {

struct SubclassParams {
  double p_threshold = 0.15;
  std::size_t min_subclass = 50;
  std::size_t min_group = 30;
  bool logit_scale = true;  // t-test on logit scores; false uses raw probabilities

  bool operator==(const SubclassParams&) const = default;
};

struct SplitDecision {
  bool split = false;
  std::size_t low_size = 0;  // subjects in the low half when split were applied
};

namespace detail {

struct ArmCounts {
  std::size_t treated = 0, control = 0;
};

inline ArmCounts arm_counts(const std::vector<int>& members, const Treatment& w) {
  ArmCounts c;
  for (int i : members) (w[static_cast<std::size_t>(i)] == 1 ? c.treated : c.control)++;
  return c;
}

}  // namespace detail

// Split rule for one subclass whose members are sorted by (score, index).
// The low half holds everyone at or below the lower median score.
inline SplitDecision evaluate_split(const std::vector<int>& members, const Eigen::VectorXd& score,
                                    const Eigen::VectorXd& test_scale, const Treatment& w,
                                    const SubclassParams& params) {
  SplitDecision out;
  if (members.size() < 2 * params.min_subclass) return out;
  std::vector<double> t, c;
  for (int i : members) (w[static_cast<std::size_t>(i)] == 1 ? t : c).push_back(test_scale(i));
  try {
    if (!(two_sample_t(t, c).p_value < params.p_threshold)) return out;
  } catch (const NumericError&) {
    return out;
  }
  const double median = score(members[(members.size() - 1) / 2]);
  std::size_t cut = 0;
  while (cut < members.size() && score(members[cut]) <= median) ++cut;
  const std::vector<int> low(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(cut));
  const std::vector<int> high(members.begin() + static_cast<std::ptrdiff_t>(cut), members.end());
  if (low.size() < params.min_subclass || high.size() < params.min_subclass) return out;
  const auto lc = detail::arm_counts(low, w), hc = detail::arm_counts(high, w);
  if (std::min({lc.treated, lc.control, hc.treated, hc.control}) < params.min_group) return out;
  out.split = true;
  out.low_size = cut;
  return out;
}

inline DesignVector iterative_subclassification(const ScoreVector& scores, const Treatment& w, const Mask& mask = {},
                                                const SubclassParams& params = {}) {
  const auto n = static_cast<std::size_t>(scores.values.size());
  if (w.size() != n) throw DataError("treatment length does not match scores");
  if (!mask.empty() && mask.size() != n) throw DataError("mask length does not match scores");
  if (!(params.p_threshold > 0.0 && params.p_threshold <= 1.0)) throw UsageError("subclass p threshold must be in (0,1]");

  const Eigen::VectorXd& score = scores.values;
  const Eigen::VectorXd test_scale = params.logit_scale ? linearize(scores).values : scores.values;

  std::vector<int> all;
  for (std::size_t i = 0; i < n; ++i)
    if (mask.empty() || mask[i]) all.push_back(static_cast<int>(i));
  std::sort(all.begin(), all.end(), [&](int a, int b) { return score(a) < score(b) || (score(a) == score(b) && a < b); });
  const auto counts = detail::arm_counts(all, w);
  if (all.size() < params.min_subclass || counts.treated < params.min_group || counts.control < params.min_group)
    throw DataError("retained set (" + std::to_string(all.size()) + " subjects, " + std::to_string(counts.treated) +
                    " treated, " + std::to_string(counts.control) + " control) is below the subclass size floors (" +
                    std::to_string(params.min_subclass) + " subjects, " + std::to_string(params.min_group) +
                    " per arm)");

  DesignVector d;
  d.assignments.assign(n, 0);
  d.kind = DesignKind::subclasses;
  d.ref.method = DesignMethod::subclass;
  d.params = {{"p_threshold", params.p_threshold},
              {"min_subclass", static_cast<double>(params.min_subclass)},
              {"min_group", static_cast<double>(params.min_group)},
              {"logit_scale", params.logit_scale ? 1.0 : 0.0}};

  // Depth-first, low half first, so ids come out in score order.
  int next_id = 1;
  std::vector<std::vector<int>> stack{std::move(all)};
  while (!stack.empty()) {
    auto members = std::move(stack.back());
    stack.pop_back();
    const auto decision = evaluate_split(members, score, test_scale, w, params);
    if (decision.split) {
      const auto mid = members.begin() + static_cast<std::ptrdiff_t>(decision.low_size);
      stack.emplace_back(mid, members.end());
      stack.emplace_back(members.begin(), mid);
      continue;
    }
    for (int i : members) d.assignments[static_cast<std::size_t>(i)] = next_id;
    ++next_id;
  }
  return d;
}

}  // namespace distdesign
