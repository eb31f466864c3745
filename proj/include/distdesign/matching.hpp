#pragma once

// One-to-one matching without replacement on logit propensity scores:
// greedy nearest neighbor, greedy with a caliper, and optimal matching
// under the smallest feasible caliper.

#include <algorithm>
#include <bit>
#include <climits>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "distdesign/design.hpp"
#include "distdesign/error.hpp"

namespace distdesign {

namespace detail {

struct RetainedGroups {
  std::vector<int> treated;
  std::vector<int> control;
};

inline RetainedGroups retained_groups(std::size_t n, const Treatment& w, const Mask& mask) {
  if (w.size() != n) throw DataError("treatment length does not match scores");
  if (!mask.empty() && mask.size() != n) throw DataError("mask length does not match scores");
  RetainedGroups g;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    (w[i] == 1 ? g.treated : g.control).push_back(static_cast<int>(i));
  }
  return g;
}

inline void require_enough_controls(const RetainedGroups& g) {
  if (g.treated.empty()) throw DataError("no retained treated subjects to match");
  if (g.control.size() < g.treated.size())
    throw DataError("matching needs at least as many retained controls (" + std::to_string(g.control.size()) +
                    ") as treated (" + std::to_string(g.treated.size()) +
                    "); trim further or use subclassification");
}

inline DesignVector make_pairs_design(std::size_t n, DesignMethod method) {
  DesignVector d;
  d.assignments.assign(n, 0);
  d.kind = DesignKind::matched_pairs;
  d.ref.method = method;
  return d;
}

// Greedy matching: treated in descending score order (ties: lower index),
// each takes the closest unmatched control (ties: lower index). Treated with
// no control within `caliper` are dropped.
inline DesignVector greedy_match(const Eigen::VectorXd& logit_scores, const Treatment& w, const Mask& mask,
                                 double caliper, DesignMethod method) {
  const auto n = static_cast<std::size_t>(logit_scores.size());
  auto g = retained_groups(n, w, mask);
  require_enough_controls(g);
  auto score = [&](int i) { return logit_scores(i); };

  std::set<std::pair<double, int>> pool;
  for (int c : g.control) pool.emplace(score(c), c);
  std::sort(g.treated.begin(), g.treated.end(), [&](int a, int b) {
    return score(a) > score(b) || (score(a) == score(b) && a < b);
  });

  auto d = make_pairs_design(n, method);
  int next_id = 1;
  for (int t : g.treated) {
    const double s = score(t);
    auto it = pool.lower_bound({s, INT_MIN});
    auto best = pool.end();
    double best_dist = INFINITY;
    if (it != pool.end()) {
      best = it;
      best_dist = std::fabs(s - it->first);
    }
    if (it != pool.begin()) {
      auto left = pool.lower_bound({std::prev(it)->first, INT_MIN});
      const double dl = std::fabs(s - left->first);
      if (best == pool.end() || dl < best_dist || (dl == best_dist && left->second < best->second)) {
        best = left;
        best_dist = dl;
      }
    }
    if (best == pool.end() || best_dist > caliper) continue;
    d.assignments[static_cast<std::size_t>(t)] = next_id;
    d.assignments[static_cast<std::size_t>(best->second)] = next_id;
    ++next_id;
    pool.erase(best);
  }
  return d;
}

// Correctly rounded sum of doubles (Shewchuk partials, as in Python's fsum).
inline double exact_sum(const std::vector<double>& values) {
  std::vector<double> partials;
  for (double x : values) {
    std::size_t i = 0;
    for (double y : partials) {
      if (std::fabs(x) < std::fabs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[i++] = lo;
      x = hi;
    }
    partials.resize(i);
    partials.push_back(x);
  }
  if (partials.empty()) return 0.0;
  std::size_t n = partials.size() - 1;
  double hi = partials[n], lo = 0.0;
  while (n > 0) {
    const double x = hi;
    const double y = partials[--n];
    hi = x + y;
    lo = y - (hi - x);
    if (lo != 0.0) break;
  }
  // Round half-even across the remaining partials.
  if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

// Total |score difference| over pairs, computed exactly from the scores and
// rounded once, so matchings of equal true cost report identical totals.
inline double exact_total_distance(const std::vector<std::pair<int, int>>& pairs, const Eigen::VectorXd& s) {
  std::vector<double> terms;
  terms.reserve(2 * pairs.size());
  for (auto [t, c] : pairs) {
    const bool up = s(t) >= s(c);
    terms.push_back(up ? s(t) : s(c));
    terms.push_back(up ? -s(c) : -s(t));
  }
  return exact_sum(terms);
}

inline double retained_sd(const Eigen::VectorXd& v, const Mask& mask) {
  double sum = 0.0;
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (mask.empty() || mask[static_cast<std::size_t>(i)]) {
      sum += v(i);
      ++n;
    }
  if (n < 2) return 0.0;
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (mask.empty() || mask[static_cast<std::size_t>(i)]) ss += (v(i) - mean) * (v(i) - mean);
  return std::sqrt(ss / static_cast<double>(n - 1));
}

// Retained treated and controls, each sorted by (score, subject index).
struct SortedInstance {
  std::vector<int> treated, control;
  std::vector<double> ts, cs;
};

inline SortedInstance sorted_instance(const Eigen::VectorXd& s, RetainedGroups g) {
  auto by_score = [&](int a, int b) { return s(a) < s(b) || (s(a) == s(b) && a < b); };
  std::sort(g.treated.begin(), g.treated.end(), by_score);
  std::sort(g.control.begin(), g.control.end(), by_score);
  SortedInstance inst{std::move(g.treated), std::move(g.control), {}, {}};
  for (int t : inst.treated) inst.ts.push_back(s(t));
  for (int c : inst.control) inst.cs.push_back(s(c));
  return inst;
}

// Every treated can be matched using only pairs within `caliper`. Treated
// neighborhoods are intervals of the sorted controls, so taking the leftmost
// free control in score order is exact.
inline bool caliper_feasible(const SortedInstance& inst, double caliper) {
  std::size_t j = 0;
  for (double t : inst.ts) {
    while (j < inst.cs.size() && inst.cs[j] < t && std::fabs(t - inst.cs[j]) > caliper) ++j;
    if (j == inst.cs.size() || std::fabs(t - inst.cs[j]) > caliper) return false;
    ++j;
  }
  return true;
}

// Half-open control index range [lo, hi) within `caliper` of each treated.
inline std::vector<std::pair<std::size_t, std::size_t>> caliper_ranges(const SortedInstance& inst, double caliper) {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  ranges.reserve(inst.ts.size());
  std::size_t lo = 0, hi = 0;
  for (double t : inst.ts) {
    while (lo < inst.cs.size() && inst.cs[lo] < t && std::fabs(t - inst.cs[lo]) > caliper) ++lo;
    hi = std::max(hi, lo);
    while (hi < inst.cs.size() && (inst.cs[hi] <= t || std::fabs(inst.cs[hi] - t) <= caliper)) ++hi;
    ranges.emplace_back(lo, hi);
  }
  return ranges;
}

// Smallest double c with caliper_feasible(c); bisection over the ordered
// bit patterns of nonnegative doubles, so the result is one of the pairwise
// distances exactly.
inline double minimum_feasible_caliper(const SortedInstance& inst) {
  if (caliper_feasible(inst, 0.0)) return 0.0;
  const double span = std::max(std::fabs(inst.ts.back() - inst.cs.front()), std::fabs(inst.cs.back() - inst.ts.front()));
  std::uint64_t lo = 0;  // infeasible
  std::uint64_t hi = std::bit_cast<std::uint64_t>(span);
  if (!caliper_feasible(inst, span)) throw NumericError("matching infeasible at the largest distance");
  while (hi - lo > 1) {
    const std::uint64_t mid = lo + (hi - lo) / 2;
    if (caliper_feasible(inst, std::bit_cast<double>(mid)))
      hi = mid;
    else
      lo = mid;
  }
  return std::bit_cast<double>(hi);
}

// Min-cost assignment of every treated row on the caliper graph by
// successive shortest paths (Dijkstra on reduced costs, node potentials).
inline std::vector<int> min_cost_assignment(const SortedInstance& inst,
                                            const std::vector<std::pair<std::size_t, std::size_t>>& ranges) {
  const std::size_t nt = inst.ts.size(), nc = inst.cs.size();
  std::vector<int> match_t(nt, -1), match_c(nc, -1);
  std::vector<double> pot_t(nt, 0.0), pot_c(nc, 0.0);
  std::vector<double> dist_t(nt), dist_c(nc);
  std::vector<std::uint32_t> seen_t(nt, 0), seen_c(nc, 0);
  std::vector<int> prev_c(nc, -1);
  std::vector<std::size_t> done_t, done_c;
  std::uint32_t stamp = 0;
  using Entry = std::pair<double, std::size_t>;  // node: treated i -> i, control j -> nt + j
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  auto cost = [&](std::size_t i, std::size_t j) { return std::fabs(inst.ts[i] - inst.cs[j]); };

  for (std::size_t root = 0; root < nt; ++root) {
    ++stamp;
    done_t.clear();
    done_c.clear();
    heap = {};
    seen_t[root] = stamp;
    dist_t[root] = 0.0;
    heap.emplace(0.0, root);
    std::size_t sink = nc;
    double sink_dist = 0.0;
    while (!heap.empty()) {
      const auto [d, node] = heap.top();
      heap.pop();
      if (node < nt) {
        const std::size_t i = node;
        if (d > dist_t[i]) continue;
        done_t.push_back(i);
        for (std::size_t j = ranges[i].first; j < ranges[i].second; ++j) {
          if (static_cast<int>(j) == match_t[i]) continue;
          const double nd = d + std::max(0.0, cost(i, j) + pot_t[i] - pot_c[j]);
          if (seen_c[j] != stamp || nd < dist_c[j]) {
            seen_c[j] = stamp;
            dist_c[j] = nd;
            prev_c[j] = static_cast<int>(i);
            heap.emplace(nd, nt + j);
          }
        }
      } else {
        const std::size_t j = node - nt;
        if (d > dist_c[j]) continue;
        done_c.push_back(j);
        if (match_c[j] < 0) {
          sink = j;
          sink_dist = d;
          break;
        }
        const auto i = static_cast<std::size_t>(match_c[j]);
        const double nd = d + std::max(0.0, -cost(i, j) + pot_c[j] - pot_t[i]);
        if (seen_t[i] != stamp || nd < dist_t[i]) {
          seen_t[i] = stamp;
          dist_t[i] = nd;
          heap.emplace(nd, i);
        }
      }
    }
    if (sink == nc) throw NumericError("caliper graph admits no complete matching (internal invariant violated)");
    for (auto i : done_t) pot_t[i] += dist_t[i] - sink_dist;
    for (auto j : done_c) pot_c[j] += dist_c[j] - sink_dist;
    for (std::size_t j = sink;;) {
      const auto i = static_cast<std::size_t>(prev_c[j]);
      const int next = match_t[i];
      match_t[i] = static_cast<int>(j);
      match_c[j] = static_cast<int>(i);
      if (i == root) break;
      j = static_cast<std::size_t>(next);
    }
  }
  return match_t;
}

// Same problem by dynamic programming over score order. Swapping a crossed
// pair never raises the total or the larger of the two distances, so some
// optimal matching is order preserving: f[i][j] = best cost of matching the
// first i treated into the first j controls.
inline std::vector<int> monotone_assignment(const SortedInstance& inst,
                                            const std::vector<std::pair<std::size_t, std::size_t>>& ranges) {
  const std::size_t nt = inst.ts.size(), nc = inst.cs.size();
  const std::size_t width = nc + 1;
  std::vector<double> prev(width, 0.0), cur(width);
  std::vector<bool> took(nt * width, false);
  for (std::size_t i = 1; i <= nt; ++i) {
    std::fill(cur.begin(), cur.end(), INFINITY);
    const auto [lo, hi] = ranges[i - 1];
    for (std::size_t j = i; j <= nc; ++j) {
      double best = cur[j - 1];
      if (j - 1 >= lo && j - 1 < hi && std::isfinite(prev[j - 1])) {
        const double take = prev[j - 1] + std::fabs(inst.ts[i - 1] - inst.cs[j - 1]);
        if (take < best) {
          best = take;
          took[(i - 1) * width + j] = true;
        }
      }
      cur[j] = best;
    }
    std::swap(prev, cur);
  }
  if (!std::isfinite(prev[nc])) throw NumericError("caliper graph admits no complete matching (internal invariant violated)");
  std::vector<int> match(nt, -1);
  for (std::size_t i = nt, j = nc; i > 0;) {
    if (took[(i - 1) * width + j]) {
      match[i - 1] = static_cast<int>(j - 1);
      --i;
    }
    --j;
  }
  return match;
}

}  // namespace detail

inline DesignVector nearest_neighbor_match(const Eigen::VectorXd& logit_scores, const Treatment& w,
                                           const Mask& mask = {}) {
  return detail::greedy_match(logit_scores, w, mask, INFINITY, DesignMethod::nn);
}

// Caliper width is `caliper_multiplier` times the sd of the retained logit scores.
inline DesignVector caliper_match(const Eigen::VectorXd& logit_scores, const Treatment& w, const Mask& mask = {},
                                  double caliper_multiplier = 0.2) {
  if (!(caliper_multiplier >= 0.0)) throw UsageError("caliper multiplier must be nonnegative");
  const double width = std::isinf(caliper_multiplier) ? INFINITY
                                                      : caliper_multiplier * detail::retained_sd(logit_scores, mask);
  auto d = detail::greedy_match(logit_scores, w, mask, width, DesignMethod::caliper);
  if (std::isfinite(width)) {
    d.params["caliper_multiplier"] = caliper_multiplier;
    d.params["caliper_width"] = width;
  }
  return d;
}

// Hall's condition for the caliper graph: every run of consecutive treated
// (score order) sees at least as many distinct controls.
inline bool hall_condition_holds(const Eigen::VectorXd& logit_scores, const Treatment& w, const Mask& mask,
                                 double caliper) {
  const auto inst = detail::sorted_instance(logit_scores, detail::retained_groups(
                                                              static_cast<std::size_t>(logit_scores.size()), w, mask));
  const auto ranges = detail::caliper_ranges(inst, caliper);
  for (std::size_t a = 0; a < ranges.size(); ++a) {
    std::size_t covered = 0, reach = ranges[a].first;
    for (std::size_t b = a; b < ranges.size(); ++b) {
      const std::size_t lo = std::max(ranges[b].first, reach);
      if (ranges[b].second > lo) covered += ranges[b].second - lo;
      reach = std::max(reach, ranges[b].second);
      if (covered < b - a + 1) return false;
    }
  }
  return true;
}

enum class AssignmentSolver { monotone_dp, shortest_paths };

// Optimal matching under the smallest caliper that still matches every
// retained treated subject; `inflation` widens that caliper.
inline DesignVector optimal_caliper_match(const Eigen::VectorXd& logit_scores, const Treatment& w,
                                          const Mask& mask = {}, double inflation = 1.0,
                                          AssignmentSolver solver = AssignmentSolver::monotone_dp) {
  if (!(inflation >= 1.0)) throw UsageError("caliper inflation must be >= 1");
  const auto n = static_cast<std::size_t>(logit_scores.size());
  auto groups = detail::retained_groups(n, w, mask);
  detail::require_enough_controls(groups);
  const auto inst = detail::sorted_instance(logit_scores, std::move(groups));

  const double c_star = detail::minimum_feasible_caliper(inst);
  const double caliper = inflation == 1.0 ? c_star : c_star * inflation;
  const auto ranges = detail::caliper_ranges(inst, caliper);
  const auto match = solver == AssignmentSolver::monotone_dp ? detail::monotone_assignment(inst, ranges)
                                                              : detail::min_cost_assignment(inst, ranges);

  std::vector<std::pair<int, int>> pairs;  // (treated subject, control subject)
  for (std::size_t i = 0; i < match.size(); ++i)
    pairs.emplace_back(inst.treated[i], inst.control[static_cast<std::size_t>(match[i])]);
  std::sort(pairs.begin(), pairs.end());

  auto d = detail::make_pairs_design(n, DesignMethod::optimal_caliper);
  int id = 1;
  for (auto [t, c] : pairs) {
    d.assignments[static_cast<std::size_t>(t)] = id;
    d.assignments[static_cast<std::size_t>(c)] = id;
    ++id;
  }
  d.params["min_caliper"] = c_star;
  d.params["caliper_inflation"] = inflation;
  d.params["caliper_width"] = caliper;
  d.params["total_distance"] = detail::exact_total_distance(pairs, logit_scores);
  return d;
}

// Sum of |logit difference| over pairs, exactly rounded.
inline double total_pair_distance(const DesignVector& d, const Eigen::VectorXd& logit_scores, const Treatment& w) {
  std::vector<int> treated_of(static_cast<std::size_t>(d.group_count()) + 1, -1), control_of(treated_of.size(), -1);
  for (std::size_t i = 0; i < d.assignments.size(); ++i)
    if (d.assignments[i] > 0) (w[i] == 1 ? treated_of : control_of)[static_cast<std::size_t>(d.assignments[i])] = static_cast<int>(i);
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t g = 1; g < treated_of.size(); ++g) pairs.emplace_back(treated_of[g], control_of[g]);
  return detail::exact_total_distance(pairs, logit_scores);
}

}  // namespace distdesign
