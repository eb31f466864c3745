#pragma once

// Replays the subclass split rule with the oracle t-test.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "distdesign/subclassification.hpp"
#include "oracles/numeric_oracle.hpp"

namespace oracle {

// Would this subclass still split? Scores are probabilities; the test runs on
// their logits and the halves cut at the lower median.
inline bool replay_would_split(const std::vector<int>& members, const Eigen::VectorXd& s,
                               const distdesign::Treatment& w, const distdesign::SubclassParams& p) {
  std::vector<int> m = members;
  std::sort(m.begin(), m.end(), [&](int a, int b) { return s(a) < s(b) || (s(a) == s(b) && a < b); });
  std::vector<double> t, c;
  for (int i : m) (w[static_cast<std::size_t>(i)] ? t : c).push_back(std::log(s(i) / (1 - s(i))));
  if (t.size() < 2 || c.size() < 2) return false;
  if (!(welch(t, c).p < p.p_threshold)) return false;
  const double med = s(m[(m.size() - 1) / 2]);
  std::size_t lo_n = 0, lo_t = 0, hi_t = 0;
  for (int i : m) {
    const bool low = s(i) <= med;
    lo_n += low;
    (low ? lo_t : hi_t) += static_cast<std::size_t>(w[static_cast<std::size_t>(i)]);
  }
  const std::size_t hi_n = m.size() - lo_n;
  return lo_n >= p.min_subclass && hi_n >= p.min_subclass && lo_t >= p.min_group && hi_t >= p.min_group &&
         lo_n - lo_t >= p.min_group && hi_n - hi_t >= p.min_group;
}

}  // namespace oracle
