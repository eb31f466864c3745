#pragma once

// Candidate designs: one group id per subject, 0 = dropped.

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "distdesign/data.hpp"
#include "distdesign/error.hpp"
#include "distdesign/propensity.hpp"

namespace distdesign {

enum class DesignKind { matched_pairs, subclasses };
enum class DesignMethod { subclass, nn, caliper, optimal_caliper };

inline constexpr DesignMethod kAllMethods[] = {DesignMethod::subclass, DesignMethod::nn, DesignMethod::caliper,
                                               DesignMethod::optimal_caliper};

inline std::string to_string(DesignKind k) { return k == DesignKind::subclasses ? "subclasses" : "matched-pairs"; }

inline DesignKind design_kind_from_string(const std::string& s) {
  if (s == "subclasses") return DesignKind::subclasses;
  if (s == "matched-pairs") return DesignKind::matched_pairs;
  throw DataError("unknown design kind '" + s + "'");
}

inline std::string to_string(DesignMethod m) {
  switch (m) {
    case DesignMethod::subclass: return "subclass";
    case DesignMethod::nn: return "nn";
    case DesignMethod::caliper: return "caliper";
    case DesignMethod::optimal_caliper: return "optimal-caliper";
  }
  return "subclass";
}

inline DesignMethod design_method_from_string(const std::string& s) {
  if (s == "subclass") return DesignMethod::subclass;
  if (s == "nn") return DesignMethod::nn;
  if (s == "caliper") return DesignMethod::caliper;
  if (s == "optimal-caliper" || s == "bigmatch") return DesignMethod::optimal_caliper;
  throw UsageError("unknown design method '" + s + "'");
}

inline std::string to_string(ScoreSource s) {
  switch (s) {
    case ScoreSource::designer: return "designer";
    case ScoreSource::all_data: return "all-data";
    case ScoreSource::oracle: return "oracle";
  }
  return "designer";
}

inline ScoreSource score_source_from_string(const std::string& s) {
  if (s == "designer") return ScoreSource::designer;
  if (s == "all-data") return ScoreSource::all_data;
  if (s == "oracle") return ScoreSource::oracle;
  throw DataError("unknown design source '" + s + "'");
}

// Who produced a candidate and with which method.
struct DesignRef {
  ScoreSource source = ScoreSource::designer;
  int designer_id = 0;
  DesignMethod method = DesignMethod::subclass;

  auto key() const { return std::tuple(static_cast<int>(source), designer_id, static_cast<int>(method)); }
  bool operator<(const DesignRef& o) const { return key() < o.key(); }
  bool operator==(const DesignRef& o) const { return key() == o.key(); }

  std::string label() const {
    const std::string who = source == ScoreSource::designer ? "M" + std::to_string(designer_id) : to_string(source);
    return who + "/" + to_string(method);
  }
};

struct DesignVector {
  std::vector<int> assignments;
  DesignKind kind = DesignKind::subclasses;
  DesignRef ref;
  std::map<std::string, double> params;

  int group_count() const {
    int k = 0;
    for (int a : assignments) k = std::max(k, a);
    return k;
  }

  std::size_t n_retained() const {
    std::size_t n = 0;
    for (int a : assignments) n += a > 0;
    return n;
  }

  bool operator==(const DesignVector&) const = default;
};

// Structural invariants: ids contiguous 1..K; pairs hold exactly one treated
// and one control; subclasses hold at least one of each.
inline void validate_design(const DesignVector& d, const Treatment& w) {
  if (d.assignments.size() != w.size())
    throw DataError("design " + d.ref.label() + " has " + std::to_string(d.assignments.size()) +
                    " entries, expected " + std::to_string(w.size()));
  const int k = d.group_count();
  std::vector<int> treated(static_cast<std::size_t>(k) + 1, 0), control(static_cast<std::size_t>(k) + 1, 0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const int a = d.assignments[i];
    if (a < 0) throw DataError("design " + d.ref.label() + " has negative group id");
    if (a == 0) continue;
    (w[i] == 1 ? treated : control)[static_cast<std::size_t>(a)]++;
  }
  for (int g = 1; g <= k; ++g) {
    const auto t = treated[static_cast<std::size_t>(g)], c = control[static_cast<std::size_t>(g)];
    if (t + c == 0) throw DataError("design " + d.ref.label() + " skips group id " + std::to_string(g));
    if (d.kind == DesignKind::matched_pairs && (t != 1 || c != 1))
      throw DataError("design " + d.ref.label() + " pair " + std::to_string(g) + " is not one treated + one control");
    if (d.kind == DesignKind::subclasses && (t < 1 || c < 1))
      throw DataError("design " + d.ref.label() + " subclass " + std::to_string(g) + " lacks a treatment arm");
  }
}

// Everyone retained in a single subclass.
inline DesignVector identity_design(std::size_t n) {
  DesignVector d;
  d.assignments.assign(n, 1);
  d.kind = DesignKind::subclasses;
  return d;
}

}  // namespace distdesign
