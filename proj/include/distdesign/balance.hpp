#pragma once

// Standardized differences in means, per-block evaluation, aggregation into
// d_max / d_plus, and selection of the best candidate design.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "distdesign/data.hpp"
#include "distdesign/design.hpp"
#include "distdesign/error.hpp"
#include "distdesign/format.hpp"

namespace distdesign {

enum class SubclassWeighting { total_size, treated_share };

inline std::string to_string(SubclassWeighting s) {
  return s == SubclassWeighting::treated_share ? "treated-share" : "total-size";
}

inline SubclassWeighting subclass_weighting_from_string(const std::string& s) {
  if (s == "total-size") return SubclassWeighting::total_size;
  if (s == "treated-share") return SubclassWeighting::treated_share;
  throw UsageError("unknown subclass weighting '" + s + "'");
}

enum class Criterion { d_max, d_plus };

inline std::string to_string(Criterion c) { return c == Criterion::d_plus ? "d_plus" : "d_max"; }

inline Criterion criterion_from_string(const std::string& s) {
  if (s == "d_max" || s == "dmax") return Criterion::d_max;
  if (s == "d_plus" || s == "dplus") return Criterion::d_plus;
  throw UsageError("unknown selection criterion '" + s + "'");
}

struct BalanceConfig {
  double threshold = 0.2;
  SubclassWeighting weighting = SubclassWeighting::total_size;

  bool operator==(const BalanceConfig&) const = default;
};

// Pooled scale from the full pre-design sample. A zero scale marks the
// column degenerate; its difference is reported as 0.
struct Standardizer {
  double scale = 0.0;
  bool degenerate = true;
};

inline Standardizer pre_design_standardizer(const Eigen::Ref<const Eigen::VectorXd>& x, const Treatment& w,
                                            bool binary_scale) {
  double sum_t = 0.0, sum_c = 0.0;
  std::size_t n_t = 0, n_c = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (w[static_cast<std::size_t>(i)] == 1) {
      sum_t += x(i);
      ++n_t;
    } else {
      sum_c += x(i);
      ++n_c;
    }
  }
  const double mean_t = n_t ? sum_t / static_cast<double>(n_t) : 0.0;
  const double mean_c = n_c ? sum_c / static_cast<double>(n_c) : 0.0;
  double var_t = 0.0, var_c = 0.0;
  if (binary_scale) {
    var_t = mean_t * (1.0 - mean_t);
    var_c = mean_c * (1.0 - mean_c);
  } else {
    double ss_t = 0.0, ss_c = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (w[static_cast<std::size_t>(i)] == 1)
        ss_t += (x(i) - mean_t) * (x(i) - mean_t);
      else
        ss_c += (x(i) - mean_c) * (x(i) - mean_c);
    }
    var_t = n_t > 1 ? ss_t / static_cast<double>(n_t - 1) : 0.0;
    var_c = n_c > 1 ? ss_c / static_cast<double>(n_c - 1) : 0.0;
  }
  const double s = std::sqrt((var_t + var_c) / 2.0);
  return s > 0.0 ? Standardizer{s, false} : Standardizer{0.0, true};
}

// Group membership and group weights of a design, shared by every column.
struct DesignLayout {
  std::vector<int> group;             // per subject, 0 = dropped
  std::vector<std::size_t> n_treated;  // index 1..K
  std::vector<std::size_t> n_control;
  std::vector<double> weight;  // omega_k, sums to 1
  std::size_t n_retained = 0;
};

inline DesignLayout design_layout(const DesignVector& design, const Treatment& w, SubclassWeighting weighting) {
  if (design.assignments.size() != w.size())
    throw DataError("design " + design.ref.label() + " has " + std::to_string(design.assignments.size()) +
                    " entries, expected " + std::to_string(w.size()));
  DesignLayout l;
  l.group = design.assignments;
  const auto k = static_cast<std::size_t>(design.group_count());
  l.n_treated.assign(k + 1, 0);
  l.n_control.assign(k + 1, 0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const int g = l.group[i];
    if (g < 0) throw DataError("design " + design.ref.label() + " has negative group id");
    if (g == 0) continue;
    (w[i] == 1 ? l.n_treated : l.n_control)[static_cast<std::size_t>(g)]++;
    ++l.n_retained;
  }
  if (l.n_retained == 0) throw DataError("design " + design.ref.label() + " retains no subjects");
  std::size_t total_treated = 0;
  for (std::size_t g = 1; g <= k; ++g) {
    if (l.n_treated[g] == 0 || l.n_control[g] == 0)
      throw DataError("design " + design.ref.label() + " group " + std::to_string(g) + " lacks a treatment arm");
    total_treated += l.n_treated[g];
  }
  l.weight.assign(k + 1, 0.0);
  for (std::size_t g = 1; g <= k; ++g)
    l.weight[g] = weighting == SubclassWeighting::treated_share
                      ? static_cast<double>(l.n_treated[g]) / static_cast<double>(total_treated)
                      : static_cast<double>(l.n_treated[g] + l.n_control[g]) / static_cast<double>(l.n_retained);
  return l;
}

// Weighted treated and control means: sum over groups of omega_k times the
// within-group arm mean. Summation order is fixed (groups ascending).
inline std::pair<double, double> weighted_means(const Eigen::Ref<const Eigen::VectorXd>& x, const Treatment& w,
                                                const DesignLayout& l) {
  const std::size_t k = l.weight.size() - 1;
  std::vector<double> sum_t(k + 1, 0.0), sum_c(k + 1, 0.0);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const int g = l.group[static_cast<std::size_t>(i)];
    if (g == 0) continue;
    (w[static_cast<std::size_t>(i)] == 1 ? sum_t : sum_c)[static_cast<std::size_t>(g)] += x(i);
  }
  double mt = 0.0, mc = 0.0;
  for (std::size_t g = 1; g <= k; ++g) {
    mt += l.weight[g] * (sum_t[g] / static_cast<double>(l.n_treated[g]));
    mc += l.weight[g] * (sum_c[g] / static_cast<double>(l.n_control[g]));
  }
  return {mt, mc};
}

struct StdDiff {
  double value = 0.0;
  bool degenerate = false;
};

inline StdDiff std_diff(const Eigen::Ref<const Eigen::VectorXd>& x, const Treatment& w, const DesignLayout& layout,
                        bool binary_scale) {
  const auto s = pre_design_standardizer(x, w, binary_scale);
  if (s.degenerate) return {0.0, true};
  const auto [mt, mc] = weighted_means(x, w, layout);
  return {std::fabs(mt - mc) / s.scale, false};
}

inline StdDiff std_diff_continuous(const Eigen::Ref<const Eigen::VectorXd>& x, const Treatment& w,
                                   const DesignLayout& layout) {
  return std_diff(x, w, layout, false);
}

inline StdDiff std_diff_binary(const Eigen::Ref<const Eigen::VectorXd>& x, const Treatment& w,
                               const DesignLayout& layout) {
  return std_diff(x, w, layout, true);
}

// A transformed term: the product of the listed covariates (a square lists
// its column twice). Columns are global indices.
struct BalanceTerm {
  std::string name;
  std::vector<int> factors;
};

inline BalanceTerm interaction_term(int a, int b, const std::string& name = {}) {
  return {name.empty() ? "X" + std::to_string(a + 1) + ":X" + std::to_string(b + 1) : name, {a, b}};
}

struct TermDiff {
  std::string name;
  double d = 0.0;
  bool degenerate = false;

  bool operator==(const TermDiff&) const = default;
};

// One designer's evaluation of one candidate on its own columns.
struct PartialBalance {
  DesignRef design;
  int block_id = 0;
  std::size_t n_retained = 0;
  std::vector<int> columns;  // global indices
  std::vector<double> d;
  std::vector<std::uint8_t> degenerate;
  std::vector<TermDiff> terms;

  bool operator==(const PartialBalance&) const = default;
};

inline PartialBalance evaluate_design_block(const DesignVector& design, const CovariateBlock& block,
                                            const std::vector<BalanceTerm>& extra_terms = {},
                                            const BalanceConfig& cfg = {}) {
  const auto layout = design_layout(design, block.treatment, cfg.weighting);
  PartialBalance out;
  out.design = design.ref;
  out.block_id = block.designer_id;
  out.n_retained = layout.n_retained;
  out.columns = block.columns;
  for (std::size_t k = 0; k < block.columns.size(); ++k) {
    const auto r = std_diff(block.matrix.col(static_cast<Eigen::Index>(k)), block.treatment, layout,
                            uses_binary_scale(block.kinds[k]));
    out.d.push_back(r.value);
    out.degenerate.push_back(r.degenerate);
  }
  for (const auto& term : extra_terms) {
    Eigen::VectorXd prod = Eigen::VectorXd::Ones(block.matrix.rows());
    bool binary = true;
    for (int f : term.factors) {
      const auto it = std::find(block.columns.begin(), block.columns.end(), f);
      if (it == block.columns.end())
        throw DataError("term " + term.name + " uses column " + std::to_string(f) + " outside block " +
                        std::to_string(block.designer_id));
      const auto local = it - block.columns.begin();
      prod = prod.cwiseProduct(block.matrix.col(local));
      binary = binary && uses_binary_scale(block.kinds[static_cast<std::size_t>(local)]);
    }
    const auto r = std_diff(prod, block.treatment, layout, binary);
    out.terms.push_back({term.name, r.value, r.degenerate});
  }
  return out;
}

struct BalanceReport {
  DesignRef design;
  std::map<int, double> per_covariate;  // global column -> d_j
  std::map<std::string, double> evaluated_terms;
  std::vector<int> degenerate_columns;
  double d_max = 0.0;
  int d_plus = 0;
  std::size_t n_retained = 0;
  double threshold = 0.2;
};

inline void summarize(BalanceReport& r) {
  r.d_max = 0.0;
  r.d_plus = 0;
  for (const auto& [col, d] : r.per_covariate) {
    r.d_max = std::max(r.d_max, d);
    r.d_plus += d > r.threshold;
  }
}

struct SelectionResult {
  DesignRef winner;
  Criterion criterion = Criterion::d_max;
  std::vector<BalanceReport> table;  // ordered by DesignRef
};

// Merges partial reports. Every candidate must be covered by exactly the
// blocks of `partition`, each exactly once.
inline std::vector<BalanceReport> aggregate_balance(const std::vector<PartialBalance>& partials,
                                                    const PartitionSpec& partition, double threshold = 0.2) {
  std::map<DesignRef, std::map<int, const PartialBalance*>> cells;
  for (const auto& pb : partials) {
    auto& row = cells[pb.design];
    if (!row.emplace(pb.block_id, &pb).second)
      throw DataError("design " + pb.design.label() + " evaluated twice on block " + std::to_string(pb.block_id));
  }
  std::vector<std::string> gaps;
  std::vector<BalanceReport> reports;
  for (const auto& [ref, row] : cells) {
    for (int b = 1; b <= partition.m_designers; ++b)
      if (!row.count(b)) gaps.push_back(ref.label() + " x block " + std::to_string(b));
    for (const auto& [b, pb] : row) {
      if (b < 1 || b > partition.m_designers) {
        gaps.push_back(ref.label() + " has unknown block " + std::to_string(b));
        continue;
      }
      if (pb->columns != partition.blocks[static_cast<std::size_t>(b - 1)])
        gaps.push_back(ref.label() + " block " + std::to_string(b) + " columns differ from the partition");
    }
    if (!gaps.empty()) continue;
    BalanceReport r;
    r.design = ref;
    r.threshold = threshold;
    r.n_retained = row.begin()->second->n_retained;
    for (const auto& [b, pb] : row) {
      if (pb->n_retained != r.n_retained)
        throw DataError("blocks disagree on retained count for design " + ref.label());
      for (std::size_t k = 0; k < pb->columns.size(); ++k) {
        r.per_covariate[pb->columns[k]] = pb->d[k];
        if (pb->degenerate[k]) r.degenerate_columns.push_back(pb->columns[k]);
      }
      for (const auto& t : pb->terms) r.evaluated_terms[t.name] = t.d;
    }
    std::sort(r.degenerate_columns.begin(), r.degenerate_columns.end());
    summarize(r);
    reports.push_back(std::move(r));
  }
  if (!gaps.empty()) {
    std::string msg = "balance evaluation incomplete:";
    for (const auto& g : gaps) msg += "\n  " + g;
    throw DataError(msg);
  }
  return reports;
}

// Single all-columns evaluation (baselines and the monolithic reference).
inline BalanceReport evaluate_design(const DesignVector& design, const Dataset& data,
                                     const std::vector<BalanceTerm>& extra_terms = {}, const BalanceConfig& cfg = {}) {
  std::vector<int> all(data.n_covariates());
  std::iota(all.begin(), all.end(), 0);
  const auto block = extract_block(data, 1, all);
  const auto pb = evaluate_design_block(design, block, extra_terms, cfg);
  return aggregate_balance({pb}, PartitionSpec{1, {all}}, cfg.threshold).front();
}

inline BalanceReport pre_design_balance(const Dataset& data, const BalanceConfig& cfg = {}) {
  return evaluate_design(identity_design(data.n_subjects()), data, {}, cfg);
}

namespace detail {

inline auto selection_key(const BalanceReport& r, Criterion c) {
  const double primary = c == Criterion::d_max ? r.d_max : static_cast<double>(r.d_plus);
  const double secondary = c == Criterion::d_max ? static_cast<double>(r.d_plus) : r.d_max;
  return std::tuple(primary, secondary, -static_cast<double>(r.n_retained), r.design.designer_id,
                    static_cast<int>(r.design.method), static_cast<int>(r.design.source));
}

}  // namespace detail

// Best report under `criterion`; ties go to the secondary criterion, then
// more retained subjects, then lower designer id, then method order.
inline const BalanceReport& best_report(const std::vector<BalanceReport>& reports, Criterion criterion) {
  if (reports.empty()) throw DataError("no candidate designs to select from");
  return *std::min_element(reports.begin(), reports.end(), [&](const auto& a, const auto& b) {
    return detail::selection_key(a, criterion) < detail::selection_key(b, criterion);
  });
}

// Winner among designer candidates; baselines only compete when no designer
// candidate is present.
inline SelectionResult select_design(std::vector<BalanceReport> reports, Criterion criterion) {
  std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.design < b.design; });
  std::vector<BalanceReport> designers;
  for (const auto& r : reports)
    if (r.design.source == ScoreSource::designer) designers.push_back(r);
  SelectionResult out;
  out.criterion = criterion;
  out.winner = best_report(designers.empty() ? reports : designers, criterion).design;
  out.table = std::move(reports);
  return out;
}

inline SelectionResult aggregate_and_select(const std::vector<PartialBalance>& partials, const PartitionSpec& partition,
                                            Criterion criterion, double threshold = 0.2) {
  return select_design(aggregate_balance(partials, partition, threshold), criterion);
}

// Best designer for one method, or nullopt when no designer ran it.
inline std::optional<BalanceReport> best_designer_for(const std::vector<BalanceReport>& reports, DesignMethod method,
                                                      Criterion criterion) {
  std::vector<BalanceReport> subset;
  for (const auto& r : reports)
    if (r.design.source == ScoreSource::designer && r.design.method == method) subset.push_back(r);
  if (subset.empty()) return std::nullopt;
  return best_report(subset, criterion);
}

// Long-format rows: one per covariate per design.
inline void write_balance_csv(std::ostream& out, const std::vector<BalanceReport>& reports,
                              const std::vector<CovariateMeta>& meta) {
  out << "source,designer_id,method,covariate,column,d\n";
  for (const auto& r : reports) {
    for (const auto& [col, d] : r.per_covariate) {
      const std::string name =
          static_cast<std::size_t>(col) < meta.size() ? meta[static_cast<std::size_t>(col)].name : "X" + std::to_string(col + 1);
      out << to_string(r.design.source) << ',' << r.design.designer_id << ',' << to_string(r.design.method) << ','
          << name << ',' << col << ',' << format_double(d) << '\n';
    }
    for (const auto& [name, d] : r.evaluated_terms)
      out << to_string(r.design.source) << ',' << r.design.designer_id << ',' << to_string(r.design.method) << ','
          << name << ",," << format_double(d) << '\n';
  }
}

}  // namespace distdesign
