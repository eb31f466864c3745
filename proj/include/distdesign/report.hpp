#pragma once

// Files a design run leaves behind: design CSVs, the balance document and
// the tables derived from it.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "distdesign/balance.hpp"
#include "distdesign/data.hpp"
#include "distdesign/design.hpp"
#include "distdesign/json_io.hpp"
#include "distdesign/simgen.hpp"

namespace distdesign {

// Balance of a design run, before and after.
struct BalanceDocument {
  Criterion criterion = Criterion::d_max;
  std::optional<DesignRef> winner;
  std::vector<std::string> covariates;
  BalanceReport before;
  std::vector<BalanceReport> designs;

  bool operator==(const BalanceDocument&) const;
};

inline bool same_report(const BalanceReport& a, const BalanceReport& b) {
  return a.design == b.design && a.per_covariate == b.per_covariate && a.evaluated_terms == b.evaluated_terms &&
         a.degenerate_columns == b.degenerate_columns && a.d_max == b.d_max && a.d_plus == b.d_plus &&
         a.n_retained == b.n_retained && a.threshold == b.threshold;
}

inline bool BalanceDocument::operator==(const BalanceDocument& o) const {
  if (criterion != o.criterion || winner != o.winner || covariates != o.covariates || !same_report(before, o.before) ||
      designs.size() != o.designs.size())
    return false;
  for (std::size_t i = 0; i < designs.size(); ++i)
    if (!same_report(designs[i], o.designs[i])) return false;
  return true;
}

// Terms that generated treatment in a simulated study, named "Xa:Xb".
inline std::vector<BalanceTerm> mechanism_terms(const MechanismSpec& spec) {
  std::vector<BalanceTerm> out;
  for (const auto& t : spec.interactions)
    out.push_back(interaction_term(t.a, t.b, "X" + std::to_string(t.a + 1) + ":X" + std::to_string(t.b + 1)));
  return out;
}

namespace detail {

inline Json report_to_json(const BalanceReport& r, std::size_t p) {
  std::vector<double> d(p, 0.0);
  for (const auto& [col, v] : r.per_covariate) d.at(static_cast<std::size_t>(col)) = v;
  Json terms = Json::object();
  for (const auto& [name, v] : r.evaluated_terms) terms[name] = v;
  return {{"source", to_string(r.design.source)},
          {"designer_id", r.design.designer_id},
          {"method", to_string(r.design.method)},
          {"n_retained", r.n_retained},
          {"d_max", r.d_max},
          {"d_plus", r.d_plus},
          {"threshold", r.threshold},
          {"d", d},
          {"degenerate", r.degenerate_columns},
          {"terms", terms}};
}

inline BalanceReport report_from_json(const Json& j, bool with_ref) {
  BalanceReport r;
  if (with_ref)
    r.design = DesignRef{score_source_from_string(j.at("source").get<std::string>()), j.at("designer_id").get<int>(),
                         design_method_from_string(j.at("method").get<std::string>())};
  r.n_retained = j.at("n_retained").get<std::size_t>();
  r.threshold = j.at("threshold").get<double>();
  const auto d = j.at("d").get<std::vector<double>>();
  for (std::size_t k = 0; k < d.size(); ++k) r.per_covariate[static_cast<int>(k)] = d[k];
  r.degenerate_columns = j.at("degenerate").get<std::vector<int>>();
  for (const auto& [name, v] : j.at("terms").items()) r.evaluated_terms[name] = v.get<double>();
  summarize(r);
  if (r.d_max != j.at("d_max").get<double>() || r.d_plus != j.at("d_plus").get<int>())
    throw DataError("balance entry d_max/d_plus do not match its per-covariate values");
  return r;
}

}  // namespace detail

inline Json balance_to_json(const BalanceDocument& doc) {
  const auto p = doc.covariates.size();
  Json designs = Json::array();
  for (const auto& r : doc.designs) designs.push_back(detail::report_to_json(r, p));
  Json before = detail::report_to_json(doc.before, p);
  for (const char* k : {"source", "designer_id", "method"}) before.erase(k);
  Json j = {{"criterion", to_string(doc.criterion)}, {"covariates", doc.covariates}, {"before", before},
            {"designs", designs}};
  j["winner"] = doc.winner ? Json{{"source", to_string(doc.winner->source)},
                                  {"designer_id", doc.winner->designer_id},
                                  {"method", to_string(doc.winner->method)}}
                           : Json(nullptr);
  return j;
}

inline BalanceDocument balance_from_json(const Json& j) {
  try {
    BalanceDocument doc;
    doc.criterion = criterion_from_string(j.at("criterion").get<std::string>());
    doc.covariates = j.at("covariates").get<std::vector<std::string>>();
    doc.before = detail::report_from_json(j.at("before"), false);
    for (const auto& r : j.at("designs")) doc.designs.push_back(detail::report_from_json(r, true));
    if (doc.before.per_covariate.size() != doc.covariates.size())
      throw DataError("pre-design balance has the wrong number of covariates");
    for (const auto& r : doc.designs)
      if (r.per_covariate.size() != doc.covariates.size())
        throw DataError("design " + r.design.label() + " has the wrong number of covariates");
    const auto& w = j.at("winner");
    if (!w.is_null())
      doc.winner = DesignRef{score_source_from_string(w.at("source").get<std::string>()),
                             w.at("designer_id").get<int>(), design_method_from_string(w.at("method").get<std::string>())};
    return doc;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed balance file: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("malformed balance file: ") + e.what());
  }
}

inline BalanceDocument load_balance(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open balance file '" + path + "'");
  std::stringstream text;
  text << in.rdbuf();
  try {
    return balance_from_json(Json::parse(text.str()));
  } catch (const Json::exception& e) {
    throw DataError("balance file '" + path + "' is not JSON: " + e.what());
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

// "designer-3-caliper" and the like.
inline std::string design_file_stem(const DesignRef& r) {
  const std::string who = r.source == ScoreSource::designer ? "designer-" + std::to_string(r.designer_id)
                                                           : to_string(r.source);
  return who + "-" + to_string(r.method);
}

inline std::optional<DesignRef> design_ref_from_stem(const std::string& stem) {
  for (int m = 0; m < 4; ++m) {
    const auto method = static_cast<DesignMethod>(m);
    const std::string tail = "-" + to_string(method);
    if (stem.size() <= tail.size() || stem.compare(stem.size() - tail.size(), tail.size(), tail) != 0) continue;
    const std::string who = stem.substr(0, stem.size() - tail.size());
    if (who == "all-data") return DesignRef{ScoreSource::all_data, 0, method};
    if (who == "oracle") return DesignRef{ScoreSource::oracle, 0, method};
    if (who.rfind("designer-", 0) == 0) {
      const std::string id = who.substr(9);
      if (!id.empty() && id.size() < 10 && id.find_first_not_of("0123456789") == std::string::npos && id[0] != '0')
        return DesignRef{ScoreSource::designer, std::stoi(id), method};
    }
  }
  return std::nullopt;
}

inline void write_design_csv(std::ostream& out, const DesignVector& d) {
  out << "subject_id,group_id\n";
  for (std::size_t i = 0; i < d.assignments.size(); ++i) out << i + 1 << ',' << d.assignments[i] << '\n';
}

inline DesignVector read_design_csv(std::istream& in, const std::string& origin, DesignKind kind) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(origin + ": empty design file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "subject_id,group_id") throw DataError(origin + ": expected header subject_id,group_id");
  DesignVector d;
  d.kind = kind;
  for (std::size_t row = 2; std::getline(in, line); ++row) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    long long id = 0, group = 0;
    std::size_t used = 0;
    try {
      if (cells.size() != 2) throw std::invalid_argument("cells");
      id = std::stoll(cells[0], &used);
      if (used != cells[0].size()) throw std::invalid_argument("id");
      group = std::stoll(cells[1], &used);
      if (used != cells[1].size()) throw std::invalid_argument("group");
    } catch (const std::exception&) {
      throw DataError(origin + ":" + std::to_string(row) + ": expected two integers");
    }
    if (id != static_cast<long long>(d.assignments.size()) + 1)
      throw DataError(origin + ":" + std::to_string(row) + ": subject ids must run 1..N in order");
    if (group < 0 || group > INT32_MAX) throw DataError(origin + ":" + std::to_string(row) + ": bad group id");
    d.assignments.push_back(static_cast<int>(group));
  }
  return d;
}

// One row per method and statistic, one column per design source, in the
// layout of the usual before/after balance table.
inline void write_table_csv(std::ostream& out, const BalanceDocument& doc) {
  std::vector<DesignRef> columns;
  for (const auto& r : doc.designs) {
    DesignRef c = r.design;
    c.method = DesignMethod::subclass;
    if (std::find(columns.begin(), columns.end(), c) == columns.end()) columns.push_back(c);
  }
  std::sort(columns.begin(), columns.end(), [](const DesignRef& a, const DesignRef& b) {
    // Baselines first, then designers in id order.
    auto rank = [](const DesignRef& r) {
      return std::pair(r.source == ScoreSource::designer ? 2 : r.source == ScoreSource::oracle ? 0 : 1, r.designer_id);
    };
    return rank(a) < rank(b);
  });
  auto header = [](const DesignRef& c) {
    return c.source == ScoreSource::designer ? "M" + std::to_string(c.designer_id) : to_string(c.source);
  };
  out << "method,statistic";
  for (const auto& c : columns) out << ',' << header(c);
  out << '\n';
  out << "before,d_max";
  for (std::size_t k = 0; k < columns.size(); ++k) out << ',' << format_double(doc.before.d_max);
  out << "\nbefore,d_plus";
  for (std::size_t k = 0; k < columns.size(); ++k) out << ',' << doc.before.d_plus;
  out << '\n';
  for (int m = 0; m < 4; ++m) {
    const auto method = static_cast<DesignMethod>(m);
    std::vector<const BalanceReport*> row;
    bool any = false;
    for (auto c : columns) {
      c.method = method;
      const BalanceReport* hit = nullptr;
      for (const auto& r : doc.designs)
        if (r.design == c) hit = &r;
      any = any || hit;
      row.push_back(hit);
    }
    if (!any) continue;
    out << to_string(method) << ",d_max";
    for (const auto* r : row) out << ',' << (r ? format_double(r->d_max) : "");
    out << '\n' << to_string(method) << ",d_plus";
    for (const auto* r : row) out << ',' << (r ? std::to_string(r->d_plus) : "");
    out << '\n';
  }
}

struct SummaryRow {
  std::size_t replicate = 0;
  std::string covariate;
  std::string stage;
  std::string method;
  std::string designer;
  double d = 0.0;
  bool interaction = false;
  std::size_t order = 0;  // covariate position; terms follow covariates
};

// Long format: covariate x {before, after} per design, optionally with the
// evaluated interaction terms.
inline std::vector<SummaryRow> summary_rows(const std::vector<BalanceDocument>& docs, bool interactions) {
  std::vector<SummaryRow> rows;
  for (std::size_t rep = 0; rep < docs.size(); ++rep) {
    const auto& doc = docs[rep];
    std::vector<BalanceReport> designs = doc.designs;
    std::sort(designs.begin(), designs.end(), [](const auto& a, const auto& b) { return a.design < b.design; });
    for (const auto& r : designs) {
      const std::string who =
          r.design.source == ScoreSource::designer ? "M" + std::to_string(r.design.designer_id) : to_string(r.design.source);
      const std::string method = to_string(r.design.method);
      for (const auto& [col, d] : r.per_covariate) {
        const auto k = static_cast<std::size_t>(col);
        rows.push_back({rep + 1, doc.covariates.at(k), "before", method, who, doc.before.per_covariate.at(col), false, k});
        rows.push_back({rep + 1, doc.covariates.at(k), "after", method, who, d, false, k});
      }
      if (!interactions) continue;
      std::size_t t = doc.covariates.size();
      for (const auto& [name, d] : r.evaluated_terms) {
        const auto before = doc.before.evaluated_terms.find(name);
        if (before != doc.before.evaluated_terms.end())
          rows.push_back({rep + 1, name, "before", method, who, before->second, true, t});
        rows.push_back({rep + 1, name, "after", method, who, d, true, t});
        ++t;
      }
    }
  }
  return rows;
}

inline void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << "replicate,covariate,stage,method,designer,d_j\n";
  for (const auto& r : rows)
    out << r.replicate << ',' << r.covariate << ',' << r.stage << ',' << r.method << ',' << r.designer << ','
        << format_double(r.d) << '\n';
}

}  // namespace distdesign
