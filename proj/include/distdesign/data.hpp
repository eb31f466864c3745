#pragma once

// Dataset ingestion, standardization and covariate partitioning.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "distdesign/error.hpp"
#include "distdesign/format.hpp"

namespace distdesign {

enum class CovariateKind { continuous, binary, categorical_indicator };

inline bool uses_binary_scale(CovariateKind k) { return k != CovariateKind::continuous; }

inline std::string to_string(CovariateKind k) {
  switch (k) {
    case CovariateKind::continuous: return "continuous";
    case CovariateKind::binary: return "binary";
    case CovariateKind::categorical_indicator: return "categorical-indicator";
  }
  return "continuous";
}

inline CovariateKind covariate_kind_from_string(std::string_view s) {
  if (s == "continuous") return CovariateKind::continuous;
  if (s == "binary") return CovariateKind::binary;
  if (s == "categorical-indicator") return CovariateKind::categorical_indicator;
  throw DataError("unknown covariate kind '" + std::string(s) + "'");
}

struct CovariateMeta {
  std::string name;
  CovariateKind kind = CovariateKind::continuous;
};

using Treatment = std::vector<int>;
// Retention flags, one per subject (1 = retained).
using Mask = std::vector<std::uint8_t>;

inline std::size_t count_treated(const Treatment& w) {
  return static_cast<std::size_t>(std::count(w.begin(), w.end(), 1));
}

class Dataset {
 public:
  Dataset(Eigen::MatrixXd covariates, Treatment treatment, std::vector<CovariateMeta> meta = {})
      : x_(std::move(covariates)), w_(std::move(treatment)), meta_(std::move(meta)) {
    if (x_.cols() < 1) throw DataError("dataset needs at least one covariate");
    if (x_.rows() < 1) throw DataError("dataset is empty");
    if (static_cast<Eigen::Index>(w_.size()) != x_.rows())
      throw DataError("treatment length " + std::to_string(w_.size()) + " does not match " +
                      std::to_string(x_.rows()) + " covariate rows");
    bool any_treated = false, any_control = false;
    for (std::size_t i = 0; i < w_.size(); ++i) {
      if (w_[i] != 0 && w_[i] != 1)
        throw DataError("treatment value at row " + std::to_string(i + 1) + " is not 0/1");
      (w_[i] == 1 ? any_treated : any_control) = true;
    }
    if (!any_treated || !any_control)
      throw DataError("treatment must contain both treated (1) and control (0) subjects");
    if (!x_.allFinite()) throw DataError("covariates contain non-finite values");
    if (meta_.empty()) {
      meta_.reserve(static_cast<std::size_t>(x_.cols()));
      for (Eigen::Index j = 0; j < x_.cols(); ++j)
        meta_.push_back({"X" + std::to_string(j + 1), CovariateKind::continuous});
    }
    if (static_cast<Eigen::Index>(meta_.size()) != x_.cols())
      throw DataError("covariate metadata does not match column count");
  }

  std::size_t n_subjects() const { return static_cast<std::size_t>(x_.rows()); }
  std::size_t n_covariates() const { return static_cast<std::size_t>(x_.cols()); }
  const Eigen::MatrixXd& covariates() const { return x_; }
  const Treatment& treatment() const { return w_; }
  const std::vector<CovariateMeta>& meta() const { return meta_; }

  std::vector<CovariateKind> kinds() const {
    std::vector<CovariateKind> k;
    k.reserve(meta_.size());
    for (const auto& m : meta_) k.push_back(m.kind);
    return k;
  }

 private:
  Eigen::MatrixXd x_;
  Treatment w_;
  std::vector<CovariateMeta> meta_;
};

struct DatasetSchema {
  std::string treatment_column = "W";
  std::set<std::string> categorical;
  // Columns dropped at ingestion (identifiers, outcomes shipped in the same file).
  std::set<std::string> ignored;
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    std::string_view field = line.substr(start, pos == std::string_view::npos ? pos : pos - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r'))
      field.remove_suffix(1);
    if (field.size() >= 2 && field.front() == '"' && field.back() == '"')
      field = field.substr(1, field.size() - 2);
    out.emplace_back(field);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

inline bool is_missing(std::string_view s) {
  return s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "." || s == "?";
}

}  // namespace detail

inline Dataset parse_dataset_csv(std::istream& in, const DatasetSchema& schema,
                                 const std::string& source = "<csv>") {
  std::string line;
  if (!std::getline(in, line) || line.find_first_not_of(" \t\r") == std::string::npos)
    throw DataError(source + ": empty file");
  const auto header = detail::split_csv_line(line);
  std::ptrdiff_t treat_col = -1;
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j] == schema.treatment_column) treat_col = static_cast<std::ptrdiff_t>(j);
  if (treat_col < 0)
    throw DataError(source + ": treatment column '" + schema.treatment_column + "' not found");

  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw DataError(source + ": line " + std::to_string(line_no) + " has " +
                      std::to_string(fields.size()) + " fields, header has " +
                      std::to_string(header.size()));
    for (std::size_t j = 0; j < fields.size(); ++j)
      if (!schema.ignored.contains(header[j]) && detail::is_missing(fields[j]))
        throw DataError(source + ": missing value at line " + std::to_string(line_no) +
                        ", column '" + header[j] + "'");
    rows.push_back(std::move(fields));
  }
  if (rows.empty()) throw DataError(source + ": no data rows");

  const std::size_t n = rows.size();
  Treatment w(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0;
    const auto& f = rows[i][static_cast<std::size_t>(treat_col)];
    if (!detail::parse_double(f, v) || (v != 0.0 && v != 1.0))
      throw DataError(source + ": treatment value '" + f + "' at line " + std::to_string(i + 2) +
                      " is not binary");
    w[i] = v == 1.0 ? 1 : 0;
  }

  std::vector<std::vector<double>> columns;
  std::vector<CovariateMeta> meta;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (static_cast<std::ptrdiff_t>(j) == treat_col || schema.ignored.contains(header[j])) continue;
    if (schema.categorical.contains(header[j])) {
      std::set<std::string> levels;
      for (const auto& r : rows) levels.insert(r[j]);
      for (const auto& level : levels) {
        std::vector<double> col(n);
        for (std::size_t i = 0; i < n; ++i) col[i] = rows[i][j] == level ? 1.0 : 0.0;
        columns.push_back(std::move(col));
        meta.push_back({header[j] + "=" + level, CovariateKind::categorical_indicator});
      }
      continue;
    }
    std::vector<double> col(n);
    bool binary = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (!detail::parse_double(rows[i][j], col[i]))
        throw DataError(source + ": non-numeric value '" + rows[i][j] + "' at line " +
                        std::to_string(i + 2) + ", column '" + header[j] +
                        "' (declare it categorical)");
      binary = binary && (col[i] == 0.0 || col[i] == 1.0);
    }
    columns.push_back(std::move(col));
    meta.push_back({header[j], binary ? CovariateKind::binary : CovariateKind::continuous});
  }
  if (columns.empty()) throw DataError(source + ": no covariate columns");

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j)
    for (std::size_t i = 0; i < n; ++i)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = columns[j][i];
  return Dataset(std::move(x), std::move(w), std::move(meta));
}

inline Dataset load_dataset(const std::string& path, const DatasetSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  return parse_dataset_csv(in, schema, path);
}

inline void write_dataset_csv(std::ostream& out, const Dataset& d,
                              const std::string& treatment_column = "W") {
  for (const auto& m : d.meta()) out << m.name << ',';
  out << treatment_column << '\n';
  const auto& x = d.covariates();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) out << format_double(x(i, j)) << ',';
    out << d.treatment()[static_cast<std::size_t>(i)] << '\n';
  }
}

inline void write_dataset_csv(const std::string& path, const Dataset& d,
                              const std::string& treatment_column = "W") {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset '" + path + "'");
  write_dataset_csv(out, d, treatment_column);
}

// ---------------------------------------------------------------------------
// Standardization

struct ColumnScale {
  double mean = 0.0;
  double sd = 0.0;  // 0 for constant columns
  bool constant = false;
};

struct Standardized {
  Eigen::MatrixXd values;
  std::vector<ColumnScale> scales;
};

inline ColumnScale column_scale(const Eigen::Ref<const Eigen::VectorXd>& col) {
  const auto n = col.size();
  ColumnScale s;
  s.mean = col.mean();
  if (n < 2) {
    s.constant = true;
    return s;
  }
  const double ss = (col.array() - s.mean).square().sum();
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  const double scale = std::max(1.0, col.cwiseAbs().maxCoeff());
  if (!(sd > 1e-13 * scale)) {
    s.constant = true;
    return s;
  }
  s.sd = sd;
  return s;
}

inline Eigen::MatrixXd apply_scales(const Eigen::MatrixXd& x, const std::vector<ColumnScale>& scales) {
  if (static_cast<Eigen::Index>(scales.size()) != x.cols())
    throw DataError("scale count does not match column count");
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const auto& s = scales[static_cast<std::size_t>(j)];
    out.col(j) = x.col(j).array() - s.mean;
    if (!s.constant) out.col(j) /= s.sd;
  }
  return out;
}

inline Eigen::MatrixXd invert_scales(const Eigen::MatrixXd& z, const std::vector<ColumnScale>& scales) {
  Eigen::MatrixXd out(z.rows(), z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const auto& s = scales[static_cast<std::size_t>(j)];
    out.col(j) = s.constant ? Eigen::VectorXd(z.col(j)) : Eigen::VectorXd(z.col(j) * s.sd);
    out.col(j).array() += s.mean;
  }
  return out;
}

// Constant columns are centered only and flagged.
inline Standardized standardize(const Eigen::MatrixXd& x) {
  Standardized r;
  r.scales.reserve(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index j = 0; j < x.cols(); ++j) r.scales.push_back(column_scale(x.col(j)));
  r.values = apply_scales(x, r.scales);
  return r;
}

// ---------------------------------------------------------------------------
// Partitioning (column indices are 0-based; designer ids are 1-based)

struct PartitionSpec {
  int m_designers = 1;
  std::vector<std::vector<int>> blocks;
};

inline void validate_partition(const PartitionSpec& spec, std::size_t p) {
  if (spec.m_designers < 1) throw DataError("partition needs at least one designer");
  if (static_cast<int>(spec.blocks.size()) != spec.m_designers)
    throw DataError("partition declares " + std::to_string(spec.m_designers) + " designers but has " +
                    std::to_string(spec.blocks.size()) + " blocks");
  std::vector<int> owner(p, 0);
  for (std::size_t m = 0; m < spec.blocks.size(); ++m) {
    const auto& b = spec.blocks[m];
    if (b.empty()) throw DataError("block " + std::to_string(m + 1) + " is empty");
    // A single designer may hold every column (degenerate M = 1 pipeline).
    if (spec.m_designers > 1 && b.size() >= p)
      throw DataError("block " + std::to_string(m + 1) + " holds all " + std::to_string(p) +
                      " covariates");
    for (int c : b) {
      if (c < 0 || static_cast<std::size_t>(c) >= p)
        throw DataError("block " + std::to_string(m + 1) + " references column " + std::to_string(c) +
                        " outside 0.." + std::to_string(p - 1));
      auto& o = owner[static_cast<std::size_t>(c)];
      if (o != 0)
        throw DataError("column " + std::to_string(c) + " assigned to blocks " + std::to_string(o) +
                        " and " + std::to_string(m + 1));
      o = static_cast<int>(m + 1);
    }
  }
}

inline std::vector<int> unassigned_columns(const PartitionSpec& spec, std::size_t p) {
  std::vector<std::uint8_t> used(p, 0);
  for (const auto& b : spec.blocks)
    for (int c : b)
      if (c >= 0 && static_cast<std::size_t>(c) < p) used[static_cast<std::size_t>(c)] = 1;
  std::vector<int> out;
  for (std::size_t j = 0; j < p; ++j)
    if (!used[j]) out.push_back(static_cast<int>(j));
  return out;
}

// Contiguous near-equal split of p columns over m designers.
inline PartitionSpec contiguous_partition(std::size_t p, int m) {
  if (m < 1 || static_cast<std::size_t>(m) > p) throw DataError("cannot split " + std::to_string(p) +
                                                                " columns over " + std::to_string(m) +
                                                                " designers");
  PartitionSpec spec{m, {}};
  std::size_t start = 0;
  for (int b = 0; b < m; ++b) {
    std::size_t size = p / static_cast<std::size_t>(m) + (static_cast<std::size_t>(b) < p % static_cast<std::size_t>(m) ? 1 : 0);
    std::vector<int> cols(size);
    std::iota(cols.begin(), cols.end(), static_cast<int>(start));
    spec.blocks.push_back(std::move(cols));
    start += size;
  }
  return spec;
}

struct CovariateBlock {
  int designer_id = 1;
  std::vector<int> columns;
  std::vector<CovariateKind> kinds;
  Eigen::MatrixXd matrix;
  Treatment treatment;
};

inline CovariateBlock extract_block(const Dataset& d, int designer_id, const std::vector<int>& columns) {
  CovariateBlock b;
  b.designer_id = designer_id;
  b.columns = columns;
  b.treatment = d.treatment();
  b.matrix.resize(static_cast<Eigen::Index>(d.n_subjects()), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t k = 0; k < columns.size(); ++k) {
    b.matrix.col(static_cast<Eigen::Index>(k)) = d.covariates().col(columns[k]);
    b.kinds.push_back(d.meta()[static_cast<std::size_t>(columns[k])].kind);
  }
  return b;
}

inline std::vector<CovariateBlock> partition_covariates(const Dataset& d, const PartitionSpec& spec) {
  validate_partition(spec, d.n_covariates());
  std::vector<CovariateBlock> out;
  out.reserve(spec.blocks.size());
  for (std::size_t m = 0; m < spec.blocks.size(); ++m)
    out.push_back(extract_block(d, static_cast<int>(m + 1), spec.blocks[m]));
  return out;
}

}  // namespace distdesign
