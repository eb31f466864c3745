#pragma once

// Coordinator/designer messages as newline-delimited JSON. Decoding is
// strict: unknown keys, missing keys, wrong types and length mismatches are
// protocol errors.

#include <cstdint>
#include <initializer_list>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "distdesign/json_io.hpp"
#include "distdesign/pipeline.hpp"

namespace distdesign {

inline constexpr int kProtocolVersion = 1;
inline constexpr int kCoordinator = 0;

enum class MsgType {
  hello,
  assign_block,
  conditional_scores,
  scores_broadcast,
  candidate_design,
  eval_request,
  eval_report,
  selection,
  shutdown,
};

inline std::string to_string(MsgType t) {
  switch (t) {
    case MsgType::hello: return "HELLO";
    case MsgType::assign_block: return "ASSIGN_BLOCK";
    case MsgType::conditional_scores: return "CONDITIONAL_SCORES";
    case MsgType::scores_broadcast: return "SCORES_BROADCAST";
    case MsgType::candidate_design: return "CANDIDATE_DESIGN";
    case MsgType::eval_request: return "EVAL_REQUEST";
    case MsgType::eval_report: return "EVAL_REPORT";
    case MsgType::selection: return "SELECTION";
    case MsgType::shutdown: return "SHUTDOWN";
  }
  return "HELLO";
}

inline MsgType msg_type_from_string(const std::string& s) {
  for (int t = 0; t <= static_cast<int>(MsgType::shutdown); ++t)
    if (to_string(static_cast<MsgType>(t)) == s) return static_cast<MsgType>(t);
  throw ProtocolError("unknown msg_type '" + s + "'");
}

struct Hello {
  std::string role;  // "worker" or "coordinator"
  bool operator==(const Hello&) const = default;
};

// Step 1: one designer's covariate columns (column-major) and settings.
struct AssignBlock {
  int designer_id = 1;
  int m_designers = 1;
  std::vector<int> columns;
  std::vector<std::string> names;
  std::vector<CovariateKind> kinds;
  std::size_t n_subjects = 0;
  std::vector<double> values;
  std::vector<int> treatment;
  DesignerConfig config;
  bool operator==(const AssignBlock&) const = default;
};

struct ConditionalScores {
  int designer_id = 1;
  ModelKind model = ModelKind::lasso_logistic;
  std::vector<double> values;
  bool operator==(const ConditionalScores&) const = default;
};

// Step 2 relay: every other designer's conditional scores.
struct ScoresBroadcast {
  std::vector<ConditionalScores> scores;
  bool operator==(const ScoresBroadcast&) const = default;
};

struct CandidateDesign {
  DesignVector design;
  bool operator==(const CandidateDesign&) const = default;
};

struct EvalRequest {
  std::vector<DesignVector> designs;
  bool operator==(const EvalRequest&) const = default;
};

struct EvalReport {
  PartialBalance partial;
  bool operator==(const EvalReport&) const = default;
};

struct SelectionRow {
  DesignRef design;
  double d_max = 0.0;
  int d_plus = 0;
  std::size_t n_retained = 0;
  bool operator==(const SelectionRow&) const = default;
};

struct Selection {
  Criterion criterion = Criterion::d_max;
  DesignRef winner;
  std::vector<SelectionRow> table;
  bool operator==(const Selection&) const = default;
};

struct Shutdown {
  std::string reason;
  bool operator==(const Shutdown&) const = default;
};

// Alternative order follows MsgType.
using Payload = std::variant<Hello, AssignBlock, ConditionalScores, ScoresBroadcast, CandidateDesign, EvalRequest,
                             EvalReport, Selection, Shutdown>;

struct Message {
  int version = kProtocolVersion;
  int sender = kCoordinator;     // 0 = coordinator, otherwise designer id
  int recipient = kCoordinator;
  Payload payload;

  MsgType type() const { return static_cast<MsgType>(payload.index()); }
  bool operator==(const Message&) const = default;
};

inline Selection selection_message(const SelectionResult& s) {
  Selection out;
  out.criterion = s.criterion;
  out.winner = s.winner;
  for (const auto& r : s.table) out.table.push_back(SelectionRow{r.design, r.d_max, r.d_plus, r.n_retained});
  return out;
}

// Design parameter names a message may carry.
inline const std::set<std::string>& design_param_names() {
  static const std::set<std::string> names{"caliper_inflation", "caliper_multiplier", "caliper_width",
                                           "logit_scale",       "min_caliper",        "min_group",
                                           "min_subclass",      "n_trimmed",          "p_threshold",
                                           "total_distance"};
  return names;
}

namespace detail {

inline std::string participant(int id) { return id == kCoordinator ? "coordinator" : std::to_string(id); }

// Object view that remembers which keys were read and rejects the rest.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ProtocolError(where_ + " must be a JSON object");
  }

  const Json& at(const std::string& key) {
    const auto it = j_.find(key);
    if (it == j_.end()) throw ProtocolError(where_ + " lacks '" + key + "'");
    seen_.insert(key);
    return *it;
  }

  std::int64_t integer(const std::string& key) {
    const auto& v = at(key);
    if (!v.is_number_integer()) throw ProtocolError(where_ + "." + key + " must be an integer");
    return v.get<std::int64_t>();
  }

  int int32(const std::string& key) {
    const auto v = integer(key);
    if (v < INT32_MIN || v > INT32_MAX) throw ProtocolError(where_ + "." + key + " is out of range");
    return static_cast<int>(v);
  }

  std::size_t count(const std::string& key) {
    const auto v = integer(key);
    if (v < 0) throw ProtocolError(where_ + "." + key + " must be nonnegative");
    return static_cast<std::size_t>(v);
  }

  std::uint64_t uint64(const std::string& key) {
    const auto& v = at(key);
    if (!v.is_number_unsigned()) throw ProtocolError(where_ + "." + key + " must be an unsigned integer");
    return v.get<std::uint64_t>();
  }

  double real(const std::string& key) {
    const auto& v = at(key);
    if (!v.is_number()) throw ProtocolError(where_ + "." + key + " must be a number");
    return v.get<double>();
  }

  bool boolean(const std::string& key) {
    const auto& v = at(key);
    if (!v.is_boolean()) throw ProtocolError(where_ + "." + key + " must be a boolean");
    return v.get<bool>();
  }

  std::string string(const std::string& key) {
    const auto& v = at(key);
    if (!v.is_string()) throw ProtocolError(where_ + "." + key + " must be a string");
    return v.get<std::string>();
  }

  const Json& array(const std::string& key) {
    const auto& v = at(key);
    if (!v.is_array()) throw ProtocolError(where_ + "." + key + " must be an array");
    return v;
  }

  std::vector<double> reals(const std::string& key) {
    std::vector<double> out;
    for (const auto& v : array(key)) {
      if (!v.is_number()) throw ProtocolError(where_ + "." + key + " must hold numbers");
      out.push_back(v.get<double>());
    }
    return out;
  }

  std::vector<int> ints(const std::string& key) {
    std::vector<int> out;
    for (const auto& v : array(key)) {
      if (!v.is_number_integer()) throw ProtocolError(where_ + "." + key + " must hold integers");
      const auto x = v.get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX) throw ProtocolError(where_ + "." + key + " holds an out-of-range value");
      out.push_back(static_cast<int>(x));
    }
    return out;
  }

  std::vector<std::string> strings(const std::string& key) {
    std::vector<std::string> out;
    for (const auto& v : array(key)) {
      if (!v.is_string()) throw ProtocolError(where_ + "." + key + " must hold strings");
      out.push_back(v.get<std::string>());
    }
    return out;
  }

  const std::string& where() const { return where_; }

  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ProtocolError(where_ + " has unknown key '" + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

// Domain parsers throw usage/data errors; on the wire those are protocol errors.
template <class F>
auto wire(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ProtocolError&) {
    throw;
  } catch (const Error& e) {
    throw ProtocolError(where + ": " + e.what());
  }
}

inline void expect_length(std::size_t got, std::size_t want, const std::string& what) {
  if (got != want)
    throw ProtocolError(what + " has " + std::to_string(got) + " entries but declares " + std::to_string(want));
}

inline Json config_to_json(const DesignerConfig& c) {
  std::vector<std::string> methods;
  for (auto m : c.methods) methods.push_back(to_string(m));
  const auto& l = c.propensity.lasso;
  return {{"model", to_string(c.propensity.model)},
          {"squares", c.propensity.squares},
          {"interactions", c.propensity.interactions},
          {"interaction_cap", c.propensity.interaction_cap},
          {"seed", c.propensity.seed},
          {"n_lambda", l.n_lambda},
          {"path_ratio", l.path_ratio},
          {"cv_folds", l.cv_folds},
          {"cv_patience", l.cv_patience},
          {"cv_seed", l.seed},
          {"max_iter", l.max_iter},
          {"tol", l.tol},
          {"kkt_target", l.kkt_target},
          {"truncate_path", l.truncate_path},
          {"methods", methods},
          {"caliper_multiplier", c.caliper_multiplier},
          {"caliper_inflation", c.caliper_inflation},
          {"p_threshold", c.subclass.p_threshold},
          {"min_subclass", c.subclass.min_subclass},
          {"min_group", c.subclass.min_group},
          {"logit_scale", c.subclass.logit_scale},
          {"balance_threshold", c.balance.threshold},
          {"weighting", to_string(c.balance.weighting)}};
}

inline DesignerConfig config_from_json(const Json& j) {
  StrictObject o(j, "config");
  DesignerConfig c;
  wire("config", [&] {
    c.propensity.model = model_kind_from_string(o.string("model"));
    c.propensity.squares = o.boolean("squares");
    c.propensity.interactions = o.boolean("interactions");
    c.propensity.interaction_cap = o.int32("interaction_cap");
    c.propensity.seed = o.uint64("seed");
    auto& l = c.propensity.lasso;
    l.n_lambda = o.int32("n_lambda");
    l.path_ratio = o.real("path_ratio");
    l.cv_folds = o.int32("cv_folds");
    l.cv_patience = o.int32("cv_patience");
    l.seed = o.uint64("cv_seed");
    l.max_iter = o.int32("max_iter");
    l.tol = o.real("tol");
    l.kkt_target = o.real("kkt_target");
    l.truncate_path = o.boolean("truncate_path");
    c.methods.clear();
    for (const auto& m : o.strings("methods")) c.methods.push_back(design_method_from_string(m));
    c.caliper_multiplier = o.real("caliper_multiplier");
    c.caliper_inflation = o.real("caliper_inflation");
    c.subclass.p_threshold = o.real("p_threshold");
    c.subclass.min_subclass = o.count("min_subclass");
    c.subclass.min_group = o.count("min_group");
    c.subclass.logit_scale = o.boolean("logit_scale");
    c.balance.threshold = o.real("balance_threshold");
    c.balance.weighting = subclass_weighting_from_string(o.string("weighting"));
    return 0;
  });
  o.done();
  return c;
}

inline Json ref_to_json(const DesignRef& r) {
  return {{"source", to_string(r.source)}, {"designer_id", r.designer_id}, {"method", to_string(r.method)}};
}

inline DesignRef ref_from(StrictObject& o) {
  return wire(o.where(), [&] {
    return DesignRef{score_source_from_string(o.string("source")), o.int32("designer_id"),
                     design_method_from_string(o.string("method"))};
  });
}

inline Json design_to_json(const DesignVector& d) {
  Json params = Json::object();
  for (const auto& [k, v] : d.params) params[k] = v;
  Json j = ref_to_json(d.ref);
  j["kind"] = to_string(d.kind);
  j["n"] = d.assignments.size();
  j["assignments"] = d.assignments;
  j["params"] = params;
  return j;
}

inline DesignVector design_from_json(const Json& j) {
  StrictObject o(j, "design");
  DesignVector d;
  d.ref = ref_from(o);
  d.kind = wire("design", [&] { return design_kind_from_string(o.string("kind")); });
  const auto n = o.count("n");
  d.assignments = o.ints("assignments");
  expect_length(d.assignments.size(), n, "design assignments");
  for (int a : d.assignments)
    if (a < 0) throw ProtocolError("design assignments must be nonnegative");
  const auto& params = o.at("params");
  if (!params.is_object()) throw ProtocolError("design.params must be an object");
  for (auto it = params.begin(); it != params.end(); ++it) {
    if (!design_param_names().count(it.key())) throw ProtocolError("design.params has unknown key '" + it.key() + "'");
    if (!it.value().is_number()) throw ProtocolError("design.params." + it.key() + " must be a number");
    d.params[it.key()] = it.value().get<double>();
  }
  o.done();
  return d;
}

inline Json scores_to_json(const ConditionalScores& s) {
  return {{"designer_id", s.designer_id}, {"model", to_string(s.model)}, {"n", s.values.size()}, {"values", s.values}};
}

inline ConditionalScores scores_from_json(const Json& j) {
  StrictObject o(j, "scores");
  ConditionalScores s;
  s.designer_id = o.int32("designer_id");
  s.model = wire("scores", [&] { return model_kind_from_string(o.string("model")); });
  const auto n = o.count("n");
  s.values = o.reals("values");
  expect_length(s.values.size(), n, "score values");
  o.done();
  return s;
}

inline Json payload_to_json(const Payload& p) {
  return std::visit(
      [](const auto& v) -> Json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Hello>) {
          return {{"role", v.role}};
        } else if constexpr (std::is_same_v<T, AssignBlock>) {
          std::vector<std::string> kinds;
          for (auto k : v.kinds) kinds.push_back(to_string(k));
          return {{"designer_id", v.designer_id}, {"m", v.m_designers},          {"columns", v.columns},
                  {"names", v.names},             {"kinds", kinds},              {"n", v.n_subjects},
                  {"values", v.values},           {"treatment", v.treatment},    {"config", config_to_json(v.config)}};
        } else if constexpr (std::is_same_v<T, ConditionalScores>) {
          return scores_to_json(v);
        } else if constexpr (std::is_same_v<T, ScoresBroadcast>) {
          Json arr = Json::array();
          for (const auto& s : v.scores) arr.push_back(scores_to_json(s));
          return {{"scores", arr}};
        } else if constexpr (std::is_same_v<T, CandidateDesign>) {
          return {{"design", design_to_json(v.design)}};
        } else if constexpr (std::is_same_v<T, EvalRequest>) {
          Json arr = Json::array();
          for (const auto& d : v.designs) arr.push_back(design_to_json(d));
          return {{"designs", arr}};
        } else if constexpr (std::is_same_v<T, EvalReport>) {
          const auto& pb = v.partial;
          std::vector<int> degenerate(pb.degenerate.begin(), pb.degenerate.end());
          Json terms = Json::array();
          for (const auto& t : pb.terms) terms.push_back({{"name", t.name}, {"d", t.d}, {"degenerate", t.degenerate}});
          return {{"design", ref_to_json(pb.design)}, {"block_id", pb.block_id}, {"n_retained", pb.n_retained},
                  {"columns", pb.columns},            {"d", pb.d},               {"degenerate", degenerate},
                  {"terms", terms}};
        } else if constexpr (std::is_same_v<T, Selection>) {
          Json rows = Json::array();
          for (const auto& r : v.table) {
            Json row = ref_to_json(r.design);
            row["d_max"] = r.d_max;
            row["d_plus"] = r.d_plus;
            row["n_retained"] = r.n_retained;
            rows.push_back(row);
          }
          return {{"criterion", to_string(v.criterion)}, {"winner", ref_to_json(v.winner)}, {"table", rows}};
        } else {
          return {{"reason", v.reason}};
        }
      },
      p);
}

inline Payload payload_from_json(MsgType type, const Json& j) {
  StrictObject o(j, "payload");
  Payload out;
  switch (type) {
    case MsgType::hello:
      out = Hello{o.string("role")};
      break;
    case MsgType::assign_block: {
      AssignBlock b;
      b.designer_id = o.int32("designer_id");
      b.m_designers = o.int32("m");
      b.columns = o.ints("columns");
      b.names = o.strings("names");
      wire("payload", [&] {
        for (const auto& k : o.strings("kinds")) b.kinds.push_back(covariate_kind_from_string(k));
        return 0;
      });
      b.n_subjects = o.count("n");
      b.values = o.reals("values");
      b.treatment = o.ints("treatment");
      b.config = config_from_json(o.at("config"));
      expect_length(b.names.size(), b.columns.size(), "block names");
      expect_length(b.kinds.size(), b.columns.size(), "block kinds");
      expect_length(b.treatment.size(), b.n_subjects, "block treatment");
      expect_length(b.values.size(), b.n_subjects * b.columns.size(), "block values");
      out = std::move(b);
      break;
    }
    case MsgType::conditional_scores: {
      ConditionalScores s;
      s.designer_id = o.int32("designer_id");
      s.model = wire("payload", [&] { return model_kind_from_string(o.string("model")); });
      const auto n = o.count("n");
      s.values = o.reals("values");
      expect_length(s.values.size(), n, "score values");
      out = std::move(s);
      break;
    }
    case MsgType::scores_broadcast: {
      ScoresBroadcast b;
      for (const auto& s : o.array("scores")) b.scores.push_back(scores_from_json(s));
      out = std::move(b);
      break;
    }
    case MsgType::candidate_design:
      out = CandidateDesign{design_from_json(o.at("design"))};
      break;
    case MsgType::eval_request: {
      EvalRequest r;
      for (const auto& d : o.array("designs")) r.designs.push_back(design_from_json(d));
      out = std::move(r);
      break;
    }
    case MsgType::eval_report: {
      EvalReport r;
      auto& pb = r.partial;
      StrictObject ref(o.at("design"), "payload.design");
      pb.design = ref_from(ref);
      ref.done();
      pb.block_id = o.int32("block_id");
      pb.n_retained = o.count("n_retained");
      pb.columns = o.ints("columns");
      pb.d = o.reals("d");
      for (int v : o.ints("degenerate")) {
        if (v != 0 && v != 1) throw ProtocolError("payload.degenerate must hold 0 or 1");
        pb.degenerate.push_back(static_cast<std::uint8_t>(v));
      }
      for (const auto& t : o.array("terms")) {
        StrictObject to(t, "payload.terms");
        pb.terms.push_back(TermDiff{to.string("name"), to.real("d"), to.boolean("degenerate")});
        to.done();
      }
      expect_length(pb.d.size(), pb.columns.size(), "balance values");
      expect_length(pb.degenerate.size(), pb.columns.size(), "degenerate flags");
      out = std::move(r);
      break;
    }
    case MsgType::selection: {
      Selection s;
      s.criterion = wire("payload", [&] { return criterion_from_string(o.string("criterion")); });
      StrictObject w(o.at("winner"), "payload.winner");
      s.winner = ref_from(w);
      w.done();
      for (const auto& row : o.array("table")) {
        StrictObject ro(row, "payload.table");
        SelectionRow r;
        r.design = ref_from(ro);
        r.d_max = ro.real("d_max");
        r.d_plus = ro.int32("d_plus");
        r.n_retained = ro.count("n_retained");
        ro.done();
        s.table.push_back(r);
      }
      out = std::move(s);
      break;
    }
    case MsgType::shutdown:
      out = Shutdown{o.string("reason")};
      break;
  }
  o.done();
  return out;
}

inline int participant_from_json(const Json& j, const char* field) {
  if (j.is_string() && j.get<std::string>() == "coordinator") return kCoordinator;
  if (j.is_number_integer()) {
    const auto v = j.get<std::int64_t>();
    if (v >= 1 && v <= INT32_MAX) return static_cast<int>(v);
  }
  throw ProtocolError(std::string(field) + " must be \"coordinator\" or a positive designer id");
}

}  // namespace detail

// One line, newline-terminated.
inline std::string encode_message(const Message& m) {
  Json j = {{"version", m.version},
            {"msg_type", to_string(m.type())},
            {"payload", detail::payload_to_json(m.payload)}};
  j["sender"] = m.sender == kCoordinator ? Json("coordinator") : Json(m.sender);
  j["recipient"] = m.recipient == kCoordinator ? Json("coordinator") : Json(m.recipient);
  try {
    return dump_json(j) + "\n";
  } catch (const Error& e) {
    throw ProtocolError(std::string("cannot encode ") + to_string(m.type()) + ": " + e.what());
  } catch (const Json::exception& e) {
    throw ProtocolError(std::string("cannot encode ") + to_string(m.type()) + ": " + e.what());
  }
}

inline Message decode_message(std::string_view line) {
  if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
  Json j;
  try {
    j = Json::parse(line);
  } catch (const Json::exception& e) {
    throw ProtocolError(std::string("malformed message: ") + e.what());
  }
  detail::StrictObject o(j, "message");
  const auto version = o.integer("version");
  if (version != kProtocolVersion)
    throw ProtocolError("protocol version " + std::to_string(version) + " does not match " +
                        std::to_string(kProtocolVersion));
  Message m;
  const auto type = msg_type_from_string(o.string("msg_type"));
  m.sender = detail::participant_from_json(o.at("sender"), "sender");
  m.recipient = detail::participant_from_json(o.at("recipient"), "recipient");
  try {
    m.payload = detail::payload_from_json(type, o.at("payload"));
  } catch (const Json::exception& e) {
    throw ProtocolError(to_string(type) + " payload: " + e.what());
  }
  o.done();
  return m;
}

// Step-1 message for one block.
inline AssignBlock assign_block_message(const CovariateBlock& block, const std::vector<std::string>& names,
                                        int m_designers, const DesignerConfig& cfg) {
  AssignBlock a;
  a.designer_id = block.designer_id;
  a.m_designers = m_designers;
  a.columns = block.columns;
  a.names = names;
  a.kinds = block.kinds;
  a.n_subjects = static_cast<std::size_t>(block.matrix.rows());
  a.values.assign(block.matrix.data(), block.matrix.data() + block.matrix.size());
  a.treatment.assign(block.treatment.begin(), block.treatment.end());
  a.config = cfg;
  return a;
}

inline CovariateBlock block_from_message(const AssignBlock& a) {
  CovariateBlock b;
  b.designer_id = a.designer_id;
  b.columns = a.columns;
  b.kinds = a.kinds;
  const auto n = static_cast<Eigen::Index>(a.n_subjects);
  b.matrix = Eigen::Map<const Eigen::MatrixXd>(a.values.data(), n, static_cast<Eigen::Index>(a.columns.size()));
  for (int v : a.treatment) {
    if (v != 0 && v != 1) throw ProtocolError("block treatment must be 0/1");
    b.treatment.push_back(v);
  }
  return b;
}

}  // namespace distdesign
