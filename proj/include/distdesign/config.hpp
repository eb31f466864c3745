#pragma once

// Run configuration: a key=value file ('#' comments) with command-line
// overrides applied on top. Every run writes the resolved values back out.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "distdesign/json_io.hpp"
#include "distdesign/orchestrator.hpp"
#include "distdesign/simgen.hpp"

namespace distdesign {

enum class RunMode { distributed, all_data, oracle };

inline std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::all_data: return "all-data";
    case RunMode::oracle: return "oracle";
    default: return "distributed";
  }
}

inline RunMode run_mode_from_string(const std::string& s) {
  if (s == "distributed") return RunMode::distributed;
  if (s == "all-data") return RunMode::all_data;
  if (s == "oracle") return RunMode::oracle;
  throw UsageError("unknown mode '" + s + "'");
}

inline constexpr int kDefaultWorkerPort = 7461;

// Port for worker addresses given without one.
inline int default_worker_port() {
  if (const char* env = std::getenv("DISTDESIGN_WORKER_PORT"); env && *env) {
    try {
      std::size_t used = 0;
      const int port = std::stoi(env, &used);
      if (used == std::string(env).size() && port >= 0 && port <= 65535) return port;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("DISTDESIGN_WORKER_PORT='") + env + "' is not a port number");
  }
  return kDefaultWorkerPort;
}

inline std::string with_default_port(const std::string& address) {
  if (address.find(':') != std::string::npos) return address;
  return (address.empty() ? std::string("127.0.0.1") : address) + ":" + std::to_string(default_worker_port());
}

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t n = 10000;
  std::size_t p = 120;
  int m = 6;
  Setting setting = Setting::one;
  int replicates = 1;
  RunMode mode = RunMode::distributed;
  Transport transport = Transport::in_process;
  Criterion criterion = Criterion::d_max;
  int all_data_interaction_cap = 200;
  long long timeout_ms = 6LL * 3600 * 1000;
  DesignerConfig designer;
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError(key + ": expected true/false, got '" + v + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  if constexpr (std::is_unsigned_v<T>)
    if (v.find('-') != std::string::npos) throw UsageError(key + ": expected a non-negative integer, got '" + v + "'");
  in >> out;
  if (in.fail() || !in.eof()) throw UsageError(key + ": cannot parse '" + v + "'");
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

struct ConfigKey {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Shortest text that reads back to the same double.
inline std::string text_of(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
template <class T>
std::string text_of(T v) {
  return std::to_string(v);
}

inline const std::map<std::string, ConfigKey>& config_keys() {
  using C = RunConfig;
  static const std::map<std::string, ConfigKey> keys = [] {
    std::map<std::string, ConfigKey> k;
    auto number = [&k](const std::string& name, auto C::*field) {
      k[name] = {[name, field](C& c, const std::string& v) {
                   c.*field = parse_number<std::remove_reference_t<decltype(c.*field)>>(name, v);
                 },
                 [field](const C& c) { return text_of(c.*field); }};
    };
    auto designer = [&k](const std::string& name, auto setter, auto getter) {
      k[name] = {[name, setter](C& c, const std::string& v) { setter(c.designer, name, v); },
                 [getter](const C& c) { return getter(c.designer); }};
    };
    number("seed", &C::seed);
    number("n", &C::n);
    number("p", &C::p);
    number("m", &C::m);
    number("replicates", &C::replicates);
    number("all_data_interaction_cap", &C::all_data_interaction_cap);
    number("timeout_ms", &C::timeout_ms);
    k["setting"] = {[](C& c, const std::string& v) { c.setting = setting_from_string(v); },
                    [](const C& c) { return to_string(c.setting); }};
    k["mode"] = {[](C& c, const std::string& v) { c.mode = run_mode_from_string(v); },
                 [](const C& c) { return to_string(c.mode); }};
    k["transport"] = {[](C& c, const std::string& v) { c.transport = transport_from_string(v); },
                      [](const C& c) { return to_string(c.transport); }};
    k["criterion"] = {[](C& c, const std::string& v) { c.criterion = criterion_from_string(v); },
                      [](const C& c) { return to_string(c.criterion); }};

    using D = DesignerConfig;
    designer(
        "methods",
        [](D& d, const std::string&, const std::string& v) {
          d.methods.clear();
          for (const auto& m : split_list(v)) {
            try {
              d.methods.push_back(design_method_from_string(m));
            } catch (const Error& e) {
              throw UsageError(e.what());
            }
          }
        },
        [](const D& d) {
          std::string s;
          for (auto m : d.methods) s += (s.empty() ? "" : ",") + to_string(m);
          return s;
        });
    designer(
        "model", [](D& d, const std::string&, const std::string& v) { d.propensity.model = model_kind_from_string(v); },
        [](const D& d) { return to_string(d.propensity.model); });
    designer(
        "squares", [](D& d, const std::string& n, const std::string& v) { d.propensity.squares = parse_bool(n, v); },
        [](const D& d) { return std::string(d.propensity.squares ? "true" : "false"); });
    designer(
        "interactions",
        [](D& d, const std::string& n, const std::string& v) { d.propensity.interactions = parse_bool(n, v); },
        [](const D& d) { return std::string(d.propensity.interactions ? "true" : "false"); });
    designer(
        "interaction_cap",
        [](D& d, const std::string& n, const std::string& v) { d.propensity.interaction_cap = parse_number<int>(n, v); },
        [](const D& d) { return text_of(d.propensity.interaction_cap); });
    designer(
        "n_lambda",
        [](D& d, const std::string& n, const std::string& v) { d.propensity.lasso.n_lambda = parse_number<int>(n, v); },
        [](const D& d) { return text_of(d.propensity.lasso.n_lambda); });
    designer(
        "path_ratio",
        [](D& d, const std::string& n, const std::string& v) { d.propensity.lasso.path_ratio = parse_number<double>(n, v); },
        [](const D& d) { return text_of(d.propensity.lasso.path_ratio); });
    designer(
        "cv_folds",
        [](D& d, const std::string& n, const std::string& v) { d.propensity.lasso.cv_folds = parse_number<int>(n, v); },
        [](const D& d) { return text_of(d.propensity.lasso.cv_folds); });
    designer(
        "cv_patience",
        [](D& d, const std::string& n, const std::string& v) { d.propensity.lasso.cv_patience = parse_number<int>(n, v); },
        [](const D& d) { return text_of(d.propensity.lasso.cv_patience); });
    designer(
        "caliper_multiplier",
        [](D& d, const std::string& n, const std::string& v) { d.caliper_multiplier = parse_number<double>(n, v); },
        [](const D& d) { return text_of(d.caliper_multiplier); });
    designer(
        "caliper_inflation",
        [](D& d, const std::string& n, const std::string& v) { d.caliper_inflation = parse_number<double>(n, v); },
        [](const D& d) { return text_of(d.caliper_inflation); });
    designer(
        "p_threshold",
        [](D& d, const std::string& n, const std::string& v) { d.subclass.p_threshold = parse_number<double>(n, v); },
        [](const D& d) { return text_of(d.subclass.p_threshold); });
    designer(
        "min_subclass",
        [](D& d, const std::string& n, const std::string& v) {
          d.subclass.min_subclass = parse_number<std::size_t>(n, v);
        },
        [](const D& d) { return text_of(d.subclass.min_subclass); });
    designer(
        "min_group",
        [](D& d, const std::string& n, const std::string& v) { d.subclass.min_group = parse_number<std::size_t>(n, v); },
        [](const D& d) { return text_of(d.subclass.min_group); });
    designer(
        "balance_threshold",
        [](D& d, const std::string& n, const std::string& v) { d.balance.threshold = parse_number<double>(n, v); },
        [](const D& d) { return text_of(d.balance.threshold); });
    designer(
        "weighting",
        [](D& d, const std::string&, const std::string& v) { d.balance.weighting = subclass_weighting_from_string(v); },
        [](const D& d) { return to_string(d.balance.weighting); });
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw UsageError("unknown config key '" + key + "'");
  try {
    it->second.set(cfg, detail::trim(value));
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(key + ": " + e.what());
  }
}

// "key=value" as given on the command line.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("override '" + assignment + "' is not key=value");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_override(cfg, line);
    } catch (const UsageError& e) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void validate_run_config(const RunConfig& cfg) {
  if (cfg.n < 2) throw UsageError("n must be at least 2");
  if (cfg.p < 1) throw UsageError("p must be at least 1");
  if (cfg.m < 1) throw UsageError("m must be at least 1");
  if (cfg.replicates < 1) throw UsageError("replicates must be at least 1");
  if (cfg.timeout_ms < 1) throw UsageError("timeout_ms must be positive");
  validate_designer_config(cfg.designer);
}

// Designer settings with the run seed folded in.
inline DesignerConfig resolved_designer(const RunConfig& cfg) {
  DesignerConfig d = cfg.designer;
  d.propensity.seed = cfg.seed;
  return d;
}

inline Json config_manifest(const RunConfig& cfg) {
  Json j = Json::object();
  for (const auto& [key, k] : detail::config_keys()) j[key] = k.get(cfg);
  return j;
}

inline std::string config_file_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, k] : detail::config_keys()) out += key + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace distdesign
