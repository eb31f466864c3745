#pragma once

// JSON text with doubles at 17 significant digits.

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "distdesign/error.hpp"
#include "distdesign/format.hpp"

namespace distdesign {

using Json = nlohmann::json;

namespace detail {

inline void dump_json_to(const Json& j, std::string& out) {
  switch (j.type()) {
    case Json::value_t::object: {
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ',';
        first = false;
        out += Json(it.key()).dump();
        out += ':';
        dump_json_to(it.value(), out);
      }
      out += '}';
      break;
    }
    case Json::value_t::array: {
      out += '[';
      bool first = true;
      for (const auto& v : j) {
        if (!first) out += ',';
        first = false;
        dump_json_to(v, out);
      }
      out += ']';
      break;
    }
    case Json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) throw DataError("cannot write non-finite number to JSON");
      // Keep a float marker so integral values (and -0) parse back as floats.
      const std::string text = format_double(v);
      out += text;
      if (text.find_first_of(".e") == std::string::npos) out += ".0";
      break;
    }
    default:
      out += j.dump();
  }
}

}  // namespace detail

inline std::string dump_json(const Json& j) {
  std::string out;
  detail::dump_json_to(j, out);
  return out;
}

inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw DataError("malformed JSON in " + what + ": " + e.what());
  }
}

}  // namespace distdesign
