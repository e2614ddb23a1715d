#pragma once

// Minimal TOML subset sufficient for scenario configs: comments, [table]
// headers, and key = value lines where a value is a quoted string, integer,
// float, boolean, or a flat array of those. Keys are flattened to
// "table.key". Syntax errors throw ConfigError with the line number;
// semantic validation of the resulting table is the caller's job.

#include <map>
#include <string>
#include <vector>

#include "qbranch/common.hpp"

namespace qbranch::toml {

struct Value {
  enum class Kind { String, Integer, Float, Boolean, Array };
  Kind kind = Kind::String;
  std::string str;
  long long integer = 0;
  double real = 0;
  bool boolean = false;
  std::vector<Value> array;

  bool is_number() const { return kind == Kind::Integer || kind == Kind::Float; }
  double as_number() const {
    if (kind == Kind::Integer) return static_cast<double>(integer);
    if (kind == Kind::Float) return real;
    throw ConfigError("value is not a number");
  }
};

struct Table {
  std::map<std::string, Value> values;

  bool has(const std::string& key) const { return values.count(key) > 0; }
  const Value& at(const std::string& key) const { return values.at(key); }
};

Table parse(const std::string& text);
Table parse_file(const std::string& path);

}  // namespace qbranch::toml
