#include "toml_lite.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace qbranch::toml {

namespace {

[[noreturn]] void fail(size_t line, const std::string& what) {
  throw ConfigError("config line " + std::to_string(line) + ": " + what);
}

std::string strip(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// remove a trailing comment, respecting quoted strings
std::string strip_comment(const std::string& s) {
  bool in_string = false;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) in_string = !in_string;
    if (s[i] == '#' && !in_string) return s.substr(0, i);
  }
  return s;
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.')
      return false;
  return true;
}

Value parse_scalar(const std::string& raw, size_t line) {
  Value v;
  if (raw.empty()) fail(line, "empty value");
  if (raw.front() == '"') {
    if (raw.size() < 2 || raw.back() != '"') fail(line, "unterminated string");
    v.kind = Value::Kind::String;
    for (size_t i = 1; i + 1 < raw.size(); ++i) {
      if (raw[i] == '\\' && i + 2 < raw.size()) {
        ++i;
        switch (raw[i]) {
          case 'n': v.str += '\n'; break;
          case 't': v.str += '\t'; break;
          case '"': v.str += '"'; break;
          case '\\': v.str += '\\'; break;
          default: fail(line, "unsupported escape sequence");
        }
      } else if (raw[i] == '"') {
        fail(line, "unexpected quote inside string");
      } else {
        v.str += raw[i];
      }
    }
    return v;
  }
  if (raw == "true" || raw == "false") {
    v.kind = Value::Kind::Boolean;
    v.boolean = raw == "true";
    return v;
  }
  // number: integer first, then float; the whole token must be consumed
  {
    char* end = nullptr;
    const long long i = std::strtoll(raw.c_str(), &end, 10);
    if (end == raw.c_str() + raw.size() && end != raw.c_str()) {
      v.kind = Value::Kind::Integer;
      v.integer = i;
      return v;
    }
  }
  {
    char* end = nullptr;
    const double d = std::strtod(raw.c_str(), &end);
    if (end == raw.c_str() + raw.size() && end != raw.c_str() && std::isfinite(d)) {
      v.kind = Value::Kind::Float;
      v.real = d;
      return v;
    }
  }
  fail(line, "cannot parse value '" + raw + "'");
}

Value parse_value(const std::string& raw, size_t line) {
  if (!raw.empty() && raw.front() == '[') {
    if (raw.back() != ']') fail(line, "unterminated array");
    Value v;
    v.kind = Value::Kind::Array;
    std::string inner = raw.substr(1, raw.size() - 2);
    // split on top-level commas (strings may contain commas)
    std::string token;
    bool in_string = false;
    auto push = [&]() {
      std::string t = strip(token);
      if (!t.empty()) v.array.push_back(parse_scalar(t, line));
      token.clear();
    };
    for (char c : inner) {
      if (c == '"') in_string = !in_string;
      if (c == ',' && !in_string) {
        push();
        continue;
      }
      token += c;
    }
    push();
    return v;
  }
  return parse_scalar(raw, line);
}

}  // namespace

Table parse(const std::string& text) {
  Table table;
  std::istringstream stream(text);
  std::string line;
  std::string prefix;
  size_t line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    const std::string content = strip(strip_comment(line));
    if (content.empty()) continue;
    if (content.front() == '[') {
      if (content.back() != ']') fail(line_no, "unterminated table header");
      const std::string name = strip(content.substr(1, content.size() - 2));
      if (!valid_key(name)) fail(line_no, "invalid table name '" + name + "'");
      prefix = name + ".";
      continue;
    }
    const size_t eq = content.find('=');
    if (eq == std::string::npos) fail(line_no, "expected key = value");
    const std::string key = strip(content.substr(0, eq));
    if (!valid_key(key)) fail(line_no, "invalid key '" + key + "'");
    const std::string value = strip(content.substr(eq + 1));
    const std::string full = prefix + key;
    if (table.values.count(full)) fail(line_no, "duplicate key '" + full + "'");
    table.values.emplace(full, parse_value(value, line_no));
  }
  return table;
}

Table parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

}  // namespace qbranch::toml
