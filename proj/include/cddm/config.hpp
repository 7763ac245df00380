// config.hpp
//
// A small TOML-like reader: [section] headers, `key = value` lines, '#'
// comments. Values are numbers, booleans, "strings" or flat [arrays] of
// numbers or strings. Keys are addressed as "section.key".

#ifndef CDDM_CONFIG_HPP
#define CDDM_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace cddm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Config {
 public:
  using Value = std::variant<double, bool, std::string, std::vector<double>, std::vector<std::string>>;

  static Config parse(const std::string& text, const std::string& origin = "<string>") {
    Config cfg;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = trim(strip_comment(line));
      if (line.empty()) continue;
      auto fail = [&](const std::string& msg) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + msg);
      };
      if (line.front() == '[') {
        if (line.back() != ']') fail("unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) fail("empty section name");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail("expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string raw = trim(line.substr(eq + 1));
      if (key.empty()) fail("empty key");
      const std::string full = section.empty() ? key : section + "." + key;
      try {
        cfg.values_[full] = parse_value(raw);
      } catch (const std::exception& e) {
        fail(std::string("bad value for '") + full + "': " + e.what());
      }
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, Value v) { values_[key] = std::move(v); }

  double get_double(const std::string& key, double def) const {
    if (!has(key)) return def;
    return as<double>(key);
  }
  std::size_t get_size(const std::string& key, std::size_t def) const {
    if (!has(key)) return def;
    const double v = as<double>(key);
    if (v < 0 || v != static_cast<double>(static_cast<std::uint64_t>(v)))
      throw ConfigError("'" + key + "' must be a non-negative integer");
    return static_cast<std::size_t>(v);
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const {
    return has(key) ? static_cast<std::uint64_t>(get_size(key, 0)) : def;
  }
  bool get_bool(const std::string& key, bool def) const { return has(key) ? as<bool>(key) : def; }
  std::string get_string(const std::string& key, const std::string& def) const {
    return has(key) ? as<std::string>(key) : def;
  }
  std::vector<double> get_doubles(const std::string& key, std::vector<double> def) const {
    if (!has(key)) return def;
    const auto& v = values_.at(key);
    if (const auto* d = std::get_if<double>(&v)) return {*d};
    if (const auto* s = std::get_if<std::vector<std::string>>(&v); s && s->empty()) return {};
    return as<std::vector<double>>(key);
  }
  std::vector<std::string> get_strings(const std::string& key, std::vector<std::string> def) const {
    if (!has(key)) return def;
    const auto& v = values_.at(key);
    if (const auto* s = std::get_if<std::string>(&v)) return {*s};
    if (const auto* d = std::get_if<std::vector<double>>(&v); d && d->empty()) return {};
    return as<std::vector<std::string>>(key);
  }

 private:
  template <typename T>
  const T& as(const std::string& key) const {
    const auto* p = std::get_if<T>(&values_.at(key));
    if (!p) throw ConfigError("'" + key + "' has the wrong type");
    return *p;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::string strip_comment(const std::string& s) {
    bool in_str = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') in_str = !in_str;
      if (s[i] == '#' && !in_str) return s.substr(0, i);
    }
    return s;
  }

  static std::string parse_string(const std::string& s) {
    if (s.size() < 2 || s.front() != '"' || s.back() != '"') throw std::invalid_argument("malformed string");
    return s.substr(1, s.size() - 2);
  }

  static double parse_number(const std::string& s) {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters after number");
    return v;
  }

  static Value parse_value(const std::string& raw) {
    if (raw.empty()) throw std::invalid_argument("missing value");
    if (raw == "true") return true;
    if (raw == "false") return false;
    if (raw.front() == '"') return parse_string(raw);
    if (raw.front() == '[') {
      if (raw.back() != ']') throw std::invalid_argument("unterminated array");
      const std::string body = trim(raw.substr(1, raw.size() - 2));
      std::vector<std::string> items;
      std::string cur;
      bool in_str = false;
      for (char c : body) {
        if (c == '"') in_str = !in_str;
        if (c == ',' && !in_str) {
          items.push_back(trim(cur));
          cur.clear();
        } else {
          cur += c;
        }
      }
      if (!trim(cur).empty()) items.push_back(trim(cur));
      if (items.empty()) return std::vector<double>{};
      if (items.front().front() == '"') {
        std::vector<std::string> out;
        for (const auto& it : items) out.push_back(parse_string(it));
        return out;
      }
      std::vector<double> out;
      for (const auto& it : items) out.push_back(parse_number(it));
      return out;
    }
    return parse_number(raw);
  }

  std::map<std::string, Value> values_;
};

}  // namespace cddm

#endif
