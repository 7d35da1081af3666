#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "navfuse/common.hpp"

namespace navfuse {

/// Human-readable `key = value` file. '#' starts a comment, keys may repeat
/// (collected in order). Parse errors carry the line number.
class KeyValueFile {
 public:
  static KeyValueFile from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    return from_stream(in, path);
  }

  static KeyValueFile from_string(const std::string& text) {
    std::istringstream in(text);
    return from_stream(in, "<string>");
  }

  static KeyValueFile from_stream(std::istream& in, const std::string& name) {
    KeyValueFile kv;
    kv.name_ = name;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ParseError(name + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) {
        throw ParseError(name + ":" + std::to_string(line_no) + ": empty key");
      }
      kv.entries_[key].push_back(value);
      kv.order_.emplace_back(key, value);
    }
    return kv;
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string get_string(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ParseError(name_ + ": missing key '" + key + "'");
    return it->second.back();
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? get_string(key) : fallback;
  }

  double get_double(const std::string& key) const { return to_double(key, get_string(key)); }
  double get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  int get_int(const std::string& key) const {
    return static_cast<int>(to_double(key, get_string(key)));
  }
  int get_int(const std::string& key, int fallback) const {
    return has(key) ? get_int(key) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get_string(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ParseError(name_ + ": key '" + key + "': expected boolean, got '" + v + "'");
  }

  Vec3 get_vec3(const std::string& key) const {
    const auto parts = split_csv(get_string(key));
    if (parts.size() != 3) {
      throw ParseError(name_ + ": key '" + key + "': expected 3 comma-separated values");
    }
    return Vec3(to_double(key, parts[0]), to_double(key, parts[1]), to_double(key, parts[2]));
  }
  Vec3 get_vec3(const std::string& key, const Vec3& fallback) const {
    return has(key) ? get_vec3(key) : fallback;
  }

  /// All values for a repeated key, in file order.
  std::vector<std::string> values(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? std::vector<std::string>{} : it->second;
  }

  static std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
      if (ch == ',') {
        out.push_back(trim(cur));
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    out.push_back(trim(cur));
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  double to_double(const std::string& key, const std::string& v) const {
    std::size_t pos = 0;
    double d = 0.0;
    try {
      d = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw ParseError(name_ + ": key '" + key + "': expected number, got '" + v + "'");
    }
    if (pos != v.size()) {
      throw ParseError(name_ + ": key '" + key + "': trailing characters in '" + v + "'");
    }
    return d;
  }

  std::string name_;
  std::map<std::string, std::vector<std::string>> entries_;
  std::vector<std::pair<std::string, std::string>> order_;
};

}  // namespace navfuse
