#pragma once

// Flat "key = value" configuration. '#' starts a comment. Every key must be
// known; values are parsed on access with errors naming the key.

#include <fstream>
#include <map>
#include <set>
#include <string>

#include "hiesql/util.hpp"

namespace hiesql {

class Config {
 public:
  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "seed", "workers", "beam",
        "sql.width", "sql.layers", "sql.heads", "sql.max_len", "sql.dropout",
        "pretrain.steps", "pretrain.batch", "pretrain.lr",
        "enc.width", "enc.heads", "enc.base_layers", "enc.hie_layers", "enc.dropout", "enc.max_len",
        "dec.hidden", "dec.action_dim", "dec.dropout", "dec.max_steps",
        "layout.max_len", "layout.max_history", "link.use_values",
        "train.max_steps", "train.batch", "train.lr_encoder", "train.lr_rest", "train.rdrop", "train.clip",
        "train.checkpoint_every",
        "gradcheck.width", "gradcheck.heads", "gradcheck.hie_layers", "gradcheck.samples", "gradcheck.tolerance"};
    return keys;
  }

  static Config parse(std::istream& in, const std::string& origin = "config") {
    Config c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto eq = line.find('=');
      if (trim(line).empty()) continue;
      check(eq != std::string::npos, origin, ":", lineno, ": expected key = value");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), origin + ":" + std::to_string(lineno));
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open config '", path, "'");
    return parse(in, path);
  }

  void set(const std::string& key, const std::string& value, const std::string& where = "override") {
    check(known_keys().count(key) > 0, where, ": unknown config key '", key, "'");
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  int get_int(const std::string& key, int fallback) const {
    auto it = lookup(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const int v = std::stoi(it->second, &used);
      if (used == it->second.size()) return v;
    } catch (const std::exception&) {
    }
    fail("config key '", key, "': expected an integer, got '", it->second, "'");
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = lookup(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used == it->second.size()) return v;
    } catch (const std::exception&) {
    }
    fail("config key '", key, "': expected a number, got '", it->second, "'");
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = lookup(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    fail("config key '", key, "': expected true or false, got '", it->second, "'");
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string>::const_iterator lookup(const std::string& key) const {
    check(known_keys().count(key) > 0, "unknown config key '", key, "'");
    return values_.find(key);
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace hiesql
