#pragma once

// Database schemas, cell-content indexes and the intra-schema relations that
// seed the linking graph.

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "hiesql/edge_types.hpp"
#include "hiesql/text.hpp"
#include "hiesql/util.hpp"
#include "json.hpp"

namespace hiesql {

struct Table {
  std::string name;
  std::vector<std::string> words;  // normalized name words
  std::vector<int> columns;        // global column indices, in order
};

struct Column {
  std::string name;
  std::string type;
  int table = -1;  // -1 only for "*"
  std::vector<std::string> words;
};

// Tables and columns of one database. Column 0 is the all-columns marker "*",
// attached to no table.
struct Schema {
  std::string db_id;
  std::vector<Table> tables;
  std::vector<Column> columns;
  std::vector<std::pair<int, int>> foreign_keys;  // (column, referenced column)
  std::set<int> primary_keys;

  int find_table(std::string_view name) const {
    const std::string key = to_lower_ascii(name);
    for (std::size_t t = 0; t < tables.size(); ++t)
      if (to_lower_ascii(tables[t].name) == key) return static_cast<int>(t);
    return -1;
  }

  int find_column(int table, std::string_view name) const {
    if (name == "*") return 0;
    if (table < 0 || table >= static_cast<int>(tables.size())) return -1;
    const std::string key = to_lower_ascii(name);
    for (int c : tables[static_cast<std::size_t>(table)].columns)
      if (to_lower_ascii(columns[static_cast<std::size_t>(c)].name) == key) return c;
    return -1;
  }

  int num_tables() const { return static_cast<int>(tables.size()); }
  int num_columns() const { return static_cast<int>(columns.size()); }
};

namespace detail {

inline int resolve_column_ref(const Schema& s, const nlohmann::json& ref, std::string_view what) {
  if (ref.is_number_integer()) {
    const int c = ref.get<int>();
    check(c > 0 && c < s.num_columns(), what, ": unknown FK target column index ", c);
    return c;
  }
  check(ref.is_array() && ref.size() == 2, what, ": expected [table, column] or a column index");
  const auto tname = ref[0].get<std::string>();
  const auto cname = ref[1].get<std::string>();
  const int t = s.find_table(tname);
  check(t >= 0, what, ": unknown table '", tname, "'");
  const int c = s.find_column(t, cname);
  check(c > 0, what, ": unknown column '", tname, ".", cname, "'");
  return c;
}

}  // namespace detail

// Builds a Schema from its structured document:
//   {"db_id", "tables": [{"name", "columns": [{"name", "type"}]}],
//    "primary_keys": [[table, column]...],
//    "foreign_keys": [{"from": [table, column], "to": [table, column]}...]}
// FK endpoints may also be given as global column indices.
inline Schema load_schema(const nlohmann::json& doc) {
  Schema s;
  check(doc.contains("db_id") && doc["db_id"].is_string(), "schema: missing db_id");
  s.db_id = doc["db_id"].get<std::string>();
  check(!s.db_id.empty(), "schema: empty db_id");
  check(doc.contains("tables") && doc["tables"].is_array(), "schema ", s.db_id, ": missing table list");

  s.columns.push_back(Column{"*", "text", -1, {"*"}});
  std::set<std::string> table_names;
  for (const auto& tdoc : doc["tables"]) {
    const auto tname = tdoc.value("name", std::string());
    check(!tname.empty(), "schema ", s.db_id, ": table with empty name");
    check(table_names.insert(to_lower_ascii(tname)).second, "schema ", s.db_id, ": duplicate table name '", tname, "'");
    Table table{tname, token_words(tname), {}};
    check(!table.words.empty(), "schema ", s.db_id, ": table name '", tname, "' has no word characters");
    const int tidx = s.num_tables();
    std::set<std::string> column_names;
    for (const auto& cdoc : tdoc.value("columns", nlohmann::json::array())) {
      const auto cname = cdoc.value("name", std::string());
      check(!cname.empty(), "schema ", s.db_id, ": column with empty name in table '", tname, "'");
      check(column_names.insert(to_lower_ascii(cname)).second, "schema ", s.db_id, ": duplicate column '", tname, ".", cname, "'");
      Column col{cname, cdoc.value("type", std::string("text")), tidx, token_words(cname)};
      check(!col.words.empty(), "schema ", s.db_id, ": column name '", cname, "' has no word characters");
      table.columns.push_back(s.num_columns());
      s.columns.push_back(std::move(col));
    }
    s.tables.push_back(std::move(table));
  }

  for (const auto& pk : doc.value("primary_keys", nlohmann::json::array()))
    s.primary_keys.insert(detail::resolve_column_ref(s, pk, "primary key"));

  for (const auto& fk : doc.value("foreign_keys", nlohmann::json::array())) {
    nlohmann::json from, to;
    if (fk.is_object()) {
      from = fk.at("from");
      to = fk.at("to");
    } else {
      check(fk.is_array() && fk.size() == 2, "foreign key: expected {from, to} or a pair");
      from = fk[0];
      to = fk[1];
    }
    const int a = detail::resolve_column_ref(s, from, "foreign key source");
    const int b = detail::resolve_column_ref(s, to, "foreign key target");
    check(s.columns[static_cast<std::size_t>(a)].table != s.columns[static_cast<std::size_t>(b)].table,
          "foreign key ", s.columns[static_cast<std::size_t>(a)].name, " -> ", s.columns[static_cast<std::size_t>(b)].name,
          ": endpoints must lie in distinct tables");
    s.foreign_keys.emplace_back(a, b);
  }
  return s;
}

inline Schema load_schema_file(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open schema file '", path, "'");
  return load_schema(nlohmann::json::parse(in));
}

// Accepts a file holding one schema object or an array of them.
inline std::map<std::string, Schema> load_schemas(const nlohmann::json& doc) {
  std::map<std::string, Schema> out;
  auto add = [&](const nlohmann::json& d) {
    Schema s = load_schema(d);
    const std::string id = s.db_id;
    check(out.emplace(id, std::move(s)).second, "duplicate db_id '", id, "'");
  };
  if (doc.is_array()) {
    for (const auto& d : doc) add(d);
  } else {
    add(doc);
  }
  return out;
}

inline nlohmann::json schema_to_json(const Schema& s) {
  nlohmann::json doc;
  doc["db_id"] = s.db_id;
  doc["tables"] = nlohmann::json::array();
  for (const auto& t : s.tables) {
    nlohmann::json cols = nlohmann::json::array();
    for (int c : t.columns)
      cols.push_back({{"name", s.columns[static_cast<std::size_t>(c)].name}, {"type", s.columns[static_cast<std::size_t>(c)].type}});
    doc["tables"].push_back({{"name", t.name}, {"columns", cols}});
  }
  auto ref = [&](int c) {
    const auto& col = s.columns[static_cast<std::size_t>(c)];
    return nlohmann::json::array({s.tables[static_cast<std::size_t>(col.table)].name, col.name});
  };
  doc["primary_keys"] = nlohmann::json::array();
  for (int c : s.primary_keys) doc["primary_keys"].push_back(ref(c));
  doc["foreign_keys"] = nlohmann::json::array();
  for (auto [a, b] : s.foreign_keys) doc["foreign_keys"].push_back({{"from", ref(a)}, {"to", ref(b)}});
  return doc;
}

// ---------------------------------------------------------------------------
// Schema nodes and intra-schema relations

enum class NodeKind : std::uint8_t { Column, Table, Utterance, History, Sql };

// Identity of a linking-graph node. For history tokens `group` is the index of
// the utterance within the history; otherwise it is 0.
struct NodeRef {
  NodeKind kind = NodeKind::Column;
  int index = 0;
  int group = 0;

  friend auto operator<=>(const NodeRef&, const NodeRef&) = default;
};

inline NodeRef column_node(int c) { return {NodeKind::Column, c, 0}; }
inline NodeRef table_node(int t) { return {NodeKind::Table, t, 0}; }

struct Relation {
  NodeRef src;
  NodeRef dst;
  EdgeType type = EdgeType::Default;

  friend bool operator==(const Relation&, const Relation&) = default;
};

// Pre-existing schema relations, in a deterministic order: identity self
// loops, column-table membership, same-table column pairs, column FKs and
// table FKs. Every directed type is paired with its inverse.
inline std::vector<Relation> base_relations(const Schema& s) {
  std::vector<Relation> out;
  for (int c = 0; c < s.num_columns(); ++c) out.push_back({column_node(c), column_node(c), EdgeType::Identity});
  for (int t = 0; t < s.num_tables(); ++t) out.push_back({table_node(t), table_node(t), EdgeType::Identity});

  for (int t = 0; t < s.num_tables(); ++t) {
    const auto& cols = s.tables[static_cast<std::size_t>(t)].columns;
    for (int c : cols) {
      const bool pk = s.primary_keys.count(c) > 0;
      const EdgeType fwd = pk ? EdgeType::CTPrimaryKey : EdgeType::CTMember;
      out.push_back({column_node(c), table_node(t), fwd});
      out.push_back({table_node(t), column_node(c), inverse(fwd)});
    }
    for (int a : cols)
      for (int b : cols)
        if (a != b) out.push_back({column_node(a), column_node(b), EdgeType::CCSameTable});
  }

  for (auto [a, b] : s.foreign_keys) {
    out.push_back({column_node(a), column_node(b), EdgeType::CCForeignKey});
    out.push_back({column_node(b), column_node(a), EdgeType::CCForeignKeyRev});
  }

  std::set<std::pair<int, int>> table_fk;
  for (auto [a, b] : s.foreign_keys)
    table_fk.emplace(s.columns[static_cast<std::size_t>(a)].table, s.columns[static_cast<std::size_t>(b)].table);
  std::set<std::pair<int, int>> done;
  for (auto [ta, tb] : table_fk) {
    const auto key = std::minmax(ta, tb);
    if (!done.insert(key).second) continue;
    if (table_fk.count({tb, ta})) {
      out.push_back({table_node(ta), table_node(tb), EdgeType::TTForeignKeyBoth});
      out.push_back({table_node(tb), table_node(ta), EdgeType::TTForeignKeyBoth});
    } else {
      out.push_back({table_node(ta), table_node(tb), EdgeType::TTForeignKey});
      out.push_back({table_node(tb), table_node(ta), EdgeType::TTForeignKeyRev});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cell contents

struct ContentCell {
  std::string table;
  std::string column;
  std::string value;
};

// Per-column normalized distinct values, in first-seen order.
struct ContentIndex {
  std::vector<std::vector<std::string>> values;
  std::vector<std::unordered_set<std::string>> lookup;
  std::size_t skipped = 0;  // cells naming unknown columns

  bool contains(int column, const std::string& normalized) const {
    if (column < 0 || column >= static_cast<int>(lookup.size())) return false;
    return lookup[static_cast<std::size_t>(column)].count(normalized) > 0;
  }
  bool empty() const {
    return std::all_of(values.begin(), values.end(), [](const auto& v) { return v.empty(); });
  }
};

inline constexpr std::size_t kDefaultContentCap = 5000;

inline ContentIndex index_contents(const std::vector<ContentCell>& cells, const Schema& s,
                                   std::size_t cap = kDefaultContentCap) {
  ContentIndex idx;
  idx.values.resize(static_cast<std::size_t>(s.num_columns()));
  idx.lookup.resize(static_cast<std::size_t>(s.num_columns()));
  for (const auto& cell : cells) {
    const int c = s.find_column(s.find_table(cell.table), cell.column);
    if (c <= 0) {
      ++idx.skipped;
      continue;
    }
    auto v = normalize_value(cell.value);
    if (v.empty()) continue;
    auto& vals = idx.values[static_cast<std::size_t>(c)];
    auto& set = idx.lookup[static_cast<std::size_t>(c)];
    if (vals.size() >= cap || set.count(v)) continue;
    set.insert(v);
    vals.push_back(std::move(v));
  }
  return idx;
}

// Content dump: one cell per line, "table<TAB>column<TAB>value". Lines
// starting with '#' and blank lines are ignored.
inline std::vector<ContentCell> read_content_dump(std::istream& in) {
  std::vector<ContentCell> cells;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    check(b != std::string::npos, "content dump line ", lineno, ": expected table<TAB>column<TAB>value");
    cells.push_back({line.substr(0, a), line.substr(a + 1, b - a - 1), line.substr(b + 1)});
  }
  return cells;
}

}  // namespace hiesql
