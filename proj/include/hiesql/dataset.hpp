#pragma once

// Interaction datasets, databases (schema + cell contents) and the SQL-encoder
// pretraining corpus derived from them.

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hiesql/schema.hpp"
#include "hiesql/sequence.hpp"
#include "hiesql/sql_ast.hpp"
#include "json.hpp"

namespace hiesql {

struct Turn {
  std::string utterance;
  std::string sql;
};

struct InteractionRecord {
  std::string id;
  std::string db_id;
  std::vector<Turn> turns;
};

struct Database {
  Schema schema;
  ContentIndex contents;
};

using DatabaseSet = std::map<std::string, Database>;

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open '", path, "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail("'", path, "': ", e.what());
  }
}

// Dataset file: a JSON array of {"id"?, "db_id", "turns": [{"utterance", "sql"}]}.
inline std::vector<InteractionRecord> parse_dataset(const nlohmann::json& doc) {
  check(doc.is_array(), "dataset must be a JSON array of interactions");
  std::vector<InteractionRecord> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& d = doc[i];
    InteractionRecord r;
    r.id = d.value("id", "interaction_" + std::to_string(i));
    r.db_id = d.at("db_id").get<std::string>();
    for (const auto& t : d.at("turns")) r.turns.push_back({t.at("utterance").get<std::string>(), t.at("sql").get<std::string>()});
    check(!r.turns.empty(), "interaction '", r.id, "' has no turns");
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<InteractionRecord> load_dataset(const std::string& path) { return parse_dataset(read_json_file(path)); }

// Schemas from a JSON array of schema documents; contents (optional) from a
// "table<TAB>column<TAB>value" dump whose lines start with "db_id<TAB>".
inline DatabaseSet load_databases(const std::string& schema_path, const std::string& contents_path = "") {
  DatabaseSet dbs;
  for (auto& [id, s] : load_schemas(read_json_file(schema_path))) dbs[id].schema = std::move(s);
  std::map<std::string, std::vector<ContentCell>> cells;
  if (!contents_path.empty()) {
    std::ifstream in(contents_path);
    check(in.good(), "cannot open '", contents_path, "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      check(tab != std::string::npos, contents_path, ":", lineno, ": expected db_id<TAB>table<TAB>column<TAB>value");
      const std::string db = line.substr(0, tab);
      check(dbs.count(db) > 0, contents_path, ":", lineno, ": unknown database '", db, "'");
      std::istringstream rest(line.substr(tab + 1));
      auto parsed = read_content_dump(rest);
      cells[db].insert(cells[db].end(), parsed.begin(), parsed.end());
    }
  }
  for (auto& [id, db] : dbs) db.contents = index_contents(cells[id], db.schema);
  return dbs;
}

inline const Database& database_for(const DatabaseSet& dbs, const std::string& db_id) {
  auto it = dbs.find(db_id);
  check(it != dbs.end(), "unknown database '", db_id, "'");
  return it->second;
}

// Gold SQL of every turn, or nullopt for turns outside the grammar.
struct ParsedInteraction {
  std::vector<TokenSeq> utterances;
  std::vector<std::optional<Query>> gold;
  std::vector<std::string> errors;
};

inline ParsedInteraction parse_interaction(const InteractionRecord& r, const Schema& s) {
  ParsedInteraction p;
  for (const auto& t : r.turns) {
    p.utterances.push_back(normalize_tokens(t.utterance));
    try {
      p.gold.push_back(parse_sql(t.sql, s));
      p.errors.emplace_back();
    } catch (const Error& e) {
      p.gold.push_back(std::nullopt);
      p.errors.emplace_back(e.what());
    }
  }
  return p;
}

// Pretraining records: each gold SQL with the utterances up to its turn.
inline std::vector<SqlBertInput> sql_corpus(const std::vector<InteractionRecord>& data, const DatabaseSet& dbs,
                                            std::size_t* skipped = nullptr) {
  std::vector<SqlBertInput> out;
  for (const auto& r : data) {
    const auto& db = database_for(dbs, r.db_id);
    const auto p = parse_interaction(r, db.schema);
    for (std::size_t t = 0; t < r.turns.size(); ++t) {
      if (!p.gold[t]) {
        if (skipped) ++*skipped;
        continue;
      }
      std::vector<TokenSeq> upto(p.utterances.begin(), p.utterances.begin() + static_cast<std::ptrdiff_t>(t + 1));
      out.push_back(build_sqlbert_input(*p.gold[t], concat_utterances(upto), db.schema));
    }
  }
  return out;
}

// Pretraining shard: JSON lines of {"db_id", "question", "sql"}. Queries
// outside the grammar are counted in `skipped` and left out.
inline std::vector<SqlBertInput> load_sql_shard(const std::string& path, const DatabaseSet& dbs, std::size_t* skipped = nullptr) {
  std::ifstream in(path);
  check(in.good(), "cannot open '", path, "'");
  std::vector<SqlBertInput> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail("'", path, "' line ", lineno, ": ", e.what());
    }
    check(j.contains("db_id") && j.contains("sql"), "'", path, "' line ", lineno, ": expected db_id and sql");
    const auto& db = database_for(dbs, j["db_id"].get<std::string>());
    try {
      const Query q = parse_sql(j["sql"].get<std::string>(), db.schema);
      out.push_back(build_sqlbert_input(q, normalize_tokens(j.value("question", std::string())), db.schema));
    } catch (const Error&) {
      if (skipped) ++*skipped;
    }
  }
  return out;
}

}  // namespace hiesql
