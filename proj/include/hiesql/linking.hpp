#pragma once

// Schema-linking graph over the current utterance, history utterances, the
// previous turn's SQL and the schema, and its dense relation matrix.

#include <algorithm>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hiesql/edge_types.hpp"
#include "hiesql/schema.hpp"
#include "hiesql/sql_ast.hpp"
#include "hiesql/text.hpp"

namespace hiesql {

inline constexpr int kMaxNgram = 5;

enum class UtteranceRole : std::uint8_t { Current, History };

namespace detail {

struct MatchTypes {
  EdgeType col_exact, col_partial, col_value, tab_exact, tab_partial;
};

inline MatchTypes match_types(UtteranceRole role) {
  if (role == UtteranceRole::Current)
    return {EdgeType::UCExact, EdgeType::UCPartial, EdgeType::UCValue, EdgeType::UTExact, EdgeType::UTPartial};
  return {EdgeType::HCExact, EdgeType::HCPartial, EdgeType::HCValue, EdgeType::HTExact, EdgeType::HTPartial};
}

// True when `needle` occurs as a contiguous run inside a strictly longer `hay`.
inline bool strict_subspan(const std::vector<std::string>& needle, const std::vector<std::string>& hay) {
  if (needle.empty() || needle.size() >= hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace detail

// Edges between utterance tokens and schema nodes, each paired with its
// inverse. N-grams are scanned longest first; a token already covered by an
// exact match at a longer n-gram takes part in no shorter partial match.
// Per (token, node) pair only the highest-precedence type survives.
inline std::vector<Relation> match_utterance_schema(const TokenSeq& tokens, const Schema& s, const ContentIndex& contents,
                                                    UtteranceRole role, int group = 0, bool use_values = true) {
  const auto types = detail::match_types(role);
  const NodeKind kind = role == UtteranceRole::Current ? NodeKind::Utterance : NodeKind::History;
  const int n_tok = static_cast<int>(tokens.size());
  const int n_col = s.num_columns();
  const int n_tab = s.num_tables();
  // best[token][node]; nodes are columns followed by tables
  std::vector<std::vector<EdgeType>> best(static_cast<std::size_t>(n_tok),
                                          std::vector<EdgeType>(static_cast<std::size_t>(n_col + n_tab), EdgeType::Default));
  std::vector<bool> consumed(static_cast<std::size_t>(n_tok), false);

  auto mark = [&](int begin, int n, int node, EdgeType t) {
    for (int i = begin; i < begin + n; ++i) {
      auto& cell = best[static_cast<std::size_t>(i)][static_cast<std::size_t>(node)];
      if (precedence(t) > precedence(cell)) cell = t;
    }
  };

  for (int n = std::min(kMaxNgram, n_tok); n >= 1; --n) {
    std::vector<int> exact_hits;
    for (int b = 0; b + n <= n_tok; ++b) {
      std::vector<std::string> gram;
      for (int i = b; i < b + n; ++i) gram.push_back(tokens[static_cast<std::size_t>(i)].text);
      bool partial_ok = true;
      for (int i = b; i < b + n; ++i) partial_ok = partial_ok && !consumed[static_cast<std::size_t>(i)];
      const std::string joined = join(gram, " ");
      bool hit_exact = false;

      auto name_match = [&](const std::vector<std::string>& words, int node, EdgeType exact, EdgeType partial) {
        if (gram == words) {
          mark(b, n, node, exact);
          hit_exact = true;
        } else if (partial_ok && (detail::strict_subspan(gram, words) || detail::strict_subspan(words, gram))) {
          mark(b, n, node, partial);
        }
      };
      for (int c = 1; c < n_col; ++c) {
        name_match(s.columns[static_cast<std::size_t>(c)].words, c, types.col_exact, types.col_partial);
        if (use_values && contents.contains(c, joined)) mark(b, n, c, types.col_value);
      }
      for (int t = 0; t < n_tab; ++t)
        name_match(s.tables[static_cast<std::size_t>(t)].words, n_col + t, types.tab_exact, types.tab_partial);
      if (hit_exact) exact_hits.push_back(b);
    }
    for (int b : exact_hits)
      for (int i = b; i < b + n; ++i) consumed[static_cast<std::size_t>(i)] = true;
  }

  std::vector<Relation> out;
  for (int i = 0; i < n_tok; ++i) {
    const NodeRef tok{kind, i, group};
    for (int node = 0; node < n_col + n_tab; ++node) {
      const EdgeType t = best[static_cast<std::size_t>(i)][static_cast<std::size_t>(node)];
      if (t == EdgeType::Default) continue;
      const NodeRef target = node < n_col ? column_node(node) : table_node(node - n_col);
      out.push_back({tok, target, t});
      out.push_back({target, tok, inverse(t)});
    }
  }
  return out;
}

// Node of the SQL-encoder output slot holding word `position` of the SQL
// token stream (slot 0 is the encoder's [CLS]).
inline NodeRef sql_slot_node(int position) { return {NodeKind::Sql, position + 1, 0}; }

// Edges between SQL identifier occurrences and schema nodes: every word of a
// column occurrence links to every real column (equal or unequal), every word
// of a table occurrence to every table.
inline std::vector<Relation> match_sql_schema(const std::vector<SqlIdentifier>& ids, const Schema& s) {
  std::vector<Relation> out;
  for (const auto& id : ids) {
    const int t = s.find_table(id.table);
    if (id.kind == NodeKind::Column) {
      const int c = s.find_column(t, id.column);
      check(t >= 0 && c > 0, "unresolvable SQL identifier '", id.table, ".", id.column, "'");
      for (int p : id.positions)
        for (int other = 1; other < s.num_columns(); ++other) {
          const EdgeType type = other == c ? EdgeType::SCEqual : EdgeType::SCUnequal;
          out.push_back({sql_slot_node(p), column_node(other), type});
          out.push_back({column_node(other), sql_slot_node(p), inverse(type)});
        }
    } else {
      check(t >= 0, "unresolvable SQL identifier '", id.table, "'");
      for (int p : id.positions)
        for (int other = 0; other < s.num_tables(); ++other) {
          const EdgeType type = other == t ? EdgeType::STEqual : EdgeType::STUnequal;
          out.push_back({sql_slot_node(p), table_node(other), type});
          out.push_back({table_node(other), sql_slot_node(p), inverse(type)});
        }
    }
  }
  return out;
}

struct LinkGraph {
  std::vector<NodeRef> nodes;  // columns, tables, current tokens, history tokens, SQL slots
  std::map<std::pair<NodeRef, NodeRef>, EdgeType> edges;

  EdgeType edge(const NodeRef& a, const NodeRef& b) const {
    auto it = edges.find({a, b});
    return it == edges.end() ? EdgeType::Default : it->second;
  }
  bool has_node(const NodeRef& n) const { return std::binary_search(nodes.begin(), nodes.end(), n); }

  void add(const Relation& r) {
    auto [it, fresh] = edges.emplace(std::make_pair(r.src, r.dst), r.type);
    if (!fresh && precedence(r.type) > precedence(it->second)) it->second = r.type;
  }

  std::size_t count(EdgeType t) const {
    return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [t](const auto& e) { return e.second == t; }));
  }
};

struct LinkOptions {
  bool use_values = true;
};

// The previous turn's SQL as seen by the linker: its SQL-encoder word stream.
inline std::vector<SqlToken> last_sql_tokens(const std::optional<Query>& last_sql, const Schema& s) {
  return last_sql ? sql_tokens(*last_sql, s) : std::vector<SqlToken>{};
}

inline LinkGraph build_graph(const TokenSeq& current, const std::vector<TokenSeq>& history,
                             const std::optional<Query>& last_sql, const Schema& s, const ContentIndex& contents,
                             const LinkOptions& opt = {}) {
  LinkGraph g;
  for (int c = 0; c < s.num_columns(); ++c) g.nodes.push_back(column_node(c));
  for (int t = 0; t < s.num_tables(); ++t) g.nodes.push_back(table_node(t));
  for (int i = 0; i < static_cast<int>(current.size()); ++i) g.nodes.push_back({NodeKind::Utterance, i, 0});
  for (int h = 0; h < static_cast<int>(history.size()); ++h)
    for (int i = 0; i < static_cast<int>(history[static_cast<std::size_t>(h)].size()); ++i)
      g.nodes.push_back({NodeKind::History, i, h});
  const auto sql = last_sql_tokens(last_sql, s);
  if (last_sql)
    for (int k = 0; k <= static_cast<int>(sql.size()); ++k) g.nodes.push_back({NodeKind::Sql, k, 0});
  std::sort(g.nodes.begin(), g.nodes.end());

  for (const auto& r : base_relations(s)) g.add(r);
  for (const auto& r : match_utterance_schema(current, s, contents, UtteranceRole::Current, 0, opt.use_values)) g.add(r);
  for (int h = 0; h < static_cast<int>(history.size()); ++h)
    for (const auto& r : match_utterance_schema(history[static_cast<std::size_t>(h)], s, contents, UtteranceRole::History, h,
                                                opt.use_values))
      g.add(r);
  if (last_sql)
    for (const auto& r : match_sql_schema(sql_identifiers(sql, s), s)) g.add(r);
  return g;
}

// ---------------------------------------------------------------------------
// Relation matrix

// Position -> node map of an encoder input; separators map to no node.
struct PositionMap {
  std::vector<std::optional<NodeRef>> nodes;
  std::vector<std::string> text;

  int length() const { return static_cast<int>(nodes.size()); }
};

struct RelationMatrix {
  int L = 0;
  std::vector<int> cells;  // row-major edge ids

  int at(int i, int j) const { return cells[static_cast<std::size_t>(i) * static_cast<std::size_t>(L) + static_cast<std::size_t>(j)]; }
  int& at(int i, int j) { return cells[static_cast<std::size_t>(i) * static_cast<std::size_t>(L) + static_cast<std::size_t>(j)]; }
  EdgeType type(int i, int j) const { return static_cast<EdgeType>(at(i, j)); }

  friend bool operator==(const RelationMatrix&, const RelationMatrix&) = default;
};

// Cell (i, j) carries the edge between the nodes owning positions i and j.
// Positions of one node (the words of a multi-word name) relate by identity,
// as does the diagonal; separator positions relate to nothing else.
inline RelationMatrix relation_matrix(const LinkGraph& g, const PositionMap& layout) {
  const int L = layout.length();
  for (int i = 0; i < L; ++i) {
    const auto& n = layout.nodes[static_cast<std::size_t>(i)];
    check(!n || g.has_node(*n), "unmapped node at position ", i, " ('", layout.text[static_cast<std::size_t>(i)], "')");
  }
  RelationMatrix m{L, std::vector<int>(static_cast<std::size_t>(L) * static_cast<std::size_t>(L), edge_id(EdgeType::Default))};
  for (int i = 0; i < L; ++i) {
    m.at(i, i) = edge_id(EdgeType::Identity);
    const auto& a = layout.nodes[static_cast<std::size_t>(i)];
    if (!a) continue;
    for (int j = 0; j < L; ++j) {
      const auto& b = layout.nodes[static_cast<std::size_t>(j)];
      if (i == j || !b) continue;
      m.at(i, j) = edge_id(*a == *b ? EdgeType::Identity : g.edge(*a, *b));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Debug dump

inline std::string node_label(const NodeRef& n, const Schema& s) {
  std::ostringstream os;
  switch (n.kind) {
    case NodeKind::Column: {
      const auto& c = s.columns[static_cast<std::size_t>(n.index)];
      if (c.table < 0) {
        os << "C:*";
      } else {
        os << "C:" << s.tables[static_cast<std::size_t>(c.table)].name << "." << c.name;
      }
      break;
    }
    case NodeKind::Table: os << "T:" << s.tables[static_cast<std::size_t>(n.index)].name; break;
    case NodeKind::Utterance: os << "U[" << n.index << "]"; break;
    case NodeKind::History: os << "H" << n.group << "[" << n.index << "]"; break;
    case NodeKind::Sql: os << "S[" << n.index << "]"; break;
  }
  return os.str();
}

// Stable text form: nodes, non-base edges, then the dense matrix by type name.
inline void dump_graph(std::ostream& os, const LinkGraph& g, const RelationMatrix& m, const PositionMap& layout, const Schema& s) {
  os << "# nodes " << g.nodes.size() << "\n";
  for (const auto& n : g.nodes) os << node_label(n, s) << "\n";
  os << "# edges\n";
  for (const auto& [key, type] : g.edges) {
    const bool schema_only = (key.first.kind == NodeKind::Column || key.first.kind == NodeKind::Table) &&
                             (key.second.kind == NodeKind::Column || key.second.kind == NodeKind::Table);
    if (schema_only) continue;
    os << node_label(key.first, s) << "\t" << node_label(key.second, s) << "\t" << edge_name(type) << "\n";
  }
  os << "# matrix " << m.L << "x" << m.L << "\n";
  for (int i = 0; i < m.L; ++i) {
    os << i << "\t" << layout.text[static_cast<std::size_t>(i)];
    for (int j = 0; j < m.L; ++j) os << (j ? ' ' : '\t') << m.at(i, j);
    os << "\n";
  }
}

}  // namespace hiesql
