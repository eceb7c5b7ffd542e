#pragma once

// Encoder input layouts:
//   downstream  [CLS] h_1 [CLS] ... [CLS] u_cur [CLS] S [SEP] t_1 [SEP] ... [SEP] c_1 [SEP] ...
//   SQL encoder [CLS] sql [SEP] question [SEP] t_1 : c_11 , c_12 [SEP] t_2 : ...

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "hiesql/linking.hpp"
#include "hiesql/schema.hpp"
#include "hiesql/sql_ast.hpp"
#include "hiesql/text.hpp"

namespace hiesql {

inline const std::string kPad = "[PAD]";
inline const std::string kUnk = "[UNK]";
inline const std::string kCls = "[CLS]";
inline const std::string kSep = "[SEP]";
inline const std::string kMask = "[MASK]";

// Word-level vocabulary. The five special tokens always take ids 0..4.
class Vocab {
 public:
  Vocab() {
    for (const auto& s : {kPad, kUnk, kCls, kSep, kMask}) add(s);
  }

  int add(const std::string& w) {
    auto [it, fresh] = ids_.emplace(w, static_cast<int>(words_.size()));
    if (fresh) words_.push_back(w);
    return it->second;
  }
  int id(const std::string& w) const {
    auto it = ids_.find(w);
    return it == ids_.end() ? unk() : it->second;
  }
  bool contains(const std::string& w) const { return ids_.count(w) > 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  static constexpr int pad() { return 0; }
  static constexpr int unk() { return 1; }
  static constexpr int cls() { return 2; }
  static constexpr int sep() { return 3; }
  static constexpr int mask() { return 4; }
  static constexpr int kSpecialCount = 5;

  // Ids for `words`; `unknown` (if given) counts out-of-vocabulary words.
  std::vector<int> encode(const std::vector<std::string>& words, std::size_t* unknown = nullptr) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) {
      const int i = id(w);
      if (i == unk() && w != kUnk && unknown) ++*unknown;
      out.push_back(i);
    }
    return out;
  }

  static Vocab from_words(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& w : words) v.add(w);
    return v;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

// ---------------------------------------------------------------------------
// Downstream encoder layout

enum class Segment : std::uint8_t { Special, Current, History, Sql, Table, Column };
inline constexpr int kSegmentCount = 6;

struct SequenceLayout {
  PositionMap map;                // node per position, token text per position
  std::vector<Segment> segments;  // per position
  std::vector<int> sql_positions;
  std::vector<std::vector<int>> table_positions;   // per table
  std::vector<std::vector<int>> column_positions;  // per column
  std::vector<int> current_positions;
  std::vector<std::vector<int>> history_positions;  // per kept history utterance, oldest first
  std::vector<int> history_groups;                  // original history index of each kept utterance
  int dropped_history = 0;

  int length() const { return map.length(); }
  const std::vector<std::string>& tokens() const { return map.text; }

  std::vector<int> positions_of(const NodeRef& n) const {
    std::vector<int> out;
    for (int i = 0; i < length(); ++i)
      if (map.nodes[static_cast<std::size_t>(i)] == n) out.push_back(i);
    return out;
  }
};

struct LayoutOptions {
  int max_len = 512;
  int max_history = -1;  // keep at most this many most recent history utterances; -1 keeps all
};

inline SequenceLayout assemble_input(const std::vector<TokenSeq>& history, const TokenSeq& current, int sql_slots,
                                     const Schema& s, const LayoutOptions& opt = {}) {
  check(!current.empty(), "current utterance is empty");
  check(sql_slots >= 0, "negative SQL slot count");

  int schema_len = 0;
  for (const auto& t : s.tables) schema_len += 1 + static_cast<int>(t.words.size());
  for (const auto& c : s.columns) schema_len += 1 + static_cast<int>(c.table < 0 ? 1 : c.words.size());
  const int fixed = 2 + static_cast<int>(current.size()) + sql_slots + schema_len;
  check(schema_len <= opt.max_len, "schema too large: ", schema_len, " positions exceed the maximum of ", opt.max_len);
  check(fixed <= opt.max_len, "input too long: current utterance, SQL slots and schema need ", fixed,
        " positions, maximum is ", opt.max_len);

  int first = 0;
  if (opt.max_history >= 0) first = std::max(0, static_cast<int>(history.size()) - opt.max_history);
  auto total = [&](int from) {
    int len = fixed;
    for (int h = from; h < static_cast<int>(history.size()); ++h) len += 1 + static_cast<int>(history[static_cast<std::size_t>(h)].size());
    return len;
  };
  while (first < static_cast<int>(history.size()) && total(first) > opt.max_len) ++first;

  SequenceLayout lay;
  lay.dropped_history = first;
  auto push = [&](const std::string& text, std::optional<NodeRef> node, Segment seg) {
    lay.map.text.push_back(text);
    lay.map.nodes.push_back(node);
    lay.segments.push_back(seg);
    return lay.length() - 1;
  };

  push(kCls, std::nullopt, Segment::Special);
  for (int h = first; h < static_cast<int>(history.size()); ++h) {
    const auto& utt = history[static_cast<std::size_t>(h)];
    std::vector<int> pos;
    for (int i = 0; i < static_cast<int>(utt.size()); ++i)
      pos.push_back(push(utt[static_cast<std::size_t>(i)].text, NodeRef{NodeKind::History, i, h}, Segment::History));
    lay.history_positions.push_back(std::move(pos));
    lay.history_groups.push_back(h);
    push(kCls, std::nullopt, Segment::Special);
  }
  for (int i = 0; i < static_cast<int>(current.size()); ++i)
    lay.current_positions.push_back(push(current[static_cast<std::size_t>(i)].text, NodeRef{NodeKind::Utterance, i, 0}, Segment::Current));
  push(kCls, std::nullopt, Segment::Special);
  for (int k = 0; k < sql_slots; ++k) lay.sql_positions.push_back(push("[S]", NodeRef{NodeKind::Sql, k, 0}, Segment::Sql));

  lay.table_positions.resize(s.tables.size());
  for (int t = 0; t < s.num_tables(); ++t) {
    push(kSep, std::nullopt, Segment::Special);
    for (const auto& w : s.tables[static_cast<std::size_t>(t)].words)
      lay.table_positions[static_cast<std::size_t>(t)].push_back(push(w, table_node(t), Segment::Table));
  }
  lay.column_positions.resize(s.columns.size());
  for (int c = 0; c < s.num_columns(); ++c) {
    push(kSep, std::nullopt, Segment::Special);
    const auto& col = s.columns[static_cast<std::size_t>(c)];
    if (col.table < 0) {
      lay.column_positions[static_cast<std::size_t>(c)].push_back(push("*", column_node(c), Segment::Column));
    } else {
      for (const auto& w : col.words) lay.column_positions[static_cast<std::size_t>(c)].push_back(push(w, column_node(c), Segment::Column));
    }
  }
  return lay;
}

inline void dump_layout(std::ostream& os, const SequenceLayout& lay, const Schema& s) {
  constexpr std::string_view seg_names[] = {"special", "current", "history", "sql", "table", "column"};
  os << "# layout L=" << lay.length() << " dropped_history=" << lay.dropped_history << "\n";
  for (int i = 0; i < lay.length(); ++i) {
    const auto& n = lay.map.nodes[static_cast<std::size_t>(i)];
    os << i << "\t" << lay.map.text[static_cast<std::size_t>(i)] << "\t" << seg_names[static_cast<int>(lay.segments[static_cast<std::size_t>(i)])]
       << "\t" << (n ? node_label(*n, s) : "-") << "\n";
  }
}

// ---------------------------------------------------------------------------
// SQL encoder input

struct SchemaBlock {
  int table = -1;
  std::vector<std::string> table_words;
  std::vector<std::vector<std::string>> columns;  // words of each column, in block order
  std::vector<int> column_ids;
};

struct SqlBertInput {
  std::vector<std::string> sql;       // SQL segment, without [CLS]
  std::vector<bool> reserved;         // per SQL token: keyword, operator or punctuation
  std::vector<std::string> question;  // question segment
  std::vector<SchemaBlock> schema;

  // Position of SQL token k in the flattened sequence.
  static int sql_position(int k) { return k + 1; }

  std::vector<std::string> flatten() const {
    std::vector<std::string> out{kCls};
    out.insert(out.end(), sql.begin(), sql.end());
    out.push_back(kSep);
    out.insert(out.end(), question.begin(), question.end());
    for (const auto& b : schema) {
      out.push_back(kSep);
      out.insert(out.end(), b.table_words.begin(), b.table_words.end());
      out.push_back(":");
      for (std::size_t c = 0; c < b.columns.size(); ++c) {
        if (c) out.push_back(",");
        out.insert(out.end(), b.columns[c].begin(), b.columns[c].end());
      }
    }
    return out;
  }
};

inline bool is_reserved_piece(PieceKind k) { return k == PieceKind::Keyword || k == PieceKind::Punct || k == PieceKind::Alias; }

inline std::vector<SchemaBlock> schema_blocks(const Schema& s) {
  std::vector<SchemaBlock> out;
  for (int t = 0; t < s.num_tables(); ++t) {
    const auto& tab = s.tables[static_cast<std::size_t>(t)];
    SchemaBlock b{t, tab.words, {}, {}};
    for (int c : tab.columns) {
      b.columns.push_back(s.columns[static_cast<std::size_t>(c)].words);
      b.column_ids.push_back(c);
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline SqlBertInput build_sqlbert_input(const std::vector<SqlToken>& sql, const TokenSeq& question, const Schema& s) {
  SqlBertInput in;
  for (const auto& t : sql) {
    in.sql.push_back(t.text);
    in.reserved.push_back(is_reserved_piece(t.kind));
  }
  for (const auto& t : question) in.question.push_back(t.text);
  in.schema = schema_blocks(s);
  return in;
}

inline SqlBertInput build_sqlbert_input(const Query& sql, const TokenSeq& question, const Schema& s) {
  return build_sqlbert_input(sql_tokens(sql, s), question, s);
}

// Question of the SQL encoder: all given utterances concatenated in order.
inline TokenSeq concat_utterances(const std::vector<TokenSeq>& utterances) {
  TokenSeq out;
  for (const auto& u : utterances) out.insert(out.end(), u.begin(), u.end());
  return out;
}

}  // namespace hiesql
