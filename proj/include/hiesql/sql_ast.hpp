#pragma once

// Typed SQL trees for the Spider-style subset, their canonical text form, the
// word-level token stream fed to the SQL encoder, and a parser for SQL text.

#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "hiesql/schema.hpp"
#include "hiesql/text.hpp"
#include "hiesql/util.hpp"

namespace hiesql {

enum class Agg : std::uint8_t { None, Count, Sum, Avg, Min, Max };
enum class CmpOp : std::uint8_t { Eq, Ne, Lt, Le, Gt, Ge, Like, In, NotIn, Between };
enum class SetOp : std::uint8_t { None, Intersect, Union, Except };
enum class OrderDir : std::uint8_t { Asc, Desc };

inline constexpr int kAggCount = 6;
inline constexpr int kCmpOpCount = 10;

inline constexpr std::string_view agg_name(Agg a) {
  constexpr std::string_view names[] = {"none", "count", "sum", "avg", "min", "max"};
  return names[static_cast<int>(a)];
}
inline constexpr std::string_view cmp_name(CmpOp op) {
  constexpr std::string_view names[] = {"=", "!=", "<", "<=", ">", ">=", "LIKE", "IN", "NOT IN", "BETWEEN"};
  return names[static_cast<int>(op)];
}
inline constexpr std::string_view set_op_name(SetOp op) {
  constexpr std::string_view names[] = {"", "INTERSECT", "UNION", "EXCEPT"};
  return names[static_cast<int>(op)];
}

struct ColUnit {
  Agg agg = Agg::None;
  bool distinct = false;
  int column = 0;

  friend auto operator<=>(const ColUnit&, const ColUnit&) = default;
};

struct Query;

// A literal (normalized) or a nested query.
using Operand = std::variant<std::string, Box<Query>>;

struct Predicate {
  ColUnit lhs;
  CmpOp op = CmpOp::Eq;
  Operand rhs;
  std::optional<std::string> rhs2;  // upper bound of BETWEEN

  friend bool operator==(const Predicate&, const Predicate&) = default;
};

struct Condition {
  enum class Kind : std::uint8_t { Leaf, And, Or };
  Kind kind = Kind::Leaf;
  std::vector<Condition> children;  // exactly two for And/Or
  std::optional<Predicate> pred;    // set for Leaf

  static Condition leaf(Predicate p) { return Condition{Kind::Leaf, {}, std::move(p)}; }
  static Condition both(Kind k, Condition a, Condition b) {
    Condition c{k, {}, std::nullopt};
    c.children.push_back(std::move(a));
    c.children.push_back(std::move(b));
    return c;
  }

  friend bool operator==(const Condition&, const Condition&) = default;
};

struct OrderBy {
  OrderDir dir = OrderDir::Asc;
  std::vector<ColUnit> items;
  std::optional<int> limit;

  friend bool operator==(const OrderBy&, const OrderBy&) = default;
};

struct SelectCore {
  bool distinct = false;
  std::vector<ColUnit> select;
  std::vector<int> from;  // table indices; joins follow FK paths
  std::optional<Condition> where;
  std::vector<int> group_by;  // column indices
  std::optional<Condition> having;
  std::optional<OrderBy> order_by;

  friend bool operator==(const SelectCore&, const SelectCore&) = default;
};

struct Query {
  SetOp op = SetOp::None;
  SelectCore left;
  std::optional<SelectCore> right;  // present iff op != None

  friend bool operator==(const Query&, const Query&) = default;
};

using SqlAst = Query;

// ---------------------------------------------------------------------------
// Emission: one walk produces typed pieces, rendered either as SQL text or as
// the encoder's word tokens.

enum class PieceKind : std::uint8_t { Keyword, Punct, Alias, Column, Table, Star, Value };

struct SqlPiece {
  PieceKind kind;
  std::string text;
  int ref = -1;  // column/table index for identifier pieces
};

namespace detail {

inline bool looks_numeric(std::string_view v) {
  if (v.empty()) return false;
  bool digit = false, dot = false;
  for (char c : v) {
    if (std::isdigit(static_cast<unsigned char>(c))) {
      digit = true;
    } else if (c == '.' && !dot) {
      dot = true;
    } else {
      return false;
    }
  }
  return digit;
}

class Emitter {
 public:
  explicit Emitter(const Schema& s) : s_(s) {}

  std::vector<SqlPiece> run(const Query& q) {
    query(q);
    return std::move(out_);
  }

 private:
  void kw(std::string_view k) { out_.push_back({PieceKind::Keyword, std::string(k)}); }
  void punct(std::string_view p) { out_.push_back({PieceKind::Punct, std::string(p)}); }

  void query(const Query& q) {
    core(q.left);
    if (q.op != SetOp::None) {
      check(q.right.has_value(), "set operation without right operand");
      kw(set_op_name(q.op));
      core(*q.right);
    }
  }

  const Column& column(int c) const {
    check(c >= 0 && c < s_.num_columns(), "column index ", c, " out of schema ", s_.db_id);
    return s_.columns[static_cast<std::size_t>(c)];
  }
  const Table& table(int t) const {
    check(t >= 0 && t < s_.num_tables(), "table index ", t, " out of schema ", s_.db_id);
    return s_.tables[static_cast<std::size_t>(t)];
  }

  void column_ref(int c, const std::vector<int>& from) {
    if (c == 0) {
      out_.push_back({PieceKind::Star, "*", 0});
      return;
    }
    const auto& col = column(c);
    if (from.size() > 1) {
      auto it = std::find(from.begin(), from.end(), col.table);
      check(it != from.end(), "column ", col.name, " is not in scope");
      out_.push_back({PieceKind::Alias, "T" + std::to_string(it - from.begin() + 1)});
      punct(".");
    }
    out_.push_back({PieceKind::Column, col.name, c});
  }

  void col_unit(const ColUnit& u, const std::vector<int>& from) {
    if (u.agg == Agg::None) {
      if (u.distinct) kw("DISTINCT");
      column_ref(u.column, from);
      return;
    }
    std::string name(agg_name(u.agg));
    for (auto& ch : name) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    kw(name);
    punct("(");
    if (u.distinct) kw("DISTINCT");
    column_ref(u.column, from);
    punct(")");
  }

  void value(const std::string& v, bool like) {
    std::string text = like ? "%" + v + "%" : v;
    out_.push_back({PieceKind::Value, text});
  }

  void operand(const Operand& o, bool like) {
    if (const auto* v = std::get_if<std::string>(&o)) {
      value(*v, like);
    } else {
      punct("(");
      query(*std::get<Box<Query>>(o));
      punct(")");
    }
  }

  void condition(const Condition& c, const std::vector<int>& from, bool nested) {
    if (c.kind == Condition::Kind::Leaf) {
      const auto& p = *c.pred;
      col_unit(p.lhs, from);
      if (p.op == CmpOp::NotIn) {
        kw("NOT");
        kw("IN");
      } else if (p.op == CmpOp::Between || p.op == CmpOp::Like || p.op == CmpOp::In) {
        kw(cmp_name(p.op));
      } else {
        punct(cmp_name(p.op));
      }
      operand(p.rhs, p.op == CmpOp::Like);
      if (p.op == CmpOp::Between) {
        check(p.rhs2.has_value(), "BETWEEN without upper bound");
        kw("AND");
        value(*p.rhs2, false);
      }
      return;
    }
    if (nested) punct("(");
    condition(c.children[0], from, true);
    kw(c.kind == Condition::Kind::And ? "AND" : "OR");
    condition(c.children[1], from, true);
    if (nested) punct(")");
  }

  void core(const SelectCore& q) {
    check(!q.select.empty(), "SELECT list is empty");
    check(!q.from.empty(), "FROM list is empty");
    kw("SELECT");
    if (q.distinct) kw("DISTINCT");
    for (std::size_t i = 0; i < q.select.size(); ++i) {
      if (i) punct(",");
      col_unit(q.select[i], q.from);
    }
    kw("FROM");
    for (std::size_t i = 0; i < q.from.size(); ++i) {
      const int t = q.from[i];
      if (i) kw("JOIN");
      out_.push_back({PieceKind::Table, table(t).name, t});
      if (q.from.size() > 1) {
        kw("AS");
        out_.push_back({PieceKind::Alias, "T" + std::to_string(i + 1)});
      }
      if (i) join_condition(q.from, i);
    }
    if (q.where) {
      kw("WHERE");
      condition(*q.where, q.from, false);
    }
    if (!q.group_by.empty()) {
      kw("GROUP");
      kw("BY");
      for (std::size_t i = 0; i < q.group_by.size(); ++i) {
        if (i) punct(",");
        column_ref(q.group_by[i], q.from);
      }
    }
    if (q.having) {
      kw("HAVING");
      condition(*q.having, q.from, false);
    }
    if (q.order_by) {
      kw("ORDER");
      kw("BY");
      for (std::size_t i = 0; i < q.order_by->items.size(); ++i) {
        if (i) punct(",");
        col_unit(q.order_by->items[i], q.from);
      }
      kw(q.order_by->dir == OrderDir::Asc ? "ASC" : "DESC");
      if (q.order_by->limit) {
        kw("LIMIT");
        out_.push_back({PieceKind::Value, std::to_string(*q.order_by->limit)});
      }
    }
  }

  // ON clause linking from[i] to the first earlier table sharing a foreign key.
  void join_condition(const std::vector<int>& from, std::size_t i) {
    const int t = from[i];
    for (std::size_t j = 0; j < i; ++j) {
      for (auto [a, b] : s_.foreign_keys) {
        const int ta = column(a).table, tb = column(b).table;
        if ((ta == t && tb == from[j]) || (tb == t && ta == from[j])) {
          kw("ON");
          column_ref(a, from);
          punct("=");
          column_ref(b, from);
          return;
        }
      }
    }
  }

  const Schema& s_;
  std::vector<SqlPiece> out_;
};

}  // namespace detail

inline std::vector<SqlPiece> sql_pieces(const Query& q, const Schema& s) { return detail::Emitter(s).run(q); }

// Canonical SQL text: uppercase keywords, single spaces, no space around '.'
// or inside parentheses.
inline std::string to_sql(const Query& q, const Schema& s) {
  std::string out;
  const auto pieces = sql_pieces(q, s);
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    const auto& p = pieces[i];
    const bool glue_left = (p.kind == PieceKind::Punct && (p.text == "." || p.text == ")" || p.text == ",")) ||
                           (i > 0 && pieces[i - 1].kind == PieceKind::Punct && (pieces[i - 1].text == "." || pieces[i - 1].text == "("));
    if (i > 0 && !glue_left) out += ' ';
    if (p.kind == PieceKind::Value && !detail::looks_numeric(p.text)) {
      out += '"' + p.text + '"';
    } else {
      out += p.text;
    }
  }
  return out;
}

// Word-level token of the SQL encoder's SQL segment.
struct SqlToken {
  std::string text;
  PieceKind kind;
  int ref = -1;         // column/table index for identifier words
  int occurrence = -1;  // identifier occurrence this word belongs to
};

inline std::vector<SqlToken> sql_tokens(const Query& q, const Schema& s) {
  std::vector<SqlToken> out;
  int occurrence = 0;
  for (const auto& p : sql_pieces(q, s)) {
    switch (p.kind) {
      case PieceKind::Keyword:
      case PieceKind::Alias:
        out.push_back({to_lower_ascii(p.text), p.kind});
        break;
      case PieceKind::Punct:
      case PieceKind::Star:
        out.push_back({p.text, p.kind, p.kind == PieceKind::Star ? 0 : -1});
        break;
      case PieceKind::Column:
      case PieceKind::Table: {
        const auto& words = p.kind == PieceKind::Column ? s.columns[static_cast<std::size_t>(p.ref)].words
                                                        : s.tables[static_cast<std::size_t>(p.ref)].words;
        for (const auto& w : words) out.push_back({w, p.kind, p.ref, occurrence});
        ++occurrence;
        break;
      }
      case PieceKind::Value:
        for (auto& w : token_words(p.text)) out.push_back({std::move(w), PieceKind::Value});
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

struct Lexeme {
  enum class Kind { Word, Number, String, Punct, End } kind;
  std::string text;
};

inline std::vector<Lexeme> lex_sql(std::string_view sql) {
  std::vector<Lexeme> out;
  std::size_t i = 0;
  const std::size_t n = sql.size();
  while (i < n) {
    const char c = sql[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < n && (std::isalnum(static_cast<unsigned char>(sql[j])) || sql[j] == '_')) ++j;
      out.push_back({Lexeme::Kind::Word, std::string(sql.substr(i, j - i))});
      i = j;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      std::size_t j = i;
      while (j < n && (std::isdigit(static_cast<unsigned char>(sql[j])) || sql[j] == '.')) ++j;
      out.push_back({Lexeme::Kind::Number, std::string(sql.substr(i, j - i))});
      i = j;
    } else if (c == '\'' || c == '"') {
      std::size_t j = i + 1;
      while (j < n && sql[j] != c) ++j;
      check(j < n, "unterminated string literal in SQL: ", sql);
      out.push_back({Lexeme::Kind::String, std::string(sql.substr(i + 1, j - i - 1))});
      i = j + 1;
    } else {
      std::string p(1, c);
      if (i + 1 < n) {
        const std::string two(sql.substr(i, 2));
        if (two == "<=" || two == ">=" || two == "!=" || two == "<>") p = two;
      }
      check(std::string_view("(),.*=<>!;-").find(c) != std::string_view::npos, "unexpected character '", c, "' in SQL");
      out.push_back({Lexeme::Kind::Punct, p == "<>" ? std::string("!=") : p});
      i += p.size();
    }
  }
  out.push_back({Lexeme::Kind::End, ""});
  return out;
}

struct RawColRef {
  std::string qualifier;
  std::string name;  // "*" for star
};

struct RawColUnit {
  Agg agg = Agg::None;
  bool distinct = false;
  RawColRef ref;
};

class SqlParser {
 public:
  SqlParser(std::string_view sql, const Schema& s) : lex_(lex_sql(sql)), s_(s), src_(sql) {}

  Query parse() {
    Query q = query(1);
    if (peek_punct(";")) ++pos_;
    check(at_end(), "unexpected trailing input near '", cur().text, "' in: ", src_);
    return q;
  }

 private:
  using Scope = std::map<std::string, int>;  // lowercase alias/table name -> table

  const Lexeme& cur() const { return lex_[pos_]; }
  bool at_end() const { return cur().kind == Lexeme::Kind::End; }
  bool peek_kw(std::string_view k, std::size_t ahead = 0) const {
    const auto& l = lex_[std::min(pos_ + ahead, lex_.size() - 1)];
    return l.kind == Lexeme::Kind::Word && to_lower_ascii(l.text) == to_lower_ascii(k);
  }
  bool peek_punct(std::string_view p) const { return cur().kind == Lexeme::Kind::Punct && cur().text == p; }
  bool accept_kw(std::string_view k) {
    if (!peek_kw(k)) return false;
    ++pos_;
    return true;
  }
  void expect_kw(std::string_view k) { check(accept_kw(k), "expected ", k, " near '", cur().text, "' in: ", src_); }
  void expect_punct(std::string_view p) {
    check(peek_punct(p), "expected '", p, "' near '", cur().text, "' in: ", src_);
    ++pos_;
  }

  Query query(int depth) {
    check(depth <= 2, "subquery nesting deeper than 2 is outside the grammar: ", src_);
    Query q;
    q.left = select_core(depth);
    for (auto [kwd, op] : {std::pair{"INTERSECT", SetOp::Intersect}, {"UNION", SetOp::Union}, {"EXCEPT", SetOp::Except}}) {
      if (accept_kw(kwd)) {
        q.op = op;
        q.right = select_core(depth);
        break;
      }
    }
    check(!(peek_kw("INTERSECT") || peek_kw("UNION") || peek_kw("EXCEPT")), "chained set operations are outside the grammar: ", src_);
    return q;
  }

  static bool is_keyword(std::string_view w) {
    static const char* kws[] = {"select", "from", "where", "group", "by", "having", "order", "limit", "join", "on", "as",
                                "and", "or", "not", "in", "like", "between", "intersect", "union", "except", "distinct",
                                "asc", "desc", "count", "sum", "avg", "min", "max"};
    const auto lw = to_lower_ascii(w);
    for (auto* k : kws)
      if (lw == k) return true;
    return false;
  }

  std::string identifier() {
    check(cur().kind == Lexeme::Kind::Word && !is_keyword(cur().text), "expected identifier near '", cur().text, "' in: ", src_);
    return lex_[pos_++].text;
  }

  RawColRef col_ref() {
    if (peek_punct("*")) {
      ++pos_;
      return {"", "*"};
    }
    std::string a = identifier();
    if (peek_punct(".")) {
      ++pos_;
      if (peek_punct("*")) {
        ++pos_;
        return {a, "*"};
      }
      return {a, identifier()};
    }
    return {"", a};
  }

  RawColUnit col_unit() {
    RawColUnit u;
    static const std::pair<const char*, Agg> aggs[] = {
        {"count", Agg::Count}, {"sum", Agg::Sum}, {"avg", Agg::Avg}, {"min", Agg::Min}, {"max", Agg::Max}};
    for (auto [name, agg] : aggs) {
      if (peek_kw(name) && lex_[pos_ + 1].kind == Lexeme::Kind::Punct && lex_[pos_ + 1].text == "(") {
        pos_ += 2;
        u.agg = agg;
        u.distinct = accept_kw("DISTINCT");
        u.ref = col_ref();
        check(!peek_punct("+") && !peek_punct("-"), "arithmetic is outside the grammar: ", src_);
        expect_punct(")");
        return u;
      }
    }
    check(!peek_kw("DISTINCT"), "DISTINCT on a bare column outside the SELECT head is outside the grammar: ", src_);
    u.ref = col_ref();
    check(!peek_punct("-") && !peek_punct("*") && !peek_punct("+"), "arithmetic is outside the grammar: ", src_);
    return u;
  }

  int resolve_column(const RawColRef& r, const Scope& scope, const std::vector<int>& from) {
    if (r.name == "*") return 0;
    if (!r.qualifier.empty()) {
      auto it = scope.find(to_lower_ascii(r.qualifier));
      check(it != scope.end(), "unknown table alias '", r.qualifier, "' in: ", src_);
      const int c = s_.find_column(it->second, r.name);
      check(c > 0, "unknown column '", r.qualifier, ".", r.name, "' in: ", src_);
      return c;
    }
    int found = -1;
    for (int t : from) {
      const int c = s_.find_column(t, r.name);
      if (c > 0) {
        check(found < 0, "ambiguous column '", r.name, "' in: ", src_);
        found = c;
      }
    }
    check(found > 0, "unknown column '", r.name, "' in: ", src_);
    return found;
  }

  ColUnit resolve(const RawColUnit& u, const Scope& scope, const std::vector<int>& from) {
    return ColUnit{u.agg, u.distinct, resolve_column(u.ref, scope, from)};
  }

  std::string literal() {
    const auto& l = cur();
    if (l.kind == Lexeme::Kind::Number || l.kind == Lexeme::Kind::String) {
      ++pos_;
      return l.text;
    }
    if (peek_punct("-") && lex_[pos_ + 1].kind == Lexeme::Kind::Number) {
      pos_ += 2;
      return "-" + lex_[pos_ - 1].text;
    }
    fail("expected a literal value near '", l.text, "' in: ", src_);
  }

  static std::string strip_like(std::string v) {
    while (!v.empty() && v.front() == '%') v.erase(v.begin());
    while (!v.empty() && v.back() == '%') v.pop_back();
    return v;
  }

  Operand operand(int depth, bool like) {
    if (peek_punct("(")) {
      ++pos_;
      check(peek_kw("SELECT"), "parenthesized non-query operand near '", cur().text, "' in: ", src_);
      Query sub = query(depth + 1);
      expect_punct(")");
      return Box<Query>(std::move(sub));
    }
    check(cur().kind != Lexeme::Kind::Word, "column-to-column comparison is outside the grammar: ", src_);
    std::string v = literal();
    if (like) v = strip_like(v);
    return normalize_value(v);
  }

  Condition condition(int depth, const Scope& scope, const std::vector<int>& from) {
    Condition left = conjunction(depth, scope, from);
    while (accept_kw("OR")) left = Condition::both(Condition::Kind::Or, std::move(left), conjunction(depth, scope, from));
    return left;
  }

  Condition conjunction(int depth, const Scope& scope, const std::vector<int>& from) {
    Condition left = atom(depth, scope, from);
    while (accept_kw("AND")) left = Condition::both(Condition::Kind::And, std::move(left), atom(depth, scope, from));
    return left;
  }

  Condition atom(int depth, const Scope& scope, const std::vector<int>& from) {
    if (peek_punct("(")) {
      ++pos_;
      Condition c = condition(depth, scope, from);
      expect_punct(")");
      return c;
    }
    Predicate p;
    p.lhs = resolve(col_unit(), scope, from);
    if (accept_kw("NOT")) {
      if (accept_kw("IN")) {
        p.op = CmpOp::NotIn;
      } else {
        fail("NOT ", cur().text, " is outside the grammar: ", src_);
      }
    } else if (accept_kw("IN")) {
      p.op = CmpOp::In;
    } else if (accept_kw("LIKE")) {
      p.op = CmpOp::Like;
    } else if (accept_kw("BETWEEN")) {
      p.op = CmpOp::Between;
    } else {
      check(cur().kind == Lexeme::Kind::Punct, "expected comparison operator near '", cur().text, "' in: ", src_);
      const std::string op = lex_[pos_++].text;
      if (op == "=") p.op = CmpOp::Eq;
      else if (op == "!=") p.op = CmpOp::Ne;
      else if (op == "<") p.op = CmpOp::Lt;
      else if (op == "<=") p.op = CmpOp::Le;
      else if (op == ">") p.op = CmpOp::Gt;
      else if (op == ">=") p.op = CmpOp::Ge;
      else fail("unknown comparison operator '", op, "' in: ", src_);
    }
    p.rhs = operand(depth, p.op == CmpOp::Like);
    if (p.op == CmpOp::Between) {
      check(std::holds_alternative<std::string>(p.rhs), "BETWEEN with a subquery is outside the grammar: ", src_);
      expect_kw("AND");
      auto hi = operand(depth, false);
      check(std::holds_alternative<std::string>(hi), "BETWEEN with a subquery is outside the grammar: ", src_);
      p.rhs2 = std::get<std::string>(hi);
    }
    if (p.op == CmpOp::In || p.op == CmpOp::NotIn)
      check(std::holds_alternative<Box<Query>>(p.rhs), "IN with a literal list is outside the grammar: ", src_);
    return Condition::leaf(std::move(p));
  }

  SelectCore select_core(int depth) {
    SelectCore q;
    expect_kw("SELECT");
    q.distinct = accept_kw("DISTINCT");
    std::vector<RawColUnit> raw_select{col_unit()};
    while (peek_punct(",")) {
      ++pos_;
      raw_select.push_back(col_unit());
    }
    expect_kw("FROM");
    Scope scope;
    std::set<std::string> aliases;
    auto table_ref = [&]() {
      check(!peek_punct("("), "subquery in FROM is outside the grammar: ", src_);
      const std::string name = identifier();
      const int t = s_.find_table(name);
      check(t >= 0, "unknown table '", name, "' in: ", src_);
      check(std::find(q.from.begin(), q.from.end(), t) == q.from.end(), "self-join on '", name, "' is outside the grammar: ", src_);
      q.from.push_back(t);
      // An explicit alias wins over a bare table name that spells the same.
      if (!aliases.count(to_lower_ascii(name))) scope[to_lower_ascii(name)] = t;
      if (accept_kw("AS") || (cur().kind == Lexeme::Kind::Word && !is_keyword(cur().text))) {
        const std::string alias = to_lower_ascii(identifier());
        aliases.insert(alias);
        scope[alias] = t;
      }
    };
    table_ref();
    std::vector<std::pair<RawColRef, RawColRef>> join_conds;
    while (true) {
      if (accept_kw("JOIN") || (peek_punct(",") && (++pos_, true))) {
        table_ref();
        if (accept_kw("ON")) {
          do {
            RawColRef a = col_ref();
            expect_punct("=");
            RawColRef b = col_ref();
            join_conds.emplace_back(a, b);
          } while (accept_kw("AND"));
        }
      } else {
        break;
      }
    }
    for (const auto& [a, b] : join_conds) {
      resolve_column(a, scope, q.from);
      resolve_column(b, scope, q.from);
    }
    for (const auto& u : raw_select) q.select.push_back(resolve(u, scope, q.from));
    if (accept_kw("WHERE")) q.where = condition(depth, scope, q.from);
    if (accept_kw("GROUP")) {
      expect_kw("BY");
      do {
        q.group_by.push_back(resolve_column(col_ref(), scope, q.from));
      } while (peek_punct(",") && (++pos_, true));
    }
    if (accept_kw("HAVING")) q.having = condition(depth, scope, q.from);
    if (accept_kw("ORDER")) {
      expect_kw("BY");
      OrderBy ob;
      std::optional<OrderDir> dir;
      do {
        ob.items.push_back(resolve(col_unit(), scope, q.from));
        std::optional<OrderDir> d;
        if (accept_kw("ASC")) d = OrderDir::Asc;
        else if (accept_kw("DESC")) d = OrderDir::Desc;
        if (d) {
          check(!dir || *dir == *d, "mixed ORDER BY directions are outside the grammar: ", src_);
          dir = d;
        }
      } while (peek_punct(",") && (++pos_, true));
      ob.dir = dir.value_or(OrderDir::Asc);
      q.order_by = std::move(ob);
    }
    if (accept_kw("LIMIT")) {
      check(cur().kind == Lexeme::Kind::Number, "LIMIT expects a positive integer in: ", src_);
      const int lim = std::stoi(lex_[pos_++].text);
      check(lim > 0, "LIMIT expects a positive integer in: ", src_);
      if (!q.order_by) fail("LIMIT without ORDER BY is outside the grammar: ", src_);
      q.order_by->limit = lim;
    }
    return q;
  }

  std::vector<Lexeme> lex_;
  std::size_t pos_ = 0;
  const Schema& s_;
  std::string src_;
};

}  // namespace detail

// Parses SQL text of the supported subset against a schema. Values are
// normalized like utterance tokens; LIKE patterns lose their '%' wildcards.
inline Query parse_sql(std::string_view sql, const Schema& s) { return detail::SqlParser(sql, s).parse(); }

// ---------------------------------------------------------------------------
// Identifier occurrences (the SQL side of schema linking)

struct SqlIdentifier {
  NodeKind kind = NodeKind::Column;  // Column or Table
  std::string table;                 // owning table (for columns) or the table itself
  std::string column;                // empty for tables
  std::vector<int> positions;        // word positions within the SQL token stream
};

// Identifier occurrences of a token stream; positions index `tokens`.
inline std::vector<SqlIdentifier> sql_identifiers(const std::vector<SqlToken>& tokens, const Schema& s) {
  std::vector<SqlIdentifier> out;
  std::map<int, std::size_t> by_occurrence;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    if (t.occurrence < 0) continue;
    auto [it, fresh] = by_occurrence.emplace(t.occurrence, out.size());
    if (fresh) {
      SqlIdentifier id;
      if (t.kind == PieceKind::Column) {
        const auto& col = s.columns[static_cast<std::size_t>(t.ref)];
        id.kind = NodeKind::Column;
        id.table = s.tables[static_cast<std::size_t>(col.table)].name;
        id.column = col.name;
      } else {
        id.kind = NodeKind::Table;
        id.table = s.tables[static_cast<std::size_t>(t.ref)].name;
      }
      out.push_back(std::move(id));
    }
    out[it->second].positions.push_back(static_cast<int>(i));
  }
  return out;
}

}  // namespace hiesql
