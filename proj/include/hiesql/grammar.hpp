#pragma once

// Grammar-constrained action language for SQL trees.
//
// A query is generated top-down, depth-first, as a sequence of actions:
// ApplyRule picks a production for the nonterminal on top of the frontier,
// SelectColumn / SelectTable fill schema slots and EmitValue fills literal
// slots. Derivation tracks the frontier and which actions keep the partial
// tree valid, so decoding can never leave the grammar.

#include <algorithm>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hiesql/sql_ast.hpp"

namespace hiesql {

inline constexpr int kMaxSelectItems = 5;
inline constexpr int kMaxFromTables = 4;
inline constexpr int kMaxGroupColumns = 2;
inline constexpr int kMaxOrderItems = 3;
inline constexpr int kMaxQueryDepth = 2;
inline constexpr int kGrammarVersion = 1;

enum class RuleKind : std::uint8_t { SetOperation, Select, Agg, And, Or, Predicate, Order };

struct SelectShape {
  bool distinct = false;
  int n_select = 1;
  int n_from = 1;
  bool where = false;
  int n_group = 0;
  bool having = false;
  bool order = false;

  friend bool operator==(const SelectShape&, const SelectShape&) = default;
};

struct Rule {
  RuleKind kind = RuleKind::Select;
  SetOp set_op = SetOp::None;
  SelectShape shape;
  Agg agg = Agg::None;
  bool distinct = false;
  CmpOp op = CmpOp::Eq;
  bool subquery = false;
  OrderDir dir = OrderDir::Asc;
  bool limit = false;
  int n_items = 0;

  std::string name() const {
    std::ostringstream os;
    switch (kind) {
      case RuleKind::SetOperation: os << "query -> " << to_lower_ascii(set_op_name(set_op)) << "(select, select)"; break;
      case RuleKind::Select:
        os << "select -> select(distinct=" << shape.distinct << ",items=" << shape.n_select << ",from=" << shape.n_from
           << ",where=" << shape.where << ",group=" << shape.n_group << ",having=" << shape.having << ",order=" << shape.order << ")";
        break;
      case RuleKind::Agg: os << "col_unit -> " << agg_name(agg) << (distinct ? "(distinct column)" : "(column)"); break;
      case RuleKind::And: os << "cond -> and(cond, cond)"; break;
      case RuleKind::Or: os << "cond -> or(cond, cond)"; break;
      case RuleKind::Predicate:
        os << "cond -> pred(col_unit " << cmp_name(op) << (subquery ? " query" : (op == CmpOp::Between ? " value value" : " value")) << ")";
        break;
      case RuleKind::Order:
        os << "order -> order_by(" << (dir == OrderDir::Asc ? "asc" : "desc") << ",items=" << n_items << ",limit=" << limit << ")";
        break;
    }
    return os.str();
  }
};

// Feature slots used to factorize rule embeddings.
enum class RuleFeature : int {
  Kind = 0,
  SetOp = Kind + 7,
  Distinct = SetOp + 4,
  NSelect = Distinct + 2,
  NFrom = NSelect + kMaxSelectItems,
  Where = NFrom + kMaxFromTables,
  NGroup = Where + 2,
  Having = NGroup + kMaxGroupColumns + 1,
  Order = Having + 2,
  Agg = Order + 2,
  AggDistinct = Agg + kAggCount,
  Op = AggDistinct + 2,
  Subquery = Op + kCmpOpCount,
  Dir = Subquery + 2,
  Limit = Dir + 2,
  NItems = Limit + 2,
  Count_ = NItems + kMaxOrderItems
};

inline constexpr int kRuleFeatureCount = static_cast<int>(RuleFeature::Count_);

class Grammar {
 public:
  static const Grammar& get() {
    static const Grammar g;
    return g;
  }

  const std::vector<Rule>& rules() const { return rules_; }
  int size() const { return static_cast<int>(rules_.size()); }
  const Rule& rule(int id) const {
    check(id >= 0 && id < size(), "rule id ", id, " out of range");
    return rules_[static_cast<std::size_t>(id)];
  }

  int set_rule(SetOp op) const { return find([&](const Rule& r) { return r.kind == RuleKind::SetOperation && r.set_op == op; }); }
  int select_rule(const SelectShape& s) const {
    return find([&](const Rule& r) { return r.kind == RuleKind::Select && r.shape == s; });
  }
  int agg_rule(Agg a, bool distinct) const {
    return find([&](const Rule& r) { return r.kind == RuleKind::Agg && r.agg == a && r.distinct == distinct; });
  }
  int and_rule() const { return and_; }
  int or_rule() const { return or_; }
  int predicate_rule(CmpOp op, bool subquery) const {
    return find([&](const Rule& r) { return r.kind == RuleKind::Predicate && r.op == op && r.subquery == subquery; });
  }
  int order_rule(OrderDir dir, bool limit, int n) const {
    return find([&](const Rule& r) { return r.kind == RuleKind::Order && r.dir == dir && r.limit == limit && r.n_items == n; });
  }

  const std::vector<int>& rules_of(RuleKind k) const { return by_kind_[static_cast<std::size_t>(k)]; }

  std::vector<int> features(int id) const {
    const Rule& r = rule(id);
    auto f = [](RuleFeature base, int off) { return static_cast<int>(base) + off; };
    std::vector<int> out{f(RuleFeature::Kind, static_cast<int>(r.kind))};
    switch (r.kind) {
      case RuleKind::SetOperation: out.push_back(f(RuleFeature::SetOp, static_cast<int>(r.set_op))); break;
      case RuleKind::Select:
        out.push_back(f(RuleFeature::Distinct, r.shape.distinct));
        out.push_back(f(RuleFeature::NSelect, r.shape.n_select - 1));
        out.push_back(f(RuleFeature::NFrom, r.shape.n_from - 1));
        out.push_back(f(RuleFeature::Where, r.shape.where));
        out.push_back(f(RuleFeature::NGroup, r.shape.n_group));
        out.push_back(f(RuleFeature::Having, r.shape.having));
        out.push_back(f(RuleFeature::Order, r.shape.order));
        break;
      case RuleKind::Agg:
        out.push_back(f(RuleFeature::Agg, static_cast<int>(r.agg)));
        out.push_back(f(RuleFeature::AggDistinct, r.distinct));
        break;
      case RuleKind::And:
      case RuleKind::Or: break;
      case RuleKind::Predicate:
        out.push_back(f(RuleFeature::Op, static_cast<int>(r.op)));
        out.push_back(f(RuleFeature::Subquery, r.subquery));
        break;
      case RuleKind::Order:
        out.push_back(f(RuleFeature::Dir, static_cast<int>(r.dir)));
        out.push_back(f(RuleFeature::Limit, r.limit));
        out.push_back(f(RuleFeature::NItems, r.n_items - 1));
        break;
    }
    return out;
  }

  // Versioned rule table, one "id<TAB>production" line per rule.
  std::string table() const {
    std::ostringstream os;
    os << "# grammar v" << kGrammarVersion << "\n";
    for (int i = 0; i < size(); ++i) os << i << '\t' << rules_[static_cast<std::size_t>(i)].name() << '\n';
    return os.str();
  }

 private:
  Grammar() {
    auto add = [&](Rule r) {
      by_kind_[static_cast<std::size_t>(r.kind)].push_back(size());
      rules_.push_back(r);
    };
    for (SetOp op : {SetOp::Intersect, SetOp::Union, SetOp::Except}) {
      Rule r;
      r.kind = RuleKind::SetOperation;
      r.set_op = op;
      add(r);
    }
    for (int d = 0; d < 2; ++d)
      for (int ns = 1; ns <= kMaxSelectItems; ++ns)
        for (int nf = 1; nf <= kMaxFromTables; ++nf)
          for (int w = 0; w < 2; ++w)
            for (int ng = 0; ng <= kMaxGroupColumns; ++ng)
              for (int h = 0; h < (ng > 0 ? 2 : 1); ++h)
                for (int o = 0; o < 2; ++o) {
                  Rule r;
                  r.kind = RuleKind::Select;
                  r.shape = SelectShape{d == 1, ns, nf, w == 1, ng, h == 1, o == 1};
                  add(r);
                }
    {
      Rule r;
      r.kind = RuleKind::Agg;
      add(r);
      for (Agg a : {Agg::Count, Agg::Sum, Agg::Avg, Agg::Min, Agg::Max})
        for (int d = 0; d < 2; ++d) {
          r.agg = a;
          r.distinct = d == 1;
          add(r);
        }
    }
    and_ = size();
    add(kind_only(RuleKind::And));
    or_ = size();
    add(kind_only(RuleKind::Or));
    for (CmpOp op : {CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Like, CmpOp::Between}) {
      Rule r;
      r.kind = RuleKind::Predicate;
      r.op = op;
      add(r);
    }
    for (CmpOp op : {CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::In, CmpOp::NotIn}) {
      Rule r;
      r.kind = RuleKind::Predicate;
      r.op = op;
      r.subquery = true;
      add(r);
    }
    for (OrderDir dir : {OrderDir::Asc, OrderDir::Desc})
      for (int lim = 0; lim < 2; ++lim)
        for (int n = 1; n <= kMaxOrderItems; ++n) {
          Rule r;
          r.kind = RuleKind::Order;
          r.dir = dir;
          r.limit = lim == 1;
          r.n_items = n;
          add(r);
        }
  }

  static Rule kind_only(RuleKind k) {
    Rule r;
    r.kind = k;
    return r;
  }

  template <typename Pred>
  int find(Pred pred) const {
    for (int i = 0; i < size(); ++i)
      if (pred(rules_[static_cast<std::size_t>(i)])) return i;
    return -1;
  }

  std::vector<Rule> rules_;
  std::vector<std::vector<int>> by_kind_ = std::vector<std::vector<int>>(7);
  int and_ = -1;
  int or_ = -1;
};

// ---------------------------------------------------------------------------
// Actions

enum class ActionKind : std::uint8_t { ApplyRule, SelectColumn, SelectTable, EmitValue };

struct Action {
  ActionKind kind = ActionKind::ApplyRule;
  int id = -1;        // rule, column or table index
  std::string value;  // literal for EmitValue

  static Action rule(int r) { return {ActionKind::ApplyRule, r, {}}; }
  static Action column(int c) { return {ActionKind::SelectColumn, c, {}}; }
  static Action table(int t) { return {ActionKind::SelectTable, t, {}}; }
  static Action emit(std::string v) { return {ActionKind::EmitValue, -1, std::move(v)}; }

  friend bool operator==(const Action&, const Action&) = default;
};

using ActionSequence = std::vector<Action>;

inline std::string describe(const Action& a) {
  switch (a.kind) {
    case ActionKind::ApplyRule: return "ApplyRule[" + Grammar::get().rule(a.id).name() + "]";
    case ActionKind::SelectColumn: return "SelectColumn(" + std::to_string(a.id) + ")";
    case ActionKind::SelectTable: return "SelectTable(" + std::to_string(a.id) + ")";
    case ActionKind::EmitValue: return "EmitValue(\"" + a.value + "\")";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Derivation state

enum class SlotKind : std::uint8_t { Query, Select, ColUnit, Column, Table, Cond, Value, Limit, Order };
enum class Clause : std::uint8_t { Select, Where, GroupBy, Having, OrderBy };

inline constexpr int kSlotKindCount = 9;
inline constexpr int kClauseCount = 5;

inline constexpr std::string_view slot_name(SlotKind k) {
  constexpr std::string_view names[] = {"query", "select", "col_unit", "column", "table", "cond", "value", "limit", "order"};
  return names[static_cast<int>(k)];
}
inline constexpr std::string_view clause_name(Clause c) {
  constexpr std::string_view names[] = {"select", "where", "group_by", "having", "order_by"};
  return names[static_cast<int>(c)];
}

struct Slot {
  SlotKind kind = SlotKind::Query;
  Clause clause = Clause::Select;
  int depth = 1;
  int frame = -1;  // scope of the enclosing SELECT
  Agg agg = Agg::None;
  bool distinct = false;
  int parent_step = -1;  // action index that created this slot

  // Dense id of (kind, clause) for embedding lookups.
  int feature() const { return static_cast<int>(kind) * kClauseCount + static_cast<int>(clause); }
};

// Literal values a decoder may emit at this point.
struct ValueCandidates {
  std::vector<std::string> values;
};

inline bool is_positive_integer(std::string_view v) {
  if (v.empty() || v.size() > 9) return false;
  for (char c : v)
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
  return std::stoi(std::string(v)) > 0;
}

struct LegalSet {
  SlotKind slot = SlotKind::Query;
  std::vector<int> ids;             // rules, columns or tables
  std::vector<std::string> values;  // literals for Value/Limit slots

  std::size_t size() const { return slot == SlotKind::Value || slot == SlotKind::Limit ? values.size() : ids.size(); }
  bool empty() const { return size() == 0; }
};

class Derivation {
 public:
  explicit Derivation(const Schema& s) : s_(&s) { stack_.push_back(Slot{SlotKind::Query, Clause::Select, 1, -1}); }

  bool complete() const { return stack_.empty(); }
  const Slot& frontier() const {
    check(!complete(), "derivation is complete");
    return stack_.back();
  }
  int steps() const { return steps_; }
  const Schema& schema() const { return *s_; }

  std::string describe_frontier() const {
    if (complete()) return "complete";
    const Slot& f = stack_.back();
    std::ostringstream os;
    os << slot_name(f.kind) << "(clause=" << clause_name(f.clause) << ", depth=" << f.depth;
    if (f.kind == SlotKind::Column) os << ", agg=" << agg_name(f.agg);
    os << "), " << stack_.size() << " open slot(s), step " << steps_;
    return os.str();
  }

  LegalSet legal(const ValueCandidates* values = nullptr) const {
    LegalSet out;
    if (complete()) return out;
    const Slot& f = stack_.back();
    out.slot = f.kind;
    const auto& g = Grammar::get();
    switch (f.kind) {
      case SlotKind::Query:
      case SlotKind::Select:
        if (f.kind == SlotKind::Query)
          for (int r : g.rules_of(RuleKind::SetOperation)) out.ids.push_back(r);
        for (int r : g.rules_of(RuleKind::Select))
          if (g.rule(r).shape.n_from <= s_->num_tables()) out.ids.push_back(r);
        break;
      case SlotKind::ColUnit:
        for (int r : g.rules_of(RuleKind::Agg)) {
          const Rule& rule = g.rule(r);
          if (has_legal_column(f, rule.agg, rule.distinct)) out.ids.push_back(r);
        }
        break;
      case SlotKind::Column:
        for (int c = 0; c < s_->num_columns(); ++c)
          if (column_legal(f, c)) out.ids.push_back(c);
        break;
      case SlotKind::Table:
        for (int t = 0; t < s_->num_tables(); ++t)
          if (table_legal(f, t)) out.ids.push_back(t);
        break;
      case SlotKind::Cond:
        out.ids.push_back(g.and_rule());
        out.ids.push_back(g.or_rule());
        for (int r : g.rules_of(RuleKind::Predicate))
          if (!g.rule(r).subquery || f.depth < kMaxQueryDepth) out.ids.push_back(r);
        break;
      case SlotKind::Order:
        for (int r : g.rules_of(RuleKind::Order)) out.ids.push_back(r);
        break;
      case SlotKind::Value:
      case SlotKind::Limit:
        check(values != nullptr, "legal(): value slots need candidate literals");
        for (const auto& v : values->values)
          if (f.kind == SlotKind::Value || is_positive_integer(v)) out.values.push_back(v);
        break;
    }
    return out;
  }

  bool is_legal(const Action& a, const ValueCandidates* values = nullptr) const {
    if (complete()) return false;
    const Slot& f = stack_.back();
    const auto& g = Grammar::get();
    switch (f.kind) {
      case SlotKind::Query:
      case SlotKind::Select: {
        if (a.kind != ActionKind::ApplyRule || a.id < 0 || a.id >= g.size()) return false;
        const Rule& r = g.rule(a.id);
        if (r.kind == RuleKind::SetOperation) return f.kind == SlotKind::Query;
        return r.kind == RuleKind::Select && r.shape.n_from <= s_->num_tables();
      }
      case SlotKind::ColUnit: {
        if (a.kind != ActionKind::ApplyRule || a.id < 0 || a.id >= g.size()) return false;
        const Rule& r = g.rule(a.id);
        return r.kind == RuleKind::Agg && has_legal_column(f, r.agg, r.distinct);
      }
      case SlotKind::Cond: {
        if (a.kind != ActionKind::ApplyRule || a.id < 0 || a.id >= g.size()) return false;
        const Rule& r = g.rule(a.id);
        if (r.kind == RuleKind::And || r.kind == RuleKind::Or) return true;
        return r.kind == RuleKind::Predicate && (!r.subquery || f.depth < kMaxQueryDepth);
      }
      case SlotKind::Order:
        return a.kind == ActionKind::ApplyRule && a.id >= 0 && a.id < g.size() && g.rule(a.id).kind == RuleKind::Order;
      case SlotKind::Column: return a.kind == ActionKind::SelectColumn && column_legal(f, a.id);
      case SlotKind::Table: return a.kind == ActionKind::SelectTable && table_legal(f, a.id);
      case SlotKind::Value:
      case SlotKind::Limit:
        if (a.kind != ActionKind::EmitValue) return false;
        if (f.kind == SlotKind::Limit && !is_positive_integer(a.value)) return false;
        if (!values) return true;
        return std::find(values->values.begin(), values->values.end(), a.value) != values->values.end();
    }
    return false;
  }

  void apply(const Action& a, const ValueCandidates* values = nullptr) {
    check(!complete(), "action ", describe(a), " after the derivation completed");
    check(is_legal(a, values), "illegal action ", describe(a), " at frontier ", describe_frontier());
    const Slot f = stack_.back();
    stack_.pop_back();
    const int step = steps_++;
    const auto& g = Grammar::get();
    std::vector<Slot> children;
    auto child = [&](SlotKind k, Clause c, int depth, int frame) {
      Slot s{k, c, depth, frame};
      s.parent_step = step;
      children.push_back(s);
    };
    switch (a.kind) {
      case ActionKind::ApplyRule: {
        const Rule& r = g.rule(a.id);
        switch (r.kind) {
          case RuleKind::SetOperation:
            child(SlotKind::Select, Clause::Select, f.depth, -1);
            child(SlotKind::Select, Clause::Select, f.depth, -1);
            break;
          case RuleKind::Select: {
            const int frame = static_cast<int>(frames_.size());
            frames_.push_back(Frame{r.shape.n_from, {}, {}});
            for (int i = 0; i < r.shape.n_select; ++i) child(SlotKind::ColUnit, Clause::Select, f.depth, frame);
            for (int i = 0; i < r.shape.n_from; ++i) child(SlotKind::Table, Clause::Select, f.depth, frame);
            if (r.shape.where) child(SlotKind::Cond, Clause::Where, f.depth, frame);
            for (int i = 0; i < r.shape.n_group; ++i) child(SlotKind::Column, Clause::GroupBy, f.depth, frame);
            if (r.shape.having) child(SlotKind::Cond, Clause::Having, f.depth, frame);
            if (r.shape.order) child(SlotKind::Order, Clause::OrderBy, f.depth, frame);
            break;
          }
          case RuleKind::Agg:
            child(SlotKind::Column, f.clause, f.depth, f.frame);
            children.back().agg = r.agg;
            children.back().distinct = r.distinct;
            break;
          case RuleKind::And:
          case RuleKind::Or:
            child(SlotKind::Cond, f.clause, f.depth, f.frame);
            child(SlotKind::Cond, f.clause, f.depth, f.frame);
            break;
          case RuleKind::Predicate:
            child(SlotKind::ColUnit, f.clause, f.depth, f.frame);
            if (r.subquery) {
              child(SlotKind::Query, f.clause, f.depth + 1, -1);
            } else {
              child(SlotKind::Value, f.clause, f.depth, f.frame);
              if (r.op == CmpOp::Between) child(SlotKind::Value, f.clause, f.depth, f.frame);
            }
            break;
          case RuleKind::Order:
            for (int i = 0; i < r.n_items; ++i) child(SlotKind::ColUnit, Clause::OrderBy, f.depth, f.frame);
            if (r.limit) child(SlotKind::Limit, Clause::OrderBy, f.depth, f.frame);
            break;
        }
        break;
      }
      case ActionKind::SelectColumn: {
        auto& fr = frames_[static_cast<std::size_t>(f.frame)];
        if (a.id > 0 && !from_done(fr)) {
          const int t = s_->columns[static_cast<std::size_t>(a.id)].table;
          if (std::find(fr.required.begin(), fr.required.end(), t) == fr.required.end()) fr.required.push_back(t);
        }
        break;
      }
      case ActionKind::SelectTable:
        frames_[static_cast<std::size_t>(f.frame)].chosen.push_back(a.id);
        break;
      case ActionKind::EmitValue:
        break;
    }
    for (auto it = children.rbegin(); it != children.rend(); ++it) stack_.push_back(*it);
  }

 private:
  struct Frame {
    int from_total = 0;
    std::vector<int> chosen;
    std::vector<int> required;
  };

  static bool from_done(const Frame& fr) { return static_cast<int>(fr.chosen.size()) == fr.from_total; }

  static bool star_allowed(Clause clause, Agg agg, bool distinct) {
    if (distinct) return false;
    if (agg == Agg::None) return clause == Clause::Select;
    return agg == Agg::Count && (clause == Clause::Select || clause == Clause::Having || clause == Clause::OrderBy);
  }

  bool column_legal_for(const Slot& f, Agg agg, bool distinct, int c) const {
    if (c < 0 || c >= s_->num_columns()) return false;
    if (c == 0) return f.clause != Clause::GroupBy && star_allowed(f.clause, agg, distinct);
    const Frame& fr = frames_[static_cast<std::size_t>(f.frame)];
    const int t = s_->columns[static_cast<std::size_t>(c)].table;
    if (from_done(fr)) return std::find(fr.chosen.begin(), fr.chosen.end(), t) != fr.chosen.end();
    const bool known = std::find(fr.required.begin(), fr.required.end(), t) != fr.required.end();
    return known || static_cast<int>(fr.required.size()) < fr.from_total;
  }

  bool column_legal(const Slot& f, int c) const { return column_legal_for(f, f.agg, f.distinct, c); }

  bool has_legal_column(const Slot& f, Agg agg, bool distinct) const {
    for (int c = 0; c < s_->num_columns(); ++c)
      if (column_legal_for(f, agg, distinct, c)) return true;
    return false;
  }

  bool table_legal(const Slot& f, int t) const {
    if (t < 0 || t >= s_->num_tables()) return false;
    const Frame& fr = frames_[static_cast<std::size_t>(f.frame)];
    if (std::find(fr.chosen.begin(), fr.chosen.end(), t) != fr.chosen.end()) return false;
    std::size_t missing = 0;
    for (int r : fr.required)
      if (std::find(fr.chosen.begin(), fr.chosen.end(), r) == fr.chosen.end()) ++missing;
    const std::size_t remaining = static_cast<std::size_t>(fr.from_total) - fr.chosen.size();
    if (missing < remaining) return true;
    return std::find(fr.required.begin(), fr.required.end(), t) != fr.required.end();
  }

  const Schema* s_;
  std::vector<Slot> stack_;
  std::vector<Frame> frames_;
  int steps_ = 0;
};

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

class ActionWriter {
 public:
  explicit ActionWriter(const Schema& s) : s_(s) {}

  ActionSequence run(const Query& q) {
    query(q, 1);
    return std::move(out_);
  }

 private:
  void query(const Query& q, int depth) {
    check(depth <= kMaxQueryDepth, "query nesting deeper than ", kMaxQueryDepth, " is outside the grammar");
    if (q.op != SetOp::None) {
      check(q.right.has_value(), "set operation without right operand");
      out_.push_back(Action::rule(Grammar::get().set_rule(q.op)));
      core(q.left, depth);
      core(*q.right, depth);
    } else {
      check(!q.right.has_value(), "right operand without set operation");
      core(q.left, depth);
    }
  }

  void core(const SelectCore& q, int depth) {
    SelectShape shape{q.distinct,
                      static_cast<int>(q.select.size()),
                      static_cast<int>(q.from.size()),
                      q.where.has_value(),
                      static_cast<int>(q.group_by.size()),
                      q.having.has_value(),
                      q.order_by.has_value()};
    check(shape.n_select >= 1 && shape.n_select <= kMaxSelectItems, "SELECT list of ", shape.n_select, " items is outside the grammar");
    check(shape.n_from >= 1 && shape.n_from <= kMaxFromTables, "FROM list of ", shape.n_from, " tables is outside the grammar");
    check(shape.n_group <= kMaxGroupColumns, "GROUP BY with ", shape.n_group, " columns is outside the grammar");
    check(!shape.having || shape.n_group > 0, "HAVING without GROUP BY is outside the grammar");
    out_.push_back(Action::rule(Grammar::get().select_rule(shape)));
    for (const auto& u : q.select) col_unit(u);
    for (int t : q.from) out_.push_back(Action::table(t));
    if (q.where) cond(*q.where, depth);
    for (int c : q.group_by) out_.push_back(Action::column(c));
    if (q.having) cond(*q.having, depth);
    if (q.order_by) {
      const auto& ob = *q.order_by;
      const int n = static_cast<int>(ob.items.size());
      check(n >= 1 && n <= kMaxOrderItems, "ORDER BY with ", n, " items is outside the grammar");
      out_.push_back(Action::rule(Grammar::get().order_rule(ob.dir, ob.limit.has_value(), n)));
      for (const auto& u : ob.items) col_unit(u);
      if (ob.limit) out_.push_back(Action::emit(std::to_string(*ob.limit)));
    }
  }

  void col_unit(const ColUnit& u) {
    const int r = Grammar::get().agg_rule(u.agg, u.distinct);
    check(r >= 0, "DISTINCT on a bare column is outside the grammar");
    out_.push_back(Action::rule(r));
    out_.push_back(Action::column(u.column));
  }

  void cond(const Condition& c, int depth) {
    const auto& g = Grammar::get();
    if (c.kind != Condition::Kind::Leaf) {
      check(c.children.size() == 2, "and/or node needs two children");
      out_.push_back(Action::rule(c.kind == Condition::Kind::And ? g.and_rule() : g.or_rule()));
      cond(c.children[0], depth);
      cond(c.children[1], depth);
      return;
    }
    check(c.pred.has_value(), "condition leaf without predicate");
    const auto& p = *c.pred;
    const bool sub = std::holds_alternative<Box<Query>>(p.rhs);
    const int r = g.predicate_rule(p.op, sub);
    check(r >= 0, "predicate ", cmp_name(p.op), sub ? " with a subquery" : " with a literal", " is outside the grammar");
    out_.push_back(Action::rule(r));
    col_unit(p.lhs);
    if (sub) {
      query(*std::get<Box<Query>>(p.rhs), depth + 1);
    } else {
      out_.push_back(Action::emit(std::get<std::string>(p.rhs)));
      if (p.op == CmpOp::Between) {
        check(p.rhs2.has_value(), "BETWEEN without upper bound");
        out_.push_back(Action::emit(*p.rhs2));
      }
    }
  }

  const Schema& s_;
  ActionSequence out_;
};

class ActionReader {
 public:
  explicit ActionReader(const ActionSequence& a) : a_(a) {}

  Query run() { return query(); }

 private:
  const Action& next() { return a_[pos_++]; }
  const Rule& next_rule() { return Grammar::get().rule(next().id); }

  Query query() {
    Query q;
    const Rule& r = next_rule();
    if (r.kind == RuleKind::SetOperation) {
      q.op = r.set_op;
      q.left = core(next_rule());
      q.right = core(next_rule());
    } else {
      q.left = core(r);
    }
    return q;
  }

  SelectCore core(const Rule& r) {
    SelectCore q;
    q.distinct = r.shape.distinct;
    for (int i = 0; i < r.shape.n_select; ++i) q.select.push_back(col_unit());
    for (int i = 0; i < r.shape.n_from; ++i) q.from.push_back(next().id);
    if (r.shape.where) q.where = cond();
    for (int i = 0; i < r.shape.n_group; ++i) q.group_by.push_back(next().id);
    if (r.shape.having) q.having = cond();
    if (r.shape.order) {
      const Rule& o = next_rule();
      OrderBy ob;
      ob.dir = o.dir;
      for (int i = 0; i < o.n_items; ++i) ob.items.push_back(col_unit());
      if (o.limit) ob.limit = std::stoi(next().value);
      q.order_by = std::move(ob);
    }
    return q;
  }

  ColUnit col_unit() {
    const Rule& r = next_rule();
    return ColUnit{r.agg, r.distinct, next().id};
  }

  Condition cond() {
    const Rule& r = next_rule();
    if (r.kind == RuleKind::And || r.kind == RuleKind::Or) {
      Condition a = cond();
      Condition b = cond();
      return Condition::both(r.kind == RuleKind::And ? Condition::Kind::And : Condition::Kind::Or, std::move(a), std::move(b));
    }
    Predicate p;
    p.op = r.op;
    p.lhs = col_unit();
    if (r.subquery) {
      p.rhs = Box<Query>(query());
    } else {
      p.rhs = next().value;
      if (r.op == CmpOp::Between) p.rhs2 = next().value;
    }
    return Condition::leaf(std::move(p));
  }

  const ActionSequence& a_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Depth-first pre-order action sequence for a tree. Throws if the tree falls
// outside the grammar or references anything outside the schema's scope rules.
inline ActionSequence sql_to_actions(const Query& q, const Schema& s) {
  ActionSequence actions = detail::ActionWriter(s).run(q);
  Derivation d(s);
  for (const auto& a : actions) {
    check(!d.complete(), "derivation completed before all actions were consumed");
    d.apply(a);
  }
  check(d.complete(), "incomplete derivation");
  return actions;
}

// Inverse of sql_to_actions. Validates the sequence against the grammar.
inline Query actions_to_sql(const ActionSequence& actions, const Schema& s) {
  check(!actions.empty(), "incomplete derivation: empty action sequence");
  Derivation d(s);
  for (std::size_t i = 0; i < actions.size(); ++i) {
    check(!d.complete(), "trailing actions after a complete derivation at position ", i);
    d.apply(actions[i]);
  }
  check(d.complete(), "incomplete derivation: frontier ", d.describe_frontier());
  return detail::ActionReader(actions).run();
}

inline LegalSet legal_actions(const Derivation& state, const ValueCandidates* values = nullptr) { return state.legal(values); }

}  // namespace hiesql
