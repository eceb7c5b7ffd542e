#pragma once

// Interaction-level inference (each turn sees the previous turn's predicted
// SQL), exact-set matching of SQL trees, hardness buckets and reports.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hiesql/model.hpp"
#include "hiesql/parallel.hpp"

namespace hiesql {

// ---------------------------------------------------------------------------
// Canonical matching

namespace detail {

inline std::string unit_key(const ColUnit& u) {
  return std::string(agg_name(u.agg)) + (u.distinct ? "/d/" : "//") + std::to_string(u.column);
}

inline std::string query_key(const Query& q);

inline void flatten_cond(const Condition& c, Condition::Kind kind, std::vector<const Condition*>& out) {
  if (c.kind == kind) {
    for (const auto& ch : c.children) flatten_cond(ch, kind, out);
  } else {
    out.push_back(&c);
  }
}

inline std::string cond_key(const Condition& c) {
  if (c.kind == Condition::Kind::Leaf) {
    const Predicate& p = *c.pred;
    std::string s = unit_key(p.lhs) + " " + std::string(cmp_name(p.op)) + " ";
    if (const auto* v = std::get_if<std::string>(&p.rhs)) {
      s += "'" + *v + "'";
    } else {
      s += "(" + query_key(*std::get<Box<Query>>(p.rhs)) + ")";
    }
    if (p.rhs2) s += " '" + *p.rhs2 + "'";
    return s;
  }
  // And/Or chains are multisets of their operands.
  std::vector<const Condition*> parts;
  flatten_cond(c, c.kind, parts);
  std::vector<std::string> keys;
  for (const auto* p : parts) keys.push_back(cond_key(*p));
  std::sort(keys.begin(), keys.end());
  return std::string(c.kind == Condition::Kind::And ? "AND" : "OR") + "[" + join(keys, "; ") + "]";
}

inline std::string core_key(const SelectCore& c) {
  std::vector<std::string> sel;
  for (const auto& u : c.select) sel.push_back(unit_key(u));
  std::sort(sel.begin(), sel.end());
  sel.erase(std::unique(sel.begin(), sel.end()), sel.end());
  std::vector<int> from = c.from, group = c.group_by;
  std::sort(from.begin(), from.end());
  from.erase(std::unique(from.begin(), from.end()), from.end());
  std::sort(group.begin(), group.end());
  group.erase(std::unique(group.begin(), group.end()), group.end());
  std::ostringstream os;
  os << "select" << (c.distinct ? " distinct" : "") << "{" << join(sel, ",") << "} from{";
  for (int t : from) os << t << ",";
  os << "} where{" << (c.where ? cond_key(*c.where) : "") << "} group{";
  for (int g : group) os << g << ",";
  os << "} having{" << (c.having ? cond_key(*c.having) : "") << "} order{";
  if (c.order_by) {
    os << (c.order_by->dir == OrderDir::Asc ? "asc" : "desc") << ":";
    for (const auto& u : c.order_by->items) os << unit_key(u) << ",";
    os << " limit " << (c.order_by->limit ? std::to_string(*c.order_by->limit) : "-");
  }
  os << "}";
  return os.str();
}

inline std::string query_key(const Query& q) {
  std::string s = core_key(q.left);
  if (q.op != SetOp::None) s += " " + std::string(set_op_name(q.op)) + " " + core_key(*q.right);
  return s;
}

}  // namespace detail

inline std::string canonical_form(const Query& q) { return detail::query_key(q); }

inline bool canonical_equal(const Query& pred, const Query& gold) { return canonical_form(pred) == canonical_form(gold); }

// ---------------------------------------------------------------------------
// Hardness

enum class Difficulty : std::uint8_t { Easy, Medium, Hard, Extra };
inline constexpr int kDifficultyCount = 4;

inline constexpr std::string_view difficulty_name(Difficulty d) {
  constexpr std::string_view names[] = {"easy", "medium", "hard", "extra"};
  return names[static_cast<int>(d)];
}

struct QueryComponents {
  int comp1 = 0;   // where, group, order, limit, joins, or, like
  int others = 0;  // multiple aggregates, select items, conditions, group columns
  int nested = 0;  // set operations and subqueries
};

namespace detail {

inline void walk_leaves(const Condition& c, std::vector<const Predicate*>& leaves, int& ors) {
  if (c.kind == Condition::Kind::Leaf) {
    leaves.push_back(&*c.pred);
    return;
  }
  if (c.kind == Condition::Kind::Or) ++ors;
  for (const auto& ch : c.children) walk_leaves(ch, leaves, ors);
}

}  // namespace detail

inline QueryComponents query_components(const Query& q) {
  QueryComponents k;
  const SelectCore& c = q.left;
  std::vector<const Predicate*> where, having;
  int ors = 0;
  if (c.where) detail::walk_leaves(*c.where, where, ors);
  if (c.having) detail::walk_leaves(*c.having, having, ors);

  k.comp1 += c.where ? 1 : 0;
  k.comp1 += c.group_by.empty() ? 0 : 1;
  k.comp1 += c.order_by ? 1 : 0;
  k.comp1 += c.order_by && c.order_by->limit ? 1 : 0;
  k.comp1 += std::max(0, static_cast<int>(c.from.size()) - 1);
  k.comp1 += ors;
  for (const auto* list : {&where, &having})
    for (const auto* p : *list) k.comp1 += p->op == CmpOp::Like ? 1 : 0;

  int aggs = 0;
  for (const auto& u : c.select) aggs += u.agg != Agg::None;
  for (const auto* list : {&where, &having})
    for (const auto* p : *list) aggs += p->lhs.agg != Agg::None;
  if (c.order_by)
    for (const auto& u : c.order_by->items) aggs += u.agg != Agg::None;
  k.others += aggs > 1;
  k.others += c.select.size() > 1;
  k.others += where.size() > 1;
  k.others += c.group_by.size() > 1;

  k.nested += q.op != SetOp::None;
  for (const auto* list : {&where, &having})
    for (const auto* p : *list) k.nested += std::holds_alternative<Box<Query>>(p->rhs);
  return k;
}

// Ordered rules "level comp1 others nested" as inclusive [lo, hi] ranges; the
// first matching row wins and anything unmatched is extra.
class HardnessTable {
 public:
  struct Row {
    Difficulty level;
    int lo[3], hi[3];
  };

  static const std::string& builtin_text() {
    static const std::string text =
        "# hardness v1\n"
        "# level\tcomp1_lo\tcomp1_hi\tothers_lo\tothers_hi\tnested_lo\tnested_hi\n"
        "easy\t0\t1\t0\t0\t0\t0\n"
        "medium\t0\t1\t0\t2\t0\t0\n"
        "medium\t0\t2\t0\t1\t0\t0\n"
        "hard\t0\t2\t3\tinf\t0\t0\n"
        "hard\t3\t3\t0\t2\t0\t0\n"
        "hard\t0\t1\t0\t0\t0\t1\n";
    return text;
  }

  static HardnessTable parse(std::istream& in) {
    HardnessTable t;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ss(line);
      std::string level;
      ss >> level;
      Row r{};
      if (level == "easy") {
        r.level = Difficulty::Easy;
      } else if (level == "medium") {
        r.level = Difficulty::Medium;
      } else if (level == "hard") {
        r.level = Difficulty::Hard;
      } else if (level == "extra") {
        r.level = Difficulty::Extra;
      } else {
        fail("hardness table line ", lineno, ": unknown level '", level, "'");
      }
      for (int i = 0; i < 3; ++i) {
        std::string lo, hi;
        ss >> lo >> hi;
        check(!lo.empty() && !hi.empty(), "hardness table line ", lineno, ": expected six bounds");
        r.lo[i] = std::stoi(lo);
        r.hi[i] = hi == "inf" ? std::numeric_limits<int>::max() : std::stoi(hi);
      }
      t.rows_.push_back(r);
    }
    check(!t.rows_.empty(), "hardness table has no rules");
    return t;
  }

  static HardnessTable builtin() {
    std::istringstream in(builtin_text());
    return parse(in);
  }

  static HardnessTable load(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open hardness table '", path, "'");
    return parse(in);
  }

  Difficulty classify(const QueryComponents& k) const {
    const int v[3] = {k.comp1, k.others, k.nested};
    for (const auto& r : rows_) {
      bool ok = true;
      for (int i = 0; i < 3; ++i) ok = ok && v[i] >= r.lo[i] && v[i] <= r.hi[i];
      if (ok) return r.level;
    }
    return Difficulty::Extra;
  }

 private:
  std::vector<Row> rows_;
};

inline Difficulty difficulty_of(const Query& q, const HardnessTable& table = HardnessTable::builtin()) {
  return table.classify(query_components(q));
}

// ---------------------------------------------------------------------------
// Inference over interactions

struct TurnPrediction {
  std::optional<Query> query;
  std::string sql;    // predicted SQL text, empty on failure
  std::string error;  // decode failure, if any
  double score = 0.0;
};

// Turn 1 has empty SQL slots; turn t > 1 embeds the prediction of turn t - 1.
// A failed turn is recorded and the next turn runs with empty slots.
inline std::vector<TurnPrediction> run_interaction(Model& model, SqlEncoder& sql_encoder, SqlEmbeddingCache* cache,
                                                   const InteractionRecord& r, const DatabaseSet& dbs, int beam,
                                                   const Ablation& ablation = {}) {
  const Database& db = database_for(dbs, r.db_id);
  std::vector<TokenSeq> utterances;
  for (const auto& t : r.turns) utterances.push_back(normalize_tokens(t.utterance));
  std::vector<TurnPrediction> out;
  std::optional<Query> last;
  for (std::size_t t = 0; t < r.turns.size(); ++t) {
    TurnPrediction tp;
    try {
      TurnInput in;
      in.db = &db;
      in.history.assign(utterances.begin(), utterances.begin() + static_cast<std::ptrdiff_t>(t));
      in.current = utterances[t];
      in.last_sql = last;
      const PreparedTurn p = model.prepare(in, sql_encoder, cache, ablation.drop_sql);
      const DecodeResult res = model.predict(p, beam, ablation.relations);
      tp.query = actions_to_sql(res.actions, db.schema);
      tp.sql = to_sql(*tp.query, db.schema);
      tp.score = res.score;
    } catch (const Error& e) {
      tp.query.reset();
      tp.error = e.what();
    }
    last = tp.query;
    out.push_back(std::move(tp));
  }
  return out;
}

inline std::vector<std::vector<TurnPrediction>> run_dataset(Model& model, SqlEncoder& sql_encoder, const std::vector<InteractionRecord>& data,
                                                            const DatabaseSet& dbs, int beam, const Ablation& ablation = {},
                                                            int workers = 1) {
  SqlEmbeddingCache cache;
  std::vector<std::vector<TurnPrediction>> out(data.size());
  parallel_for(data.size(), workers,
               [&](std::size_t i) { out[i] = run_interaction(model, sql_encoder, &cache, data[i], dbs, beam, ablation); });
  return out;
}

// ---------------------------------------------------------------------------
// Scores

struct Bucket {
  int total = 0;
  int correct = 0;
  double qm() const { return total ? 100.0 * correct / total : 0.0; }
};

inline constexpr int kTurnBuckets = 4;  // turns 1, 2, 3, 4+

struct EvalReport {
  int questions = 0, matched = 0;
  int interactions = 0, interactions_matched = 0;
  double qm = 0.0, im = 0.0;
  Bucket by_turn[kTurnBuckets];
  Bucket by_difficulty[kDifficultyCount];
  int tf = 0, ft = 0, tt = 0, ff = 0;  // adjacent-turn switches, former then latter
  int gold_outside_grammar = 0;

  bool consistent() const { return im <= qm + 1e-12; }
};

inline std::string turn_bucket_name(int b) { return b == kTurnBuckets - 1 ? ">=4" : std::to_string(b + 1); }

// Core scoring over per-turn match flags and difficulties.
inline EvalReport score_matches(const std::vector<std::vector<bool>>& match, const std::vector<std::vector<Difficulty>>& difficulty) {
  check(match.size() == difficulty.size(), "score: ", match.size(), " interactions with predictions, ", difficulty.size(), " with gold");
  EvalReport r;
  for (std::size_t i = 0; i < match.size(); ++i) {
    const auto& m = match[i];
    check(m.size() == difficulty[i].size(), "score: interaction ", i, " has ", m.size(), " predictions for ", difficulty[i].size(),
          " turns");
    check(!m.empty(), "score: interaction ", i, " has no turns");
    ++r.interactions;
    bool all = true;
    for (std::size_t t = 0; t < m.size(); ++t) {
      ++r.questions;
      r.matched += m[t];
      all = all && m[t];
      auto& tb = r.by_turn[std::min<std::size_t>(t, kTurnBuckets - 1)];
      ++tb.total;
      tb.correct += m[t];
      auto& db = r.by_difficulty[static_cast<int>(difficulty[i][t])];
      ++db.total;
      db.correct += m[t];
      if (t > 0) {
        const bool a = m[t - 1], b = m[t];
        r.tt += a && b;
        r.tf += a && !b;
        r.ft += !a && b;
        r.ff += !a && !b;
      }
    }
    r.interactions_matched += all;
  }
  r.qm = r.questions ? 100.0 * r.matched / r.questions : 0.0;
  r.im = r.interactions ? 100.0 * r.interactions_matched / r.interactions : 0.0;
  check(r.consistent(), "impossible report: IM ", r.im, " exceeds QM ", r.qm);
  return r;
}

// Gold turns outside the grammar always count as mismatches (difficulty extra).
inline EvalReport score(const std::vector<InteractionRecord>& data, const std::vector<std::vector<TurnPrediction>>& predictions,
                        const DatabaseSet& dbs, const HardnessTable& table = HardnessTable::builtin()) {
  check(data.size() == predictions.size(), "score: ", data.size(), " interactions but ", predictions.size(), " prediction lists");
  std::vector<std::vector<bool>> match;
  std::vector<std::vector<Difficulty>> diff;
  int outside = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Database& db = database_for(dbs, data[i].db_id);
    const auto p = parse_interaction(data[i], db.schema);
    check(predictions[i].size() == p.gold.size(), "score: interaction '", data[i].id, "' has ", predictions[i].size(),
          " predictions for ", p.gold.size(), " turns");
    std::vector<bool> m;
    std::vector<Difficulty> d;
    for (std::size_t t = 0; t < p.gold.size(); ++t) {
      if (!p.gold[t]) {
        ++outside;
        m.push_back(false);
        d.push_back(Difficulty::Extra);
        continue;
      }
      m.push_back(predictions[i][t].query && canonical_equal(*predictions[i][t].query, *p.gold[t]));
      d.push_back(table.classify(query_components(*p.gold[t])));
    }
    match.push_back(std::move(m));
    diff.push_back(std::move(d));
  }
  EvalReport r = score_matches(match, diff);
  r.gold_outside_grammar = outside;
  return r;
}

inline void print_report(std::ostream& os, const EvalReport& r) {
  os << std::fixed << std::setprecision(1);
  os << "QM " << r.qm << " (" << r.matched << "/" << r.questions << ")  IM " << r.im << " (" << r.interactions_matched << "/"
     << r.interactions << ")\n";
  os << "turn\tcount\tQM\n";
  for (int b = 0; b < kTurnBuckets; ++b) os << turn_bucket_name(b) << "\t" << r.by_turn[b].total << "\t" << r.by_turn[b].qm() << "\n";
  os << "difficulty\tcount\tQM\n";
  for (int d = 0; d < kDifficultyCount; ++d)
    os << difficulty_name(static_cast<Difficulty>(d)) << "\t" << r.by_difficulty[d].total << "\t" << r.by_difficulty[d].qm() << "\n";
  os << "switches\tT-F " << r.tf << "\tF-T " << r.ft << "\tT-T " << r.tt << "\tF-F " << r.ff << "\n";
  if (r.gold_outside_grammar) os << "gold outside grammar: " << r.gold_outside_grammar << "\n";
  os.unsetf(std::ios::fixed);
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j = {{"qm", r.qm},
                      {"im", r.im},
                      {"questions", r.questions},
                      {"matched", r.matched},
                      {"interactions", r.interactions},
                      {"interactions_matched", r.interactions_matched},
                      {"switches", {{"T-F", r.tf}, {"F-T", r.ft}, {"T-T", r.tt}, {"F-F", r.ff}}},
                      {"gold_outside_grammar", r.gold_outside_grammar}};
  for (int b = 0; b < kTurnBuckets; ++b)
    j["by_turn"][turn_bucket_name(b)] = {{"count", r.by_turn[b].total}, {"correct", r.by_turn[b].correct}};
  for (int d = 0; d < kDifficultyCount; ++d)
    j["by_difficulty"][std::string(difficulty_name(static_cast<Difficulty>(d)))] = {{"count", r.by_difficulty[d].total},
                                                                                     {"correct", r.by_difficulty[d].correct}};
  return j;
}

}  // namespace hiesql
