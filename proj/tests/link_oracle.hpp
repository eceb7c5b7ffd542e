#pragma once

// Brute-force reference for the relation matrix: every cell is derived
// directly from the definition of each edge family, pair by pair, without
// building a graph.

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "hiesql/sequence.hpp"

namespace fixtures {

using hiesql::EdgeType;
using hiesql::NodeKind;
using hiesql::NodeRef;

struct LinkCase {
  hiesql::Schema schema;
  hiesql::ContentIndex contents;
  std::vector<std::string> history;
  std::string current;
  std::optional<std::string> last_sql;
};

class LinkOracle {
 public:
  LinkOracle(const LinkCase& c, const std::vector<hiesql::TokenSeq>& hist, const hiesql::TokenSeq& cur,
             const std::vector<hiesql::SqlToken>& sql)
      : c_(c), hist_(hist), cur_(cur), sql_(sql) {}

  EdgeType cell(const hiesql::SequenceLayout& lay, int i, int j) const {
    if (i == j) return EdgeType::Identity;
    const auto& a = lay.map.nodes[static_cast<std::size_t>(i)];
    const auto& b = lay.map.nodes[static_cast<std::size_t>(j)];
    if (!a || !b) return EdgeType::Default;
    if (*a == *b) return EdgeType::Identity;
    return pair(*a, *b);
  }

 private:
  static bool schema_kind(NodeKind k) { return k == NodeKind::Column || k == NodeKind::Table; }

  EdgeType pair(const NodeRef& a, const NodeRef& b) const {
    if (schema_kind(a.kind) && schema_kind(b.kind)) return schema_pair(a, b);
    if (schema_kind(b.kind) && !schema_kind(a.kind)) return token_pair(a, b);
    if (schema_kind(a.kind) && !schema_kind(b.kind)) return hiesql::inverse(token_pair(b, a));
    return EdgeType::Default;
  }

  EdgeType schema_pair(const NodeRef& a, const NodeRef& b) const {
    const auto& s = c_.schema;
    auto table_of = [&](int col) { return s.columns[static_cast<std::size_t>(col)].table; };
    if (a.kind == NodeKind::Column && b.kind == NodeKind::Column) {
      if (a.index == 0 || b.index == 0) return EdgeType::Default;
      for (auto [x, y] : s.foreign_keys) {
        if (x == a.index && y == b.index) return EdgeType::CCForeignKey;
        if (y == a.index && x == b.index) return EdgeType::CCForeignKeyRev;
      }
      return table_of(a.index) == table_of(b.index) ? EdgeType::CCSameTable : EdgeType::Default;
    }
    if (a.kind == NodeKind::Column && b.kind == NodeKind::Table) {
      if (a.index == 0 || table_of(a.index) != b.index) return EdgeType::Default;
      return s.primary_keys.count(a.index) ? EdgeType::CTPrimaryKey : EdgeType::CTMember;
    }
    if (a.kind == NodeKind::Table && b.kind == NodeKind::Column) return hiesql::inverse(schema_pair(b, a));
    bool ab = false, ba = false;
    for (auto [x, y] : s.foreign_keys) {
      ab = ab || (table_of(x) == a.index && table_of(y) == b.index);
      ba = ba || (table_of(x) == b.index && table_of(y) == a.index);
    }
    if (ab && ba) return EdgeType::TTForeignKeyBoth;
    if (ab) return EdgeType::TTForeignKey;
    if (ba) return EdgeType::TTForeignKeyRev;
    return EdgeType::Default;
  }

  std::vector<std::string> name_words(const NodeRef& n) const {
    const auto& s = c_.schema;
    return n.kind == NodeKind::Column ? s.columns[static_cast<std::size_t>(n.index)].words
                                      : s.tables[static_cast<std::size_t>(n.index)].words;
  }

  static std::vector<std::string> words(const hiesql::TokenSeq& t, int b, int e) {
    std::vector<std::string> out;
    for (int k = b; k < e; ++k) out.push_back(t[static_cast<std::size_t>(k)].text);
    return out;
  }

  static bool inside(const std::vector<std::string>& small, const std::vector<std::string>& big) {
    if (small.empty() || small.size() >= big.size()) return false;
    for (std::size_t off = 0; off + small.size() <= big.size(); ++off)
      if (std::equal(small.begin(), small.end(), big.begin() + static_cast<long>(off))) return true;
    return false;
  }

  // Longest span length in which token k takes part in an exact name match
  // with any schema node (0 if none).
  int exact_len(const hiesql::TokenSeq& t, int k) const {
    const auto& s = c_.schema;
    int best = 0;
    const int n = static_cast<int>(t.size());
    for (int b = 0; b <= k; ++b)
      for (int e = k + 1; e <= n && e - b <= 5; ++e) {
        const auto w = words(t, b, e);
        bool hit = false;
        for (int c = 1; c < s.num_columns(); ++c) hit = hit || w == s.columns[static_cast<std::size_t>(c)].words;
        for (const auto& tab : s.tables) hit = hit || w == tab.words;
        if (hit) best = std::max(best, e - b);
      }
    return best;
  }

  EdgeType token_pair(const NodeRef& tok, const NodeRef& node) const {
    const bool history = tok.kind == NodeKind::History;
    if (tok.kind == NodeKind::Sql) return sql_pair(tok, node);
    if (node.kind == NodeKind::Column && node.index == 0) return EdgeType::Default;
    const auto& t = history ? hist_[static_cast<std::size_t>(tok.group)] : cur_;
    const int n = static_cast<int>(t.size());
    const auto name = name_words(node);
    bool em = false, vm = false, pm = false;
    for (int b = 0; b <= tok.index; ++b)
      for (int e = tok.index + 1; e <= n && e - b <= 5; ++e) {
        const auto w = words(t, b, e);
        if (w == name) em = true;
        if (node.kind == NodeKind::Column && c_.contents.contains(node.index, hiesql::join(w, " "))) vm = true;
        if (inside(w, name) || inside(name, w)) {
          bool blocked = false;
          for (int k = b; k < e; ++k) blocked = blocked || exact_len(t, k) > e - b;
          if (!blocked) pm = true;
        }
      }
    const bool col = node.kind == NodeKind::Column;
    if (em) return col ? (history ? EdgeType::HCExact : EdgeType::UCExact) : (history ? EdgeType::HTExact : EdgeType::UTExact);
    if (vm) return history ? EdgeType::HCValue : EdgeType::UCValue;
    if (pm) return col ? (history ? EdgeType::HCPartial : EdgeType::UCPartial) : (history ? EdgeType::HTPartial : EdgeType::UTPartial);
    return EdgeType::Default;
  }

  EdgeType sql_pair(const NodeRef& slot, const NodeRef& node) const {
    if (slot.index == 0) return EdgeType::Default;
    const auto& tok = sql_[static_cast<std::size_t>(slot.index - 1)];
    if (tok.occurrence < 0) return EdgeType::Default;
    if (tok.kind == hiesql::PieceKind::Column && node.kind == NodeKind::Column && node.index > 0)
      return node.index == tok.ref ? EdgeType::SCEqual : EdgeType::SCUnequal;
    if (tok.kind == hiesql::PieceKind::Table && node.kind == NodeKind::Table)
      return node.index == tok.ref ? EdgeType::STEqual : EdgeType::STUnequal;
    return EdgeType::Default;
  }

  const LinkCase& c_;
  const std::vector<hiesql::TokenSeq>& hist_;
  const hiesql::TokenSeq& cur_;
  const std::vector<hiesql::SqlToken>& sql_;
};

inline hiesql::ContentIndex contents_of(const hiesql::Schema& s, const std::string& dump) {
  std::istringstream in(dump);
  return hiesql::index_contents(hiesql::read_content_dump(in), s);
}

inline hiesql::Schema concert() {
  return hiesql::load_schema(nlohmann::json::parse(R"({
    "db_id": "concert_singer",
    "tables": [
      {"name": "stadium", "columns": [{"name": "Stadium_ID"}, {"name": "Location"}, {"name": "Name"}, {"name": "Capacity"}]},
      {"name": "singer", "columns": [{"name": "Singer_ID"}, {"name": "Name"}, {"name": "Country"}, {"name": "Song_Name"}, {"name": "Age"}]},
      {"name": "concert", "columns": [{"name": "concert_ID"}, {"name": "concert_Name"}, {"name": "Theme"}, {"name": "Stadium_ID"}, {"name": "Year"}]},
      {"name": "singer_in_concert", "columns": [{"name": "concert_ID"}, {"name": "Singer_ID"}]}
    ],
    "primary_keys": [["stadium", "Stadium_ID"], ["singer", "Singer_ID"], ["concert", "concert_ID"]],
    "foreign_keys": [{"from": ["concert", "Stadium_ID"], "to": ["stadium", "Stadium_ID"]},
                     {"from": ["singer_in_concert", "Singer_ID"], "to": ["singer", "Singer_ID"]},
                     {"from": ["singer_in_concert", "concert_ID"], "to": ["concert", "concert_ID"]}]
  })"));
}

// 50 linking scenarios over three schemas: empty and long histories, turn-1
// inputs without SQL, value matches, multi-word names and repeated tokens.
inline std::vector<LinkCase> link_cases() {
  std::vector<LinkCase> out;
  const auto ct = course_teach();
  const auto ct_vals = contents_of(ct, "teacher\tName\tJoseph Huts\nteacher\tHometown\tTurton\ncourse\tCourse\tMath\n"
                                       "course\tCourse\tScience\nteacher\tAge\t32\n");
  const auto tv = cartoon();
  const auto tv_vals = contents_of(tv, "TV_Channel\tseries_name\tSky Radio\nTV_Channel\tCountry\tItaly\nTV_Channel\tLanguage\tItalian\n"
                                       "Cartoon\tDirected_by\tBen Jones\nCartoon\tTitle\tThe Rise of the Blue Beetle\n");
  const auto cs = concert();
  const auto cs_vals = contents_of(cs, "singer\tCountry\tFrance\nsinger\tName\tJoe Sharp\nstadium\tLocation\tRaith Rovers\n"
                                       "concert\tYear\t2014\nconcert\tTheme\tFree choice\n");

  // the course_teach interaction, every turn
  for (int t = 0; t < 3; ++t) {
    LinkCase c{ct, ct_vals, {}, kCourseTurns[t][0], std::nullopt};
    for (int h = 0; h < t; ++h) c.history.push_back(kCourseTurns[h][0]);
    if (t > 0) c.last_sql = kCourseTurns[t - 1][1];
    out.push_back(c);
  }
  // the cartoon interaction, every turn
  for (int t = 0; t < 4; ++t) {
    LinkCase c{tv, tv_vals, {}, kCartoonTurns[t][0], std::nullopt};
    for (int h = 0; h < t; ++h) c.history.push_back(kCartoonTurns[h][0]);
    if (t > 0) c.last_sql = kCartoonTurns[t - 1][1];
    out.push_back(c);
  }

  const std::vector<std::string> ct_utts = {
      "Show the teacher id and name of every teacher",
      "How many courses are there",
      "what is the hometown of Joseph Huts",
      "teachers from Turton who teach Math",
      "list course arrange grade for course id 3",
      "name name name teacher",
      "staring date of the science course",
      "which teacher is 32 years old",
      "course",
      "grade",
      "age of teacher Joseph Huts",
      "course id and teacher id of each course arrange",
  };
  const std::vector<std::string> ct_sql = {
      "SELECT Teacher_ID, Name FROM teacher",
      "SELECT count(*) FROM course",
      "SELECT Hometown FROM teacher WHERE Name = 'Joseph Huts'",
      "SELECT T1.Name FROM teacher AS T1 JOIN course_arrange AS T2 ON T1.Teacher_ID = T2.Teacher_ID WHERE T1.Hometown = 'Turton'",
      "SELECT Grade FROM course_arrange WHERE Course_ID = 3",
  };
  for (std::size_t i = 0; i < ct_utts.size(); ++i) {
    LinkCase c{ct, ct_vals, {}, ct_utts[i], std::nullopt};
    if (i % 2 == 1) c.history = {ct_utts[(i + 3) % ct_utts.size()]};
    if (i % 3 == 2) c.history = {ct_utts[(i + 1) % ct_utts.size()], ct_utts[(i + 5) % ct_utts.size()]};
    if (i % 2 == 0) c.last_sql = ct_sql[(i / 2) % ct_sql.size()];
    out.push_back(c);
  }
  const std::vector<std::string> tv_utts = {
      "cartoons directed by Ben Jones",
      "What is the title of The Rise of the Blue Beetle",
      "which tv channel has series name Sky Radio",
      "channel language italian and country italy",
      "original air date",
      "list all cartoon titles and their production codes",
      "air date of the cartoon",
      "What are the countries",
      "id",
      "tv channel channel tv",
      "production code of cartoons on Sky Radio",
      "directed by",
  };
  const std::vector<std::string> tv_sql = {
      "SELECT Title FROM Cartoon WHERE Directed_by = 'Ben Jones'",
      "SELECT T1.series_name FROM TV_Channel AS T1 JOIN Cartoon AS T2 ON T1.id = T2.Channel WHERE T2.Title = 'The Rise'",
      "SELECT Country FROM TV_Channel WHERE Language = 'Italian' INTERSECT SELECT Country FROM TV_Channel WHERE series_name = 'x'",
      "SELECT count(DISTINCT Language) FROM TV_Channel",
      "SELECT Title FROM Cartoon WHERE Channel IN (SELECT id FROM TV_Channel WHERE Country = 'Italy')",
  };
  for (std::size_t i = 0; i < tv_utts.size(); ++i) {
    LinkCase c{tv, tv_vals, {}, tv_utts[i], std::nullopt};
    if (i % 2 == 0) c.history = {tv_utts[(i + 1) % tv_utts.size()]};
    if (i % 3 == 0) c.history.push_back(tv_utts[(i + 4) % tv_utts.size()]);
    if (i % 2 == 1) c.last_sql = tv_sql[(i / 2) % tv_sql.size()];
    out.push_back(c);
  }
  const std::vector<std::string> cs_utts = {
      "How many singers do we have",
      "show name country and age for all singers ordered by age",
      "what are the names of stadiums with capacity above 5000",
      "concerts in 2014 with theme free choice",
      "singers from France",
      "Joe Sharp song name",
      "stadium id of the concert named raith rovers",
      "singer in concert",
      "concert name and theme",
      "which stadium location is Raith Rovers",
      "average age of singers",
      "singer id",
      "list concert id",
      "the stadium name",
      "count concerts by year",
      "name",
      "capacity of each stadium",
      "song name of singers from France",
  };
  const std::vector<std::string> cs_sql = {
      "SELECT count(*) FROM singer",
      "SELECT Name, Country, Age FROM singer ORDER BY Age DESC",
      "SELECT Name FROM stadium WHERE Capacity > 5000",
      "SELECT concert_Name FROM concert WHERE Year = 2014 AND Theme = 'Free choice'",
      "SELECT T2.Name FROM singer_in_concert AS T1 JOIN singer AS T2 ON T1.Singer_ID = T2.Singer_ID",
      "SELECT Year, count(*) FROM concert GROUP BY Year",
      "SELECT avg(Age) FROM singer",
      "SELECT Name FROM stadium EXCEPT SELECT T1.Name FROM stadium AS T1 JOIN concert AS T2 ON T1.Stadium_ID = T2.Stadium_ID",
  };
  for (std::size_t i = 0; i < cs_utts.size(); ++i) {
    LinkCase c{cs, cs_vals, {}, cs_utts[i], std::nullopt};
    for (std::size_t h = 0; h < i % 4; ++h) c.history.push_back(cs_utts[(i + h + 1) % cs_utts.size()]);
    if (i % 4 != 0) c.last_sql = cs_sql[i % cs_sql.size()];
    out.push_back(c);
  }
  // no contents at all
  LinkCase bare{ct, hiesql::ContentIndex{}, {"courses taught by each teacher"}, "teacher name", std::string(ct_sql[0])};
  out.push_back(bare);
  return out;
}

struct LinkCaseResult {
  hiesql::Schema schema;
  hiesql::LinkGraph graph;
  hiesql::SequenceLayout layout;
  hiesql::RelationMatrix matrix;
  std::vector<hiesql::SqlToken> sql;
  std::vector<hiesql::TokenSeq> history;
  hiesql::TokenSeq current;
};

inline LinkCaseResult run_link_case(const LinkCase& c) {
  LinkCaseResult r;
  r.schema = c.schema;
  for (const auto& h : c.history) r.history.push_back(hiesql::normalize_tokens(h));
  r.current = hiesql::normalize_tokens(c.current);
  std::optional<hiesql::Query> last;
  if (c.last_sql) last = hiesql::parse_sql(*c.last_sql, c.schema);
  r.sql = hiesql::last_sql_tokens(last, c.schema);
  r.graph = hiesql::build_graph(r.current, r.history, last, c.schema, c.contents);
  const int slots = last ? static_cast<int>(r.sql.size()) + 1 : 0;
  r.layout = hiesql::assemble_input(r.history, r.current, slots, c.schema);
  r.matrix = hiesql::relation_matrix(r.graph, r.layout.map);
  return r;
}

// Number of cells where the matrix and the brute-force oracle disagree.
inline int oracle_mismatches(const LinkCase& c, const LinkCaseResult& r, std::string* first = nullptr) {
  LinkOracle oracle(c, r.history, r.current, r.sql);
  int bad = 0;
  for (int i = 0; i < r.matrix.L; ++i)
    for (int j = 0; j < r.matrix.L; ++j) {
      const EdgeType want = oracle.cell(r.layout, i, j);
      if (r.matrix.type(i, j) != want) {
        if (bad == 0 && first) {
          std::ostringstream os;
          os << "(" << i << " '" << r.layout.map.text[static_cast<std::size_t>(i)] << "', " << j << " '"
             << r.layout.map.text[static_cast<std::size_t>(j)] << "'): got " << hiesql::edge_name(r.matrix.type(i, j)) << ", want "
             << hiesql::edge_name(want);
          *first = os.str();
        }
        ++bad;
      }
    }
  return bad;
}

}  // namespace fixtures
