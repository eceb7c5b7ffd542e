#pragma once

// Central finite differences against reverse-mode gradients, and a tiny
// end-to-end fixture (encoder + decoder) to run them on.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "hiesql/model.hpp"
#include "hiesql/trainer.hpp"

namespace hiesql {

struct GradCheckOptions {
  int samples = 64;       // entries per tensor; tensors at most this large are checked fully
  double h = 1e-5;
  std::string flip_sign;  // negate this tensor's analytic gradient (negative control)
  std::uint64_t seed = 7;
};

struct TensorCheck {
  std::string name;
  int checked = 0;
  double max_rel = 0.0;
  double max_abs_grad = 0.0;  // largest analytic magnitude seen
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double worst = 0.0;
  std::string worst_name;

  bool pass(double tol) const { return !tensors.empty() && worst < tol; }
};

inline double relative_error(double a, double n) { return std::abs(a - n) / std::max(std::abs(a) + std::abs(n), 1e-6); }

// `loss` builds a scalar on the given tape from the current parameter values.
inline GradCheckReport gradcheck(const std::vector<Param*>& params, const std::function<ag::Var(ag::Tape&)>& loss,
                                 const GradCheckOptions& opt = {}) {
  ag::Tape t;
  ag::Var l = loss(t);
  t.backward(l);
  std::vector<Mat> analytic;
  for (auto* p : params) analytic.push_back(t.grad(t.param(*p)));

  auto eval = [&] {
    ag::Tape e(false);
    return loss(e).scalar();
  };
  GradCheckReport rep;
  Rng rng(opt.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    Mat g = analytic[k];
    if (p.name == opt.flip_sign) g = -g;
    const Eigen::Index n = p.value.size();
    std::vector<Eigen::Index> idx;
    if (n <= opt.samples) {
      for (Eigen::Index i = 0; i < n; ++i) idx.push_back(i);
    } else {
      // Half the budget on the largest analytic entries, half uniform.
      std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + opt.samples / 2, order.end(),
                        [&](Eigen::Index a, Eigen::Index b) { return std::abs(g.data()[a]) > std::abs(g.data()[b]); });
      idx.assign(order.begin(), order.begin() + opt.samples / 2);
      while (static_cast<int>(idx.size()) < opt.samples) idx.push_back(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n))));
    }
    TensorCheck tc{p.name, 0, 0.0, g.cwiseAbs().maxCoeff()};
    for (Eigen::Index i : idx) {
      double& x = p.value.data()[i];
      const double x0 = x;
      x = x0 + opt.h;
      const double up = eval();
      x = x0 - opt.h;
      const double down = eval();
      x = x0;
      const double numeric = (up - down) / (2 * opt.h);
      tc.max_rel = std::max(tc.max_rel, relative_error(g.data()[i], numeric));
      ++tc.checked;
    }
    if (tc.max_rel >= rep.worst) {
      rep.worst = tc.max_rel;
      rep.worst_name = tc.name;
    }
    rep.tensors.push_back(tc);
  }
  return rep;
}

inline void print_gradcheck(std::ostream& os, const GradCheckReport& r, double tol) {
  os << "tensor\tchecked\tmax_rel_err\tmax_abs_grad\n";
  for (const auto& t : r.tensors) os << t.name << "\t" << t.checked << "\t" << t.max_rel << "\t" << t.max_abs_grad << "\n";
  os << "worst " << r.worst_name << " " << r.worst << " (tolerance " << tol << ") " << (r.pass(tol) ? "PASS" : "FAIL") << "\n";
}

// ---------------------------------------------------------------------------
// End-to-end fixture: a one-word utterance, `sql_slots` SQL vectors and a
// schema of `tables` tables with `columns` columns each. With one table, no
// columns and one SQL slot the layout is exactly 8 positions:
//   [CLS] first [CLS] S [SEP] t0 [SEP] *

struct GradFixture {
  Database db;
  std::unique_ptr<Model> model;
  PreparedTurn prep;
  ActionSequence gold;
};

inline Schema grid_schema(int tables, int columns) {
  nlohmann::json doc{{"db_id", "grid"}, {"tables", nlohmann::json::array()}};
  for (int t = 0; t < tables; ++t) {
    nlohmann::json cols = nlohmann::json::array();
    for (int c = 0; c < columns; ++c) cols.push_back({{"name", "c" + std::to_string(t) + std::to_string(c)}});
    doc["tables"].push_back({{"name", "t" + std::to_string(t)}, {"columns", cols}});
  }
  return load_schema(doc);
}

inline std::unique_ptr<GradFixture> make_grad_fixture(int width, int heads, int hie_layers, int tables, int columns, int sql_slots,
                                                      std::uint64_t seed) {
  auto f = std::make_unique<GradFixture>();
  f->db.schema = grid_schema(tables, columns);
  f->db.contents = index_contents({}, f->db.schema);
  const Schema& s = f->db.schema;

  Vocab vocab;
  vocab.add("first");
  vocab.add("*");
  for (const auto& t : s.tables) vocab.add(t.words[0]);
  for (const auto& c : s.columns) vocab.add(c.words[0]);
  ModelConfig cfg;
  cfg.encoder.width = width;
  cfg.encoder.heads = heads;
  cfg.encoder.base_layers = 2;
  cfg.encoder.hie_layers = hie_layers;
  cfg.encoder.sql_width = width;
  cfg.encoder.max_len = 64;
  cfg.encoder.dropout = 0.0;
  cfg.decoder.hidden = width;
  cfg.decoder.action_dim = width;
  cfg.decoder.dropout = 0.0;
  cfg.layout.max_len = 64;
  cfg.seed = seed;
  f->model = std::make_unique<Model>(vocab, cfg);

  Rng rng(mix_seed(seed, {0x6d}));
  const TokenSeq utterance = normalize_tokens("first");
  f->prep.schema = &s;
  f->prep.layout = assemble_input({}, utterance, sql_slots, s, cfg.layout);
  f->prep.sql_hidden = init_uniform(sql_slots, width, 1.0, rng);
  const int L = f->prep.layout.length();
  // Random relation ids over the full edge vocabulary exercise every table row.
  RelationMatrix m{L, std::vector<int>(static_cast<std::size_t>(L * L))};
  for (auto& cell : m.cells) cell = static_cast<int>(uniform_index(rng, kEdgeTypeCount));
  f->prep.input = make_encoder_input(vocab, f->prep.layout, m);
  f->prep.value_literals = closed_values();
  f->prep.value_literals.push_back("first");

  // FROM is forced by the columns it must cover; the count(*) subquery leaves
  // a free table choice so the table pointer gets a gradient too.
  std::string sql = "SELECT count(*) FROM t0 ORDER BY count(*) ASC LIMIT 1";
  if (columns > 0 && tables > 1)
    sql = "SELECT c00 FROM t0 WHERE c00 = 'first' AND c00 IN (SELECT count(*) FROM t1) ORDER BY c00 DESC LIMIT 1";
  else if (columns > 0)
    sql = "SELECT c00 FROM t0 WHERE c00 = 'first' ORDER BY c00 DESC LIMIT 1";
  f->gold = sql_to_actions(parse_sql(sql, s), s);
  return f;
}

// Teacher-forced NLL of the fixture's gold derivation, dropout off.
inline ag::Var fixture_loss(ag::Tape& t, GradFixture& f) {
  const DecoderMemory d = f.model->memory(t, f.prep, nullptr);
  const ForcedPass pass = teacher_force(t, f.model->params(), f.model->decoder(), d, f.db.schema, f.gold, nullptr);
  return nll_loss(pass.step_logp, pass.gold);
}

inline GradCheckReport gradcheck_fixture(GradFixture& f, const GradCheckOptions& opt = {}) {
  return gradcheck(f.model->params().all(), [&](ag::Tape& t) { return fixture_loss(t, f); }, opt);
}

}  // namespace hiesql
