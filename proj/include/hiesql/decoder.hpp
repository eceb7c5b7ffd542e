#pragma once

// Grammar-constrained LSTM decoder over encoder memory. At each step the
// frontier of the derivation determines the legal actions; rules are scored
// against factorized rule embeddings, columns and tables by a pointer over the
// mean memory of their positions, values over a small closed set plus tokens
// copied from the utterances.

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "hiesql/encoder.hpp"
#include "hiesql/grammar.hpp"
#include "hiesql/nn.hpp"
#include "hiesql/sequence.hpp"

namespace hiesql {

struct DecoderConfig {
  int hidden = 128;
  int action_dim = 64;
  double dropout = 0.3;
  int max_steps = 200;
};

// Literals the decoder can always emit.
inline const std::vector<std::string>& closed_values() {
  static const std::vector<std::string> v = {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "", "value"};
  return v;
}
inline int closed_value_index(const std::string& v) {
  const auto& c = closed_values();
  auto it = std::find(c.begin(), c.end(), v);
  return it == c.end() ? -1 : static_cast<int>(it - c.begin());
}
inline constexpr int kPlaceholderValue = 12;  // index of "value"

// Per-example quantities shared by every decoding step. Lives on one tape.
struct DecoderMemory {
  ag::Var mem, memT;    // L x M, M x L
  ag::Var cols, colsT;  // per column mean memory
  ag::Var tabs, tabsT;  // per table mean memory
  ag::Var rules, rulesT;
  ag::Var closedT;  // A x closed values
  ag::Var copyT;    // M x copy positions (invalid when no copy positions)
  ag::Var init_h;
  int copy_count = 0;
  ValueCandidates values;                      // closed literals, then copied ones
  std::vector<std::vector<int>> value_groups;  // per candidate: score columns in [closed | copy]
  std::map<std::string, int> value_index;
};

// Tokens a value may be copied from: the current utterance and kept history.
inline std::vector<int> copy_positions(const SequenceLayout& lay) {
  std::vector<int> out;
  for (const auto& h : lay.history_positions) out.insert(out.end(), h.begin(), h.end());
  out.insert(out.end(), lay.current_positions.begin(), lay.current_positions.end());
  std::sort(out.begin(), out.end());
  return out;
}

struct DecoderState {
  Derivation deriv;
  ag::Var h, c, ctx, prev;
  std::vector<ag::Var> history;  // hidden state after each step, for parent feeding
  ActionSequence actions;
  double logp = 0.0;

  explicit DecoderState(const Schema& s) : deriv(s) {}
};

struct StepOutput {
  LegalSet legal;
  ag::Var logp;  // 1 x |legal|
  ag::Var h, c, ctx;
};

// Index of `a` within `legal`, or -1.
inline int legal_index(const LegalSet& legal, const Action& a) {
  if (a.kind == ActionKind::EmitValue) {
    if (legal.slot != SlotKind::Value && legal.slot != SlotKind::Limit) return -1;
    auto it = std::find(legal.values.begin(), legal.values.end(), a.value);
    return it == legal.values.end() ? -1 : static_cast<int>(it - legal.values.begin());
  }
  const bool rule_slot = legal.slot != SlotKind::Column && legal.slot != SlotKind::Table && legal.slot != SlotKind::Value &&
                         legal.slot != SlotKind::Limit;
  const bool kind_ok = (a.kind == ActionKind::ApplyRule && rule_slot) || (a.kind == ActionKind::SelectColumn && legal.slot == SlotKind::Column) ||
                       (a.kind == ActionKind::SelectTable && legal.slot == SlotKind::Table);
  if (!kind_ok) return -1;
  auto it = std::find(legal.ids.begin(), legal.ids.end(), a.id);
  return it == legal.ids.end() ? -1 : static_cast<int>(it - legal.ids.begin());
}

inline Action legal_action(const LegalSet& legal, int k) {
  switch (legal.slot) {
    case SlotKind::Column: return Action::column(legal.ids[static_cast<std::size_t>(k)]);
    case SlotKind::Table: return Action::table(legal.ids[static_cast<std::size_t>(k)]);
    case SlotKind::Value:
    case SlotKind::Limit: return Action::emit(legal.values[static_cast<std::size_t>(k)]);
    default: return Action::rule(legal.ids[static_cast<std::size_t>(k)]);
  }
}

class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore& ps, int memory_width, const DecoderConfig& cfg, Rng& rng) : cfg_(cfg), M_(memory_width) {
    const int H = cfg.hidden, A = cfg.action_dim, M = memory_width;
    const int G = kGroupRest;
    ps.add("dec.start", init_uniform(1, A, 0.1, rng), G);
    ps.add("dec.slot", init_uniform(kSlotKindCount * kClauseCount, A, 0.1, rng), G);
    ps.add("dec.rule_feat", init_uniform(kRuleFeatureCount, A, 0.1, rng), G);
    ps.add("dec.rule_id", init_uniform(Grammar::get().size(), A, 0.01, rng), G);
    ps.add("dec.value", init_uniform(static_cast<int>(closed_values().size()), A, 0.1, rng), G);
    col_in_ = Linear::create(ps, "dec.col_in", M, A, rng, G, false);
    tab_in_ = Linear::create(ps, "dec.tab_in", M, A, rng, G, false);
    init_ = Linear::create(ps, "dec.init", M, H, rng, G);
    const int I = 2 * A + H + M;
    ps.add("dec.lstm.wx", init_xavier(I, 4 * H, rng), G);
    ps.add("dec.lstm.wh", init_xavier(H, 4 * H, rng), G);
    Mat b = Mat::Zero(1, 4 * H);
    b.middleCols(H, H).setOnes();  // forget gate
    ps.add("dec.lstm.b", b, G);
    att_ = Linear::create(ps, "dec.att", H, M, rng, G, false);
    out_ = Linear::create(ps, "dec.out", H + M, H, rng, G);
    rule_q_ = Linear::create(ps, "dec.rule_q", H, A, rng, G, false);
    col_q_ = Linear::create(ps, "dec.col_q", H, M, rng, G, false);
    tab_q_ = Linear::create(ps, "dec.tab_q", H, M, rng, G, false);
    val_q_ = Linear::create(ps, "dec.val_q", H, A, rng, G, false);
    copy_q_ = Linear::create(ps, "dec.copy_q", H, M, rng, G, false);
  }

  const DecoderConfig& config() const { return cfg_; }

  DecoderMemory prepare(ag::Tape& t, ParamStore& ps, ag::Var mem, const SequenceLayout& lay) const {
    check(mem.rows() == lay.length() && mem.cols() == M_, "decoder memory is ", mem.rows(), "x", mem.cols(), ", expected ",
          lay.length(), "x", M_);
    DecoderMemory d;
    d.mem = mem;
    d.memT = ag::transpose(mem);
    d.cols = ag::mean_row_groups(mem, lay.column_positions);
    d.colsT = ag::transpose(d.cols);
    d.tabs = ag::mean_row_groups(mem, lay.table_positions);
    d.tabsT = ag::transpose(d.tabs);
    d.rules = ag::add(ag::matmul(t.constant(rule_incidence()), t.param(ps.get("dec.rule_feat"))), t.param(ps.get("dec.rule_id")));
    d.rulesT = ag::transpose(d.rules);
    d.closedT = ag::transpose(t.param(ps.get("dec.value")));
    std::vector<int> all(static_cast<std::size_t>(lay.length()));
    std::iota(all.begin(), all.end(), 0);
    d.init_h = ag::tanh(init_(t, ps, ag::mean_row_groups(mem, {all})));

    const auto& closed = closed_values();
    for (std::size_t i = 0; i < closed.size(); ++i) {
      d.value_index[closed[i]] = static_cast<int>(i);
      d.values.values.push_back(closed[i]);
      d.value_groups.push_back({static_cast<int>(i)});
    }
    const auto rows = copy_positions(lay);
    d.copy_count = static_cast<int>(rows.size());
    if (!rows.empty()) d.copyT = ag::transpose(ag::gather_rows(mem, rows));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto& w = lay.tokens()[static_cast<std::size_t>(rows[k])];
      const int col = static_cast<int>(closed.size() + k);
      auto [it, fresh] = d.value_index.emplace(w, static_cast<int>(d.values.values.size()));
      if (fresh) {
        d.values.values.push_back(w);
        d.value_groups.push_back({col});
      } else {
        d.value_groups[static_cast<std::size_t>(it->second)].push_back(col);
      }
    }
    return d;
  }

  DecoderState initial(ag::Tape& t, ParamStore& ps, const DecoderMemory& d, const Schema& s) const {
    DecoderState st(s);
    st.h = d.init_h;
    st.c = t.constant(Mat::Zero(1, cfg_.hidden));
    st.ctx = t.constant(Mat::Zero(1, M_));
    st.prev = t.param(ps.get("dec.start"));
    return st;
  }

  // Distribution over the legal actions at the frontier of `st`.
  StepOutput step(ag::Tape& t, ParamStore& ps, const DecoderMemory& d, const DecoderState& st, Rng* rng) const {
    const int H = cfg_.hidden;
    StepOutput out;
    out.legal = st.deriv.legal(&d.values);
    check(!out.legal.empty(), "no legal action at frontier ", st.deriv.describe_frontier());
    const Slot& slot = st.deriv.frontier();
    ag::Var parent = slot.parent_step >= 0 ? st.history[static_cast<std::size_t>(slot.parent_step)] : t.constant(Mat::Zero(1, H));
    ag::Var x = ag::concat_cols({st.prev, ag::gather_rows(t.param(ps.get("dec.slot")), {slot.feature()}), parent, st.ctx});
    x = maybe_dropout(x, cfg_.dropout, rng);
    ag::Var gates = ag::add_row(ag::add(ag::matmul(x, t.param(ps.get("dec.lstm.wx"))), ag::matmul(st.h, t.param(ps.get("dec.lstm.wh")))),
                                t.param(ps.get("dec.lstm.b")));
    ag::Var ig = ag::sigmoid(ag::slice_cols(gates, 0, H));
    ag::Var fg = ag::sigmoid(ag::slice_cols(gates, H, H));
    ag::Var gg = ag::tanh(ag::slice_cols(gates, 2 * H, H));
    ag::Var og = ag::sigmoid(ag::slice_cols(gates, 3 * H, H));
    out.c = ag::add(ag::mul(fg, st.c), ag::mul(ig, gg));
    out.h = ag::mul(og, ag::tanh(out.c));

    ag::Var alpha = ag::exp(ag::log_softmax(ag::matmul(att_(t, ps, out.h), d.memT)));
    out.ctx = ag::matmul(alpha, d.mem);
    ag::Var o = ag::tanh(out_(t, ps, ag::concat_cols({out.h, out.ctx})));
    o = maybe_dropout(o, cfg_.dropout, rng);

    ag::Var logits;
    switch (out.legal.slot) {
      case SlotKind::Column: logits = ag::gather_cols(ag::matmul(col_q_(t, ps, o), d.colsT), out.legal.ids); break;
      case SlotKind::Table: logits = ag::gather_cols(ag::matmul(tab_q_(t, ps, o), d.tabsT), out.legal.ids); break;
      case SlotKind::Value:
      case SlotKind::Limit: {
        ag::Var scores = ag::matmul(val_q_(t, ps, o), d.closedT);
        if (d.copy_count > 0) scores = ag::concat_cols({scores, ag::matmul(copy_q_(t, ps, o), d.copyT)});
        std::vector<int> idx;
        for (const auto& v : out.legal.values) idx.push_back(d.value_index.at(v));
        logits = ag::gather_cols(ag::logsumexp_groups(scores, d.value_groups), idx);
        break;
      }
      default: logits = ag::gather_cols(ag::matmul(rule_q_(t, ps, o), d.rulesT), out.legal.ids); break;
    }
    out.logp = ag::log_softmax(logits);
    return out;
  }

  // State after taking legal action number `k` of `out`.
  DecoderState advance(ag::Tape& t, ParamStore& ps, const DecoderMemory& d, const DecoderState& st, const StepOutput& out, int k) const {
    const Action a = legal_action(out.legal, k);
    DecoderState next = st;
    next.deriv.apply(a, &d.values);
    next.h = out.h;
    next.c = out.c;
    next.ctx = out.ctx;
    next.history.push_back(out.h);
    next.actions.push_back(a);
    next.logp += out.logp.val()(0, k);
    next.prev = embed(t, ps, d, a);
    return next;
  }

  ag::Var embed(ag::Tape& t, ParamStore& ps, const DecoderMemory& d, const Action& a) const {
    switch (a.kind) {
      case ActionKind::ApplyRule: return ag::gather_rows(d.rules, {a.id});
      case ActionKind::SelectColumn: return col_in_(t, ps, ag::gather_rows(d.cols, {a.id}));
      case ActionKind::SelectTable: return tab_in_(t, ps, ag::gather_rows(d.tabs, {a.id}));
      case ActionKind::EmitValue: {
        const int i = closed_value_index(a.value);
        return ag::gather_rows(t.param(ps.get("dec.value")), {i < 0 ? kPlaceholderValue : i});
      }
    }
    fail("unknown action kind");
  }

  static const Mat& rule_incidence() {
    static const Mat m = [] {
      const auto& g = Grammar::get();
      Mat r = Mat::Zero(g.size(), kRuleFeatureCount);
      for (int i = 0; i < g.size(); ++i)
        for (int f : g.features(i)) r(i, f) = 1.0;
      return r;
    }();
    return m;
  }

 private:
  DecoderConfig cfg_;
  int M_ = 0;
  Linear col_in_, tab_in_, init_, att_, out_, rule_q_, col_q_, tab_q_, val_q_, copy_q_;
};

// ---------------------------------------------------------------------------
// Teacher forcing and search

struct ForcedPass {
  std::vector<ag::Var> step_logp;  // 1 x |legal| per step
  std::vector<LegalSet> legal;
  std::vector<int> gold;  // index of the gold action within each legal set
};

inline ForcedPass teacher_force(ag::Tape& t, ParamStore& ps, const Decoder& dec, const DecoderMemory& d, const Schema& s,
                                const ActionSequence& gold, Rng* rng) {
  ForcedPass out;
  DecoderState st = dec.initial(t, ps, d, s);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    check(!st.deriv.complete(), "gold sequence continues after the derivation completed at step ", i);
    StepOutput so = dec.step(t, ps, d, st, rng);
    const int k = legal_index(so.legal, gold[i]);
    check(k >= 0, "gold action illegal at step ", i, ": ", describe(gold[i]), " at frontier ", st.deriv.describe_frontier());
    st = dec.advance(t, ps, d, st, so, k);
    out.step_logp.push_back(so.logp);
    out.legal.push_back(std::move(so.legal));
    out.gold.push_back(k);
  }
  check(st.deriv.complete(), "incomplete gold derivation, frontier ", st.deriv.describe_frontier());
  return out;
}

struct DecodeResult {
  ActionSequence actions;
  double logp = 0.0;
  double score = 0.0;  // logp per action
};

inline double normalized_score(double logp, std::size_t n) { return n == 0 ? logp : logp / static_cast<double>(n); }

inline DecodeResult greedy_decode(ag::Tape& t, ParamStore& ps, const Decoder& dec, const DecoderMemory& d, const Schema& s) {
  DecoderState st = dec.initial(t, ps, d, s);
  while (!st.deriv.complete()) {
    check(static_cast<int>(st.actions.size()) < dec.config().max_steps, "runaway derivation: more than ", dec.config().max_steps,
          " actions");
    StepOutput so = dec.step(t, ps, d, st, nullptr);
    Eigen::Index k = 0;
    so.logp.val().row(0).maxCoeff(&k);
    st = dec.advance(t, ps, d, st, so, static_cast<int>(k));
  }
  return {st.actions, st.logp, normalized_score(st.logp, st.actions.size())};
}

// Keeps the `beam` best partial derivations by cumulative log-probability;
// completed ones leave the beam. Returns the completed derivation with the
// best length-normalized score. Ties keep expansion order, so beam 1 is greedy.
inline DecodeResult beam_decode(ag::Tape& t, ParamStore& ps, const Decoder& dec, const DecoderMemory& d, const Schema& s, int beam) {
  check(beam >= 1, "beam width must be at least 1, got ", beam);
  std::vector<DecoderState> live{dec.initial(t, ps, d, s)};
  std::vector<DecodeResult> done;
  while (!live.empty() && static_cast<int>(done.size()) < beam) {
    struct Cand {
      std::size_t hyp;
      int k;
      double logp;
    };
    std::vector<Cand> cands;
    std::vector<StepOutput> outs;
    // Hypotheses at the step cap are dropped; only an all-runaway beam is an error.
    live.erase(std::remove_if(live.begin(), live.end(),
                              [&](const DecoderState& st) { return static_cast<int>(st.actions.size()) >= dec.config().max_steps; }),
               live.end());
    check(!live.empty() || !done.empty(), "runaway derivation: more than ", dec.config().max_steps, " actions");
    for (std::size_t i = 0; i < live.size(); ++i) {
      outs.push_back(dec.step(t, ps, d, live[i], nullptr));
      const Mat& lp = outs.back().logp.val();
      for (Eigen::Index k = 0; k < lp.cols(); ++k) cands.push_back({i, static_cast<int>(k), live[i].logp + lp(0, k)});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.logp > b.logp; });
    const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(beam) - done.size());
    std::vector<DecoderState> next;
    for (std::size_t j = 0; j < keep; ++j) {
      DecoderState st = dec.advance(t, ps, d, live[cands[j].hyp], outs[cands[j].hyp], cands[j].k);
      if (st.deriv.complete()) {
        done.push_back({st.actions, st.logp, normalized_score(st.logp, st.actions.size())});
      } else {
        next.push_back(std::move(st));
      }
    }
    live = std::move(next);
  }
  check(!done.empty(), "beam search produced no complete derivation");
  std::size_t best = 0;
  for (std::size_t i = 1; i < done.size(); ++i)
    if (done[i].score > done[best].score) best = i;
  return done[best];
}

}  // namespace hiesql
