#pragma once

// Bimodal SQL/question encoder: a small transformer over the SQL-encoder
// input, pretrained with reserved-word-aware span masking and then frozen.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "hiesql/nn.hpp"
#include "hiesql/parallel.hpp"
#include "hiesql/sequence.hpp"

namespace hiesql {

// Words the masker never touches. The per-token flag on SqlBertInput is the
// authority; this list documents the keyword vocabulary of the SQL grammar.
inline const std::vector<std::string>& reserved_words() {
  static const std::vector<std::string> words = {
      "select", "from", "where", "group", "order", "by", "having", "limit", "join", "on", "as", "and", "or", "not", "in",
      "like", "between", "intersect", "union", "except", "distinct", "asc", "desc", "count", "sum", "avg", "min", "max",
      "=", "!=", "<", "<=", ">", ">=", "(", ")", ",", "."};
  return words;
}

inline constexpr double kMaskRate = 0.15;
inline constexpr int kMaxSpan = 5;

enum class MaskMode : std::uint8_t { Mask, Random, Keep };

struct MaskSpan {
  int start = 0;   // index into the SQL segment
  int length = 0;
  MaskMode mode = MaskMode::Mask;
};

struct MaskPlan {
  std::vector<MaskSpan> spans;
  std::vector<int> positions;         // masked SQL-segment indices, ascending
  std::vector<std::string> targets;   // original token per masked position
  int budget = 0;
  int maskable = 0;

  bool empty() const { return positions.empty(); }
};

inline int count_maskable(const SqlBertInput& in) {
  return static_cast<int>(std::count(in.reserved.begin(), in.reserved.end(), false));
}

// Per-query budget: ceil(15% of maskable tokens).
inline int query_mask_budget(int maskable) {
  return static_cast<int>(std::ceil(kMaskRate * static_cast<double>(maskable) - 1e-9));
}

// Corpus-level budget: floor(15% + carried remainder). Over any stream of
// queries the masked fraction stays within (15% - 1/total, 15%].
class MaskBudget {
 public:
  int next(int maskable) {
    const double want = kMaskRate * static_cast<double>(maskable) + carry_;
    const int b = static_cast<int>(std::floor(want + 1e-9));
    carry_ = std::max(0.0, want - b);
    return b;
  }

 private:
  double carry_ = 0.0;
};

// Samples disjoint spans of non-reserved SQL tokens until `budget` tokens are
// covered. Span length ~ geometric(0.5) capped at 5 and at the free run.
inline MaskPlan plan_masks(const SqlBertInput& in, Rng& rng, int budget = -1) {
  MaskPlan plan;
  const int n = static_cast<int>(in.sql.size());
  plan.maskable = count_maskable(in);
  plan.budget = budget < 0 ? query_mask_budget(plan.maskable) : std::min(budget, plan.maskable);
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  auto free_at = [&](int i) { return i < n && !in.reserved[static_cast<std::size_t>(i)] && !taken[static_cast<std::size_t>(i)]; };
  int left = plan.budget;
  std::geometric_distribution<int> geo(0.5);
  while (left > 0) {
    std::vector<int> starts;
    for (int i = 0; i < n; ++i)
      if (free_at(i)) starts.push_back(i);
    if (starts.empty()) break;
    const int start = starts[uniform_index(rng, starts.size())];
    int len = std::min({1 + geo(rng), kMaxSpan, left});
    int run = 0;
    while (run < len && free_at(start + run)) ++run;
    len = run;
    const double u = uniform01(rng);
    const MaskMode mode = u < 0.8 ? MaskMode::Mask : (u < 0.9 ? MaskMode::Random : MaskMode::Keep);
    plan.spans.push_back({start, len, mode});
    for (int i = start; i < start + len; ++i) taken[static_cast<std::size_t>(i)] = true;
    left -= len;
  }
  std::sort(plan.spans.begin(), plan.spans.end(), [](const MaskSpan& a, const MaskSpan& b) { return a.start < b.start; });
  for (const auto& sp : plan.spans)
    for (int i = sp.start; i < sp.start + sp.length; ++i) {
      plan.positions.push_back(i);
      plan.targets.push_back(in.sql[static_cast<std::size_t>(i)]);
    }
  return plan;
}

// Permutes table blocks and the columns inside each block. SQL and question
// segments (and therefore mask positions) are untouched.
inline SqlBertInput shuffle_schema(const SqlBertInput& in, Rng& rng) {
  SqlBertInput out = in;
  std::vector<std::size_t> order(in.schema.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t b = 0; b < order.size(); ++b) {
    SchemaBlock blk = in.schema[order[b]];
    std::vector<std::size_t> cols(blk.columns.size());
    std::iota(cols.begin(), cols.end(), 0);
    std::shuffle(cols.begin(), cols.end(), rng);
    SchemaBlock shuffled{blk.table, blk.table_words, {}, {}};
    for (auto c : cols) {
      shuffled.columns.push_back(blk.columns[c]);
      shuffled.column_ids.push_back(blk.column_ids[c]);
    }
    out.schema[b] = std::move(shuffled);
  }
  return out;
}

// Sum over masked positions of -log P(original token); logits has one row per
// masked position.
inline ag::Var mlm_loss(ag::Var logits, const MaskPlan& plan, const Vocab& vocab) {
  check(logits.rows() == static_cast<Eigen::Index>(plan.positions.size()), "mlm_loss: ", logits.rows(), " logit rows for ",
        plan.positions.size(), " masked positions");
  std::vector<int> targets;
  for (const auto& t : plan.targets) targets.push_back(vocab.id(t));
  return ag::softmax_nll(logits, targets);
}

// ---------------------------------------------------------------------------
// Model

struct SqlEncoderConfig {
  int width = 128;
  int layers = 4;
  int heads = 4;
  int max_len = 256;
  double dropout = 0.1;
  std::uint64_t seed = 1;
};

enum class SqlSegment : int { Special = 0, Sql = 1, Question = 2, Schema = 3 };

struct SqlEncodedInput {
  std::vector<int> ids;
  std::vector<int> segments;
  int sql_len = 0;  // SQL tokens, excluding [CLS]
};

class SqlEncoder {
 public:
  SqlEncoder() = default;
  SqlEncoder(Vocab vocab, const SqlEncoderConfig& cfg) : vocab_(std::move(vocab)), cfg_(cfg) {
    Rng rng(mix_seed(cfg.seed, {0x5e1}));
    const int N = cfg.width;
    ps_.add("sql.tok", init_uniform(vocab_.size(), N, 0.1, rng));
    ps_.add("sql.pos", init_uniform(cfg.max_len, N, 0.1, rng));
    ps_.add("sql.seg", init_uniform(4, N, 0.1, rng));
    ln_ = LayerNorm::create(ps_, "sql.emb_ln", N);
    for (int l = 0; l < cfg.layers; ++l)
      blocks_.push_back(TransformerBlock::create(ps_, "sql.layer" + std::to_string(l), N, cfg.heads, rng));
    head_dense_ = Linear::create(ps_, "sql.mlm.dense", N, N, rng);
    head_ln_ = LayerNorm::create(ps_, "sql.mlm.ln", N);
    head_out_ = Linear::create(ps_, "sql.mlm.out", N, vocab_.size(), rng);
  }

  const Vocab& vocab() const { return vocab_; }
  const SqlEncoderConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  int width() const { return cfg_.width; }

  bool frozen() const {
    for (const auto* p : ps_.all())
      if (!p->frozen) return false;
    return ps_.size() > 0;
  }
  void freeze() { ps_.set_frozen(true); }
  std::uint64_t checksum() const { return ps_.checksum(); }

  // Token ids and segments of `in`; `unknown` counts out-of-vocabulary words.
  SqlEncodedInput encode_input(const SqlBertInput& in, std::size_t* unknown = nullptr) const {
    SqlEncodedInput e;
    const auto words = in.flatten();
    check(static_cast<int>(words.size()) <= cfg_.max_len, "SQL encoder input of ", words.size(), " tokens exceeds ", cfg_.max_len);
    e.ids = vocab_.encode(words, unknown);
    e.sql_len = static_cast<int>(in.sql.size());
    e.segments.assign(words.size(), static_cast<int>(SqlSegment::Schema));
    e.segments[0] = static_cast<int>(SqlSegment::Special);
    for (int i = 1; i <= e.sql_len; ++i) e.segments[static_cast<std::size_t>(i)] = static_cast<int>(SqlSegment::Sql);
    e.segments[static_cast<std::size_t>(e.sql_len + 1)] = static_cast<int>(SqlSegment::Special);
    for (std::size_t i = 0; i < in.question.size(); ++i)
      e.segments[static_cast<std::size_t>(e.sql_len) + 2 + i] = static_cast<int>(SqlSegment::Question);
    return e;
  }

  // Hidden states of every input position (L x N).
  ag::Var forward(ag::Tape& t, const std::vector<int>& ids, const std::vector<int>& segments, Rng* rng) {
    const int L = static_cast<int>(ids.size());
    std::vector<int> pos(static_cast<std::size_t>(L));
    std::iota(pos.begin(), pos.end(), 0);
    ag::Var x = ag::add(ag::add(ag::gather_rows(t.param(ps_.get("sql.tok")), ids), ag::gather_rows(t.param(ps_.get("sql.pos")), pos)),
                        ag::gather_rows(t.param(ps_.get("sql.seg")), segments));
    x = maybe_dropout(ln_(t, ps_, x), cfg_.dropout, rng);
    for (const auto& b : blocks_) x = b(t, ps_, x, nullptr, nullptr, cfg_.dropout, rng);
    return x;
  }

  ag::Var mlm_logits(ag::Tape& t, ag::Var hidden, const std::vector<int>& rows) {
    ag::Var h = ag::gather_rows(hidden, rows);
    h = head_ln_(t, ps_, ag::gelu(head_dense_(t, ps_, h)));
    return head_out_(t, ps_, h);
  }

  // Eval-mode hidden states of [CLS] and the SQL tokens ((n+1) x N).
  Mat encode_sql(const SqlBertInput& in, std::size_t* unknown = nullptr) {
    const auto e = encode_input(in, unknown);
    ag::Tape t(false);
    ag::Var h = forward(t, e.ids, e.segments, nullptr);
    return h.val().topRows(e.sql_len + 1);
  }

  // Replaces masked SQL positions per the plan's replacement modes.
  std::vector<int> apply_mask(const SqlEncodedInput& e, const MaskPlan& plan, Rng& rng) const {
    std::vector<int> ids = e.ids;
    for (const auto& sp : plan.spans)
      for (int i = sp.start; i < sp.start + sp.length; ++i) {
        auto& id = ids[static_cast<std::size_t>(SqlBertInput::sql_position(i))];
        if (sp.mode == MaskMode::Mask) {
          id = Vocab::mask();
        } else if (sp.mode == MaskMode::Random) {
          id = Vocab::kSpecialCount + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(vocab_.size() - Vocab::kSpecialCount)));
        }
      }
    return ids;
  }

 private:
  Vocab vocab_;
  SqlEncoderConfig cfg_;
  ParamStore ps_;
  LayerNorm ln_;
  std::vector<TransformerBlock> blocks_;
  Linear head_dense_, head_out_;
  LayerNorm head_ln_;
};

inline Vocab build_sql_vocab(const std::vector<SqlBertInput>& corpus) {
  Vocab v;
  for (const auto& w : reserved_words()) v.add(w);
  for (const auto& in : corpus)
    for (const auto& w : in.flatten()) v.add(w);
  return v;
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
  int steps = 400;
  int batch = 8;
  double lr = 1e-3;
  double clip = 5.0;
  std::uint64_t seed = 1;
  int workers = 1;
};

struct PretrainStep {
  int step = 0;
  double loss = 0.0;  // mean per masked token over the batch
  int masked = 0;
  int maskable = 0;
};

// One pretraining example: schema shuffle, mask plan and forward/backward.
struct MlmExample {
  MaskPlan plan;
  double loss = 0.0;
};

inline std::vector<PretrainStep> pretrain(SqlEncoder& enc, const std::vector<SqlBertInput>& corpus, const PretrainConfig& cfg,
                                          const std::function<void(const PretrainStep&)>& on_step = {}) {
  check(!corpus.empty(), "pretraining corpus is empty");
  check(!enc.frozen(), "cannot pretrain a frozen SQL encoder");
  Adam adam;
  MaskBudget budget;
  std::vector<PretrainStep> log;
  auto params = enc.params().all();
  const int warm = std::max(1, cfg.steps / 8);
  for (int step = 0; step < cfg.steps; ++step) {
    Rng batch_rng(mix_seed(cfg.seed, {0xb47c, static_cast<std::uint64_t>(step)}));
    std::vector<SqlBertInput> inputs;
    std::vector<MaskPlan> plans;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& src = corpus[uniform_index(batch_rng, corpus.size())];
      Rng ex_rng(mix_seed(cfg.seed, {0x3a5c, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b)}));
      SqlBertInput in = shuffle_schema(src, ex_rng);
      MaskPlan plan = plan_masks(in, ex_rng, budget.next(count_maskable(in)));
      inputs.push_back(std::move(in));
      plans.push_back(std::move(plan));
    }
    std::vector<GradBuffer> grads(static_cast<std::size_t>(cfg.batch), GradBuffer(params));
    std::vector<double> losses(static_cast<std::size_t>(cfg.batch), 0.0);
    parallel_for(static_cast<std::size_t>(cfg.batch), cfg.workers, [&](std::size_t b) {
      const auto& plan = plans[b];
      if (plan.empty()) return;
      Rng rng(mix_seed(cfg.seed, {0xd509, static_cast<std::uint64_t>(step), b}));
      const auto e = enc.encode_input(inputs[b]);
      const auto ids = enc.apply_mask(e, plan, rng);
      ag::Tape t;
      ag::Var h = enc.forward(t, ids, e.segments, &rng);
      std::vector<int> rows;
      for (int p : plan.positions) rows.push_back(SqlBertInput::sql_position(p));
      ag::Var loss = mlm_loss(enc.mlm_logits(t, h, rows), plan, enc.vocab());
      t.backward(loss);
      losses[b] = loss.scalar();
      grads[b].add(t);
    });
    GradBuffer total(params);
    int masked = 0, maskable = 0;
    double loss_sum = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      total.add(grads[static_cast<std::size_t>(b)]);
      masked += static_cast<int>(plans[static_cast<std::size_t>(b)].positions.size());
      maskable += plans[static_cast<std::size_t>(b)].maskable;
      loss_sum += losses[static_cast<std::size_t>(b)];
    }
    check(std::isfinite(loss_sum), "pretraining loss became non-finite at step ", step);
    if (masked > 0) total.scale(1.0 / masked);
    const double lr = step < warm ? cfg.lr * (step + 1) / warm : cfg.lr * (cfg.steps - step) / std::max(1, cfg.steps - warm);
    adam.step(params, total.grads(), [lr](int) { return lr; }, cfg.clip);
    PretrainStep rec{step, masked > 0 ? loss_sum / masked : 0.0, masked, maskable};
    log.push_back(rec);
    if (on_step) on_step(rec);
  }
  return log;
}

}  // namespace hiesql
