#pragma once

// Downstream encoder: token/position/segment embeddings, projected SQL
// embeddings spliced into the SQL slots, a small vanilla transformer and a
// stack of relation-aware layers sharing one relation embedding table.

#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "hiesql/edge_types.hpp"
#include "hiesql/linking.hpp"
#include "hiesql/nn.hpp"
#include "hiesql/sequence.hpp"

namespace hiesql {

// Learning-rate groups: the language-model stand-in versus everything else.
inline constexpr int kGroupEncoder = 0;
inline constexpr int kGroupRest = 1;

struct EncoderConfig {
  int width = 64;
  int heads = 4;
  int base_layers = 2;
  int hie_layers = 2;
  int sql_width = 128;
  int max_len = 512;
  double dropout = 0.1;
};

// How relations enter the relation-aware layers.
enum class RelationMode : std::uint8_t { Full, Zeroed, None };

struct EncoderInput {
  std::vector<int> ids;
  std::vector<int> segments;
  std::vector<int> sql_rows;  // positions of the SQL slots
  std::shared_ptr<const ag::RelationIds> relations;

  int length() const { return static_cast<int>(ids.size()); }
};

inline std::shared_ptr<const ag::RelationIds> relation_ids(const RelationMatrix& m) {
  auto r = std::make_shared<ag::RelationIds>(m.L, m.L);
  for (int i = 0; i < m.L; ++i)
    for (int j = 0; j < m.L; ++j) (*r)(i, j) = static_cast<int>(m.type(i, j));
  return r;
}

inline EncoderInput make_encoder_input(const Vocab& vocab, const SequenceLayout& lay, const RelationMatrix& m,
                                       std::size_t* unknown = nullptr) {
  check(m.L == lay.length(), "relation matrix is ", m.L, "x", m.L, " but the layout has ", lay.length(), " positions");
  EncoderInput in;
  for (int i = 0; i < lay.length(); ++i) {
    const auto& w = lay.tokens()[static_cast<std::size_t>(i)];
    in.ids.push_back(lay.segments[static_cast<std::size_t>(i)] == Segment::Sql ? Vocab::unk() : vocab.id(w));
    if (unknown && in.ids.back() == Vocab::unk() && lay.segments[static_cast<std::size_t>(i)] != Segment::Sql) ++*unknown;
    in.segments.push_back(static_cast<int>(lay.segments[static_cast<std::size_t>(i)]));
  }
  in.sql_rows = lay.sql_positions;
  in.relations = relation_ids(m);
  return in;
}

// S = f W: maps frozen SQL-encoder states (k x N) into token space (k x M).
inline ag::Var project_sql(ag::Var sql_hidden, ag::Var w) {
  check(sql_hidden.cols() == w.rows(), "project_sql: SQL width ", sql_hidden.cols(), " does not match projection with ", w.rows(),
        " rows");
  return ag::matmul(sql_hidden, w);
}

class RelationalEncoder {
 public:
  RelationalEncoder() = default;
  RelationalEncoder(ParamStore& ps, const Vocab& vocab, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    const int M = cfg.width;
    check(cfg.heads > 0 && M % cfg.heads == 0, "encoder width ", M, " not divisible by ", cfg.heads, " heads");
    ps.add("enc.tok", init_uniform(vocab.size(), M, 0.1, rng), kGroupEncoder);
    ps.add("enc.pos", init_uniform(cfg.max_len, M, 0.1, rng), kGroupEncoder);
    ps.add("enc.seg", init_uniform(kSegmentCount, M, 0.1, rng), kGroupEncoder);
    ln_ = LayerNorm::create(ps, "enc.emb_ln", M, kGroupEncoder);
    for (int l = 0; l < cfg.base_layers; ++l)
      base_.push_back(TransformerBlock::create(ps, "enc.base" + std::to_string(l), M, cfg.heads, rng, kGroupEncoder));
    ps.add("enc.proj", init_xavier(cfg.sql_width, M, rng), kGroupRest);
    ps.add("enc.rel", init_uniform(kEdgeTypeCount, M, 0.1, rng), kGroupRest);
    for (int l = 0; l < cfg.hie_layers; ++l)
      hie_.push_back(TransformerBlock::create(ps, "enc.hie" + std::to_string(l), M, cfg.heads, rng, kGroupRest));
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<TransformerBlock>& hie_layers() const { return hie_; }

  // Hidden states (L x M). `sql_hidden` has one row per SQL slot; `rng`
  // enables dropout. Attention probabilities of the relation-aware layers are
  // appended to `traces` when given.
  ag::Var encode(ag::Tape& t, ParamStore& ps, const EncoderInput& in, const Mat& sql_hidden, Rng* rng,
                 RelationMode mode = RelationMode::Full, std::vector<ag::AttentionTrace>* traces = nullptr) const {
    const int L = in.length();
    check(L > 0 && L <= cfg_.max_len, "encoder input length ", L, " outside [1, ", cfg_.max_len, "]");
    check(static_cast<int>(in.sql_rows.size()) == sql_hidden.rows(), "SQL slot count mismatch: layout has ", in.sql_rows.size(),
          " slots, SQL encoder produced ", sql_hidden.rows(), " vectors");
    std::vector<int> pos(static_cast<std::size_t>(L));
    std::iota(pos.begin(), pos.end(), 0);
    ag::Var x = ag::gather_rows(t.param(ps.get("enc.tok")), in.ids);
    if (!in.sql_rows.empty()) x = ag::splice_rows(x, in.sql_rows, project_sql(t.constant(sql_hidden), t.param(ps.get("enc.proj"))));
    x = ag::add(x, ag::add(ag::gather_rows(t.param(ps.get("enc.pos")), pos), ag::gather_rows(t.param(ps.get("enc.seg")), in.segments)));
    x = maybe_dropout(ln_(t, ps, x), cfg_.dropout, rng);
    for (const auto& b : base_) x = b(t, ps, x, nullptr, nullptr, cfg_.dropout, rng);

    ag::Var table;
    const ag::Var* rel = nullptr;
    if (mode != RelationMode::None) {
      table = mode == RelationMode::Full ? t.param(ps.get("enc.rel")) : t.constant(Mat::Zero(kEdgeTypeCount, cfg_.width));
      rel = &table;
    }
    for (const auto& b : hie_) {
      ag::AttentionTrace trace;
      x = b(t, ps, x, rel, in.relations, cfg_.dropout, rng, traces ? &trace : nullptr);
      if (traces) traces->push_back(std::move(trace));
    }
    return x;
  }

 private:
  EncoderConfig cfg_;
  LayerNorm ln_;
  std::vector<TransformerBlock> base_, hie_;
};

// Attention of one relation-aware layer: heads, then the output projection.
inline ag::Var relative_attention(ag::Tape& t, ParamStore& ps, const TransformerBlock& layer, ag::Var x, const ag::Var* rel_table,
                                  const std::shared_ptr<const ag::RelationIds>& relations, ag::AttentionTrace* trace = nullptr) {
  return layer.attend(t, ps, x, rel_table, relations, trace);
}

}  // namespace hiesql
