#pragma once

// The downstream text-to-SQL model: relational encoder plus decoder over one
// parameter store, with turn preparation (layout, linking graph, relation
// matrix, frozen SQL embeddings of the previous turn's query).

#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hiesql/checkpoint.hpp"
#include "hiesql/config.hpp"
#include "hiesql/dataset.hpp"
#include "hiesql/decoder.hpp"
#include "hiesql/encoder.hpp"
#include "hiesql/linking.hpp"
#include "hiesql/sql_encoder.hpp"

namespace hiesql {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  LayoutOptions layout;
  LinkOptions link;
  std::uint64_t seed = 1;
};

inline ModelConfig model_config(const Config& c, int sql_width) {
  ModelConfig m;
  m.encoder.width = c.get_int("enc.width", m.encoder.width);
  m.encoder.heads = c.get_int("enc.heads", m.encoder.heads);
  m.encoder.base_layers = c.get_int("enc.base_layers", m.encoder.base_layers);
  m.encoder.hie_layers = c.get_int("enc.hie_layers", m.encoder.hie_layers);
  m.encoder.dropout = c.get_double("enc.dropout", m.encoder.dropout);
  m.encoder.max_len = c.get_int("enc.max_len", m.encoder.max_len);
  m.encoder.sql_width = sql_width;
  m.decoder.hidden = c.get_int("dec.hidden", m.decoder.hidden);
  m.decoder.action_dim = c.get_int("dec.action_dim", m.decoder.action_dim);
  m.decoder.dropout = c.get_double("dec.dropout", m.decoder.dropout);
  m.decoder.max_steps = c.get_int("dec.max_steps", m.decoder.max_steps);
  m.layout.max_len = c.get_int("layout.max_len", m.layout.max_len);
  m.layout.max_history = c.get_int("layout.max_history", m.layout.max_history);
  m.link.use_values = c.get_bool("link.use_values", m.link.use_values);
  m.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<int>(m.seed)));
  check(m.encoder.dropout >= 0 && m.encoder.dropout < 1 && m.decoder.dropout >= 0 && m.decoder.dropout < 1,
        "dropout rates must lie in [0, 1)");
  check(m.layout.max_len <= m.encoder.max_len, "layout.max_len exceeds enc.max_len");
  return m;
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"enc.width", m.encoder.width},          {"enc.heads", m.encoder.heads},       {"enc.base_layers", m.encoder.base_layers},
          {"enc.hie_layers", m.encoder.hie_layers}, {"enc.dropout", m.encoder.dropout},   {"enc.max_len", m.encoder.max_len},
          {"enc.sql_width", m.encoder.sql_width},   {"dec.hidden", m.decoder.hidden},     {"dec.action_dim", m.decoder.action_dim},
          {"dec.dropout", m.decoder.dropout},       {"dec.max_steps", m.decoder.max_steps}, {"layout.max_len", m.layout.max_len},
          {"layout.max_history", m.layout.max_history}, {"link.use_values", m.link.use_values}, {"seed", m.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.encoder.width = j.at("enc.width");
  m.encoder.heads = j.at("enc.heads");
  m.encoder.base_layers = j.at("enc.base_layers");
  m.encoder.hie_layers = j.at("enc.hie_layers");
  m.encoder.dropout = j.at("enc.dropout");
  m.encoder.max_len = j.at("enc.max_len");
  m.encoder.sql_width = j.at("enc.sql_width");
  m.decoder.hidden = j.at("dec.hidden");
  m.decoder.action_dim = j.at("dec.action_dim");
  m.decoder.dropout = j.at("dec.dropout");
  m.decoder.max_steps = j.at("dec.max_steps");
  m.layout.max_len = j.at("layout.max_len");
  m.layout.max_history = j.at("layout.max_history");
  m.link.use_values = j.at("link.use_values");
  m.seed = j.at("seed");
  return m;
}

// Inference-time switches for ablations.
struct Ablation {
  RelationMode relations = RelationMode::Full;
  bool drop_sql = false;  // leave the SQL slots empty on every turn
};

// Everything the encoder sees for one turn.
struct TurnInput {
  const Database* db = nullptr;
  std::vector<TokenSeq> history;
  TokenSeq current;
  std::optional<Query> last_sql;
};

struct PreparedTurn {
  const Schema* schema = nullptr;
  SequenceLayout layout;
  EncoderInput input;
  Mat sql_hidden;  // one row per SQL slot
  std::vector<std::string> value_literals;  // literals the decoder can emit
};

// Frozen SQL-encoder outputs keyed by (query text, question text).
class SqlEmbeddingCache {
 public:
  Mat get(SqlEncoder& enc, const SqlBertInput& in) {
    const std::string key = join(in.sql, " ") + "\x1f" + join(in.question, " ") + "\x1f" + join(in.flatten(), " ");
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = map_.find(key);
      if (it != map_.end()) return it->second;
    }
    Mat m = enc.encode_sql(in);
    std::lock_guard<std::mutex> lock(mu_);
    return map_.emplace(key, std::move(m)).first->second;
  }

 private:
  std::mutex mu_;
  std::unordered_map<std::string, Mat> map_;
};

// Downstream word vocabulary: utterance words and schema name words.
inline Vocab build_word_vocab(const std::vector<InteractionRecord>& data, const DatabaseSet& dbs) {
  Vocab v;
  v.add("*");
  for (const auto& [id, db] : dbs) {
    for (const auto& t : db.schema.tables)
      for (const auto& w : t.words) v.add(w);
    for (const auto& c : db.schema.columns)
      for (const auto& w : c.words) v.add(w);
  }
  for (const auto& r : data)
    for (const auto& t : r.turns)
      for (const auto& w : token_words(t.utterance)) v.add(w);
  return v;
}

class Model {
 public:
  Model(Vocab vocab, const ModelConfig& cfg) : vocab_(std::move(vocab)), cfg_(cfg) {
    Rng rng(mix_seed(cfg.seed, {0xe2c0de}));
    encoder_ = RelationalEncoder(ps_, vocab_, cfg.encoder, rng);
    decoder_ = Decoder(ps_, cfg.encoder.width, cfg.decoder, rng);
  }

  const Vocab& vocab() const { return vocab_; }
  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  const RelationalEncoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }

  PreparedTurn prepare(const TurnInput& turn, SqlEncoder& sql_encoder, SqlEmbeddingCache* cache, bool drop_sql = false) const {
    check(turn.db != nullptr, "turn without a database");
    const Schema& s = turn.db->schema;
    PreparedTurn p;
    p.schema = &s;
    std::optional<Query> last = drop_sql ? std::nullopt : turn.last_sql;
    if (last) {
      const auto in = build_sqlbert_input(*last, concat_utterances(turn.history), s);
      p.sql_hidden = cache ? cache->get(sql_encoder, in) : sql_encoder.encode_sql(in);
    } else {
      p.sql_hidden = Mat(0, sql_encoder.width());
    }
    p.layout = assemble_input(turn.history, turn.current, static_cast<int>(p.sql_hidden.rows()), s, cfg_.layout);
    const LinkGraph g = build_graph(turn.current, turn.history, last, s, turn.db->contents, cfg_.link);
    p.input = make_encoder_input(vocab_, p.layout, relation_matrix(g, p.layout.map));
    p.value_literals = closed_values();
    for (int pos : copy_positions(p.layout)) p.value_literals.push_back(p.layout.tokens()[static_cast<std::size_t>(pos)]);
    return p;
  }

  // Encoder memory and decoder precomputation for one prepared turn.
  DecoderMemory memory(ag::Tape& t, const PreparedTurn& p, Rng* rng, RelationMode mode = RelationMode::Full,
                       std::vector<ag::AttentionTrace>* traces = nullptr) {
    ag::Var mem = encoder_.encode(t, ps_, p.input, p.sql_hidden, rng, mode, traces);
    return decoder_.prepare(t, ps_, mem, p.layout);
  }

  DecodeResult predict(const PreparedTurn& p, int beam, RelationMode mode = RelationMode::Full) {
    ag::Tape t(false);
    const DecoderMemory d = memory(t, p, nullptr, mode);
    return beam_decode(t, ps_, decoder_, d, *p.schema, beam);
  }

  nlohmann::json meta() const { return {{"kind", "model"}, {"vocab", vocab_.words()}, {"config", to_json(cfg_)}}; }

  void save(const std::string& path) const { save_checkpoint(path, ps_, meta()); }

  static Model load(const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    check(ck.meta.value("kind", "") == "model", "'", path, "' is not a model checkpoint");
    Model m(Vocab::from_words(ck.meta.at("vocab").get<std::vector<std::string>>()), model_config_from_json(ck.meta.at("config")));
    restore_params(m.ps_, ck, path);
    return m;
  }

 private:
  Vocab vocab_;
  ModelConfig cfg_;
  ParamStore ps_;
  RelationalEncoder encoder_;
  Decoder decoder_;
};

// SQL encoder checkpoints.
inline SqlEncoderConfig sql_encoder_config(const Config& c) {
  SqlEncoderConfig s;
  s.width = c.get_int("sql.width", s.width);
  s.layers = c.get_int("sql.layers", s.layers);
  s.heads = c.get_int("sql.heads", s.heads);
  s.max_len = c.get_int("sql.max_len", s.max_len);
  s.dropout = c.get_double("sql.dropout", s.dropout);
  s.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<int>(s.seed)));
  return s;
}

inline void save_sql_encoder(const std::string& path, const SqlEncoder& enc) {
  const auto& c = enc.config();
  save_checkpoint(path, enc.params(),
                  {{"kind", "sql_encoder"},
                   {"vocab", enc.vocab().words()},
                   {"config", {{"width", c.width}, {"layers", c.layers}, {"heads", c.heads}, {"max_len", c.max_len},
                               {"dropout", c.dropout}, {"seed", c.seed}}}});
}

inline SqlEncoder load_sql_encoder(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  check(ck.meta.value("kind", "") == "sql_encoder", "'", path, "' is not a SQL encoder checkpoint");
  const auto& j = ck.meta.at("config");
  SqlEncoderConfig c;
  c.width = j.at("width");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.max_len = j.at("max_len");
  c.dropout = j.at("dropout");
  c.seed = j.at("seed");
  SqlEncoder enc(Vocab::from_words(ck.meta.at("vocab").get<std::vector<std::string>>()), c);
  restore_params(enc.params(), ck, path);
  return enc;
}

}  // namespace hiesql
