#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ast_sampler.hpp"
#include "fixtures.hpp"
#include "hiesql/eval.hpp"
#include "hiesql/manifest.hpp"
#include "hiesql/trainer.hpp"

using namespace hiesql;

namespace {

const std::string kData = HIESQL_DATA_DIR;

// Small untrained model over the toy corpus.
struct Toy {
  DatabaseSet dbs;
  std::vector<InteractionRecord> data;
  std::unique_ptr<SqlEncoder> enc;
  std::unique_ptr<Model> model;

  explicit Toy(double dropout = 0.1, std::uint64_t seed = 3) {
    dbs = load_databases(kData + "/toy_schemas.json", kData + "/toy_contents.tsv");
    data = load_dataset(kData + "/toy_train.json");
    SqlEncoderConfig sc;
    sc.width = 16;
    sc.layers = 1;
    sc.heads = 2;
    enc = std::make_unique<SqlEncoder>(build_sql_vocab(sql_corpus(data, dbs)), sc);
    enc->freeze();
    ModelConfig mc;
    mc.encoder.width = 16;
    mc.encoder.heads = 2;
    mc.encoder.base_layers = 1;
    mc.encoder.hie_layers = 1;
    mc.encoder.dropout = dropout;
    mc.encoder.sql_width = 16;
    mc.decoder.hidden = 16;
    mc.decoder.action_dim = 16;
    mc.decoder.dropout = dropout;
    mc.layout.max_history = 1;
    mc.seed = seed;
    model = std::make_unique<Model>(build_word_vocab(data, dbs), mc);
  }

  ExampleSet examples() {
    SqlEmbeddingCache cache;
    return build_examples(data, dbs, *model, *enc, &cache);
  }
};

Query q(const std::string& sql, const Schema& s) { return parse_sql(sql, s); }

}  // namespace

// ---------------------------------------------------------------------------
// Exact set match

TEST(CanonicalEqual, SelectListOrderDoesNotMatter) {
  const Schema s = fixtures::course_teach();
  EXPECT_TRUE(canonical_equal(q("SELECT Name, Age FROM teacher", s), q("SELECT Age, Name FROM teacher", s)));
  EXPECT_TRUE(canonical_equal(q("SELECT Name FROM teacher WHERE Age > 3 AND Hometown = 'x'", s),
                              q("SELECT Name FROM teacher WHERE Hometown = 'x' AND Age > 3", s)));
}

TEST(CanonicalEqual, DirectionValuesAndAggregatesMatter) {
  const Schema s = fixtures::course_teach();
  EXPECT_FALSE(canonical_equal(q("SELECT Name FROM teacher ORDER BY Age ASC", s), q("SELECT Name FROM teacher ORDER BY Age DESC", s)));
  EXPECT_FALSE(canonical_equal(q("SELECT Name FROM teacher WHERE Hometown = 'a'", s), q("SELECT Name FROM teacher WHERE Hometown = 'b'", s)));
  EXPECT_FALSE(canonical_equal(q("SELECT max(Age) FROM teacher", s), q("SELECT min(Age) FROM teacher", s)));
  EXPECT_FALSE(canonical_equal(q("SELECT Name FROM teacher WHERE Age > 3 OR Age < 1", s),
                               q("SELECT Name FROM teacher WHERE Age > 3 AND Age < 1", s)));
}

TEST(CanonicalEqual, SampledQueriesEqualThemselvesAfterRoundTrip) {
  const Schema s = fixtures::course_teach();
  fixtures::AstSampler sampler(s, 17);
  for (int i = 0; i < 200; ++i) {
    const Query a = sampler.query();
    EXPECT_TRUE(canonical_equal(parse_sql(to_sql(a, s), s), a));
  }
}

// ---------------------------------------------------------------------------
// Difficulty

TEST(Difficulty, ExampleQueries) {
  const Schema s = fixtures::course_teach();
  EXPECT_EQ(difficulty_of(q("SELECT * FROM teacher", s)), Difficulty::Easy);
  EXPECT_EQ(difficulty_of(q("SELECT Name FROM teacher WHERE Age > (SELECT avg(Age) FROM teacher) UNION SELECT Name FROM teacher", s)),
            Difficulty::Extra);
  EXPECT_GE(static_cast<int>(difficulty_of(q("SELECT Name FROM teacher ORDER BY Age ASC LIMIT 1", s))),
            static_cast<int>(Difficulty::Medium));
}

TEST(Difficulty, ShippedTableMatchesBuiltin) {
  const Schema s = fixtures::course_teach();
  const HardnessTable file = HardnessTable::load(kData + "/hardness_v1.tsv");
  fixtures::AstSampler sampler(s, 5);
  for (int i = 0; i < 300; ++i) {
    const Query a = sampler.query();
    EXPECT_EQ(difficulty_of(a, file), difficulty_of(a));
  }
  std::istringstream bad("trivial\t0\t1\t0\t0\t0\t0\n");
  EXPECT_THROW(HardnessTable::parse(bad), Error);
}

// ---------------------------------------------------------------------------
// Scores

TEST(Metrics, HandCountedReport) {
  const std::vector<std::vector<bool>> match = {{true, true, false, true}, {true}, {false, true}, {true, true, true}};
  std::vector<std::vector<Difficulty>> diff;
  for (const auto& m : match) diff.emplace_back(m.size(), Difficulty::Easy);
  const EvalReport r = score_matches(match, diff);
  EXPECT_EQ(r.questions, 10);
  EXPECT_EQ(r.matched, 8);
  EXPECT_DOUBLE_EQ(r.qm, 80.0);
  EXPECT_EQ(r.interactions, 4);
  EXPECT_EQ(r.interactions_matched, 2);
  EXPECT_DOUBLE_EQ(r.im, 50.0);
  EXPECT_EQ(r.tt, 3);
  EXPECT_EQ(r.tf, 1);
  EXPECT_EQ(r.ft, 2);
  EXPECT_EQ(r.ff, 0);
  EXPECT_EQ(r.by_turn[0].total, 4);
  EXPECT_EQ(r.by_turn[0].correct, 3);
  EXPECT_EQ(r.by_turn[1].total, 3);
  EXPECT_EQ(r.by_turn[1].correct, 3);
  EXPECT_EQ(r.by_turn[2].total, 2);
  EXPECT_EQ(r.by_turn[2].correct, 1);
  EXPECT_EQ(r.by_turn[3].total, 1);
  EXPECT_EQ(r.by_difficulty[0].total, 10);
  EXPECT_TRUE(r.consistent());
}

TEST(Metrics, ImpossibleReportIsFlagged) {
  EvalReport r;
  r.qm = 40.0;
  r.im = 50.0;
  EXPECT_FALSE(r.consistent());
  EXPECT_THROW(score_matches({{true}}, {}), Error);
}

TEST(Metrics, GoldOutsideGrammarCountsAsMiss) {
  Toy toy;
  std::vector<InteractionRecord> data = {{"x", "school", {{"list teachers", "SELECT name FROM teacher"}, {"odd", "SELECT nme FROM teacher"}}}};
  const Schema& s = database_for(toy.dbs, "school").schema;
  std::vector<std::vector<TurnPrediction>> preds(1);
  preds[0].push_back({parse_sql("SELECT name FROM teacher", s), "", "", 0.0});
  preds[0].push_back({parse_sql("SELECT name FROM teacher", s), "", "", 0.0});
  const EvalReport r = score(data, preds, toy.dbs);
  EXPECT_EQ(r.matched, 1);
  EXPECT_EQ(r.gold_outside_grammar, 1);
  EXPECT_EQ(r.tf, 1);
}

// ---------------------------------------------------------------------------
// Inference over interactions

TEST(RunInteraction, FailedTurnLeavesNextTurnWithEmptySlots) {
  Toy toy;
  const InteractionRecord r{"f", "school", {{"", "SELECT name FROM teacher"}, {"list all teachers", "SELECT name FROM teacher"}}};
  const auto preds = run_interaction(*toy.model, *toy.enc, nullptr, r, toy.dbs, 2);
  ASSERT_EQ(preds.size(), 2u);
  EXPECT_FALSE(preds[0].query.has_value());
  EXPECT_NE(preds[0].error.find("current utterance is empty"), std::string::npos);

  TurnInput in;
  in.db = &database_for(toy.dbs, "school");
  in.history = {TokenSeq{}};
  in.current = normalize_tokens("list all teachers");
  const PreparedTurn p = toy.model->prepare(in, *toy.enc, nullptr);
  EXPECT_TRUE(p.layout.sql_positions.empty());
  std::string sql, error;
  try {
    sql = to_sql(actions_to_sql(toy.model->predict(p, 2).actions, *p.schema), *p.schema);
  } catch (const Error& e) {
    error = e.what();
  }
  EXPECT_EQ(preds[1].sql, sql);
  EXPECT_EQ(preds[1].error, error);
}

TEST(RunInteraction, UnknownDatabaseIsAnError) {
  Toy toy;
  const InteractionRecord r{"m", "nope", {{"list teachers", "SELECT name FROM teacher"}}};
  EXPECT_THROW(run_interaction(*toy.model, *toy.enc, nullptr, r, toy.dbs, 1), Error);
  std::vector<std::vector<TurnPrediction>> preds(1, std::vector<TurnPrediction>(1));
  EXPECT_THROW(score({r}, preds, toy.dbs), Error);
}

TEST(RunInteraction, BeamOneReportEqualsGreedyDecoding) {
  Toy toy;
  std::vector<InteractionRecord> firsts;
  for (const auto& r : toy.data) firsts.push_back({r.id, r.db_id, {r.turns[0]}});
  const auto preds = run_dataset(*toy.model, *toy.enc, firsts, toy.dbs, 1);
  for (std::size_t i = 0; i < firsts.size(); ++i) {
    TurnInput in;
    in.db = &database_for(toy.dbs, firsts[i].db_id);
    in.current = normalize_tokens(firsts[i].turns[0].utterance);
    const PreparedTurn p = toy.model->prepare(in, *toy.enc, nullptr);
    ag::Tape t(false);
    const DecoderMemory d = toy.model->memory(t, p, nullptr);
    std::string sql;
    try {
      sql = to_sql(actions_to_sql(greedy_decode(t, toy.model->params(), toy.model->decoder(), d, *p.schema).actions, *p.schema), *p.schema);
    } catch (const Error&) {
    }
    EXPECT_EQ(preds[i][0].sql, sql) << firsts[i].id;
  }
}

TEST(RunInteraction, SavedModelPredictsIdentically) {
  Toy toy;
  const auto dir = std::filesystem::temp_directory_path() / "hiesql_pipeline_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();
  toy.model->save(path);
  Model back = Model::load(path);
  const std::vector<InteractionRecord> some(toy.data.begin(), toy.data.begin() + 4);
  const auto a = run_dataset(*toy.model, *toy.enc, some, toy.dbs, 3);
  const auto b = run_dataset(back, *toy.enc, some, toy.dbs, 3);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t t = 0; t < a[i].size(); ++t) {
      EXPECT_EQ(a[i][t].sql, b[i][t].sql);
      EXPECT_EQ(a[i][t].score, b[i][t].score);
    }
}

// ---------------------------------------------------------------------------
// Training

TEST(Examples, ToyCorpusIsFullyUsable) {
  Toy toy;
  const ExampleSet ex = toy.examples();
  EXPECT_TRUE(ex.skipped.empty()) << (ex.skipped.empty() ? "" : ex.skipped[0]);
  std::size_t turns = 0, long_interactions = 0;
  for (const auto& r : toy.data) {
    turns += r.turns.size();
    long_interactions += r.turns.size() >= 4;
  }
  EXPECT_EQ(toy.data.size(), 20u);
  EXPECT_GE(long_interactions, 3u);
  EXPECT_EQ(ex.examples.size(), turns);
  for (const auto& e : ex.examples)
    if (e.turn > 0) EXPECT_GT(e.prep.sql_hidden.rows(), 0) << e.tag;
}

TEST(Examples, UnfrozenSqlEncoderIsRejected) {
  Toy toy;
  SqlEncoder fresh(toy.enc->vocab(), toy.enc->config());
  SqlEmbeddingCache cache;
  EXPECT_THROW(build_examples(toy.data, toy.dbs, *toy.model, fresh, &cache), Error);
}

TEST(Trainer, RdropTermVanishesWithoutDropout) {
  Toy toy(0.0);
  const ExampleSet ex = toy.examples();
  for (std::size_t i = 0; i < ex.examples.size(); i += 7) {
    ag::Tape t;
    const ExampleLoss l = example_loss(t, *toy.model, ex.examples[i], true, 99, 1.0);
    EXPECT_EQ(l.kl, 0.0);
    EXPECT_EQ(l.loss, l.nll);
  }
}

TEST(Trainer, RdropPassesDisagreeWithDropout) {
  Toy toy(0.3);
  const ExampleSet ex = toy.examples();
  ag::Tape t;
  const ExampleLoss l = example_loss(t, *toy.model, ex.examples[3], true, 99, 1.0);
  EXPECT_GT(l.kl, 0.0);
  EXPECT_NEAR(l.loss, l.nll + l.kl, 1e-9);
}

TEST(Trainer, SupportMismatchIsAnError) {
  Toy toy(0.0);
  const ExampleSet ex = toy.examples();
  ag::Tape t;
  const auto& a = ex.examples[0];
  std::size_t other = 1;
  while (ex.examples[other].prep.schema == a.prep.schema) ++other;  // first turn on the other database
  const auto& b = ex.examples[other];
  const ForcedPass pa = teacher_force(t, toy.model->params(), toy.model->decoder(), toy.model->memory(t, a.prep, nullptr), *a.prep.schema,
                                      a.gold, nullptr);
  const ForcedPass pb = teacher_force(t, toy.model->params(), toy.model->decoder(), toy.model->memory(t, b.prep, nullptr), *b.prep.schema,
                                      b.gold, nullptr);
  EXPECT_THROW(rdrop_loss(pa, pb), Error);
}

TEST(Trainer, FitIsReproducibleAndLogsItsDecomposition) {
  TrainingConfig c;
  c.max_steps = 12;
  c.batch = 3;
  c.lr_encoder = 1e-3;
  c.lr_rest = 2e-3;
  c.seed = 5;
  std::vector<std::vector<StepRecord>> runs;
  std::vector<std::uint64_t> sums;
  for (int k = 0; k < 2; ++k) {
    Toy toy;
    runs.push_back(fit(*toy.model, toy.examples().examples, c));
    sums.push_back(toy.model->params().checksum());
  }
  EXPECT_EQ(sums[0], sums[1]);
  ASSERT_EQ(runs[0].size(), 12u);
  for (std::size_t i = 0; i < runs[0].size(); ++i) {
    const auto &a = runs[0][i], &b = runs[1][i];
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.grad_norm, b.grad_norm);
    EXPECT_LT(std::abs(a.loss - (a.nll + a.kl)), 1e-6);
    const LearningRates lr = lr_at(a.step + 1, c);
    EXPECT_EQ(a.lr_encoder, lr.encoder);
    EXPECT_EQ(a.lr_rest, lr.rest);
  }
}

TEST(Trainer, FitWritesLogAndCheckpoint) {
  Toy toy;
  TrainingConfig c;
  c.max_steps = 3;
  c.batch = 2;
  const auto dir = std::filesystem::temp_directory_path() / "hiesql_fit_test";
  std::filesystem::remove_all(dir);
  FitOptions opt;
  opt.out_dir = dir.string();
  fit(*toy.model, toy.examples().examples, c, opt);
  std::ifstream log(dir / "train_log.tsv");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  EXPECT_EQ(lines, 4);
  EXPECT_EQ(Model::load((dir / "model.ckpt").string()).params().checksum(), toy.model->params().checksum());
}

TEST(Trainer, NonFiniteLossStopsTraining) {
  Toy toy;
  toy.model->params().get("enc.rel").value.setConstant(std::numeric_limits<double>::quiet_NaN());
  TrainingConfig c;
  c.max_steps = 2;
  c.batch = 2;
  try {
    fit(*toy.model, toy.examples().examples, c);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
}

TEST(Trainer, TrainingReducesLoss) {
  Toy toy(0.0);
  TrainingConfig c;
  c.max_steps = 60;
  c.batch = 4;
  c.lr_encoder = 2e-3;
  c.lr_rest = 4e-3;
  c.rdrop = false;
  const auto log = fit(*toy.model, toy.examples().examples, c);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += log[static_cast<std::size_t>(i)].loss;
    last += log[log.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(last, 0.7 * first);
}

TEST(Schedule, ClosedFormAtSampledSteps) {
  TrainingConfig c;
  c.max_steps = 8000;
  c.lr_rest = 3e-4;
  for (int s = 0; s <= c.max_steps; s += 37) {
    const double warm = 1000.0;
    const double want = s <= warm ? 3e-4 * (s / warm) : 3e-4 * ((8000.0 - s) / (8000.0 - warm));
    EXPECT_EQ(lr_at(s, c).rest, want) << s;
  }
}

TEST(TrainingConfigFile, RejectsBadValues) {
  std::istringstream in("train.batch = 0\n");
  EXPECT_THROW(training_config(Config::parse(in)), Error);
  std::istringstream ok("train.max_steps = 10\ntrain.rdrop = false\nseed = 4\n");
  const TrainingConfig c = training_config(Config::parse(ok));
  EXPECT_EQ(c.max_steps, 10);
  EXPECT_FALSE(c.rdrop);
  EXPECT_EQ(c.seed, 4u);
}

// ---------------------------------------------------------------------------
// Data files and manifests

TEST(DataFiles, DatasetAndShardErrors) {
  EXPECT_THROW(parse_dataset(nlohmann::json::parse(R"({"db_id": "x"})")), Error);
  EXPECT_THROW(parse_dataset(nlohmann::json::parse(R"([{"db_id": "x", "turns": []}])")), Error);
  const DatabaseSet dbs = load_databases(kData + "/toy_schemas.json");
  std::size_t skipped = 0;
  const auto corpus = load_sql_shard(kData + "/toy_sql_corpus.jsonl", dbs, &skipped);
  EXPECT_EQ(skipped, 0u);
  EXPECT_GE(corpus.size(), 200u);
  const auto tmp = std::filesystem::temp_directory_path() / "hiesql_bad_shard.jsonl";
  std::ofstream(tmp) << "{\"db_id\": \"school\", \"sql\": \"SELECT name FROM teacher\"}\n{not json\n";
  EXPECT_THROW(load_sql_shard(tmp.string(), dbs), Error);
}

TEST(Manifest, DetectsReplacedArtifact) {
  const auto dir = std::filesystem::temp_directory_path() / "hiesql_manifest_test";
  std::filesystem::create_directories(dir);
  const std::string art = (dir / "a.bin").string();
  std::ofstream(art) << "one";
  RunManifest m{"test", "", 1, {}, {}};
  m.output(art);
  m.write(manifest_path_for(art));
  EXPECT_NO_THROW(verify_artifact(art));
  std::ofstream(art) << "two";
  EXPECT_THROW(verify_artifact(art), Error);
}
