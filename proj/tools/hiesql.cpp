// hiesql: pretrain the SQL encoder, train and evaluate the parser, inspect
// schema-linking graphs and run gradient checks.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "hiesql/config.hpp"
#include "hiesql/eval.hpp"
#include "hiesql/gradcheck.hpp"
#include "hiesql/manifest.hpp"
#include "hiesql/trainer.hpp"

using namespace hiesql;

namespace {

struct Common {
  std::string config;
  int seed = -1;
  int workers = 0;
};

Config load_config(const Common& c) {
  Config cfg = c.config.empty() ? Config() : Config::load(c.config);
  if (c.seed >= 0) cfg.set("seed", std::to_string(c.seed), "--seed");
  if (c.workers > 0) cfg.set("workers", std::to_string(c.workers), "--workers");
  return cfg;
}

int workers_of(const Config& cfg) { return cfg.get_int("workers", default_workers()); }

struct DataArgs {
  std::string schemas;
  std::string contents;
  std::string data;
};

void add_data_options(CLI::App* app, DataArgs& d, bool need_dataset) {
  app->add_option("--schemas", d.schemas, "schema JSON (array or db_id-keyed object)")->required()->check(CLI::ExistingFile);
  app->add_option("--contents", d.contents, "cell values, one 'db_id<TAB>table<TAB>column<TAB>value' per line")->check(CLI::ExistingFile);
  auto* opt = app->add_option("--data", d.data, "interaction dataset JSON")->check(CLI::ExistingFile);
  if (need_dataset) opt->required();
}

void record_inputs(RunManifest& m, const Common& c, const DataArgs& d) {
  if (!c.config.empty()) m.input(c.config);
  m.input(d.schemas);
  if (!d.contents.empty()) m.input(d.contents);
  if (!d.data.empty()) m.input(d.data);
}

// --- pretrain ---------------------------------------------------------------

struct PretrainArgs {
  DataArgs data;
  std::string corpus;
  std::string out;
};

int cmd_pretrain(const Common& common, const PretrainArgs& a) {
  const Config cfg = load_config(common);
  const DatabaseSet dbs = load_databases(a.data.schemas, a.data.contents);
  std::size_t skipped = 0;
  const auto corpus = load_sql_shard(a.corpus, dbs, &skipped);
  std::cerr << "corpus: " << corpus.size() << " queries, " << skipped << " outside the grammar\n";
  check(!corpus.empty(), "pretraining corpus '", a.corpus, "' is empty");

  PretrainConfig pc;
  pc.steps = cfg.get_int("pretrain.steps", pc.steps);
  pc.batch = cfg.get_int("pretrain.batch", pc.batch);
  pc.lr = cfg.get_double("pretrain.lr", pc.lr);
  pc.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  pc.workers = workers_of(cfg);
  SqlEncoder enc(build_sql_vocab(corpus), sql_encoder_config(cfg));

  const std::string curve = a.out + ".loss.tsv";
  std::ofstream log(curve, std::ios::trunc);
  check(log.good(), "cannot write '", curve, "'");
  log << "step\tloss\tmasked\tmaskable\n";
  const auto steps = pretrain(enc, corpus, pc, [&](const PretrainStep& s) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%d\t%.17g\t%d\t%d", s.step, s.loss, s.masked, s.maskable);
    log << buf << "\n";
    if (s.step % 50 == 0 || s.step + 1 == pc.steps) std::cerr << "step " << s.step << " loss " << s.loss << "\n";
  });
  log.close();
  save_sql_encoder(a.out, enc);

  RunManifest m{"pretrain", common.config, pc.seed, {}, {}};
  record_inputs(m, common, a.data);
  m.input(a.corpus);
  m.output(a.out);
  m.output(curve);
  m.write(manifest_path_for(a.out));
  std::cout << "initial loss " << steps.front().loss << " final loss " << steps.back().loss << "\n";
  return 0;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  DataArgs data;
  std::string sql_encoder;
  std::string out_dir;
};

int cmd_train(const Common& common, const TrainArgs& a) {
  const Config cfg = load_config(common);
  const DatabaseSet dbs = load_databases(a.data.schemas, a.data.contents);
  const auto data = load_dataset(a.data.data);
  verify_artifact(a.sql_encoder);
  SqlEncoder enc = load_sql_encoder(a.sql_encoder);
  enc.freeze();
  const std::uint64_t frozen_sum = enc.checksum();

  Model model(build_word_vocab(data, dbs), model_config(cfg, enc.width()));
  SqlEmbeddingCache cache;
  const ExampleSet ex = build_examples(data, dbs, model, enc, &cache);
  for (const auto& s : ex.skipped) std::cerr << "skipped " << s << "\n";
  std::cerr << ex.examples.size() << " training turns, " << ex.skipped.size() << " skipped\n";

  const TrainingConfig tc = training_config(cfg);
  FitOptions opt;
  opt.out_dir = a.out_dir;
  opt.on_step = [&](const StepRecord& r) {
    if (r.step % 100 == 0 || r.step + 1 == tc.max_steps)
      std::cerr << "step " << r.step << " loss " << r.loss << " nll " << r.nll << " kl " << r.kl << "\n";
  };
  fit(model, ex.examples, tc, opt);
  check(enc.checksum() == frozen_sum, "the frozen SQL encoder changed during training");

  const std::string ckpt = a.out_dir + "/model.ckpt";
  RunManifest m{"train", common.config, tc.seed, {}, {}};
  record_inputs(m, common, a.data);
  m.input(a.sql_encoder);
  m.output(ckpt);
  m.output(a.out_dir + "/train_log.tsv");
  m.write(manifest_path_for(ckpt));
  std::cout << "wrote " << ckpt << "\n";
  return 0;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  DataArgs data;
  std::string model;
  std::string sql_encoder;
  int beam = 0;
  std::string ablate = "none";
  std::string hardness;
  std::string out;
  std::string predictions;
  bool dump_layout = false;
};

int cmd_eval(const Common& common, const EvalArgs& a) {
  const Config cfg = load_config(common);
  const DatabaseSet dbs = load_databases(a.data.schemas, a.data.contents);
  const auto data = load_dataset(a.data.data);
  for (const auto& r : data) database_for(dbs, r.db_id);
  verify_artifact(a.model);
  verify_artifact(a.sql_encoder);
  Model model = Model::load(a.model);
  SqlEncoder enc = load_sql_encoder(a.sql_encoder);
  enc.freeze();
  const int beam = a.beam > 0 ? a.beam : cfg.get_int("beam", 3);
  Ablation ab;
  if (a.ablate == "relations") {
    ab.relations = RelationMode::Zeroed;
  } else if (a.ablate == "sql") {
    ab.drop_sql = true;
  } else {
    check(a.ablate == "none", "unknown ablation '", a.ablate, "' (none, relations, sql)");
  }
  const HardnessTable table = a.hardness.empty() ? HardnessTable::builtin() : HardnessTable::load(a.hardness);

  const auto preds = run_dataset(model, enc, data, dbs, beam, ab, workers_of(cfg));
  if (a.dump_layout) {
    SqlEmbeddingCache cache;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Database& db = database_for(dbs, data[i].db_id);
      std::vector<TokenSeq> utts;
      for (const auto& t : data[i].turns) utts.push_back(normalize_tokens(t.utterance));
      for (std::size_t t = 0; t < utts.size(); ++t) {
        TurnInput in{&db, {utts.begin(), utts.begin() + static_cast<std::ptrdiff_t>(t)}, utts[t],
                     t > 0 ? preds[i][t - 1].query : std::nullopt};
        std::cout << "## " << data[i].id << " turn " << t + 1 << "\n";
        dump_layout(std::cout, model.prepare(in, enc, &cache, ab.drop_sql).layout, db.schema);
      }
    }
  }
  const EvalReport rep = score(data, preds, dbs, table);
  print_report(std::cout, rep);

  RunManifest m{"eval", common.config, static_cast<std::uint64_t>(cfg.get_int("seed", 1)), {}, {}};
  record_inputs(m, common, a.data);
  m.input(a.model);
  m.input(a.sql_encoder);
  if (!a.predictions.empty()) {
    std::ofstream out(a.predictions, std::ios::trunc);
    check(out.good(), "cannot write '", a.predictions, "'");
    out << "interaction\tturn\tpredicted\terror\n";
    for (std::size_t i = 0; i < data.size(); ++i)
      for (std::size_t t = 0; t < preds[i].size(); ++t)
        out << data[i].id << "\t" << t + 1 << "\t" << preds[i][t].sql << "\t" << preds[i][t].error << "\n";
    out.close();
    m.output(a.predictions);
  }
  if (!a.out.empty()) {
    nlohmann::json j = report_json(rep);
    j["beam"] = beam;
    j["ablation"] = a.ablate;
    std::ofstream out(a.out, std::ios::trunc);
    check(out.good(), "cannot write '", a.out, "'");
    out << j.dump(2) << "\n";
    out.close();
    m.output(a.out);
    m.write(manifest_path_for(a.out));
  }
  return rep.consistent() ? 0 : 2;
}

// --- linkdump ---------------------------------------------------------------

struct LinkdumpArgs {
  DataArgs data;
  std::string interaction;
  int turn = 1;
  bool dump_layout = false;
};

int cmd_linkdump(const Common& common, const LinkdumpArgs& a) {
  const Config cfg = load_config(common);
  const ModelConfig mc = model_config(cfg, 1);
  const DatabaseSet dbs = load_databases(a.data.schemas, a.data.contents);
  const auto data = load_dataset(a.data.data);
  const InteractionRecord* rec = nullptr;
  for (const auto& r : data)
    if (r.id == a.interaction) rec = &r;
  check(rec != nullptr, "no interaction '", a.interaction, "' in ", a.data.data);
  check(a.turn >= 1 && a.turn <= static_cast<int>(rec->turns.size()), "turn ", a.turn, " outside 1..", rec->turns.size());
  const Database& db = database_for(dbs, rec->db_id);
  const auto p = parse_interaction(*rec, db.schema);
  const auto t = static_cast<std::size_t>(a.turn - 1);
  const std::vector<TokenSeq> history(p.utterances.begin(), p.utterances.begin() + static_cast<std::ptrdiff_t>(t));
  std::optional<Query> last;
  if (t > 0) {
    check(p.gold[t - 1].has_value(), "previous turn SQL is outside the grammar: ", p.errors[t - 1]);
    last = p.gold[t - 1];
  }
  // The SQL encoder emits one vector per query word plus one for [CLS].
  const int slots = last ? static_cast<int>(build_sqlbert_input(*last, {}, db.schema).sql.size()) + 1 : 0;
  const SequenceLayout lay = assemble_input(history, p.utterances[t], slots, db.schema, mc.layout);
  const LinkGraph g = build_graph(p.utterances[t], history, last, db.schema, db.contents, mc.link);
  if (a.dump_layout) dump_layout(std::cout, lay, db.schema);
  dump_graph(std::cout, g, relation_matrix(g, lay.map), lay.map, db.schema);
  return 0;
}

// --- gradcheck --------------------------------------------------------------

struct GradcheckArgs {
  std::string flip_sign;
  int tables = 1;
  int columns = 0;
  int sql_slots = 1;
};

int cmd_gradcheck(const Common& common, const GradcheckArgs& a) {
  const Config cfg = load_config(common);
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  auto f = make_grad_fixture(cfg.get_int("gradcheck.width", 16), cfg.get_int("gradcheck.heads", 4), cfg.get_int("gradcheck.hie_layers", 2),
                             a.tables, a.columns, a.sql_slots, seed);
  GradCheckOptions opt;
  opt.samples = cfg.get_int("gradcheck.samples", opt.samples);
  opt.flip_sign = a.flip_sign;
  opt.seed = seed;
  if (!a.flip_sign.empty()) f->model->params().get(a.flip_sign);  // fail early on a bad name
  const double tol = cfg.get_double("gradcheck.tolerance", 1e-3);
  std::cout << "# fixture L=" << f->prep.layout.length() << " tensors=" << f->model->params().size() << "\n";
  const GradCheckReport rep = gradcheck_fixture(*f, opt);
  print_gradcheck(std::cout, rep, tol);
  return rep.pass(tol) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-dependent text-to-SQL: pretraining, training, evaluation and diagnostics"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "override the config seed");
  app.add_option("--workers", common.workers, "worker threads (default: available cores)");

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "masked-span pretraining of the SQL encoder");
  add_data_options(pre, pa.data, false);
  pre->add_option("--corpus", pa.corpus, "JSON lines of {db_id, question, sql}")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", pa.out, "SQL encoder checkpoint")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train the parser with a frozen SQL encoder");
  add_data_options(train, ta.data, true);
  train->add_option("--sql-encoder", ta.sql_encoder, "pretrained SQL encoder checkpoint")->required()->check(CLI::ExistingFile);
  train->add_option("--out-dir", ta.out_dir, "directory for model.ckpt and train_log.tsv")->required();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "decode every interaction and report QM / IM");
  add_data_options(ev, ea.data, true);
  ev->add_option("--model", ea.model, "parser checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--sql-encoder", ea.sql_encoder, "SQL encoder checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--beam", ea.beam, "beam width (default: config 'beam', else 3)");
  ev->add_option("--ablate", ea.ablate, "none, relations (zeroed relation embeddings) or sql (empty SQL slots)");
  ev->add_option("--hardness", ea.hardness, "difficulty table TSV")->check(CLI::ExistingFile);
  ev->add_option("--out", ea.out, "report JSON");
  ev->add_option("--predictions", ea.predictions, "per-turn predictions TSV");
  ev->add_flag("--dump-layout", ea.dump_layout, "print the input layout of every turn");

  LinkdumpArgs la;
  auto* ld = app.add_subcommand("linkdump", "print the linking graph and relation matrix of one turn");
  add_data_options(ld, la.data, true);
  ld->add_option("--interaction", la.interaction, "interaction id")->required();
  ld->add_option("--turn", la.turn, "1-based turn index");
  ld->add_flag("--dump-layout", la.dump_layout, "also print the input layout");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every parameter tensor");
  gc->add_option("--flip-sign", ga.flip_sign, "negate one tensor's analytic gradient (negative control)");
  gc->add_option("--tables", ga.tables, "fixture tables");
  gc->add_option("--columns", ga.columns, "fixture columns per table");
  gc->add_option("--sql-slots", ga.sql_slots, "fixture SQL slots");

  CLI11_PARSE(app, argc, argv);
  try {
    if (pre->parsed()) return cmd_pretrain(common, pa);
    if (train->parsed()) return cmd_train(common, ta);
    if (ev->parsed()) return cmd_eval(common, ea);
    if (ld->parsed()) return cmd_linkdump(common, la);
    if (gc->parsed()) return cmd_gradcheck(common, ga);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
