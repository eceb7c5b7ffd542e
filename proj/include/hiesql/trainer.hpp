#pragma once

// Teacher-forced training with R-Drop: each example runs through the model
// twice with independent dropout and the loss is NLL1 + NLL2 + the symmetric
// KL between the per-step action distributions of the two passes.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "hiesql/model.hpp"
#include "hiesql/parallel.hpp"

namespace hiesql {

struct TrainingConfig {
  int max_steps = 50000;
  int batch = 24;
  double lr_encoder = 1e-5;
  double lr_rest = 1e-4;
  bool rdrop = true;
  double clip = 5.0;
  std::uint64_t seed = 1;
  int workers = 1;
  int checkpoint_every = 0;  // 0: only at the end
};

inline TrainingConfig training_config(const Config& c) {
  TrainingConfig t;
  t.max_steps = c.get_int("train.max_steps", t.max_steps);
  t.batch = c.get_int("train.batch", t.batch);
  t.lr_encoder = c.get_double("train.lr_encoder", t.lr_encoder);
  t.lr_rest = c.get_double("train.lr_rest", t.lr_rest);
  t.rdrop = c.get_bool("train.rdrop", t.rdrop);
  t.clip = c.get_double("train.clip", t.clip);
  t.checkpoint_every = c.get_int("train.checkpoint_every", t.checkpoint_every);
  t.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<int>(t.seed)));
  t.workers = c.get_int("workers", t.workers);
  check(t.max_steps > 0, "train.max_steps must be positive");
  check(t.batch > 0, "train.batch must be positive");
  return t;
}

struct LearningRates {
  double encoder = 0.0;
  double rest = 0.0;
};

// Linear warmup over the first max_steps/8 steps, then linear decay to 0.
inline LearningRates lr_at(double step, const TrainingConfig& c) {
  const double total = c.max_steps;
  const double warm = total / 8.0;
  check(step >= 0 && step <= total, "lr_at: step ", step, " outside [0, ", c.max_steps, "]");
  const double f = step <= warm ? step / warm : (total - step) / (total - warm);
  return {c.lr_encoder * f, c.lr_rest * f};
}

// Sum over steps of -log P(gold action).
inline ag::Var nll_loss(const std::vector<ag::Var>& step_logp, const std::vector<int>& gold) {
  check(!step_logp.empty() && step_logp.size() == gold.size(), "nll_loss: ", step_logp.size(), " distributions for ", gold.size(),
        " gold actions");
  ag::Var total = ag::scale(ag::pick(step_logp[0], 0, gold[0]), -1.0);
  for (std::size_t i = 1; i < step_logp.size(); ++i) total = ag::sub(total, ag::pick(step_logp[i], 0, gold[i]));
  return total;
}

inline constexpr double kKlEpsilon = 1e-8;

// Sum over steps of 0.5 * (KL(P1||P2) + KL(P2||P1)).
inline ag::Var rdrop_loss(const std::vector<ag::Var>& logp1, const std::vector<ag::Var>& logp2) {
  check(!logp1.empty() && logp1.size() == logp2.size(), "rdrop_loss: ", logp1.size(), " vs ", logp2.size(), " steps");
  ag::Var total;
  for (std::size_t i = 0; i < logp1.size(); ++i) {
    check(logp1[i].cols() == logp2[i].cols(), "rdrop_loss: support mismatch at step ", i);
    ag::Var kl = ag::symmetric_kl(logp1[i], logp2[i], kKlEpsilon);
    total = i == 0 ? kl : ag::add(total, kl);
  }
  return total;
}

inline ag::Var rdrop_loss(const ForcedPass& a, const ForcedPass& b) {
  check(a.legal.size() == b.legal.size(), "rdrop_loss: passes have different lengths");
  for (std::size_t i = 0; i < a.legal.size(); ++i)
    check(a.legal[i].slot == b.legal[i].slot && a.legal[i].ids == b.legal[i].ids && a.legal[i].values == b.legal[i].values,
          "rdrop_loss: support mismatch at step ", i);
  return rdrop_loss(a.step_logp, b.step_logp);
}

// ---------------------------------------------------------------------------
// Examples

struct TrainExample {
  std::string tag;  // interaction id and turn
  int turn = 0;
  PreparedTurn prep;
  ActionSequence gold;
};

struct ExampleSet {
  std::vector<TrainExample> examples;
  std::vector<std::string> skipped;  // reason per skipped turn
};

// One example per turn. The encoder sees the gold SQL of the previous turn.
inline ExampleSet build_examples(const std::vector<InteractionRecord>& data, const DatabaseSet& dbs, const Model& model,
                                 SqlEncoder& sql_encoder, SqlEmbeddingCache* cache) {
  check(sql_encoder.frozen(), "the SQL encoder must be frozen before downstream training");
  ExampleSet out;
  for (const auto& r : data) {
    const Database& db = database_for(dbs, r.db_id);
    const auto p = parse_interaction(r, db.schema);
    for (std::size_t t = 0; t < r.turns.size(); ++t) {
      const std::string tag = r.id + "#" + std::to_string(t + 1);
      if (!p.gold[t]) {
        out.skipped.push_back(tag + ": " + p.errors[t]);
        continue;
      }
      TurnInput in;
      in.db = &db;
      in.history.assign(p.utterances.begin(), p.utterances.begin() + static_cast<std::ptrdiff_t>(t));
      in.current = p.utterances[t];
      if (t > 0) in.last_sql = p.gold[t - 1];
      try {
        TrainExample ex{tag, static_cast<int>(t), model.prepare(in, sql_encoder, cache), sql_to_actions(*p.gold[t], db.schema)};
        for (const auto& a : ex.gold)
          if (a.kind == ActionKind::EmitValue)
            check(std::find(ex.prep.value_literals.begin(), ex.prep.value_literals.end(), a.value) != ex.prep.value_literals.end(),
                  "value '", a.value, "' is neither a closed literal nor a single utterance token");
        out.examples.push_back(std::move(ex));
      } catch (const Error& e) {
        out.skipped.push_back(tag + ": " + e.what());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fitting

struct StepRecord {
  int step = 0;
  double lr_encoder = 0.0;
  double lr_rest = 0.0;
  double loss = 0.0;  // batch mean of L
  double nll = 0.0;   // batch mean of NLL1 + NLL2 (NLL1 without R-Drop)
  double kl = 0.0;    // batch mean of the KL term
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

inline std::string step_record_header() { return "step\tlr_encoder\tlr_rest\tloss\tnll\tkl\tgrad_norm\twall_ms"; }

inline std::string format_step_record(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.1f", r.step, r.lr_encoder, r.lr_rest, r.loss, r.nll,
                r.kl, r.grad_norm, r.wall_ms);
  return buf;
}

struct ExampleLoss {
  double loss = 0.0, nll = 0.0, kl = 0.0;
};

// Forward and backward for one example; gradients scaled by `weight`.
inline ExampleLoss example_loss(ag::Tape& t, Model& model, const TrainExample& ex, bool rdrop, std::uint64_t seed, double weight) {
  Rng rng1(mix_seed(seed, {1}));
  const DecoderMemory d1 = model.memory(t, ex.prep, &rng1);
  const ForcedPass f1 = teacher_force(t, model.params(), model.decoder(), d1, *ex.prep.schema, ex.gold, &rng1);
  ag::Var nll = nll_loss(f1.step_logp, f1.gold);
  ag::Var loss = nll;
  ExampleLoss out;
  if (rdrop) {
    Rng rng2(mix_seed(seed, {2}));
    const DecoderMemory d2 = model.memory(t, ex.prep, &rng2);
    const ForcedPass f2 = teacher_force(t, model.params(), model.decoder(), d2, *ex.prep.schema, ex.gold, &rng2);
    nll = ag::add(nll, nll_loss(f2.step_logp, f2.gold));
    ag::Var kl = rdrop_loss(f1, f2);
    loss = ag::add(nll, kl);
    out.kl = kl.scalar();
  }
  out.nll = nll.scalar();
  out.loss = loss.scalar();
  if (t.grad_enabled()) t.backward(ag::scale(loss, weight));
  return out;
}

struct FitOptions {
  std::string out_dir;  // checkpoints and log; empty keeps everything in memory
  std::function<void(const StepRecord&)> on_step;
};

inline std::vector<StepRecord> fit(Model& model, const std::vector<TrainExample>& examples, const TrainingConfig& cfg,
                                   const FitOptions& opt = {}) {
  check(!examples.empty(), "training corpus is empty");
  auto params = model.params().all();
  Adam adam;
  std::vector<StepRecord> log;
  std::ofstream log_file;
  std::string ckpt;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    log_file.open(opt.out_dir + "/train_log.tsv", std::ios::trunc);
    check(log_file.good(), "cannot write training log in '", opt.out_dir, "'");
    log_file << step_record_header() << "\n";
    ckpt = opt.out_dir + "/model.ckpt";
  }

  std::vector<std::size_t> order(examples.size());
  std::size_t cursor = order.size();
  int epoch = 0;
  const auto bs = static_cast<std::size_t>(cfg.batch);
  for (int step = 0; step < cfg.max_steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> batch;
    while (batch.size() < bs) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(mix_seed(cfg.seed, {0xe90c, static_cast<std::uint64_t>(epoch++)}));
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    std::vector<GradBuffer> grads(bs, GradBuffer(params));
    std::vector<ExampleLoss> losses(bs);
    parallel_for(bs, cfg.workers, [&](std::size_t b) {
      ag::Tape t;
      losses[b] = example_loss(t, model, examples[batch[b]], cfg.rdrop,
                               mix_seed(cfg.seed, {0x7a1, static_cast<std::uint64_t>(step), b}), 1.0 / static_cast<double>(bs));
      grads[b].add(t);
    });
    GradBuffer total(params);
    StepRecord rec;
    rec.step = step;
    for (std::size_t b = 0; b < bs; ++b) {
      total.add(grads[b]);
      rec.loss += losses[b].loss / static_cast<double>(bs);
      rec.nll += losses[b].nll / static_cast<double>(bs);
      rec.kl += losses[b].kl / static_cast<double>(bs);
    }
    if (!std::isfinite(rec.loss) || !total.finite()) {
      fail("non-finite loss at step ", step, "; parameters left at the last good step",
           ckpt.empty() ? std::string() : "; last good checkpoint: " + ckpt);
    }
    const LearningRates lr = lr_at(step + 1, cfg);
    rec.lr_encoder = lr.encoder;
    rec.lr_rest = lr.rest;
    rec.grad_norm = adam.step(params, total.grads(), [&](int g) { return g == kGroupEncoder ? lr.encoder : lr.rest; }, cfg.clip);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    log.push_back(rec);
    if (log_file.is_open()) log_file << format_step_record(rec) << "\n" << std::flush;
    if (opt.on_step) opt.on_step(rec);
    if (!ckpt.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) model.save(ckpt);
  }
  if (!ckpt.empty()) model.save(ckpt);
  return log;
}

}  // namespace hiesql
