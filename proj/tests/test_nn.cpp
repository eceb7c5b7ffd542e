#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ast_sampler.hpp"
#include "attention_oracle.hpp"
#include "fixtures.hpp"
#include "hiesql/checkpoint.hpp"
#include "hiesql/config.hpp"
#include "hiesql/gradcheck.hpp"
#include "hiesql/sql_encoder.hpp"
#include "hiesql/trainer.hpp"

using namespace hiesql;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) { return init_uniform(r, c, scale, rng); }

std::shared_ptr<ag::RelationIds> random_ids(int L, int E, Rng& rng) {
  auto ids = std::make_shared<ag::RelationIds>(L, L);
  for (Eigen::Index i = 0; i < ids->size(); ++i) ids->data()[i] = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(E)));
  return ids;
}

// Finite-difference check of a loss over free-standing parameters.
double op_gradcheck(std::vector<Param>& ps, const std::function<ag::Var(ag::Tape&, std::vector<ag::Var>&)>& f) {
  std::vector<Param*> ptrs;
  for (auto& p : ps) ptrs.push_back(&p);
  auto loss = [&](ag::Tape& t) {
    std::vector<ag::Var> vs;
    for (auto& p : ps) vs.push_back(t.param(p));
    return f(t, vs);
  };
  return gradcheck(ptrs, loss, {1000, 1e-5, "", 3}).worst;
}

// Weighted sum so every output entry carries a distinct upstream gradient.
ag::Var weigh(ag::Tape& t, ag::Var x) {
  Mat w(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = std::sin(1.0 + 0.7 * static_cast<double>(i));
  return ag::sum(ag::mul(x, t.constant(w)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Autograd

TEST(Autograd, ElementwiseAndMatrixOpsMatchFiniteDifferences) {
  Rng rng(11);
  std::vector<Param> ps = {{"a", random_mat(3, 4, rng), false, 0}, {"b", random_mat(4, 2, rng), false, 0},
                           {"c", random_mat(3, 4, rng), false, 0}, {"r", random_mat(1, 4, rng), false, 0}};
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::matmul(v[0], v[1])); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::mul(ag::tanh(v[0]), ag::sigmoid(v[2]))); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::gelu(ag::sub(v[0], v[2]))); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::exp(ag::add_row(v[0], v[3]))); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::layer_norm(v[0], v[3], ag::scale(v[3], 0.5))); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::transpose(ag::log_softmax(ag::slice_rows(v[0], 1, 1)))); }), 1e-6);
}

TEST(Autograd, IndexingOpsMatchFiniteDifferences) {
  Rng rng(12);
  std::vector<Param> ps = {{"a", random_mat(5, 3, rng), false, 0}, {"s", random_mat(2, 3, rng), false, 0}};
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::gather_rows(v[0], {4, 0, 4, 2})); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::splice_rows(v[0], {1, 3}, v[1])); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::mean_row_groups(v[0], {{0, 1}, {4}, {2, 3, 4}})); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::concat_cols({v[1], ag::slice_rows(v[0], 1, 2)})); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::concat_rows({ag::slice_cols(v[1], 0, 2), ag::slice_cols(v[0], 1, 2)})); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps,
                         [&](ag::Tape& t, auto& v) {
                           ag::Var row = ag::slice_rows(v[0], 2, 1);
                           return weigh(t, ag::logsumexp_groups(ag::concat_cols({row, ag::slice_rows(v[1], 0, 1)}), {{0, 3}, {1}, {2, 4, 5}}));
                         }),
            1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return ag::softmax_nll(v[0], {0, 2, 1, 1, 0}); }), 1e-6);
  EXPECT_LT(op_gradcheck(ps,
                         [&](ag::Tape& t, auto& v) {
                           return ag::symmetric_kl(ag::log_softmax(ag::slice_rows(v[0], 0, 1)), ag::log_softmax(ag::slice_rows(v[1], 1, 1)), 1e-8);
                         }),
            1e-6);
  (void)rng;
}

TEST(Autograd, RelationAttentionGradients) {
  Rng rng(13);
  const int L = 4, M = 8, E = 5;
  auto ids = random_ids(L, E, rng);
  std::vector<Param> ps = {{"q", random_mat(L, M, rng), false, 0}, {"k", random_mat(L, M, rng), false, 0},
                           {"v", random_mat(L, M, rng), false, 0}, {"r", random_mat(E, M, rng), false, 0}};
  EXPECT_LT(op_gradcheck(ps,
                         [&](ag::Tape& t, auto& v) {
                           const ag::Var rel = v[3];
                           return weigh(t, ag::relation_attention(v[0], v[1], v[2], &rel, ids, 2));
                         }),
            1e-6);
  EXPECT_LT(op_gradcheck(ps, [&](ag::Tape& t, auto& v) { return weigh(t, ag::relation_attention(v[0], v[1], v[2], nullptr, nullptr, 4)); }),
            1e-6);
}

TEST(Autograd, FrozenParametersReceiveNoGradient) {
  Param p{"p", Mat::Ones(2, 2), true, 0};
  ag::Tape t;
  ag::Var x = t.param(p);
  ag::Var l = ag::sum(ag::mul(x, x));
  t.backward(l);
  EXPECT_FALSE(t.requires_grad(x.id));
  EXPECT_DOUBLE_EQ(t.grad(x).norm(), 0.0);
}

// ---------------------------------------------------------------------------
// Relation-aware attention

TEST(RelativeAttention, MatchesScalarLoopOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const int heads = 1 + static_cast<int>(uniform_index(rng, 4));
    const int M = heads * (1 + static_cast<int>(uniform_index(rng, 16 / heads)));
    const int L = 1 + static_cast<int>(uniform_index(rng, 8));
    ParamStore ps;
    auto block = TransformerBlock::create(ps, "b", M, heads, rng);
    const Mat x = random_mat(L, M, rng);
    const Mat rel = random_mat(kEdgeTypeCount, M, rng, 0.5);
    auto ids = random_ids(L, kEdgeTypeCount, rng);
    ag::Tape t(false);
    const ag::Var rv = t.constant(rel);
    const Mat got = relative_attention(t, ps, block, t.constant(x), &rv, ids).val();
    const Mat want = oracle::block_attention(ps, block, x, rel, *ids);
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-9) << "trial " << trial;
  }
}

TEST(RelativeAttention, ZeroRelationsEqualVanillaAttention) {
  Rng rng(22);
  ParamStore ps;
  auto block = TransformerBlock::create(ps, "b", 8, 2, rng);
  auto ids = random_ids(5, kEdgeTypeCount, rng);
  ag::Tape t(false);
  const ag::Var x = t.constant(random_mat(5, 8, rng));
  const ag::Var zero = t.constant(Mat::Zero(kEdgeTypeCount, 8));
  const Mat a = relative_attention(t, ps, block, x, &zero, ids).val();
  const Mat b = relative_attention(t, ps, block, x, nullptr, nullptr).val();
  EXPECT_EQ(a, b);
}

TEST(RelativeAttention, SingleRowAttendsToItself) {
  ag::Tape t(false);
  const Mat q = Mat::Constant(1, 4, 0.3), k = Mat::Constant(1, 4, -2.0), v = Mat::Constant(1, 4, 1.5);
  Mat rel = Mat::Zero(3, 4);
  rel.row(2) << 0.1, 0.2, 0.3, 0.4;
  auto ids = std::make_shared<ag::RelationIds>(1, 1);
  (*ids)(0, 0) = 2;
  const ag::Var rv = t.constant(rel);
  ag::AttentionTrace trace;
  const Mat z = ag::relation_attention(t.constant(q), t.constant(k), t.constant(v), &rv, ids, 2, &trace).val();
  for (const auto& a : trace.probs) EXPECT_DOUBLE_EQ(a(0, 0), 1.0);
  EXPECT_LT((z - (v + rel.row(2))).norm(), 1e-15);
}

TEST(RelativeAttention, RejectsNonFiniteInput) {
  ag::Tape t(false);
  Mat q = Mat::Zero(2, 4);
  q(1, 1) = std::nan("");
  const ag::Var v = t.constant(Mat::Zero(2, 4));
  EXPECT_THROW(ag::relation_attention(t.constant(q), v, v, nullptr, nullptr, 2), Error);
}

TEST(ProjectSql, ZeroIdentityAndLoopOracle) {
  Rng rng(23);
  ag::Tape t(false);
  const Mat f = random_mat(3, 4, rng);
  EXPECT_EQ(project_sql(t.constant(f), t.constant(Mat::Zero(4, 6))).val(), Mat::Zero(3, 6));
  EXPECT_EQ(project_sql(t.constant(f), t.constant(Mat::Identity(4, 4))).val(), f);
  const Mat w = random_mat(4, 5, rng);
  const Mat got = project_sql(t.constant(f), t.constant(w)).val();
  EXPECT_LT((got - oracle::linear(f, w, Mat())).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(project_sql(t.constant(f), t.constant(Mat::Zero(5, 5))), Error);
}

TEST(ProjectSql, GradientReachesProjectionButNotSqlStates) {
  Rng rng(24);
  Param w{"w", random_mat(4, 3, rng), false, 1};
  ag::Tape t;
  const ag::Var f = t.constant(random_mat(2, 4, rng));
  ag::Var l = weigh(t, project_sql(f, t.param(w)));
  t.backward(l);
  EXPECT_GT(t.grad(t.param(w)).norm(), 0.0);
  EXPECT_FALSE(t.requires_grad(f.id));
}

// ---------------------------------------------------------------------------
// Relational encoder

namespace {

struct EncoderFixture {
  std::unique_ptr<GradFixture> f;
  EncoderFixture(int width = 16, int tables = 2, int columns = 2, int slots = 3) {
    f = make_grad_fixture(width, 4, 2, tables, columns, slots, 5);
  }
  Mat run(RelationMode mode = RelationMode::Full, std::vector<ag::AttentionTrace>* traces = nullptr, const EncoderInput* in = nullptr) {
    ag::Tape t(false);
    return f->model->encoder().encode(t, f->model->params(), in ? *in : f->prep.input, f->prep.sql_hidden, nullptr, mode, traces).val();
  }
};

}  // namespace

TEST(HieEncode, EvalModeIsDeterministic) {
  EncoderFixture e;
  EXPECT_EQ(e.run(), e.run());
}

TEST(HieEncode, ZeroedRelationTablesEqualRelationFreeRun) {
  EncoderFixture e;
  EXPECT_EQ(e.run(RelationMode::Zeroed), e.run(RelationMode::None));
  EXPECT_NE(e.run(RelationMode::Full), e.run(RelationMode::None));
}

TEST(HieEncode, SlotCountMismatchIsAnError) {
  EncoderFixture e;
  ag::Tape t(false);
  EXPECT_THROW(e.f->model->encoder().encode(t, e.f->model->params(), e.f->prep.input, Mat::Zero(2, 16), nullptr), Error);
}

TEST(HieEncode, AttentionRowsSumToOne) {
  EncoderFixture e;
  std::vector<ag::AttentionTrace> traces;
  e.run(RelationMode::Full, &traces);
  ASSERT_EQ(traces.size(), 2u);
  for (const auto& tr : traces)
    for (const auto& a : tr.probs)
      for (Eigen::Index i = 0; i < a.rows(); ++i) EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-12);
}

TEST(HieEncode, PermutingTwoColumnsPermutesOutputs) {
  EncoderFixture e;
  const EncoderInput& in = e.f->prep.input;
  // Columns are single-word here; swap the positions of two of them.
  const auto& cols = e.f->prep.layout.column_positions;
  const int a = cols[1][0], b = cols[3][0];
  EncoderInput sw = in;
  std::swap(sw.ids[static_cast<std::size_t>(a)], sw.ids[static_cast<std::size_t>(b)]);
  auto rel = std::make_shared<ag::RelationIds>(*in.relations);
  rel->row(a).swap(rel->row(b));
  rel->col(a).swap(rel->col(b));
  sw.relations = rel;
  // Position embeddings break equivariance, so compare with them equalized.
  Param& pos = e.f->model->params().get("enc.pos");
  pos.value.row(b) = pos.value.row(a);
  const Mat x = e.run(), y = e.run(RelationMode::Full, nullptr, &sw);
  EXPECT_LT((x.row(a) - y.row(b)).norm(), 1e-10);
  EXPECT_LT((x.row(b) - y.row(a)).norm(), 1e-10);
  for (int i = 0; i < x.rows(); ++i)
    if (i != a && i != b) EXPECT_LT((x.row(i) - y.row(i)).norm(), 1e-10);
}

TEST(HieEncode, ChangingOneRelationCellChangesOutput) {
  EncoderFixture e;
  EncoderInput in = e.f->prep.input;
  auto rel = std::make_shared<ag::RelationIds>(*in.relations);
  (*rel)(1, 2) = edge_id(EdgeType::UCExact);
  in.relations = rel;
  const Mat x = e.run(RelationMode::Full, nullptr, &in);
  (*rel)(1, 2) = edge_id(EdgeType::UCPartial);
  const Mat y = e.run(RelationMode::Full, nullptr, &in);
  EXPECT_GT((x - y).norm(), 0.0);
}

// ---------------------------------------------------------------------------
// End-to-end gradient check

TEST(GradCheck, EightPositionFixturePasses) {
  auto f = make_grad_fixture(16, 4, 2, 1, 0, 1, 3);
  ASSERT_EQ(f->prep.layout.length(), 8);
  const auto rep = gradcheck_fixture(*f, {24, 1e-5, "", 9});
  EXPECT_TRUE(rep.pass(1e-3)) << rep.worst_name << " " << rep.worst;
  EXPECT_EQ(rep.tensors.size(), f->model->params().size());
}

TEST(GradCheck, FixtureWithColumnsExercisesPointers) {
  auto f = make_grad_fixture(8, 2, 2, 2, 1, 2, 4);
  const auto rep = gradcheck_fixture(*f, {16, 1e-5, "", 9});
  EXPECT_TRUE(rep.pass(1e-3)) << rep.worst_name << " " << rep.worst;
  for (const auto& t : rep.tensors) EXPECT_GT(t.max_abs_grad, 0.0) << t.name;
}

TEST(GradCheck, SignFlipIsDetected) {
  auto f = make_grad_fixture(8, 2, 2, 1, 0, 1, 3);
  const auto rep = gradcheck_fixture(*f, {8, 1e-5, "enc.hie1.q.w", 9});
  EXPECT_FALSE(rep.pass(1e-3));
  EXPECT_EQ(rep.worst_name, "enc.hie1.q.w");
}

// ---------------------------------------------------------------------------
// Decoder

namespace {

std::unique_ptr<GradFixture> decoder_fixture(std::uint64_t seed) { return make_grad_fixture(16, 4, 2, 2, 2, 2, seed); }

}  // namespace

TEST(Decoder, StepDistributionsCoverExactlyTheLegalActions) {
  auto f = decoder_fixture(1);
  ag::Tape t(false);
  const DecoderMemory d = f->model->memory(t, f->prep, nullptr);
  DecoderState st = f->model->decoder().initial(t, f->model->params(), d, f->db.schema);
  for (const auto& gold : f->gold) {
    const StepOutput so = f->model->decoder().step(t, f->model->params(), d, st, nullptr);
    EXPECT_EQ(static_cast<std::size_t>(so.logp.cols()), so.legal.size());
    EXPECT_NEAR(so.logp.val().array().exp().sum(), 1.0, 1e-12);
    if (so.legal.size() == 1) EXPECT_DOUBLE_EQ(so.logp.val()(0, 0), 0.0);
    const int k = legal_index(so.legal, gold);
    ASSERT_GE(k, 0);
    st = f->model->decoder().advance(t, f->model->params(), d, st, so, k);
  }
  EXPECT_TRUE(st.deriv.complete());
}

TEST(Decoder, TeacherForcedNllIsFiniteAndPositive) {
  auto f = decoder_fixture(2);
  ag::Tape t;
  const double nll = fixture_loss(t, *f).scalar();
  EXPECT_TRUE(std::isfinite(nll));
  EXPECT_GT(nll, 0.0);
}

TEST(Decoder, IllegalGoldActionIsAnError) {
  auto f = decoder_fixture(2);
  ActionSequence bad = f->gold;
  bad[0] = Action::column(1);
  ag::Tape t;
  const DecoderMemory d = f->model->memory(t, f->prep, nullptr);
  EXPECT_THROW(teacher_force(t, f->model->params(), f->model->decoder(), d, f->db.schema, bad, nullptr), Error);
}

TEST(Decoder, BeamOneEqualsGreedyAndOutputsParse) {
  int decoded = 0;
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    auto f = decoder_fixture(seed);
    ag::Tape t(false);
    const DecoderMemory d = f->model->memory(t, f->prep, nullptr);
    DecodeResult greedy;
    try {
      greedy = greedy_decode(t, f->model->params(), f->model->decoder(), d, f->db.schema);
    } catch (const Error&) {
      // Untrained weights may recurse without end; beam 1 must fail the same way.
      EXPECT_THROW(beam_decode(t, f->model->params(), f->model->decoder(), d, f->db.schema, 1), Error);
      continue;
    }
    const auto beam1 = beam_decode(t, f->model->params(), f->model->decoder(), d, f->db.schema, 1);
    EXPECT_EQ(greedy.actions, beam1.actions);
    EXPECT_EQ(greedy.logp, beam1.logp);
    ++decoded;
    const auto beam3 = beam_decode(t, f->model->params(), f->model->decoder(), d, f->db.schema, 3);
    for (const DecodeResult* r : std::array<const DecodeResult*, 2>{&greedy, &beam3}) {
      const Query q = actions_to_sql(r->actions, f->db.schema);
      EXPECT_EQ(parse_sql(to_sql(q, f->db.schema), f->db.schema), q);
    }
  }
  EXPECT_GE(decoded, 4);
}

TEST(Decoder, RunawayDerivationIsCapped) {
  auto f = decoder_fixture(3);
  ModelConfig cfg = f->model->config();
  cfg.decoder.max_steps = 2;
  Model m(f->model->vocab(), cfg);
  EXPECT_THROW(
      {
        try {
          m.predict(f->prep, 1);
        } catch (const Error& e) {
          EXPECT_NE(std::string(e.what()).find("runaway derivation"), std::string::npos);
          throw;
        }
      },
      Error);
}

// ---------------------------------------------------------------------------
// Losses and schedule

TEST(Losses, NllAnalyticCases) {
  ag::Tape t;
  const ag::Var a = t.constant(Mat::Constant(1, 2, std::log(0.5)));
  EXPECT_NEAR(nll_loss({a, a}, {0, 1}).scalar(), 2 * std::log(2.0), 1e-15);
  const ag::Var one = t.constant(Mat::Zero(1, 1));
  EXPECT_EQ(nll_loss({one, one, one}, {0, 0, 0}).scalar(), 0.0);
  EXPECT_THROW(nll_loss({a}, {0, 1}), Error);
}

TEST(Losses, RdropSymmetricAndClosedForm) {
  Rng rng(31);
  ag::Tape t;
  std::vector<ag::Var> p, q;
  for (int i = 0; i < 5; ++i) {
    p.push_back(ag::log_softmax(t.constant(random_mat(1, 4 + i, rng, 3.0))));
    q.push_back(ag::log_softmax(t.constant(random_mat(1, 4 + i, rng, 3.0))));
  }
  EXPECT_EQ(rdrop_loss(p, q).scalar(), rdrop_loss(q, p).scalar());
  EXPECT_EQ(rdrop_loss(p, p).scalar(), 0.0);
  EXPECT_GT(rdrop_loss(p, q).scalar(), 0.0);

  Mat l1(1, 2), l2(1, 2);
  l1 << 0.0, -std::numeric_limits<double>::infinity();
  l2 << std::log(0.5), std::log(0.5);
  const double eps = kKlEpsilon;
  const double forward = 1.0 * (std::log(1 + eps) - std::log(0.5 + eps));
  const double reverse = 0.5 * (std::log(0.5 + eps) - std::log(1 + eps)) + 0.5 * (std::log(0.5 + eps) - std::log(eps));
  EXPECT_NEAR(rdrop_loss({t.constant(l1)}, {t.constant(l2)}).scalar(), 0.5 * (forward + reverse), 1e-12);
  EXPECT_THROW(rdrop_loss({t.constant(l1)}, {t.constant(Mat::Zero(1, 1))}), Error);
}

TEST(Schedule, EndpointsAndPeak) {
  TrainingConfig c;
  c.max_steps = 50000;
  EXPECT_EQ(lr_at(0, c).encoder, 0.0);
  EXPECT_EQ(lr_at(0, c).rest, 0.0);
  EXPECT_EQ(lr_at(6250, c).encoder, 1e-5);
  EXPECT_EQ(lr_at(6250, c).rest, 1e-4);
  EXPECT_EQ(lr_at(50000, c).encoder, 0.0);
  EXPECT_EQ(lr_at(50000, c).rest, 0.0);
  EXPECT_THROW(lr_at(50001, c), Error);
}

// ---------------------------------------------------------------------------
// SQL encoder: masking, shuffling, MLM loss, encoding

namespace {

std::vector<SqlBertInput> sampled_corpus(int n, std::uint64_t seed) {
  const Schema s = fixtures::course_teach();
  fixtures::AstSampler sampler(s, seed);
  std::vector<SqlBertInput> out;
  for (int i = 0; i < n; ++i) out.push_back(build_sqlbert_input(sampler.query(), normalize_tokens("list the teachers"), s));
  return out;
}

}  // namespace

TEST(Masking, NeverMasksReservedTokensAndRespectsSpanCap) {
  auto corpus = sampled_corpus(200, 3);
  Rng rng(5);
  for (const auto& in : corpus) {
    const MaskPlan plan = plan_masks(in, rng);
    EXPECT_EQ(static_cast<int>(plan.positions.size()), plan.budget);
    EXPECT_EQ(plan.budget, query_mask_budget(count_maskable(in)));
    for (int p : plan.positions) EXPECT_FALSE(in.reserved[static_cast<std::size_t>(p)]) << in.sql[static_cast<std::size_t>(p)];
    for (const auto& sp : plan.spans) {
      EXPECT_GE(sp.length, 1);
      EXPECT_LE(sp.length, kMaxSpan);
    }
    EXPECT_TRUE(std::is_sorted(plan.positions.begin(), plan.positions.end()));
    EXPECT_EQ(std::set<int>(plan.positions.begin(), plan.positions.end()).size(), plan.positions.size());
  }
}

TEST(Masking, CorpusBudgetKeepsFractionInRange) {
  auto corpus = sampled_corpus(500, 4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    MaskBudget budget;
    long masked = 0, maskable = 0;
    for (const auto& in : corpus) {
      const MaskPlan plan = plan_masks(in, rng, budget.next(count_maskable(in)));
      masked += static_cast<long>(plan.positions.size());
      maskable += plan.maskable;
    }
    const double frac = static_cast<double>(masked) / static_cast<double>(maskable);
    EXPECT_GE(frac, 0.10);
    EXPECT_LE(frac, 0.15);
  }
}

TEST(Masking, BudgetExamples) {
  EXPECT_EQ(query_mask_budget(20), 3);
  EXPECT_EQ(query_mask_budget(1), 1);
  EXPECT_EQ(query_mask_budget(0), 0);
  MaskBudget b;
  int total = 0;
  for (int i = 0; i < 100; ++i) total += b.next(4);
  EXPECT_EQ(total, 60);
}

TEST(Shuffle, TwoByTwoSchemaReachesAllEightLayouts) {
  const Schema s = grid_schema(2, 2);
  const SqlBertInput in = build_sqlbert_input(parse_sql("SELECT c00 FROM t0", s), normalize_tokens("show c00"), s);
  std::set<std::vector<std::string>> layouts;
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const SqlBertInput out = shuffle_schema(in, rng);
    EXPECT_EQ(out.sql, in.sql);
    EXPECT_EQ(out.question, in.question);
    layouts.insert(out.flatten());
  }
  EXPECT_EQ(layouts.size(), 8u);
}

TEST(Shuffle, SingleTableOnlyPermutesColumns) {
  const Schema s = grid_schema(1, 3);
  const SqlBertInput in = build_sqlbert_input(parse_sql("SELECT c00 FROM t0", s), {}, s);
  Rng rng(9);
  std::set<std::vector<int>> orders;
  for (int i = 0; i < 200; ++i) {
    const SqlBertInput out = shuffle_schema(in, rng);
    ASSERT_EQ(out.schema.size(), 1u);
    EXPECT_EQ(out.schema[0].table, 0);
    orders.insert(out.schema[0].column_ids);
  }
  EXPECT_EQ(orders.size(), 6u);
}

TEST(MlmLoss, AnalyticCases) {
  Vocab v = Vocab::from_words({"a", "b", "c"});
  ag::Tape t;
  MaskPlan one;
  one.positions = {0};
  one.targets = {"a"};
  Mat sure = Mat::Zero(1, v.size());
  sure(0, v.id("a")) = 1000.0;
  EXPECT_EQ(mlm_loss(t.constant(sure), one, v).scalar(), 0.0);
  EXPECT_NEAR(mlm_loss(t.constant(Mat::Zero(1, v.size())), one, v).scalar(), std::log(v.size()), 1e-12);

  MaskPlan three;
  three.positions = {0, 1, 2};
  three.targets = {"a", "a", "a"};
  Mat logits = Mat::Constant(3, v.size(), -std::numeric_limits<double>::infinity());
  const double probs[3] = {0.5, 0.25, 0.1};
  for (int i = 0; i < 3; ++i) {
    logits(i, v.id("a")) = std::log(probs[i]);
    logits(i, v.id("b")) = std::log(1 - probs[i]);
  }
  EXPECT_NEAR(mlm_loss(t.constant(logits), three, v).scalar(), -(std::log(0.5) + std::log(0.25) + std::log(0.1)), 1e-12);
  EXPECT_THROW(mlm_loss(t.constant(logits), one, v), Error);
}

TEST(SqlEncoder, EncodeIsDeterministicWithSqlLength) {
  auto corpus = sampled_corpus(10, 6);
  SqlEncoderConfig cfg;
  cfg.width = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  SqlEncoder enc(build_sql_vocab(corpus), cfg);
  const Mat a = enc.encode_sql(corpus[0]);
  EXPECT_EQ(a, enc.encode_sql(corpus[0]));
  EXPECT_EQ(a.rows(), static_cast<Eigen::Index>(corpus[0].sql.size() + 1));
  EXPECT_EQ(a.cols(), 16);

  SqlBertInput single = corpus[0];
  single.sql = {"*"};
  single.reserved = {false};
  EXPECT_EQ(enc.encode_sql(single).rows(), 2);
  std::size_t unknown = 0;
  single.sql = {"zzz_unseen"};
  enc.encode_sql(single, &unknown);
  EXPECT_EQ(unknown, 1u);
}

TEST(SqlEncoder, PretrainingReducesLossAndIsReproducible) {
  auto corpus = sampled_corpus(40, 7);
  SqlEncoderConfig cfg;
  cfg.width = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  PretrainConfig pc;
  pc.steps = 60;
  pc.batch = 4;
  pc.lr = 3e-3;
  SqlEncoder a(build_sql_vocab(corpus), cfg), b(build_sql_vocab(corpus), cfg);
  const auto la = pretrain(a, corpus, pc), lb = pretrain(b, corpus, pc);
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i].loss, lb[i].loss);
  EXPECT_EQ(a.checksum(), b.checksum());
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += la[static_cast<std::size_t>(i)].loss;
    last += la[la.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(last, first);
  a.freeze();
  EXPECT_THROW(pretrain(a, corpus, pc), Error);
  EXPECT_THROW(pretrain(b, {}, pc), Error);
}

// ---------------------------------------------------------------------------
// Checkpoints and configuration

TEST(Checkpoint, RoundTripAndCorruptionDetection) {
  const auto dir = std::filesystem::temp_directory_path() / "hiesql_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "m.ckpt").string();
  auto f = make_grad_fixture(8, 2, 1, 1, 1, 1, 2);
  f->model->params().get("enc.rel").frozen = true;
  f->model->save(path);
  Model back = Model::load(path);
  EXPECT_EQ(back.params().checksum(), f->model->params().checksum());
  EXPECT_TRUE(back.params().get("enc.rel").frozen);
  EXPECT_EQ(back.vocab().words(), f->model->vocab().words());

  {
    std::fstream io(path, std::ios::in | std::ios::out | std::ios::binary);
    io.seekp(-3, std::ios::end);
    io.put('\x7f');
  }
  EXPECT_THROW(Model::load(path), Error);
  EXPECT_THROW(Model::load((dir / "missing.ckpt").string()), Error);
}

TEST(ConfigFile, ParsesKnownKeysAndRejectsUnknown) {
  std::istringstream good("# comment\nenc.width = 32\ntrain.rdrop=false\n\n");
  const Config c = Config::parse(good);
  EXPECT_EQ(c.get_int("enc.width", 0), 32);
  EXPECT_FALSE(c.get_bool("train.rdrop", true));
  EXPECT_EQ(c.get_int("enc.heads", 4), 4);
  std::istringstream bad("enc.widht = 32\n");
  try {
    Config::parse(bad);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("enc.widht"), std::string::npos);
  }
  std::istringstream typed("enc.width = wide\n");
  EXPECT_THROW(Config::parse(typed).get_int("enc.width", 0), Error);
}
