#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "structret/trainer.hpp"

namespace structret {
namespace {

struct Fixture {
  SyntheticCorpus corpus;
  Vocabulary vocab;
  ModelParams params;
  PretrainData data;
  std::vector<FinetuneItem> finetune;

  explicit Fixture(std::size_t d_model = 16, std::size_t n_pairs = 32) {
    SyntheticOptions opts;
    opts.n_pairs = n_pairs;
    opts.vocab_size = 16;
    opts.heldout = 0;
    opts.seed = 3;
    corpus = generate_synthetic(opts);
    vocab = build_vocabulary(corpus.documents, &corpus.queries, 1);
    EncoderConfig c;
    c.vocab_size = vocab.size();
    c.d_model = d_model;
    c.n_layers = 1;
    c.n_heads = 2;
    c.ffn_dim = 2 * d_model;
    c.max_len = 48;
    c.seed = 11;
    params = ModelParams::initialize(c);
    data = prepare_pretrain_data(corpus.documents, corpus.pairs, vocab, c.max_len, MaskingStrategy::entity, 0.15, 1);
    for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
      const auto& q = corpus.queries.items()[i];
      const auto& pos = corpus.documents.at(corpus.pairs[i].doc_id);
      const auto& neg = corpus.documents.at(corpus.pairs[(i + 1) % corpus.pairs.size()].doc_id);
      finetune.push_back({encode_text(q.text, TokenizeMode::natural, vocab, c.max_len),
                          encode_document(pos, vocab, c.max_len),
                          {encode_document(neg, vocab, c.max_len)}});
    }
  }

  PretrainBatch pretrain_batch(std::size_t n) const {
    PretrainBatch b;
    for (std::size_t i = 0; i < n; ++i) b.push_back(data.examples[i].item);
    return b;
  }
  FinetuneBatch finetune_batch(std::size_t n) const { return FinetuneBatch(finetune.begin(), finetune.begin() + n); }
};

double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  double worst = 0.0;
  std::vector<const Matrix*> rhs;
  b.visit([&](const std::string&, const Matrix& m) { rhs.push_back(&m); });
  std::size_t k = 0;
  a.visit([&](const std::string&, const Matrix& m) { worst = std::max(worst, (m - *rhs[k++]).cwiseAbs().maxCoeff()); });
  return worst;
}

TEST(Pretrain, TotalIsSumOfParts) {
  Fixture f;
  const auto batch = f.pretrain_batch(4);
  const auto both = loss_pretrain(batch, f.params, {});
  EXPECT_NEAR(both.l_total, both.l_sda + both.l_mep, 1e-12);
  ObjectiveOptions sda_only;
  sda_only.mep = false;
  ObjectiveOptions mep_only;
  mep_only.sda = false;
  EXPECT_NEAR(loss_pretrain(batch, f.params, sda_only).l_total, both.l_sda, 1e-12);
  EXPECT_NEAR(loss_pretrain(batch, f.params, mep_only).l_total, both.l_mep, 1e-12);
  EXPECT_GT(both.mep_token_count, 0u);
}

TEST(Pretrain, LossDecreasesOnSmallCorpus) {
  Fixture f;
  TrainConfig config;
  config.batch_size = 8;
  config.lr = 3e-3;
  config.steps = 50;
  config.seed = 4;
  const auto log = run_pretraining(f.params, f.data, f.vocab, config);
  ASSERT_EQ(log.size(), 50u);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    first += log[i].loss.l_total;
    last += log[log.size() - 1 - i].loss.l_total;
  }
  EXPECT_LT(last, first);
}

TEST(Pretrain, ZeroLearningRateLeavesParametersUnchanged) {
  Fixture f;
  const auto before = serialize_checkpoint(f.params);
  OptimizerConfig oc;
  oc.lr = 0.0;
  oc.total_steps = 3;
  auto state = OptimizerState::create(f.params, oc);
  for (int i = 0; i < 3; ++i) train_step(f.params, state, f.pretrain_batch(4), {});
  EXPECT_EQ(serialize_checkpoint(f.params), before);
}

TEST(Optimizer, WarmupSchedule) {
  Fixture f(8, 16);
  OptimizerConfig oc;
  oc.lr = 2e-3;
  oc.warmup_proportion = 0.1;
  oc.total_steps = 100;
  const auto state = OptimizerState::create(f.params, oc);
  EXPECT_DOUBLE_EQ(state.learning_rate(5), 1e-3);
  EXPECT_DOUBLE_EQ(state.learning_rate(10), 2e-3);
  EXPECT_DOUBLE_EQ(state.learning_rate(90), 2e-3);
  oc.total_steps = 0;
  EXPECT_THROW(OptimizerState::create(f.params, oc), ValidationError);
}

TEST(Pretrain, SameSeedIsBitIdentical) {
  TrainConfig config;
  config.batch_size = 8;
  config.steps = 6;
  config.seed = 9;
  config.masking = MaskingStrategy::span;
  Fixture a, b;
  run_pretraining(a.params, a.data, a.vocab, config);
  run_pretraining(b.params, b.data, b.vocab, config);
  EXPECT_EQ(serialize_checkpoint(a.params), serialize_checkpoint(b.params));
}

TEST(Finetune, SameSeedIsBitIdenticalAndLossFinite) {
  TrainConfig config;
  config.mode = TrainMode::finetune;
  config.batch_size = 8;
  config.steps = 4;
  config.seed = 2;
  Fixture a, b;
  const auto log = run_finetuning(a.params, a.finetune, config);
  run_finetuning(b.params, b.finetune, config);
  EXPECT_EQ(serialize_checkpoint(a.params), serialize_checkpoint(b.params));
  for (const auto& e : log) EXPECT_TRUE(std::isfinite(e.loss.l_dr));
}

TEST(GradCheck, AllObjectivesWithinTolerance) {
  Fixture f(8, 8);
  for (auto obj : {Objective::sda, Objective::mep, Objective::dr}) {
    const auto r = grad_check(f.params, f.pretrain_batch(4), f.finetune_batch(4), obj, 1e-4, 48, 5);
    EXPECT_LT(r.max_relative_error, 1e-4) << to_string(obj);
    EXPECT_EQ(r.entries.size(), 48u);
  }
}

TEST(GradCheck, LargerStepGivesLargerError) {
  Fixture f(8, 8);
  // Dense hidden weights: every index has a non-trivial gradient.
  std::size_t offset = 0;
  std::size_t ffn_in = 0;
  f.params.visit([&](const std::string& name, const Matrix& m) {
    if (name == "encoder.0.ffn_in") ffn_in = offset;
    offset += static_cast<std::size_t>(m.size());
  });
  std::vector<std::size_t> idx(12);
  std::iota(idx.begin(), idx.end(), ffn_in);
  const auto small = grad_check_indices(f.params, f.pretrain_batch(4), {}, Objective::sda, 1e-4, idx);
  const auto large = grad_check_indices(f.params, f.pretrain_batch(4), {}, Objective::sda, 3e-1, idx);
  EXPECT_GT(large.max_relative_error, small.max_relative_error);
}

TEST(Gradients, UnusedSentinelRowHasZeroGradient) {
  Fixture f;
  ObjectiveOptions sda_only;
  sda_only.mep = false;
  auto grads = f.params.zeros_like();
  loss_pretrain(f.pretrain_batch(4), f.params, sda_only, &grads);
  EXPECT_LT(grads.embedding.row(Vocabulary::sentinel_id(50)).norm(), 1e-10);
  EXPECT_GT(grads.embedding.norm(), 0.0);
}

TEST(Gradients, ThreadCountDoesNotChangeResults) {
  Fixture f;
  ObjectiveOptions one, two;
  two.threads = 2;
  auto g1 = f.params.zeros_like();
  auto g2 = f.params.zeros_like();
  const auto r1 = loss_pretrain(f.pretrain_batch(6), f.params, one, &g1);
  const auto r2 = loss_pretrain(f.pretrain_batch(6), f.params, two, &g2);
  EXPECT_NEAR(r1.l_total, r2.l_total, 1e-12);
  EXPECT_LT(max_abs_diff(g1, g2), 1e-12);

  auto h1 = f.params.zeros_like();
  auto h2 = f.params.zeros_like();
  const auto d1 = loss_finetune(f.finetune_batch(6), f.params, one, &h1);
  const auto d2 = loss_finetune(f.finetune_batch(6), f.params, two, &h2);
  EXPECT_NEAR(d1.l_dr, d2.l_dr, 1e-12);
  EXPECT_LT(max_abs_diff(h1, h2), 1e-12);
}

TEST(Gradients, NonFiniteParameterIsNamed) {
  Fixture f;
  f.params.encoder[0].ffn_in(0, 0) = std::nan("");
  auto state = OptimizerState::create(f.params, {});
  try {
    train_step(f.params, state, f.pretrain_batch(2), {});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.0.ffn_in"), std::string::npos);
  }
}

TEST(SpanMask, PropertiesHoldAcrossSeeds) {
  std::vector<std::string> tokens;
  for (int i = 0; i < 40; ++i) tokens.push_back("t" + std::to_string(i));
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Rng rng(seed);
    const auto ex = span_mask_tokens("d", tokens, 0.15, rng);
    EXPECT_EQ(reconstruct(ex), tokens);
    const std::size_t masked = ex.target.size() - ex.mapping.size();
    EXPECT_EQ(masked, 6u);
    for (std::size_t k = 0; k < ex.mapping.size(); ++k) EXPECT_EQ(ex.mapping[k].second, k);
  }
  Rng rng(1);
  EXPECT_THROW(span_mask_tokens("d", tokens, 0.0, rng), ValidationError);
  EXPECT_THROW(span_mask_tokens("d", tokens, 1.0, rng), ValidationError);
}

TEST(TrainLog, JsonFields) {
  TrainLogEntry e;
  e.step = 3;
  e.lr = 0.5;
  e.loss.l_sda = 1.0;
  e.loss.l_total = 1.0;
  const auto s = log_entry_to_json(e);
  for (const char* key : {"\"step\":3", "\"l_sda\"", "\"l_mep\"", "\"l_dr\"", "\"l_total\"", "\"lr\":0.5"}) {
    EXPECT_NE(s.find(key), std::string::npos) << key;
  }
}

}  // namespace
}  // namespace structret
