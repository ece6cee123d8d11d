#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "densessm/training.hpp"
#include "densessm/verify.hpp"
#include "test_support.hpp"

namespace densessm {
namespace {

TrainConfig small_train(std::size_t steps, std::size_t seq = 32, std::size_t batch = 4) {
  TrainConfig c;
  c.batch_size = batch;
  c.seq_len = seq;
  c.total_tokens = steps * c.tokens_per_step();
  c.warmup_frac = 0.1;
  c.eval_every = 5;
  c.eval_tokens = 512;
  c.seed = 3;
  return c;
}

ModelConfig tiny_model(BlockKind kind) {
  DenseConfig d;
  d.depth_m = 1;
  ModelConfig c = micro_config(kind, d);
  c.max_seq_len = 64;
  return c;
}

Corpus repeated_text(std::size_t copies) {
  std::vector<std::string> docs(copies, "the cat sat on the mat. the dog ate the log. ");
  return corpus_from_documents(docs, 0.1);
}

// Drops the only field that legitimately differs between two runs.
std::vector<nlohmann::json> without_wall_time(std::vector<nlohmann::json> recs) {
  for (auto& r : recs) r.erase("wall_time");
  return recs;
}

TEST(Schedule, WarmupThenPolynomialDecay) {
  TrainConfig c;
  c.lr_peak = 1.0;
  c.warmup_frac = 0.1;
  c.batch_size = 1;
  c.seq_len = 1;
  c.total_tokens = 100;
  ASSERT_EQ(c.warmup_steps(), 10u);
  EXPECT_EQ(lr_at(0, 100, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, 100, c), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(10, 100, c), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(55, 100, c), 0.5);
  EXPECT_EQ(lr_at(100, 100, c), 0.0);
  EXPECT_EQ(lr_at(150, 100, c), 0.0);
  c.poly_power = 2.0;
  EXPECT_DOUBLE_EQ(lr_at(55, 100, c), 0.25);
}

TEST(Schedule, AutoBeta2) {
  TrainConfig c;
  EXPECT_EQ(c.beta2_for(BlockKind::dense_retnet), 0.98);
  EXPECT_EQ(c.beta2_for(BlockKind::mamba), 0.95);
  c.beta2 = 0.9;
  EXPECT_EQ(c.beta2_for(BlockKind::mamba), 0.9);
}

TEST(TrainConfigKeys, RoundTripAndErrors) {
  TrainConfig a = small_train(7);
  a.lr_peak = 1.25e-3;
  TrainConfig b;
  for (const auto& [k, v] : a.to_map()) ASSERT_TRUE(b.set(k, v)) << k;
  EXPECT_EQ(a, b);
  EXPECT_THROW(b.set("train.batch_size", "-1"), ConfigError);
  EXPECT_THROW(b.set("train.lr_peak", "fast"), ConfigError);
  b.batch_size = 0;
  EXPECT_THROW(b.validate(), ConfigError);
}

class Optimizer : public ::testing::Test {
 protected:
  void SetUp() override {
    w_ = reg_.add("w", Tensor<double>::vector({1.0, -2.0, 3.0}), true);
    b_ = reg_.add("b", Tensor<double>::vector({0.5}), false);
    cfg_.weight_decay = 0.1;
    state_ = make_optimizer_state(reg_);
  }
  void set_grads(std::initializer_list<double> gw, double gb) {
    reg_.zero_grad();
    backward(add(sum(mul(w_, Var<double>(Tensor<double>::vector(gw)))), sum(scale(b_, gb))));
  }

  ParameterRegistry<double> reg_;
  Var<double> w_, b_;
  TrainConfig cfg_;
  OptimizerState<double> state_;
};

TEST_F(Optimizer, FirstStepMovesEachWeightByLr) {
  cfg_.weight_decay = 0.0;
  set_grads({0.3, -7.0, 1e-3}, 2.0);
  adamw_step(reg_, state_, 0.01, cfg_, 0.999);
  // Bias-corrected first step is lr * sign(g), up to eps.
  const auto& w = w_.value();
  EXPECT_NEAR(w[0], 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(w[1], -2.0 + 0.01, 1e-8);
  EXPECT_NEAR(w[2], 3.0 - 0.01, 1e-7);
  EXPECT_NEAR(b_.value()[0], 0.49, 1e-8);
  EXPECT_EQ(state_.step, 1u);
}

TEST_F(Optimizer, DecayOnlyTouchesDecayParameters) {
  set_grads({0.0, 0.0, 0.0}, 0.0);
  adamw_step(reg_, state_, 0.5, cfg_, 0.99);
  EXPECT_EQ(w_.value(), Tensor<double>::vector({0.95, -1.9, 3.0 * 0.95}));
  EXPECT_EQ(b_.value()[0], 0.5);
}

TEST_F(Optimizer, ZeroGradWithoutDecayIsNoop) {
  cfg_.weight_decay = 0.0;
  set_grads({0.0, 0.0, 0.0}, 0.0);
  adamw_step(reg_, state_, 0.5, cfg_, 0.99);
  EXPECT_EQ(w_.value(), Tensor<double>::vector({1.0, -2.0, 3.0}));
}

TEST_F(Optimizer, MismatchedStateIsUsageError) {
  OptimizerState<double> empty;
  EXPECT_THROW(adamw_step(reg_, empty, 0.1, cfg_, 0.9), UsageError);
}

TEST_F(Optimizer, ClippingScalesJointly) {
  set_grads({3.0, 0.0, 0.0}, 4.0);
  EXPECT_DOUBLE_EQ(global_grad_norm(reg_), 5.0);
  EXPECT_DOUBLE_EQ(clip_global_norm(reg_, 0.5), 0.1);
  EXPECT_NEAR(w_.grad()[0], 0.3, 1e-15);
  EXPECT_NEAR(b_.grad()[0], 0.4, 1e-15);
  EXPECT_EQ(clip_global_norm(reg_, 4.0), 1.0);
  EXPECT_NEAR(global_grad_norm(reg_), 0.5, 1e-15);
}

TEST(Clipping, PostClipNormNeverExceedsLimit) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> limit(0.01, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    ParameterRegistry<double> reg;
    auto a = reg.add("a", test::randn({4, 3}, trial), true);
    auto b = reg.add("b", test::randn({5}, trial + 100), false);
    backward(add(test::weighted_sum(a, trial), test::weighted_sum(b, trial + 1)));
    const double before = global_grad_norm(reg);
    const double lim = limit(rng);
    clip_global_norm(reg, lim);
    EXPECT_LE(global_grad_norm(reg), lim * (1 + 1e-12));
    if (before <= lim) EXPECT_DOUBLE_EQ(global_grad_norm(reg), before);
  }
}

TEST(Optimization, QuadraticBowlConverges) {
  ParameterRegistry<double> reg;
  auto x = reg.add("x", Tensor<double>::vector({3.0, -4.0}), false);
  TrainConfig cfg;
  auto state = make_optimizer_state(reg);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 300; ++i) {
    reg.zero_grad();
    auto loss = sum(mul(x, x));
    if (i == 0) first = loss.value().item();
    last = loss.value().item();
    backward(loss);
    adamw_step(reg, state, 0.05, cfg, 0.99);
  }
  EXPECT_LT(last, first * 1e-3);
}

TEST(Eval, MatchesManualCrossEntropy) {
  Model<double> m(tiny_model(BlockKind::dense_retnet));
  randomize_parameters(m, 8);
  const Corpus corpus = repeated_text(4);
  const auto toks = corpus.split(Split::train);
  const EvalResult r = eval_perplexity(m, toks, 16, 0, 3);
  const std::size_t windows = (toks.size() - 1) / 16;
  ASSERT_EQ(r.tokens, windows * 16);

  NoGradGuard ng;
  double total = 0.0;
  for (std::size_t w = 0; w < windows; ++w) {
    std::vector<std::int32_t> in(toks.begin() + std::ptrdiff_t(w * 16), toks.begin() + std::ptrdiff_t(w * 16 + 16));
    const auto logits = m.forward_train(Tokens(1, 16, in)).value();
    for (std::size_t t = 0; t < 16; ++t) {
      const std::int32_t target = toks[w * 16 + t + 1];
      double mx = -1e300;
      for (std::size_t j = 0; j < kByteVocab; ++j) mx = std::max(mx, logits[t * kByteVocab + j]);
      double z = 0.0;
      for (std::size_t j = 0; j < kByteVocab; ++j) z += std::exp(logits[t * kByteVocab + j] - mx);
      total += std::log(z) + mx - logits[t * kByteVocab + std::size_t(target)];
    }
  }
  EXPECT_NEAR(r.nats, total / double(r.tokens), 1e-10);
  EXPECT_NEAR(r.perplexity, std::exp(r.nats), 1e-9);

  const std::vector<std::int32_t> one{5};
  EXPECT_THROW(eval_perplexity(m, one, 16), ArgumentError);
  EXPECT_EQ(eval_perplexity(m, toks, 16, 40).tokens, 32u);
}

TEST(Train, LearnsRepeatedText) {
  Model<double> m(tiny_model(BlockKind::dense_retnet));
  TrainConfig cfg = small_train(200);
  cfg.lr_peak = 1e-2;
  cfg.eval_every = 1000;
  const TrainResult r = train(m, repeated_text(60), cfg);
  EXPECT_EQ(r.steps, 200u);
  EXPECT_LT(r.last_loss, 1.0);
  EXPECT_LT(r.val_loss, 1.0);
}

TEST(Train, MetricsRecordsAndLrLog) {
  Model<double> m(tiny_model(BlockKind::mamba));
  const TrainConfig cfg = small_train(12);
  const auto dir = test::scratch_dir("train_metrics");
  std::ostringstream echo;
  TrainOptions opts;
  opts.out_dir = dir.string();
  opts.echo = &echo;
  const TrainResult r = train(m, repeated_text(20), cfg, opts);

  std::size_t train_recs = 0, eval_recs = 0;
  for (const auto& rec : r.records) {
    if (rec["type"] == "train") {
      ++train_recs;
      const auto s = rec["step"].get<std::size_t>();
      EXPECT_EQ(rec["lr"].get<double>(), lr_at(s, cfg.total_steps(), cfg));
      EXPECT_EQ(rec["tokens"].get<std::size_t>(), s * cfg.tokens_per_step());
      for (const char* k : {"loss", "grad_norm", "wall_time"}) EXPECT_TRUE(rec.contains(k)) << k;
    } else if (rec["type"] == "eval") {
      ++eval_recs;
      EXPECT_TRUE(rec.contains("val_ppl"));
    }
  }
  EXPECT_EQ(train_recs, 12u);
  EXPECT_EQ(eval_recs, 3u);  // steps 5, 10 and the final one

  std::ifstream in(dir / "metrics.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) {
    EXPECT_EQ(nlohmann::json::parse(line), r.records[lines]);
    ++lines;
  }
  EXPECT_EQ(lines, r.records.size());
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint.dssm"));
  EXPECT_NE(echo.str().find("\"type\":\"eval\""), std::string::npos);
}

TEST(Train, DeterministicAcrossRuns) {
  const TrainConfig cfg = small_train(6);
  Model<double> a(tiny_model(BlockKind::dense_mamba)), b(tiny_model(BlockKind::dense_mamba));
  const Corpus corpus = repeated_text(20);
  EXPECT_EQ(without_wall_time(train(a, corpus, cfg).records), without_wall_time(train(b, corpus, cfg).records));
}

class Resume : public ::testing::TestWithParam<std::size_t> {};

TEST_P(Resume, ContinuationReproducesUninterruptedLog) {
  const TrainConfig cfg = small_train(13);
  const Corpus corpus = repeated_text(20);
  const auto dir = test::scratch_dir("resume");

  Model<double> full(tiny_model(BlockKind::dense_retnet));
  const auto reference = without_wall_time(train(full, corpus, cfg).records);

  Model<double> first(tiny_model(BlockKind::dense_retnet));
  TrainOptions a;
  a.out_dir = dir.string();
  a.stop_after_steps = GetParam();
  auto head = train(first, corpus, cfg, a).records;

  Model<double> second(tiny_model(BlockKind::dense_retnet));
  TrainOptions b;
  b.out_dir = dir.string();
  b.resume_from = (dir / "checkpoint.dssm").string();
  const auto tail = train(second, corpus, cfg, b).records;
  head.insert(head.end(), tail.begin(), tail.end());
  EXPECT_EQ(without_wall_time(head), reference);

  for (std::size_t i = 0; i < full.registry().size(); ++i) {
    EXPECT_EQ(full.registry().params()[i].var.value(), second.registry().params()[i].var.value());
  }
}

// Stopping mid-interval and right at an evaluation both resume cleanly.
INSTANTIATE_TEST_SUITE_P(StopPoints, Resume, ::testing::Values(3, 5, 7));

TEST(ResumeConfig, DifferentTrainConfigIsRejected) {
  TrainConfig cfg = small_train(8);
  const Corpus corpus = repeated_text(10);
  const auto dir = test::scratch_dir("resume_bad");
  Model<double> m(tiny_model(BlockKind::retnet));
  TrainOptions a;
  a.out_dir = dir.string();
  a.stop_after_steps = 2;
  train(m, corpus, cfg, a);
  cfg.lr_peak *= 2;
  Model<double> n(tiny_model(BlockKind::retnet));
  TrainOptions b;
  b.resume_from = (dir / "checkpoint.dssm").string();
  EXPECT_THROW(train(n, corpus, cfg, b), ConfigError);
}

TEST(Train, NonFiniteLossAbortsWithCrashCheckpoint) {
  Model<double> m(tiny_model(BlockKind::dense_retnet));
  m.registry().find("embed")->var.set_value(Tensor<double>::full(m.registry().find("embed")->var.shape(), 1e300));
  const auto dir = test::scratch_dir("crash");
  TrainOptions opts;
  opts.out_dir = dir.string();
  const TrainResult r = train(m, repeated_text(10), small_train(4), opts);
  EXPECT_TRUE(r.aborted);
  EXPECT_EQ(r.steps, 0u);
  ASSERT_FALSE(r.records.empty());
  EXPECT_EQ(r.records.back()["type"], "abort");
  EXPECT_TRUE(std::filesystem::exists(dir / "crash.dssm"));
}

}  // namespace
}  // namespace densessm
