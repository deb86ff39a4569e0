#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "stagesum/errors.hpp"
#include "stagesum/ops.hpp"
#include "stagesum/trainer.hpp"
#include "toy_model.hpp"

using namespace stagesum;
using namespace stagesum::testing;

namespace {

Vocabulary toy_vocab() {
  return Vocabulary::with_reserved({"red", "blue", "green", "cat", "dog", "runs", "sits", "the", "a", "big"});
}

std::vector<SummaryExample> toy_summaries(const Vocabulary& vocab) {
  const std::vector<DocumentSummary> corpus = {
      {"the big red cat sits", "red cat sits"},
      {"a blue dog runs", "blue dog runs"},
      {"the green dog sits", "green dog"},
      {"a big cat runs", "cat runs"},
  };
  return encode_summaries(corpus, vocab, {16, 8});
}

TrainConfig quick_config(double lr = 3e-3, std::size_t epochs = 3) {
  TrainConfig cfg;
  cfg.lr = lr;
  cfg.dropout = 0.3;
  cfg.batch_size = 2;
  cfg.max_epochs = epochs;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(MleLoss, CertainTargetsGiveZero) {
  Tensor probs({2, 3}, {0, 1, 0, 0, 0, 1});
  const std::vector<int> tgt = {1, 2};
  EXPECT_EQ(mle_loss(probs, tgt, Mask{0, 0}).item(), 0.0);
}

TEST(MleLoss, UniformOverFourGivesLnFour) {
  Tensor probs({3, 4}, std::vector<double>(12, 0.25));
  const std::vector<int> tgt = {1, 3, 0};
  EXPECT_NEAR(mle_loss(probs, tgt, Mask{0, 0, 0}).item(), std::log(4.0), 1e-15);
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
}

TEST(MleLoss, AppendedPadsLeaveLossUnchanged) {
  Tensor short_probs({2, 3}, {0.2, 0.5, 0.3, 0.1, 0.1, 0.8});
  Tensor long_probs({4, 3}, {0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.9, 0.05, 0.05, 0.3, 0.3, 0.4});
  const std::vector<int> short_tgt = {1, 2};
  const std::vector<int> long_tgt = {1, 2, 0, 0};
  EXPECT_EQ(mle_loss(short_probs, short_tgt, Mask{0, 0}).item(),
            mle_loss(long_probs, long_tgt, Mask{0, 0, 1, 1}).item());
}

TEST(MleLoss, ZeroProbabilityIsClampedAndCounted) {
  Tensor probs({1, 2}, {1.0, 0.0});
  const std::vector<int> tgt = {1};
  std::size_t clamped = 0;
  EXPECT_NEAR(mle_loss(probs, tgt, Mask{0}, &clamped).item(), -std::log(1e-30), 1e-9);
  EXPECT_EQ(clamped, 1u);
}

TEST(MleLoss, GradientThroughCopyMixingAndSelectionMask) {
  const auto c = toy_config();
  auto p = toy_params(c, 50);
  p.set_requires_grad(true);
  Rng rng(50);
  const auto ex = toy_example(c, rng, 6, 2, 5, 2);
  const Mask keep = {0, 1, 1, 0, 1, 1, 0, 0};
  auto loss = [&] {
    const auto out = forward_teacher_forced(p, c, {ex.source_ids, ex.source_pad}, ex.target_ids, keep);
    return mle_loss(out.probs, ex.target_ids, ex.target_pad);
  };
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (auto& [name, t] : p) {
    inputs.push_back(t);
    names.push_back(name);
  }
  const auto result = check_gradients(loss, inputs);
  EXPECT_LT(result.max_relative_error, 1e-4) << names[result.worst_input];
}

TEST(TrainConfig, RejectsInvalidValues) {
  TrainConfig cfg;
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_stage_kind("finetune"), ConfigError);
  EXPECT_EQ(parse_stage_kind(stage_kind_name(StageKind::kSelect)), StageKind::kSelect);
}

TEST(TrainLoop, NonFiniteLossIsStageError) {
  const auto c = toy_config();
  const auto init = toy_params(c, 51);
  StageHooks hooks;
  hooks.train_size = 2;
  hooks.example_loss = [](const ParamStore& params, std::size_t, Rng&, std::size_t*) {
    const Tensor& b = params.at("output.bias");
    return LossTerms{scale(sum(b), std::nan("")), 1.0};
  };
  hooks.dev_metric = [](const ParamStore&) { return 0.0; };
  EXPECT_THROW(train_loop(init, quick_config(), hooks), StageError);
}

TEST(TrainLoop, EmptyCorpusIsTrainingError) {
  const auto c = toy_config();
  StageHooks hooks;
  EXPECT_THROW(train_loop(toy_params(c, 52), quick_config(), hooks), TrainingError);
}

TEST(TrainLoop, BestCheckpointAttainsMaximumRecordedMetric) {
  const auto c = toy_config();
  const auto init = toy_params(c, 53);
  // Dev metric peaks at the second evaluation and repeats later; the earliest wins.
  std::vector<double> trajectory = {0.1, 0.7, 0.3, 0.7, 0.2};
  std::size_t calls = 0;
  StageHooks hooks;
  hooks.train_size = 3;
  hooks.example_loss = [](const ParamStore& params, std::size_t, Rng&, std::size_t*) {
    const Tensor& b = params.at("output.bias");
    Tensor total = scale(sum(mul(b, b)), 1.0);
    for (const auto& [name, t] : params) {
      if (name != "output.bias") total = add(total, scale(sum(t), 0.0));
    }
    return LossTerms{total, 1.0};
  };
  hooks.dev_metric = [&](const ParamStore&) { return trajectory[calls++]; };
  auto cfg = quick_config(1e-2, 5);
  const auto result = train_loop(init, cfg, hooks);
  ASSERT_EQ(result.report.points.size(), 5u);
  double best = -INFINITY;
  for (const auto& point : result.report.points) best = std::max(best, point.dev_metric);
  EXPECT_EQ(result.report.best_metric, best);
  EXPECT_EQ(result.report.best_epoch, 2u);
}

TEST(TrainLoop, EvalEveryAlsoEvaluatesLastEpoch) {
  const auto c = toy_config();
  StageHooks hooks;
  hooks.train_size = 1;
  hooks.example_loss = [](const ParamStore& params, std::size_t, Rng&, std::size_t*) {
    Tensor total;
    for (const auto& [name, t] : params) {
      Tensor term = scale(sum(mul(t, t)), 1e-3);
      total = total.defined() ? add(total, term) : term;
    }
    return LossTerms{total, 1.0};
  };
  hooks.dev_metric = [](const ParamStore&) { return 0.0; };
  auto cfg = quick_config(1e-3, 5);
  cfg.eval_every = 2;
  const auto result = train_loop(toy_params(c, 54), cfg, hooks);
  std::vector<std::size_t> epochs;
  for (const auto& p : result.report.points) epochs.push_back(p.epoch);
  EXPECT_EQ(epochs, (std::vector<std::size_t>{2, 4, 5}));
}

TEST(TrainSummarizer, SameSeedGivesBitwiseIdenticalLosses) {
  const auto vocab = toy_vocab();
  const auto data = toy_summaries(vocab);
  const auto c = toy_config(vocab.size());
  const auto init = init_random(c, StoreLayout::kSummarizer, 7);
  const auto a = train_summarizer(init, c, quick_config(), data, data, vocab, {1, 0.6, 8});
  const auto b = train_summarizer(init, c, quick_config(), data, data, vocab, {1, 0.6, 8});
  EXPECT_EQ(a.report.epoch_losses, b.report.epoch_losses);
  EXPECT_EQ(a.report.best_metric, b.report.best_metric);
}

TEST(TrainSummarizer, FullBatchLossDecreasesOverFirstSteps) {
  const auto vocab = toy_vocab();
  const auto data = toy_summaries(vocab);
  const auto c = toy_config(vocab.size());
  const auto init = init_random(c, StoreLayout::kSummarizer, 8);
  auto cfg = quick_config(1e-4, 6);
  cfg.dropout = 0.0;
  cfg.batch_size = data.size();
  const auto r = train_summarizer(init, c, cfg, data, data, vocab, {1, 0.6, 8});
  ASSERT_EQ(r.report.epoch_losses.size(), 6u);
  for (std::size_t i = 1; i < 6; ++i) EXPECT_LT(r.report.epoch_losses[i], r.report.epoch_losses[i - 1]) << i;
}

TEST(TrainSummarizer, SingleExampleIsMemorized) {
  const auto vocab = toy_vocab();
  auto data = toy_summaries(vocab);
  data.resize(1);
  const auto c = toy_config(vocab.size());
  const auto init = init_random(c, StoreLayout::kSummarizer, 9);
  auto cfg = quick_config(3e-3, 60);
  cfg.dropout = 0.0;
  cfg.eval_every = 10;
  const auto r = train_summarizer(init, c, cfg, data, data, vocab, {1, 0.6, 8});
  EXPECT_GE(r.report.best_metric, 0.99);
  EXPECT_NEAR(dev_rouge_l(r.best, c, data, vocab, {1, 0.6, 8}), r.report.best_metric, 0.0);
}

TEST(MaskTokens, ChoosesFifteenPercentWithAtLeastOne) {
  Rng rng(60);
  const std::vector<int> ids = {5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14};
  const auto seq = mask_tokens(ids, 20, rng);
  EXPECT_EQ(std::count(seq.predict.begin(), seq.predict.end(), 1), 3);
  EXPECT_EQ(seq.targets, ids);
  const std::vector<int> one = {7};
  EXPECT_EQ(mask_tokens(one, 20, rng).predict, (Mask{1}));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!seq.predict[i]) {
      EXPECT_EQ(seq.input[i], ids[i]);
    }
  }
}

TEST(MaskTokens, SplitIsRoughlyEightyTenTen) {
  Rng rng(61);
  std::vector<int> ids(100);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 5 + static_cast<int>(i % 50);
  std::size_t masked = 0, kept = 0, total = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const auto seq = mask_tokens(ids, 60, rng);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!seq.predict[i]) continue;
      ++total;
      masked += seq.input[i] == Vocabulary::kMask;
      kept += seq.input[i] == ids[i];
    }
  }
  const double n = static_cast<double>(total);
  EXPECT_NEAR(masked / n, 0.8, 0.01);
  // Random replacement can coincide with the original piece (1 in 55).
  EXPECT_NEAR(kept / n, 0.1 + 0.1 / 55.0, 0.01);
}

TEST(DenoiseLoss, UnmaskedPositionsContributeNothing) {
  const auto c = toy_config();
  const auto p = toy_params(c, 62, StoreLayout::kDenoiser);
  MaskedSequence seq{{5, 4, 7, 8}, {5, 6, 7, 8}, {0, 1, 0, 0}};
  const auto base = denoise_loss(p, c, seq, nullptr);
  seq.targets = {9, 6, 11, 10};
  const auto changed = denoise_loss(p, c, seq, nullptr);
  EXPECT_EQ(base.sum.item(), changed.sum.item());
  EXPECT_EQ(base.count, 1.0);
}

TEST(DenoisePretrain, MaskedLossHalvesAndStoreLoadsIntoSchemes) {
  const auto c = toy_config(16, 16, 2);
  // Sequences from a small deterministic grammar: next = (prev * 3 + 1) mod 11 + 5.
  std::vector<std::vector<int>> train, dev;
  Rng rng(63);
  for (int i = 0; i < 40; ++i) {
    std::vector<int> seq;
    int v = rng.integer(0, 10);
    for (int t = 0; t < 10; ++t) {
      seq.push_back(v + 5);
      v = (v * 3 + 1) % 11;
    }
    (i < 32 ? train : dev).push_back(seq);
  }
  auto cfg = quick_config(3e-3, 60);
  cfg.batch_size = 8;
  cfg.dropout = 0.0;
  const auto init = init_random(c, StoreLayout::kDenoiser, 63);
  const auto r = denoise_pretrain(init, c, cfg, train, dev);
  const double first = r.report.epoch_losses.front();
  const double last = r.report.epoch_losses.back();
  EXPECT_LE(last, 0.5 * first) << first << " -> " << last;
  EXPECT_EQ(r.report.best_metric, r.report.points[r.report.best_epoch - 1].dev_metric);

  ComponentSource bert{SourceKind::kCheckpoint, &r.best, "bert"};
  ComponentSource random{SourceKind::kRandom, nullptr, "random"};
  ComponentSource symmetric{SourceKind::kSymmetric, &r.best, "bert"};
  EXPECT_NO_THROW(apply_scheme({bert, random, std::nullopt}, c, StoreLayout::kSummarizer, 1));
  EXPECT_NO_THROW(apply_scheme({bert, symmetric, std::nullopt}, c, StoreLayout::kSummarizer, 1));
}

TEST(TrainSelector, DevMetricIsCalibratedF1AndBestIsRetained) {
  const auto vocab = toy_vocab();
  const auto data = toy_summaries(vocab);
  const auto examples = selector_examples(data);
  ASSERT_EQ(examples.size(), data.size());
  EXPECT_EQ(examples[1].labels.y, (std::vector<std::uint8_t>{0, 1, 1, 1}));
  const auto c = toy_config(vocab.size());
  const auto init = init_random(c, StoreLayout::kSelector, 11);
  auto cfg = quick_config(3e-3, 20);
  cfg.eval_every = 5;
  const auto r = train_selector(init, c, cfg, examples, examples);
  const auto pooled = pool_predictions(r.best, c, examples);
  EXPECT_DOUBLE_EQ(calibrate_threshold(pooled.p, pooled.y).f1, r.report.best_metric);
  EXPECT_GT(r.report.best_metric, 0.5);
}

TEST(TrainReport, TextRoundTrip) {
  TrainReport report;
  report.stage = "summarize";
  report.epoch_losses = {2.5, 1.25};
  report.points = {{1, 2.5, 0.125}, {2, 1.25, 0.3333333333333333}};
  report.best_epoch = 2;
  report.best_metric = 0.3333333333333333;
  report.best_checkpoint = "runs/x/best.ckpt";
  report.clamped_probabilities = 3;
  const auto back = parse_train_report(train_report_text(report));
  EXPECT_EQ(back.stage, report.stage);
  EXPECT_EQ(back.epoch_losses, report.epoch_losses);
  ASSERT_EQ(back.points.size(), 2u);
  EXPECT_EQ(back.points[1].dev_metric, report.points[1].dev_metric);
  EXPECT_EQ(back.best_epoch, 2u);
  EXPECT_EQ(back.best_metric, report.best_metric);
  EXPECT_EQ(back.best_checkpoint, report.best_checkpoint);
  EXPECT_EQ(back.clamped_probabilities, 3u);
  EXPECT_THROW(parse_train_report("nonsense line\n"), ReportError);
}
