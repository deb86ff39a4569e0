#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stagesum/model.hpp"
#include "stagesum/param_store.hpp"
#include "stagesum/selection.hpp"
#include "stagesum/tokenizer.hpp"

namespace stagesum {

enum class StageKind { kDenoise, kSummarize, kSelect };

std::string stage_kind_name(StageKind kind);
StageKind parse_stage_kind(const std::string& name);

struct TrainConfig {
  double lr = 2e-5;
  double dropout = 0.3;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 10;
  std::size_t eval_every = 1;  // epochs between dev evaluations
  std::uint64_t seed = 1;
  StageKind kind = StageKind::kSummarize;

  void validate() const;
};

struct EvalPoint {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_metric = 0.0;
};

struct TrainReport {
  std::string stage;
  std::vector<EvalPoint> points;
  std::vector<double> epoch_losses;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  std::string best_checkpoint;
  std::size_t clamped_probabilities = 0;
};

/// One "key=value" record per line; eval points as "eval epoch=.. train_loss=.. dev=..".
std::string train_report_text(const TrainReport& report);
TrainReport parse_train_report(const std::string& text);

/// Mean of −log P(target) over non-pad target positions. Probabilities are
/// clamped at 1e-30; each clamp increments *clamped when given.
Tensor mle_loss(const Tensor& probs, std::span<const int> target_ids, std::span<const std::uint8_t> target_pad_mask,
                std::size_t* clamped = nullptr);

/// Summed loss terms of one example and how many positions they cover.
struct LossTerms {
  Tensor sum;
  double count = 0.0;
};

/// Stage-specific pieces plugged into the generic loop.
struct StageHooks {
  std::size_t train_size = 0;
  std::function<LossTerms(const ParamStore&, std::size_t index, Rng& dropout, std::size_t* clamped)> example_loss;
  /// Higher is better.
  std::function<double(const ParamStore&)> dev_metric;
};

struct TrainResult {
  TrainReport report;
  ParamStore best;
};

/// Seeded shuffled mini-batches, loss averaged jointly over the batch's
/// positions, flat-lr Adam, dev evaluation every `eval_every` epochs and at
/// the last epoch. The earliest evaluation with the best metric wins.
TrainResult train_loop(const ParamStore& init, const TrainConfig& config, const StageHooks& hooks);

/// Summarisation examples after trailing padding has been trimmed.
struct SummaryExample {
  EncodedExample encoded;
  std::string reference;  // detokenized target text used for ROUGE
};

std::vector<SummaryExample> encode_summaries(std::span<const DocumentSummary> corpus, const Vocabulary& vocab,
                                             const SequenceLimits& limits);

struct DecodeSettings {
  std::size_t beam_width = 1;  // 1 decodes greedily
  double alpha = 0.6;
  std::size_t max_len = 64;
};

/// Decoded ids for every example; `keeps` (optional) holds per-example copy masks.
std::vector<std::vector<int>> decode_corpus(const ParamStore& params, const ModelConfig& model,
                                            std::span<const SummaryExample> examples, const DecodeSettings& settings,
                                            std::span<const Mask> keeps = {});

/// Mean ROUGE-L F1 of decoded outputs against references.
double dev_rouge_l(const ParamStore& params, const ModelConfig& model, std::span<const SummaryExample> dev,
                   const Vocabulary& vocab, const DecodeSettings& settings);

TrainResult train_summarizer(const ParamStore& init, const ModelConfig& model, const TrainConfig& config,
                             std::span<const SummaryExample> train, std::span<const SummaryExample> dev,
                             const Vocabulary& vocab, const DecodeSettings& dev_decode);

/// Masked-token objective: 15% of content positions (at least one) are
/// chosen; of those 80% become [MASK], 10% a random ordinary piece, 10% stay.
struct MaskedSequence {
  std::vector<int> input;
  std::vector<int> targets;
  Mask predict;  // 1 at positions that contribute to the loss
};

MaskedSequence mask_tokens(std::span<const int> ids, std::size_t vocab_size, Rng& rng, double rate = 0.15);

/// Loss of the masked-token objective on one sequence (mean over predicted positions).
LossTerms denoise_loss(const ParamStore& params, const ModelConfig& model, const MaskedSequence& seq, Rng* dropout);

TrainResult denoise_pretrain(const ParamStore& init, const ModelConfig& model, const TrainConfig& config,
                             std::span<const std::vector<int>> train, std::span<const std::vector<int>> dev);

struct SelectorExample {
  std::vector<int> source_ids;  // no padding
  SelectionLabels labels;
};

std::vector<SelectorExample> selector_examples(std::span<const SummaryExample> examples);

/// Pooled dev probabilities and labels.
struct PooledPredictions {
  std::vector<double> p;
  std::vector<std::uint8_t> y;
};

PooledPredictions pool_predictions(const ParamStore& params, const ModelConfig& model,
                                   std::span<const SelectorExample> examples);

TrainResult train_selector(const ParamStore& init, const ModelConfig& model, const TrainConfig& config,
                           std::span<const SelectorExample> train, std::span<const SelectorExample> dev);

}  // namespace stagesum
