#include "stagesum/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "stagesum/adam.hpp"
#include "stagesum/errors.hpp"
#include "stagesum/metrics.hpp"
#include "stagesum/ops.hpp"
#include "stagesum/search.hpp"

namespace stagesum {

namespace {

Mask content_flags(std::span<const std::uint8_t> pad_mask) {
  Mask m(pad_mask.size());
  for (std::size_t i = 0; i < pad_mask.size(); ++i) m[i] = pad_mask[i] ? 0 : 1;
  return m;
}

ModelConfig with_dropout(ModelConfig model, double rate) {
  model.dropout_rate = rate;
  return model;
}

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

}  // namespace

std::string stage_kind_name(StageKind kind) {
  switch (kind) {
    case StageKind::kDenoise:
      return "denoise";
    case StageKind::kSummarize:
      return "summarize";
    case StageKind::kSelect:
      return "select";
  }
  return "summarize";
}

StageKind parse_stage_kind(const std::string& name) {
  if (name == "denoise") return StageKind::kDenoise;
  if (name == "summarize") return StageKind::kSummarize;
  if (name == "select") return StageKind::kSelect;
  throw ConfigError("unknown stage kind '" + name + "'");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
}

std::string train_report_text(const TrainReport& report) {
  std::ostringstream out;
  out << "stage=" << report.stage << '\n';
  for (std::size_t e = 0; e < report.epoch_losses.size(); ++e) {
    out << "epoch index=" << e + 1 << " train_loss=" << format_double(report.epoch_losses[e]) << '\n';
  }
  for (const auto& p : report.points) {
    out << "eval epoch=" << p.epoch << " train_loss=" << format_double(p.train_loss)
        << " dev=" << format_double(p.dev_metric) << '\n';
  }
  out << "best_epoch=" << report.best_epoch << '\n';
  out << "best_metric=" << format_double(report.best_metric) << '\n';
  out << "best_checkpoint=" << report.best_checkpoint << '\n';
  out << "clamped_probabilities=" << report.clamped_probabilities << '\n';
  return out.str();
}

TrainReport parse_train_report(const std::string& text) {
  TrainReport report;
  std::istringstream lines(text);
  std::string line;
  auto field = [](const std::string& token, const std::string& key) {
    if (token.rfind(key + "=", 0) != 0) throw ReportError("expected '" + key + "=' in '" + token + "'");
    return token.substr(key.size() + 1);
  };
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream tokens(line);
    std::string head;
    tokens >> head;
    if (head == "eval") {
      std::string a, b, c;
      tokens >> a >> b >> c;
      report.points.push_back(
          {std::stoul(field(a, "epoch")), std::stod(field(b, "train_loss")), std::stod(field(c, "dev"))});
    } else if (head == "epoch") {
      std::string a, b;
      tokens >> a >> b;
      report.epoch_losses.push_back(std::stod(field(b, "train_loss")));
    } else if (head.rfind("stage=", 0) == 0) {
      report.stage = field(head, "stage");
    } else if (head.rfind("best_epoch=", 0) == 0) {
      report.best_epoch = std::stoul(field(head, "best_epoch"));
    } else if (head.rfind("best_metric=", 0) == 0) {
      report.best_metric = std::stod(field(head, "best_metric"));
    } else if (head.rfind("best_checkpoint=", 0) == 0) {
      report.best_checkpoint = line.substr(std::string("best_checkpoint=").size());
    } else if (head.rfind("clamped_probabilities=", 0) == 0) {
      report.clamped_probabilities = std::stoul(field(head, "clamped_probabilities"));
    } else {
      throw ReportError("unrecognised train report line '" + line + "'");
    }
  }
  return report;
}

Tensor mle_loss(const Tensor& probs, std::span<const int> target_ids, std::span<const std::uint8_t> target_pad_mask,
                std::size_t* clamped) {
  const Mask include = content_flags(target_pad_mask);
  const auto count = std::count(include.begin(), include.end(), 1);
  if (count == 0) throw ValidationError("mle_loss: every target position is padding");
  return scale(nll_sum(probs, target_ids, include, clamped), 1.0 / static_cast<double>(count));
}

TrainResult train_loop(const ParamStore& init, const TrainConfig& config, const StageHooks& hooks) {
  config.validate();
  if (hooks.train_size == 0) throw TrainingError("training corpus is empty");
  TrainResult result;
  result.report.stage = stage_kind_name(config.kind);
  ParamStore params = init.clone();
  params.set_requires_grad(true);
  Adam adam(AdamOptions{config.lr});
  Rng order_rng(derive_seed(config.seed, 1));
  Rng dropout_rng(derive_seed(config.seed, 2));
  std::vector<std::size_t> order(hooks.train_size);
  std::iota(order.begin(), order.end(), 0);
  bool have_best = false;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      params.clear_grads();
      Tensor batch_sum;
      double batch_count = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        LossTerms terms = hooks.example_loss(params, order[i], dropout_rng, &result.report.clamped_probabilities);
        if (terms.count == 0.0) continue;
        batch_sum = batch_sum.defined() ? add(batch_sum, terms.sum) : terms.sum;
        batch_count += terms.count;
      }
      if (!batch_sum.defined()) continue;
      const Tensor loss = scale(batch_sum, 1.0 / batch_count);
      if (!std::isfinite(loss.item())) {
        throw StageError(result.report.stage + " stage: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss.backward();
      adam.step(params);
      loss_total += loss.item();
      ++batches;
    }
    const double epoch_loss = batches ? loss_total / static_cast<double>(batches) : 0.0;
    result.report.epoch_losses.push_back(epoch_loss);

    if (epoch % config.eval_every == 0 || epoch == config.max_epochs) {
      double metric;
      {
        NoGradGuard guard;
        metric = hooks.dev_metric(params);
      }
      if (std::isnan(metric)) throw StageError(result.report.stage + " stage: dev metric is NaN");
      result.report.points.push_back({epoch, epoch_loss, metric});
      if (!have_best || metric > result.report.best_metric) {
        have_best = true;
        result.report.best_metric = metric;
        result.report.best_epoch = epoch;
        result.best = params.clone();
      }
    }
  }
  result.best.set_requires_grad(false);
  return result;
}

std::vector<SummaryExample> encode_summaries(std::span<const DocumentSummary> corpus, const Vocabulary& vocab,
                                             const SequenceLimits& limits) {
  std::vector<SummaryExample> out;
  out.reserve(corpus.size());
  for (const auto& record : corpus) {
    SummaryExample ex;
    ex.encoded = encode_pair(record.document, record.summary, vocab, limits).trimmed();
    ex.reference = detokenize_ids(ex.encoded.target_ids, vocab);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::vector<int>> decode_corpus(const ParamStore& params, const ModelConfig& model,
                                            std::span<const SummaryExample> examples, const DecodeSettings& settings,
                                            std::span<const Mask> keeps) {
  if (!keeps.empty() && keeps.size() != examples.size()) {
    throw DimensionError("decode_corpus: " + std::to_string(keeps.size()) + " masks for " +
                         std::to_string(examples.size()) + " examples");
  }
  std::vector<std::vector<int>> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& enc = examples[i].encoded;
    const SourceView source{enc.source_ids, enc.source_pad_mask};
    const std::span<const std::uint8_t> keep = keeps.empty() ? std::span<const std::uint8_t>{} : keeps[i];
    Hypothesis h = settings.beam_width <= 1
                       ? greedy_decode(params, model, source, keep, settings.max_len)
                       : beam_decode(params, model, source, keep, {settings.beam_width, settings.alpha, settings.max_len});
    out.push_back(std::move(h.tokens));
  }
  return out;
}

double dev_rouge_l(const ParamStore& params, const ModelConfig& model, std::span<const SummaryExample> dev,
                   const Vocabulary& vocab, const DecodeSettings& settings) {
  const auto decoded = decode_corpus(params, model, dev, settings);
  std::vector<std::string> refs, hyps;
  for (std::size_t i = 0; i < dev.size(); ++i) {
    refs.push_back(dev[i].reference);
    hyps.push_back(detokenize_ids(decoded[i], vocab));
  }
  return corpus_rouge(refs, hyps).rougeL.f1;
}

TrainResult train_summarizer(const ParamStore& init, const ModelConfig& model, const TrainConfig& config,
                             std::span<const SummaryExample> train, std::span<const SummaryExample> dev,
                             const Vocabulary& vocab, const DecodeSettings& dev_decode) {
  const ModelConfig train_model = with_dropout(model, config.dropout);
  StageHooks hooks;
  hooks.train_size = train.size();
  hooks.example_loss = [&](const ParamStore& params, std::size_t index, Rng& rng, std::size_t* clamped) {
    const auto& enc = train[index].encoded;
    const auto out = forward_teacher_forced(params, train_model, {enc.source_ids, enc.source_pad_mask},
                                            enc.target_ids, {}, &rng);
    const Mask include = content_flags(enc.target_pad_mask);
    const auto count = static_cast<double>(std::count(include.begin(), include.end(), 1));
    return LossTerms{nll_sum(out.probs, enc.target_ids, include, clamped), count};
  };
  hooks.dev_metric = [&](const ParamStore& params) { return dev_rouge_l(params, model, dev, vocab, dev_decode); };
  TrainConfig cfg = config;
  cfg.kind = StageKind::kSummarize;
  return train_loop(init, cfg, hooks);
}

MaskedSequence mask_tokens(std::span<const int> ids, std::size_t vocab_size, Rng& rng, double rate) {
  MaskedSequence seq;
  seq.input.assign(ids.begin(), ids.end());
  seq.targets.assign(ids.begin(), ids.end());
  seq.predict.assign(ids.size(), 0);
  std::vector<std::size_t> content;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != Vocabulary::kPad) content.push_back(i);
  }
  if (content.empty()) return seq;
  const auto chosen = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(rate * static_cast<double>(content.size()))));
  rng.shuffle(content);
  const int first_ordinary = static_cast<int>(Vocabulary::kReserved.size());
  for (std::size_t k = 0; k < chosen && k < content.size(); ++k) {
    const std::size_t pos = content[k];
    seq.predict[pos] = 1;
    const double r = rng.uniform();
    if (r < 0.8) {
      seq.input[pos] = Vocabulary::kMask;
    } else if (r < 0.9 && vocab_size > Vocabulary::kReserved.size()) {
      seq.input[pos] = rng.integer(first_ordinary, static_cast<int>(vocab_size) - 1);
    }
  }
  return seq;
}

LossTerms denoise_loss(const ParamStore& params, const ModelConfig& model, const MaskedSequence& seq, Rng* dropout) {
  const Mask pad(seq.input.size(), 0);
  const Tensor encoded = encode(params, model, {seq.input, pad}, dropout);
  const Tensor logits =
      add_bias(matmul_transposed(encoded, params.at("shared.word_embedding")), params.at("mlm.bias"));
  const Tensor probs = softmax(logits, 1);
  const auto count = static_cast<double>(std::count(seq.predict.begin(), seq.predict.end(), 1));
  return {nll_sum(probs, seq.targets, seq.predict), count};
}

TrainResult denoise_pretrain(const ParamStore& init, const ModelConfig& model, const TrainConfig& config,
                             std::span<const std::vector<int>> train, std::span<const std::vector<int>> dev) {
  const ModelConfig train_model = with_dropout(model, config.dropout);
  std::vector<MaskedSequence> dev_masked;
  Rng dev_rng(derive_seed(config.seed, 3));
  for (const auto& ids : dev) dev_masked.push_back(mask_tokens(ids, model.vocab_size, dev_rng));
  Rng mask_rng(derive_seed(config.seed, 4));

  StageHooks hooks;
  hooks.train_size = train.size();
  hooks.example_loss = [&](const ParamStore& params, std::size_t index, Rng& rng, std::size_t*) {
    const auto seq = mask_tokens(train[index], model.vocab_size, mask_rng);
    return denoise_loss(params, train_model, seq, &rng);
  };
  hooks.dev_metric = [&](const ParamStore& params) {
    double total = 0.0, count = 0.0;
    for (const auto& seq : dev_masked) {
      const auto terms = denoise_loss(params, model, seq, nullptr);
      total += terms.sum.item();
      count += terms.count;
    }
    return count > 0.0 ? -total / count : 0.0;
  };
  TrainConfig cfg = config;
  cfg.kind = StageKind::kDenoise;
  return train_loop(init, cfg, hooks);
}

std::vector<SelectorExample> selector_examples(std::span<const SummaryExample> examples) {
  std::vector<SelectorExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto& enc = ex.encoded;
    SelectorExample s;
    for (std::size_t i = 0; i < enc.source_ids.size(); ++i) {
      if (!enc.source_pad_mask[i]) s.source_ids.push_back(enc.source_ids[i]);
    }
    const auto summary = strip_special(enc.target_ids);
    s.labels = build_labels(std::span<const int>(s.source_ids), std::span<const int>(summary));
    out.push_back(std::move(s));
  }
  return out;
}

PooledPredictions pool_predictions(const ParamStore& params, const ModelConfig& model,
                                   std::span<const SelectorExample> examples) {
  NoGradGuard guard;
  PooledPredictions pooled;
  for (const auto& ex : examples) {
    const Mask pad(ex.source_ids.size(), 0);
    const Tensor p = selector_forward(params, model, {ex.source_ids, pad});
    pooled.p.insert(pooled.p.end(), p.values().begin(), p.values().end());
    pooled.y.insert(pooled.y.end(), ex.labels.y.begin(), ex.labels.y.end());
  }
  return pooled;
}

TrainResult train_selector(const ParamStore& init, const ModelConfig& model, const TrainConfig& config,
                           std::span<const SelectorExample> train, std::span<const SelectorExample> dev) {
  const ModelConfig train_model = with_dropout(model, config.dropout);
  StageHooks hooks;
  hooks.train_size = train.size();
  hooks.example_loss = [&](const ParamStore& params, std::size_t index, Rng& rng, std::size_t*) {
    const auto& ex = train[index];
    const Mask pad(ex.source_ids.size(), 0);
    const Tensor p = selector_forward(params, train_model, {ex.source_ids, pad}, &rng);
    const auto count = static_cast<double>(ex.source_ids.size());
    return LossTerms{scale(selector_loss(p, ex.labels, pad), count), count};
  };
  hooks.dev_metric = [&](const ParamStore& params) {
    const auto pooled = pool_predictions(params, model, dev);
    try {
      return calibrate_threshold(pooled.p, pooled.y).f1;
    } catch (const CalibrationError&) {
      return 0.0;
    }
  };
  TrainConfig cfg = config;
  cfg.kind = StageKind::kSelect;
  return train_loop(init, cfg, hooks);
}

}  // namespace stagesum
