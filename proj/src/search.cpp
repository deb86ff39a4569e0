#include "stagesum/search.hpp"

#include <algorithm>
#include <cmath>

#include "stagesum/errors.hpp"
#include "stagesum/tokenizer.hpp"

namespace stagesum {

namespace {

std::size_t clamp_length(const ModelConfig& config, std::size_t max_len) {
  return std::min(max_len, config.decoder_positions);
}

struct Live {
  Hypothesis hyp;
  IncrementalDecoder decoder;
  int next_input;
};

struct Candidate {
  double log_prob;
  std::size_t parent;
  int token;
};

bool better_penalized(const Hypothesis& a, const Hypothesis& b, double alpha) {
  return penalized_score(a, alpha) > penalized_score(b, alpha);
}

}  // namespace

double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

double penalized_score(const Hypothesis& h, double alpha) {
  return h.log_prob / length_penalty(h.tokens.size(), alpha);
}

Hypothesis greedy_decode(const ParamStore& params, const ModelConfig& config, SourceView source,
                         std::span<const std::uint8_t> selection_keep, std::size_t max_len) {
  NoGradGuard guard;
  const Tensor encoded = encode(params, config, source);
  const CrossMemory memory = build_cross_memory(params, config, encoded, source.pad_mask);
  IncrementalDecoder decoder(params, config, memory, source,
                             selection_keep.empty() ? Tensor{} : selection_offsets(selection_keep));
  Hypothesis out;
  int input = Vocabulary::kBos;
  const std::size_t limit = clamp_length(config, max_len);
  while (out.tokens.size() < limit) {
    const auto logp = decoder.advance(input);
    const auto best = static_cast<int>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    out.tokens.push_back(best);
    out.log_prob += logp[static_cast<std::size_t>(best)];
    if (best == Vocabulary::kEos) {
      out.finished = true;
      break;
    }
    input = best;
  }
  return out;
}

Hypothesis beam_decode(const ParamStore& params, const ModelConfig& config, SourceView source,
                       std::span<const std::uint8_t> selection_keep, const SearchOptions& options) {
  if (options.beam_width == 0) throw ConfigError("beam width must be at least 1");
  NoGradGuard guard;
  const Tensor encoded = encode(params, config, source);
  const CrossMemory memory = build_cross_memory(params, config, encoded, source.pad_mask);
  const Tensor offsets = selection_keep.empty() ? Tensor{} : selection_offsets(selection_keep);
  const std::size_t limit = clamp_length(config, options.max_len);

  std::vector<Live> live;
  live.push_back({Hypothesis{}, IncrementalDecoder(params, config, memory, source, offsets), Vocabulary::kBos});
  std::vector<Hypothesis> finished;
  double best_finished = -INFINITY;

  for (std::size_t step = 0; step < limit && !live.empty(); ++step) {
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto logp = live[h].decoder.advance(live[h].next_input);
      for (std::size_t v = 0; v < logp.size(); ++v) {
        candidates.push_back({live[h].hyp.log_prob + logp[v], h, static_cast<int>(v)});
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    });
    std::vector<Live> next;
    for (std::size_t c = 0; c < candidates.size() && next.size() < options.beam_width; ++c) {
      const Candidate& cand = candidates[c];
      Hypothesis hyp = live[cand.parent].hyp;
      hyp.tokens.push_back(cand.token);
      hyp.log_prob = cand.log_prob;
      if (cand.token == Vocabulary::kEos) {
        if (c >= options.beam_width) continue;
        hyp.finished = true;
        best_finished = std::max(best_finished, penalized_score(hyp, options.alpha));
        finished.push_back(std::move(hyp));
      } else {
        next.push_back({std::move(hyp), live[cand.parent].decoder, cand.token});
      }
    }
    live = std::move(next);
    // Log-probabilities only fall, so no live hypothesis can beat this bound.
    double live_bound = -INFINITY;
    for (const auto& l : live) live_bound = std::max(live_bound, l.hyp.log_prob / length_penalty(limit, options.alpha));
    if (best_finished >= live_bound) break;
  }

  // Hypotheses still live at max_len compete as truncated outputs.
  std::vector<Hypothesis> pool = std::move(finished);
  for (const auto& l : live) pool.push_back(l.hyp);
  const Hypothesis* best = &pool.front();
  for (const auto& h : pool) {
    if (better_penalized(h, *best, options.alpha)) best = &h;
  }
  return *best;
}

}  // namespace stagesum
