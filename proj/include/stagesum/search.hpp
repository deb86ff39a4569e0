#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stagesum/model.hpp"

namespace stagesum {

struct Hypothesis {
  std::vector<int> tokens;  // emitted ids, EOS included when finished
  double log_prob = 0.0;
  bool finished = false;
};

/// GNMT length penalty ((5 + length) / 6)^alpha.
double length_penalty(std::size_t length, double alpha);
/// log_prob / length_penalty(|tokens|, alpha).
double penalized_score(const Hypothesis& h, double alpha);

struct SearchOptions {
  std::size_t beam_width = 4;
  double alpha = 0.6;
  std::size_t max_len = 64;
};

/// Argmax per step (lowest id on ties) until EOS or max_len tokens.
Hypothesis greedy_decode(const ParamStore& params, const ModelConfig& config, SourceView source,
                         std::span<const std::uint8_t> selection_keep, std::size_t max_len);

/// Each step ranks every extension of the live hypotheses by cumulative
/// log-prob (then lowest token id, then lowest parent). EOS extensions ranked
/// within the top beam_width join the finished pool; the best beam_width
/// non-EOS extensions stay live. Returns the best penalized hypothesis among
/// the finished ones and those still live when max_len is reached.
Hypothesis beam_decode(const ParamStore& params, const ModelConfig& config, SourceView source,
                       std::span<const std::uint8_t> selection_keep, const SearchOptions& options);

}  // namespace stagesum
