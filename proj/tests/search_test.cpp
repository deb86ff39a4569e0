#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "stagesum/errors.hpp"
#include "stagesum/search.hpp"
#include "stagesum/tokenizer.hpp"
#include "toy_model.hpp"

using namespace stagesum;
using namespace stagesum::testing;

namespace {

struct Scored {
  std::vector<int> tokens;
  double log_prob;
};

/// Every EOS-terminated sequence of at most `max_len` tokens plus every
/// unterminated one of exactly `max_len`, scored by summing per-step
/// log-probabilities from full-prefix decoding.
Scored exhaustive_best(const ParamStore& p, const ModelConfig& c, SourceView source, std::size_t max_len,
                       double alpha) {
  NoGradGuard guard;
  const Tensor enc = encode(p, c, source);
  Scored best{{}, -INFINITY};
  double best_score = -INFINITY;
  std::function<void(std::vector<int>&, double)> expand = [&](std::vector<int>& prefix, double logp) {
    const std::size_t t = prefix.size() - 1;
    const auto step = decode_step(p, c, enc, source, prefix, t);
    for (std::size_t v = 0; v < c.vocab_size; ++v) {
      const double next = logp + std::log(step.probs[v]);
      const bool eos = static_cast<int>(v) == Vocabulary::kEos;
      if (eos || t + 1 == max_len) {
        const std::size_t len = t + 1;
        const double score = next / std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
        if (score > best_score) {
          best_score = score;
          best.tokens.assign(prefix.begin() + 1, prefix.end());
          best.tokens.push_back(static_cast<int>(v));
          best.log_prob = next;
        }
      } else {
        prefix.push_back(static_cast<int>(v));
        expand(prefix, next);
        prefix.pop_back();
      }
    }
  };
  std::vector<int> prefix = {Vocabulary::kBos};
  expand(prefix, 0.0);
  return best;
}

struct ToyCase {
  ModelConfig config;
  ParamStore params;
  ToyExample example;
};

ToyCase make_case(std::uint64_t seed, std::size_t vocab = 12, double spread = 1.0) {
  ToyCase tc{toy_config(vocab), {}, {}};
  tc.params = toy_params(tc.config, seed, StoreLayout::kSummarizer, spread);
  Rng rng(seed);
  tc.example = toy_example(tc.config, rng);
  return tc;
}

}  // namespace

TEST(LengthPenalty, KnownValues) {
  EXPECT_EQ(length_penalty(1, 0.6), 1.0);
  EXPECT_NEAR(length_penalty(7, 0.6), std::pow(2.0, 0.6), 1e-15);
  EXPECT_NEAR(length_penalty(7, 0.6), 1.5157, 1e-4);
  EXPECT_EQ(length_penalty(30, 0.0), 1.0);
}

TEST(Greedy, OneHotOutputIsEmittedExactly) {
  // Zero everything but the output bias so each step's argmax is fixed.
  auto tc = make_case(40);
  for (auto& [name, t] : tc.params) {
    const bool gain = name.size() > 5 && name.substr(name.size() - 5) == ".gain";
    for (auto& v : t.mutable_values()) v = gain ? 1.0 : 0.0;
  }
  tc.params.at("copy_gate.bias").mutable_values()[0] = 1e6;
  tc.params.at("output.bias").mutable_values()[7] = 50.0;
  const auto h = greedy_decode(tc.params, tc.config, {tc.example.source_ids, tc.example.source_pad}, {}, 5);
  EXPECT_EQ(h.tokens, (std::vector<int>{7, 7, 7, 7, 7}));
  EXPECT_FALSE(h.finished);
}

TEST(Greedy, MaxLenTruncatesWithoutError) {
  auto tc = make_case(41);
  const auto h = greedy_decode(tc.params, tc.config, {tc.example.source_ids, tc.example.source_pad}, {}, 3);
  EXPECT_LE(h.tokens.size(), 3u);
  const auto clamped = greedy_decode(tc.params, tc.config, {tc.example.source_ids, tc.example.source_pad}, {}, 1000);
  EXPECT_LE(clamped.tokens.size(), tc.config.decoder_positions);
}

TEST(Beam, ZeroWidthIsConfigError) {
  auto tc = make_case(42);
  SearchOptions o;
  o.beam_width = 0;
  EXPECT_THROW(beam_decode(tc.params, tc.config, {tc.example.source_ids, tc.example.source_pad}, {}, o),
               ConfigError);
}

TEST(Beam, WidthOneEqualsGreedy) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto tc = make_case(100 + seed);
    const SourceView src{tc.example.source_ids, tc.example.source_pad};
    const auto g = greedy_decode(tc.params, tc.config, src, {}, 10);
    const auto b = beam_decode(tc.params, tc.config, src, {}, {1, 0.0, 10});
    EXPECT_EQ(g.tokens, b.tokens) << "seed " << seed;
    EXPECT_EQ(g.log_prob, b.log_prob) << "seed " << seed;
  }
}

TEST(Beam, LogProbNeverIncreasesAlongHypothesis) {
  auto tc = make_case(43);
  const SourceView src{tc.example.source_ids, tc.example.source_pad};
  const auto b = beam_decode(tc.params, tc.config, src, {}, {4, 0.6, 10});
  EXPECT_LE(b.log_prob, 0.0);
  if (b.finished) {
    EXPECT_EQ(b.tokens.back(), Vocabulary::kEos);
  }
}

TEST(Beam, PenalizedScoreAtLeastGreedyOnRandomModels) {
  int failures = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto tc = make_case(200 + seed);
    const SourceView src{tc.example.source_ids, tc.example.source_pad};
    const auto g = greedy_decode(tc.params, tc.config, src, {}, 10);
    const auto b = beam_decode(tc.params, tc.config, src, {}, {4, 0.6, 10});
    if (penalized_score(b, 0.6) < penalized_score(g, 0.6) - 1e-12) ++failures;
  }
  EXPECT_EQ(failures, 0);
}

TEST(Beam, PenalizedScoreMonotoneInWidth) {
  int failures = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto tc = make_case(300 + seed);
    const SourceView src{tc.example.source_ids, tc.example.source_pad};
    double previous = -INFINITY;
    for (std::size_t w = 1; w <= 5; ++w) {
      const double s = penalized_score(beam_decode(tc.params, tc.config, src, {}, {w, 0.6, 10}), 0.6);
      if (s < previous - 1e-12) ++failures;
      previous = s;
    }
  }
  EXPECT_EQ(failures, 0);
}

TEST(Beam, FullWidthMatchesExhaustiveSearch) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = toy_config(6);
    auto p = toy_params(c, 400 + seed, StoreLayout::kSummarizer, 1.0);
    const std::vector<int> src_ids = {5, 5, 1, 5, 0};
    const Mask pad = {0, 0, 0, 0, 1};
    const SourceView src{src_ids, pad};
    const auto oracle = exhaustive_best(p, c, src, 4, 0.6);
    const auto b = beam_decode(p, c, src, {}, {1296, 0.6, 4});
    EXPECT_EQ(b.tokens, oracle.tokens) << "seed " << seed;
    EXPECT_NEAR(b.log_prob, oracle.log_prob, 1e-10) << "seed " << seed;
  }
}
