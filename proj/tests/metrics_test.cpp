#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "stagesum/errors.hpp"
#include "stagesum/metrics.hpp"
#include "stagesum/random.hpp"

using namespace stagesum;
using namespace stagesum::testing;

using Tokens = std::vector<std::string>;

TEST(RougeN, IdenticalSequencesScoreOne) {
  const Tokens a = {"x", "y", "z"};
  const auto r = rouge_n(a, a, 2);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.f1, 1.0);
}

TEST(RougeN, UnigramHandCount) {
  const auto r = rouge_n(Tokens{"a", "b", "c"}, Tokens{"a", "b"}, 1);
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.f1, 0.8);
}

TEST(RougeN, BigramHandCount) {
  const auto r = rouge_n(Tokens{"a", "b", "c", "d"}, Tokens{"a", "b", "c"}, 2);
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.f1, 0.8);
}

TEST(RougeN, ClipsRepeatedNgrams) {
  const auto r = rouge_n(Tokens{"a", "b"}, Tokens{"a", "a", "a"}, 1);
  EXPECT_DOUBLE_EQ(r.precision, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
}

TEST(RougeN, EmptyInputsGiveZero) {
  const auto r = rouge_n(Tokens{}, Tokens{"a"}, 1);
  EXPECT_EQ(r.f1, 0.0);
  EXPECT_THROW(rouge_n(Tokens{"a"}, Tokens{"a"}, 0), MetricError);
}

TEST(RougeL, HandLcs) {
  const auto r = rouge_l(Tokens{"a", "b", "c"}, Tokens{"a", "c"});
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.f1, 0.8);
}

TEST(RougeL, DisjointIsZeroAndIdenticalIsOne) {
  const auto zero = rouge_l(Tokens{"a", "b"}, Tokens{"c", "d"});
  EXPECT_EQ(zero.precision, 0.0);
  EXPECT_EQ(zero.recall, 0.0);
  EXPECT_EQ(zero.f1, 0.0);
  EXPECT_EQ(rouge_l(Tokens{"a", "b"}, Tokens{"a", "b"}).f1, 1.0);
}

TEST(RougeL, MatchesBruteForceLcsOnRandomShortSequences) {
  Rng rng(3);
  const Tokens alphabet = {"a", "b", "c", "d"};
  for (int trial = 0; trial < 2000; ++trial) {
    Tokens x(rng.index(11)), y(rng.index(11));
    for (auto& t : x) t = alphabet[rng.index(4)];
    for (auto& t : y) t = alphabet[rng.index(4)];
    EXPECT_EQ(lcs_length(x, y), brute_force_lcs(x, y));
  }
}

TEST(RougeL, InvariantUnderTokenRelabelling) {
  Rng rng(4);
  const Tokens alphabet = {"a", "b", "c", "d", "e"};
  const Tokens renamed = {"q", "w", "e", "r", "t"};
  for (int trial = 0; trial < 200; ++trial) {
    Tokens x(1 + rng.index(8)), y(1 + rng.index(8)), xr, yr;
    for (auto& t : x) t = alphabet[rng.index(5)];
    for (auto& t : y) t = alphabet[rng.index(5)];
    auto relabel = [&](const std::string& t) { return renamed[static_cast<std::size_t>(t[0] - 'a')]; };
    for (const auto& t : x) xr.push_back(relabel(t));
    for (const auto& t : y) yr.push_back(relabel(t));
    EXPECT_EQ(rouge_l(x, y).f1, rouge_l(xr, yr).f1);
    EXPECT_EQ(rouge_n(x, y, 2).f1, rouge_n(xr, yr, 2).f1);
  }
}

TEST(RougeTokens, LowercasesAndStripsPunctuation) {
  EXPECT_EQ(rouge_tokens("The Cat, sat . here!"), (Tokens{"the", "cat", "sat", "here"}));
}

TEST(CorpusRouge, IdenticalCorpusScoresOne) {
  const std::vector<std::string> refs = {"a b c", "d e"};
  const auto r = corpus_rouge(refs, refs);
  EXPECT_EQ(r.rougeL.f1, 1.0);
  EXPECT_EQ(r.rouge1.f1, 1.0);
}

TEST(AbstractionRate, Counting) {
  EXPECT_EQ(abstraction_rate(Tokens{"a", "b"}, Tokens{"a", "b", "a"}), 0.0);
  EXPECT_EQ(abstraction_rate(Tokens{"a", "b", "c"}, Tokens{"a", "d"}), 50.0);
  EXPECT_THROW(abstraction_rate(Tokens{"a"}, Tokens{}), MetricError);
}

TEST(Auc, PerfectAndInverseRanking) {
  const std::vector<double> s = {0.1, 0.2, 0.8, 0.9};
  const std::vector<std::uint8_t> y = {0, 0, 1, 1};
  const std::vector<std::uint8_t> inv = {1, 1, 0, 0};
  EXPECT_EQ(auc(s, y).auc_roc, 1.0);
  EXPECT_EQ(auc(s, y).auc_pr, 1.0);
  EXPECT_EQ(auc(s, inv).auc_roc, 0.0);
}

TEST(Auc, SingleClassIsMetricError) {
  const std::vector<double> s = {0.1, 0.2};
  const std::vector<std::uint8_t> y = {1, 1};
  EXPECT_THROW(auc(s, y), MetricError);
}

TEST(Auc, MatchesPairwiseBruteForceOnRandomSets) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(200);
    std::vector<std::uint8_t> y(200);
    for (std::size_t i = 0; i < s.size(); ++i) {
      // Coarse grid so ties occur.
      s[i] = std::round(rng.uniform() * 40.0) / 40.0;
      y[i] = rng.bernoulli(0.3) ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    const auto r = auc(s, y);
    EXPECT_NEAR(r.auc_roc, pairwise_auc_roc(s, y), 1e-9);
    EXPECT_NEAR(r.auc_pr, threshold_sweep_auc_pr(s, y), 1e-9);
  }
}

TEST(Auc, RocInvariantUnderMonotoneTransform) {
  Rng rng(6);
  std::vector<double> s(100), t(100);
  std::vector<std::uint8_t> y(100);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.normal();
    t[i] = std::exp(3.0 * s[i]) + 7.0;
    y[i] = rng.bernoulli(0.5);
  }
  y[0] = 1;
  y[1] = 0;
  EXPECT_EQ(auc(s, y).auc_roc, auc(t, y).auc_roc);
}

TEST(CoveragePrf, OracleSelectionHasPerfectPrecision) {
  const Tokens source = {"a", "b", "c", "d"};
  const Tokens summary = {"b", "c", "z"};
  const std::vector<std::uint8_t> oracle = {0, 1, 1, 0};
  const auto r = coverage_prf(oracle, source, summary);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 2.0 / 3.0);
}

TEST(CoveragePrf, NothingSelectedHasZeroRecall) {
  const std::vector<std::uint8_t> none = {0, 0};
  const auto r = coverage_prf(none, Tokens{"a", "b"}, Tokens{"a"});
  EXPECT_EQ(r.recall, 0.0);
  EXPECT_EQ(r.f1, 0.0);
}

TEST(Pearson, PerfectCorrelations) {
  const std::vector<double> x = {1, 2, 3, 4};
  std::vector<double> twice, neg;
  for (double v : x) {
    twice.push_back(2 * v);
    neg.push_back(-v);
  }
  EXPECT_NEAR(pearson_r(x, twice), 1.0, 1e-15);
  EXPECT_NEAR(pearson_r(x, neg), -1.0, 1e-15);
}

TEST(Pearson, FivePointHandComputation) {
  // Deviations: x {-2,-1,0,1,2}, y {-2,0,1,0,1}; Sxy = 6, Sxx = 10, Syy = 6.
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> y = {2, 4, 5, 4, 5};
  EXPECT_NEAR(pearson_r(x, y), 6.0 / std::sqrt(60.0), 1e-12);
}

TEST(Pearson, ZeroVarianceIsMetricError) {
  const std::vector<double> x = {1, 1, 1};
  const std::vector<double> y = {1, 2, 3};
  EXPECT_THROW(pearson_r(x, y), MetricError);
}

TEST(Report, FormatParseRoundTrip) {
  const std::map<std::string, double> values = {{"rougeL_f1", 0.123456789012345}, {"rouge1_f1", 1.0}};
  const auto text = format_report(values);
  EXPECT_EQ(text.substr(0, 10), "rouge1_f1 ");
  EXPECT_EQ(parse_report(text), values);
}
