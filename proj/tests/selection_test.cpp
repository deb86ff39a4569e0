#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "stagesum/errors.hpp"
#include "stagesum/ops.hpp"
#include "stagesum/selection.hpp"
#include "toy_model.hpp"

using namespace stagesum;
using namespace stagesum::testing;

namespace {

/// Greedy alignment written as plain nested searches: longest length first,
/// then earliest summary start, then leftmost document start.
std::vector<std::uint8_t> naive_alignment(const std::vector<int>& doc, const std::vector<int>& sum) {
  std::vector<std::uint8_t> y(doc.size(), 0);
  std::vector<bool> used(sum.size(), false);
  for (;;) {
    bool found = false;
    for (std::size_t len = sum.size(); len >= 1 && !found; --len) {
      for (std::size_t s = 0; s + len <= sum.size() && !found; ++s) {
        bool free = true;
        for (std::size_t k = 0; k < len; ++k) free = free && !used[s + k];
        if (!free) continue;
        for (std::size_t d = 0; d + len <= doc.size() && !found; ++d) {
          bool same = true;
          for (std::size_t k = 0; k < len; ++k) same = same && doc[d + k] == sum[s + k];
          if (!same) continue;
          for (std::size_t k = 0; k < len; ++k) {
            y[d + k] = 1;
            used[s + k] = true;
          }
          found = true;
        }
      }
    }
    if (!found) return y;
  }
}

}  // namespace

TEST(BuildLabels, SharedBigramIsMarked) {
  const std::vector<std::string> doc = {"a", "b", "c", "d"};
  const std::vector<std::string> sum = {"b", "c", "e"};
  const auto labels = build_labels(doc, sum);
  EXPECT_EQ(labels.y, (std::vector<std::uint8_t>{0, 1, 1, 0}));
  EXPECT_EQ(labels.origin, LabelOrigin::kAligned);
}

TEST(BuildLabels, NoOverlapGivesAllZero) {
  const std::vector<int> doc = {5, 6, 7};
  const std::vector<int> sum = {8, 9};
  EXPECT_EQ(build_labels(doc, sum).y, (std::vector<std::uint8_t>{0, 0, 0}));
}

TEST(BuildLabels, LongestRunWinsOverEarlierShortMatch) {
  // Summary "x y z": "x" alone occurs at 0, "x y z" occurs at 3.
  const std::vector<int> doc = {1, 9, 9, 1, 2, 3};
  const std::vector<int> sum = {1, 2, 3};
  EXPECT_EQ(build_labels(doc, sum).y, (std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1}));
}

TEST(BuildLabels, MatchesNaiveSearchOnRandomSequences) {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> doc(1 + rng.index(20)), sum(1 + rng.index(8));
    for (auto& v : doc) v = rng.integer(0, 4);
    for (auto& v : sum) v = rng.integer(0, 4);
    ASSERT_EQ(build_labels(doc, sum).y, naive_alignment(doc, sum)) << "trial " << trial;
  }
}

TEST(BuildLabels, LabelsMarkOnlyPiecesPresentInSummary) {
  Rng rng(22);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<int> doc(1 + rng.index(30)), sum(1 + rng.index(10));
    for (auto& v : doc) v = rng.integer(0, 9);
    for (auto& v : sum) v = rng.integer(0, 9);
    const auto y = build_labels(doc, sum).y;
    for (std::size_t i = 0; i < doc.size(); ++i) {
      if (y[i]) {
        EXPECT_NE(std::find(sum.begin(), sum.end(), doc[i]), sum.end());
      }
    }
  }
}

TEST(SelectorForward, ZeroWeightsGiveSigmoidOfBias) {
  const auto c = toy_config();
  auto p = toy_params(c, 30, StoreLayout::kSelector);
  for (auto& v : p.at("selector.weight").mutable_values()) v = 0.0;
  p.at("selector.bias").mutable_values()[0] = std::log(3.0);
  Rng rng(30);
  const auto ex = toy_example(c, rng);
  const auto probs = selector_forward(p, c, {ex.source_ids, ex.source_pad});
  ASSERT_EQ(probs.size(), ex.source_ids.size());
  for (double v : probs.values()) EXPECT_NEAR(v, 0.75, 1e-15);
}

TEST(SelectorForward, ProbabilitiesStayInUnitInterval) {
  const auto c = toy_config();
  const auto p = toy_params(c, 31, StoreLayout::kSelector, 2.0);
  Rng rng(31);
  const auto ex = toy_example(c, rng);
  const auto probs = selector_forward(p, c, {ex.source_ids, ex.source_pad});
  for (double v : probs.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(SelectorLoss, HalfProbabilitiesGiveLnTwo) {
  Tensor probs({4}, {0.5, 0.5, 0.5, 0.3});
  SelectionLabels labels{{1, 0, 1}, LabelOrigin::kAligned};
  const Mask pad = {0, 0, 0, 1};
  EXPECT_NEAR(selector_loss(probs, labels, pad).item(), std::log(2.0), 1e-15);
}

TEST(SelectorLoss, AllPadOrWrongLabelCountIsValidationError) {
  Tensor probs({2}, {0.5, 0.5});
  EXPECT_THROW(selector_loss(probs, {{}, LabelOrigin::kAligned}, Mask{1, 1}), ValidationError);
  EXPECT_THROW(selector_loss(probs, {{1}, LabelOrigin::kAligned}, Mask{0, 0}), ValidationError);
}

TEST(SelectorLoss, GradientMatchesFiniteDifferences) {
  const auto c = toy_config();
  auto p = toy_params(c, 32, StoreLayout::kSelector);
  p.set_requires_grad(true);
  Rng rng(32);
  const auto ex = toy_example(c, rng);
  const SelectionLabels labels{{1, 0, 0, 1, 1, 0}, LabelOrigin::kAligned};
  auto loss = [&] { return selector_loss(selector_forward(p, c, {ex.source_ids, ex.source_pad}), labels, ex.source_pad); };
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (auto& [name, t] : p) {
    inputs.push_back(t);
    names.push_back(name);
  }
  const auto result = check_gradients(loss, inputs);
  EXPECT_LT(result.max_relative_error, 1e-4) << names[result.worst_input];
}

TEST(Calibration, ThreeScoreExample) {
  const std::vector<double> p = {0.2, 0.4, 0.9};
  const std::vector<std::uint8_t> y = {0, 1, 1};
  const auto cal = calibrate_threshold(p, y);
  EXPECT_DOUBLE_EQ(cal.threshold, 0.3);
  EXPECT_DOUBLE_EQ(cal.f1, 1.0);
}

TEST(Calibration, DegenerateInputsAreCalibrationErrors) {
  const std::vector<double> p = {0.2, 0.4};
  EXPECT_THROW(calibrate_threshold(p, std::vector<std::uint8_t>{1, 1}), CalibrationError);
  EXPECT_THROW(calibrate_threshold(std::vector<double>{0.5, 0.5}, std::vector<std::uint8_t>{0, 1}),
               CalibrationError);
}

TEST(Calibration, MatchesExhaustiveMidpointSearch) {
  Rng rng(33);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.index(30);
    std::vector<double> p(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = std::round(rng.uniform() * 20.0) / 20.0;
      y[i] = rng.bernoulli(0.4) ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    if (p[0] == p[1]) p[1] = p[0] == 1.0 ? 0.0 : 1.0;
    const auto cal = calibrate_threshold(p, y);
    const auto oracle = exhaustive_midpoint(p, y);
    ASSERT_DOUBLE_EQ(cal.f1, oracle.f1) << "trial " << trial;
    ASSERT_DOUBLE_EQ(cal.threshold, oracle.threshold) << "trial " << trial;
    EXPECT_DOUBLE_EQ(selection_f1(p, y, cal.threshold), cal.f1);
  }
}

TEST(SelectionMask, KeptLogitsUnchangedOthersOffset) {
  const std::vector<double> logits = {2.0, 3.0};
  const Mask keep = {1, 0};
  EXPECT_EQ(apply_selection_mask(logits, keep), (std::vector<double>{2.0, -9997.0}));
}

TEST(SelectionMask, MaskedSourceTokenIsNeverCopied) {
  const auto c = toy_config();
  auto p = toy_params(c, 34);
  p.at("copy_gate.bias").mutable_values()[0] = -1e6;
  // Token 11 occurs only at position 2.
  const std::vector<int> src = {5, 6, 11, 7, 0};
  const Mask pad = {0, 0, 0, 0, 1};
  const Mask keep = {1, 1, 0, 1, 0};
  const std::vector<int> tgt = {5, 6, 3};
  NoGradGuard guard;
  const auto out = forward_teacher_forced(p, c, {src, pad}, tgt, keep);
  for (std::size_t t = 0; t < tgt.size(); ++t) EXPECT_LT(out.probs.at(t * c.vocab_size + 11), 1e-40);
}

TEST(SelectionMask, KeepFromPredictionNeedsThreshold) {
  SelectionPrediction pred{{0.2, 0.8}, std::nullopt};
  EXPECT_THROW(keep_from_prediction(pred, Mask{0, 0, 1}), CalibrationError);
  pred.threshold = 0.5;
  EXPECT_EQ(keep_from_prediction(pred, Mask{0, 0, 1}), (Mask{0, 1, 0}));
}

TEST(SelectionMask, KeepFromLabelsSkipsPads) {
  const SelectionLabels labels{{1, 0, 1}, LabelOrigin::kOracle};
  EXPECT_EQ(keep_from_labels(labels, Mask{0, 0, 0, 1}), (Mask{1, 0, 1, 0}));
  EXPECT_THROW(keep_from_labels(labels, Mask{0, 0, 1}), DimensionError);
}

TEST(LabelDump, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "stagesum_label_dump.txt";
  const std::vector<SelectionLabels> labels = {{{1, 0, 1}, LabelOrigin::kAligned}, {{0}, LabelOrigin::kAligned}};
  write_label_dump(path.string(), labels);
  const auto back = read_label_dump(path.string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].y, labels[0].y);
  EXPECT_EQ(back[1].y, labels[1].y);
  std::filesystem::remove(path);
}
