#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stagesum/model.hpp"
#include "stagesum/tensor.hpp"

namespace stagesum {

enum class LabelOrigin { kAligned, kOracle };

/// Binary membership labels over the non-pad source positions.
struct SelectionLabels {
  std::vector<std::uint8_t> y;
  LabelOrigin origin = LabelOrigin::kAligned;
};

/// Selector probabilities over the non-pad source positions.
struct SelectionPrediction {
  std::vector<double> p;
  std::optional<double> threshold;
};

/// Greedy longest-n-gram alignment: repeatedly take the longest contiguous
/// run shared by the unmatched summary and the document (earliest summary
/// start, then leftmost document occurrence), mark the document positions,
/// and retire the summary span.
SelectionLabels build_labels(std::span<const int> source, std::span<const int> summary);
SelectionLabels build_labels(std::span<const std::string> source, std::span<const std::string> summary);

/// P_sel(i) = σ(x_s·c_i + b_s) for every source position -> [S].
Tensor selector_forward(const ParamStore& params, const ModelConfig& config, SourceView source,
                        Rng* dropout = nullptr);

/// Non-pad entries of a [S] probability tensor.
SelectionPrediction prediction_values(const Tensor& probs, std::span<const std::uint8_t> pad_mask);

/// Mean binary cross-entropy over non-pad positions. `labels` covers the
/// non-pad positions in order.
Tensor selector_loss(const Tensor& probs, const SelectionLabels& labels, std::span<const std::uint8_t> pad_mask);

struct Calibration {
  double threshold = 0.5;
  double f1 = 0.0;
};

/// Midpoint between consecutive distinct probabilities that maximises the
/// F1 of (p > ε) against y; ties go to the smaller ε.
Calibration calibrate_threshold(std::span<const double> p, std::span<const std::uint8_t> y);

/// F1 of (p > threshold) against y.
double selection_f1(std::span<const double> p, std::span<const std::uint8_t> y, double threshold);

/// Keep flags over all source positions (PAD positions are never kept).
Mask keep_from_prediction(const SelectionPrediction& prediction, std::span<const std::uint8_t> pad_mask);
Mask keep_from_labels(const SelectionLabels& labels, std::span<const std::uint8_t> pad_mask);

/// â'_i = â_i when kept, â_i − 10000 otherwise.
std::vector<double> apply_selection_mask(std::span<const double> copy_logits, std::span<const std::uint8_t> keep);

/// One line per example: space-separated 0/1 labels.
void write_label_dump(const std::string& path, std::span<const SelectionLabels> labels);
std::vector<SelectionLabels> read_label_dump(const std::string& path);

}  // namespace stagesum
