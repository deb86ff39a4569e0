#include "stagesum/selection.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "stagesum/errors.hpp"
#include "stagesum/ops.hpp"

namespace stagesum {

namespace {

template <class T>
SelectionLabels align(std::span<const T> source, std::span<const T> summary) {
  SelectionLabels labels;
  labels.y.assign(source.size(), 0);
  std::vector<bool> used(summary.size(), false);
  const std::size_t n = source.size(), m = summary.size();
  // run[i][j]: length of the common run ending at source[i-1], summary[j-1].
  std::vector<std::size_t> run((n + 1) * (m + 1));
  for (;;) {
    std::fill(run.begin(), run.end(), 0);
    std::size_t best = 0, best_src = 0, best_sum = 0;
    for (std::size_t i = 1; i <= n; ++i) {
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j - 1] || !(source[i - 1] == summary[j - 1])) continue;
        const std::size_t len = run[(i - 1) * (m + 1) + (j - 1)] + 1;
        run[i * (m + 1) + j] = len;
        const std::size_t src_start = i - len, sum_start = j - len;
        const bool better = len > best || (len == best && (sum_start < best_sum ||
                                                           (sum_start == best_sum && src_start < best_src)));
        if (better) {
          best = len;
          best_src = src_start;
          best_sum = sum_start;
        }
      }
    }
    if (best == 0) break;
    for (std::size_t k = 0; k < best; ++k) {
      labels.y[best_src + k] = 1;
      used[best_sum + k] = true;
    }
  }
  return labels;
}

void check_keep_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": " + std::to_string(a) + " entries for " + std::to_string(b) +
                         " positions");
  }
}

}  // namespace

SelectionLabels build_labels(std::span<const int> source, std::span<const int> summary) {
  return align(source, summary);
}

SelectionLabels build_labels(std::span<const std::string> source, std::span<const std::string> summary) {
  return align(source, summary);
}

Tensor selector_forward(const ParamStore& params, const ModelConfig& config, SourceView source, Rng* dropout) {
  const Tensor encoded = encode(params, config, source, dropout);
  const Tensor logits = add_bias(matmul(encoded, params.at("selector.weight")), params.at("selector.bias"));
  return sigmoid(logits).reshape({source.ids.size()});
}

SelectionPrediction prediction_values(const Tensor& probs, std::span<const std::uint8_t> pad_mask) {
  check_keep_length(probs.size(), pad_mask.size(), "prediction_values");
  SelectionPrediction out;
  for (std::size_t i = 0; i < pad_mask.size(); ++i) {
    if (!pad_mask[i]) out.p.push_back(probs.at(i));
  }
  return out;
}

Tensor selector_loss(const Tensor& probs, const SelectionLabels& labels, std::span<const std::uint8_t> pad_mask) {
  check_keep_length(probs.size(), pad_mask.size(), "selector_loss");
  const auto content = static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), 0));
  if (labels.y.size() != content) {
    throw ValidationError("selector_loss: " + std::to_string(labels.y.size()) + " labels for " +
                          std::to_string(content) + " non-pad positions");
  }
  std::vector<double> full(pad_mask.size(), 0.0);
  Mask include(pad_mask.size(), 0);
  for (std::size_t i = 0, k = 0; i < pad_mask.size(); ++i) {
    if (pad_mask[i]) continue;
    full[i] = labels.y[k++];
    include[i] = 1;
  }
  return binary_cross_entropy(probs, full, include);
}

double selection_f1(std::span<const double> p, std::span<const std::uint8_t> y, double threshold) {
  check_keep_length(p.size(), y.size(), "selection_f1");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool predicted = p[i] > threshold;
    if (predicted && y[i]) ++tp;
    if (predicted && !y[i]) ++fp;
    if (!predicted && y[i]) ++fn;
  }
  if (tp == 0) return 0.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

Calibration calibrate_threshold(std::span<const double> p, std::span<const std::uint8_t> y) {
  check_keep_length(p.size(), y.size(), "calibrate_threshold");
  const auto positives = static_cast<std::size_t>(std::count_if(y.begin(), y.end(), [](auto v) { return v != 0; }));
  if (positives == 0 || positives == y.size()) {
    throw CalibrationError("threshold calibration needs both positive and negative labels");
  }
  // Per distinct probability: how many positives and negatives sit at it.
  std::map<double, std::pair<std::size_t, std::size_t>> buckets;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& b = buckets[p[i]];
    (y[i] ? b.first : b.second) += 1;
  }
  if (buckets.size() < 2) throw CalibrationError("threshold calibration needs at least two distinct scores");
  // Sweep thresholds from high to low; everything above the midpoint is predicted positive.
  std::vector<std::pair<double, std::pair<std::size_t, std::size_t>>> sorted(buckets.rbegin(), buckets.rend());
  Calibration best{0.0, -1.0};
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k + 1 < sorted.size(); ++k) {
    tp += sorted[k].second.first;
    fp += sorted[k].second.second;
    const double midpoint = 0.5 * (sorted[k].first + sorted[k + 1].first);
    const std::size_t fn = positives - tp;
    const double f1 = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    if (f1 >= best.f1) best = {midpoint, f1};
  }
  return best;
}

Mask keep_from_prediction(const SelectionPrediction& prediction, std::span<const std::uint8_t> pad_mask) {
  if (!prediction.threshold) throw CalibrationError("selection prediction has no calibrated threshold");
  Mask keep(pad_mask.size(), 0);
  std::size_t k = 0;
  for (std::size_t i = 0; i < pad_mask.size(); ++i) {
    if (pad_mask[i]) continue;
    if (k >= prediction.p.size()) throw DimensionError("keep_from_prediction: too few probabilities");
    keep[i] = prediction.p[k++] > *prediction.threshold ? 1 : 0;
  }
  check_keep_length(prediction.p.size(), k, "keep_from_prediction");
  return keep;
}

Mask keep_from_labels(const SelectionLabels& labels, std::span<const std::uint8_t> pad_mask) {
  Mask keep(pad_mask.size(), 0);
  std::size_t k = 0;
  for (std::size_t i = 0; i < pad_mask.size(); ++i) {
    if (pad_mask[i]) continue;
    if (k >= labels.y.size()) throw DimensionError("keep_from_labels: too few labels");
    keep[i] = labels.y[k++];
  }
  check_keep_length(labels.y.size(), k, "keep_from_labels");
  return keep;
}

std::vector<double> apply_selection_mask(std::span<const double> copy_logits, std::span<const std::uint8_t> keep) {
  check_keep_length(keep.size(), copy_logits.size(), "apply_selection_mask");
  std::vector<double> out(copy_logits.begin(), copy_logits.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!keep[i]) out[i] += kMaskOffset;
  }
  return out;
}

void write_label_dump(const std::string& path, std::span<const SelectionLabels> labels) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write label dump '" + path + "'");
  for (const auto& l : labels) {
    for (std::size_t i = 0; i < l.y.size(); ++i) out << (i ? " " : "") << static_cast<int>(l.y[i]);
    out << '\n';
  }
}

std::vector<SelectionLabels> read_label_dump(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open label dump '" + path + "'");
  std::vector<SelectionLabels> out;
  std::string line;
  while (std::getline(in, line)) {
    SelectionLabels l;
    std::istringstream fields(line);
    std::string v;
    while (fields >> v) {
      if (v != "0" && v != "1") throw FormatError("label dump '" + path + "' holds a non-binary value '" + v + "'");
      l.y.push_back(v == "1" ? 1 : 0);
    }
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace stagesum
