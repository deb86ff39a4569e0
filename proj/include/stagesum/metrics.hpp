#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace stagesum {

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Harmonic mean; 0 when either component is 0.
Prf make_prf(double precision, double recall);

Prf rouge_n(std::span<const std::string> reference, std::span<const std::string> hypothesis, std::size_t n);
Prf rouge_l(std::span<const std::string> reference, std::span<const std::string> hypothesis);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Scoring tokens: lowercased whitespace tokens with ASCII punctuation
/// removed; tokens that become empty are dropped.
std::vector<std::string> rouge_tokens(const std::string& text);

struct RougeReport {
  Prf rouge1, rouge2, rougeL;
  std::vector<Prf> per_example_l;
};

/// Corpus means of per-example scores over detokenized text.
RougeReport corpus_rouge(std::span<const std::string> references, std::span<const std::string> hypotheses);

/// Percentage of summary tokens that never occur in the source.
double abstraction_rate(std::span<const std::string> source, std::span<const std::string> summary);

struct AucReport {
  double auc_roc = 0.0;
  double auc_pr = 0.0;
};

/// ROC area from the Mann–Whitney statistic with midranks for ties; PR area
/// as the step sum of precision × recall increments over distinct thresholds.
AucReport auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Word-piece coverage of a selection. Precision: share of selected source
/// positions whose piece occurs in the summary. Recall: share of summary
/// positions whose piece occurs among the selected source pieces.
Prf coverage_prf(std::span<const std::uint8_t> selected, std::span<const std::string> source,
                 std::span<const std::string> summary);

struct CoverageCounts {
  std::size_t selected = 0, selected_hits = 0;
  std::size_t summary = 0, summary_hits = 0;
  void add(std::span<const std::uint8_t> selected, std::span<const std::string> source,
           std::span<const std::string> summary);
  Prf prf() const;
};

double pearson_r(std::span<const double> xs, std::span<const double> ys);

/// "key value" lines in key order, values printed with 17 significant digits.
std::string format_report(const std::map<std::string, double>& values);
std::map<std::string, double> parse_report(const std::string& text);

}  // namespace stagesum
