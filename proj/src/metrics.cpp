#include "stagesum/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "stagesum/errors.hpp"

namespace stagesum {

namespace {

std::map<std::vector<std::string>, std::size_t> ngram_counts(std::span<const std::string> tokens, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

Prf make_prf(double precision, double recall) {
  Prf out{precision, recall, 0.0};
  if (precision > 0.0 && recall > 0.0) out.f1 = 2.0 * precision * recall / (precision + recall);
  return out;
}

Prf rouge_n(std::span<const std::string> reference, std::span<const std::string> hypothesis, std::size_t n) {
  if (n == 0) throw MetricError("rouge_n needs n >= 1");
  const auto ref = ngram_counts(reference, n);
  const auto hyp = ngram_counts(hypothesis, n);
  std::size_t overlap = 0, ref_total = 0, hyp_total = 0;
  for (const auto& [gram, c] : ref) ref_total += c;
  for (const auto& [gram, c] : hyp) {
    hyp_total += c;
    const auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return make_prf(ratio(overlap, hyp_total), ratio(overlap, ref_total));
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

Prf rouge_l(std::span<const std::string> reference, std::span<const std::string> hypothesis) {
  const std::size_t lcs = lcs_length(reference, hypothesis);
  return make_prf(ratio(lcs, hypothesis.size()), ratio(lcs, reference.size()));
}

std::vector<std::string> rouge_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream words(text);
  std::string word;
  while (words >> word) {
    std::string clean;
    for (char c : word) {
      const auto u = static_cast<unsigned char>(c);
      if (!std::ispunct(u)) clean.push_back(static_cast<char>(std::tolower(u)));
    }
    if (!clean.empty()) out.push_back(std::move(clean));
  }
  return out;
}

RougeReport corpus_rouge(std::span<const std::string> references, std::span<const std::string> hypotheses) {
  if (references.size() != hypotheses.size()) {
    throw MetricError("corpus_rouge: " + std::to_string(references.size()) + " references vs " +
                      std::to_string(hypotheses.size()) + " hypotheses");
  }
  if (references.empty()) throw MetricError("corpus_rouge: empty corpus");
  RougeReport report;
  Prf sum1, sum2, sumL;
  auto accumulate = [](Prf& total, const Prf& x) {
    total.precision += x.precision;
    total.recall += x.recall;
    total.f1 += x.f1;
  };
  for (std::size_t i = 0; i < references.size(); ++i) {
    const auto ref = rouge_tokens(references[i]);
    const auto hyp = rouge_tokens(hypotheses[i]);
    accumulate(sum1, rouge_n(ref, hyp, 1));
    accumulate(sum2, rouge_n(ref, hyp, 2));
    const auto l = rouge_l(ref, hyp);
    accumulate(sumL, l);
    report.per_example_l.push_back(l);
  }
  const double n = static_cast<double>(references.size());
  auto mean = [n](const Prf& total) { return Prf{total.precision / n, total.recall / n, total.f1 / n}; };
  report.rouge1 = mean(sum1);
  report.rouge2 = mean(sum2);
  report.rougeL = mean(sumL);
  return report;
}

double abstraction_rate(std::span<const std::string> source, std::span<const std::string> summary) {
  if (summary.empty()) throw MetricError("abstraction_rate: empty summary");
  const std::unordered_set<std::string> present(source.begin(), source.end());
  const auto novel = std::count_if(summary.begin(), summary.end(),
                                   [&](const std::string& t) { return present.count(t) == 0; });
  return 100.0 * static_cast<double>(novel) / static_cast<double>(summary.size());
}

AucReport auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw MetricError("auc: scores and labels differ in length");
  const auto positives =
      static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw MetricError("auc: both label classes are required");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  AucReport report;
  double positive_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) positive_rank_sum += midrank;
    }
    i = j;
  }
  const double np = static_cast<double>(positives), nn = static_cast<double>(negatives);
  report.auc_roc = (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);

  // Descending thresholds; each distinct score admits all its tied items at once.
  std::size_t tp = 0, fp = 0;
  double previous_recall = 0.0;
  for (std::size_t i = order.size(); i > 0;) {
    std::size_t j = i;
    while (j > 0 && scores[order[j - 1]] == scores[order[i - 1]]) {
      (labels[order[j - 1]] ? tp : fp) += 1;
      --j;
    }
    const double recall = static_cast<double>(tp) / np;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    report.auc_pr += (recall - previous_recall) * precision;
    previous_recall = recall;
    i = j;
  }
  return report;
}

void CoverageCounts::add(std::span<const std::uint8_t> selected_flags, std::span<const std::string> source,
                         std::span<const std::string> summary_pieces) {
  if (selected_flags.size() != source.size()) {
    throw MetricError("coverage: " + std::to_string(selected_flags.size()) + " flags for " +
                      std::to_string(source.size()) + " source pieces");
  }
  const std::unordered_set<std::string> in_summary(summary_pieces.begin(), summary_pieces.end());
  std::unordered_set<std::string> chosen;
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!selected_flags[i]) continue;
    ++selected;
    chosen.insert(source[i]);
    if (in_summary.count(source[i])) ++selected_hits;
  }
  for (const auto& piece : summary_pieces) {
    ++summary;
    if (chosen.count(piece)) ++summary_hits;
  }
}

Prf CoverageCounts::prf() const { return make_prf(ratio(selected_hits, selected), ratio(summary_hits, summary)); }

Prf coverage_prf(std::span<const std::uint8_t> selected, std::span<const std::string> source,
                 std::span<const std::string> summary) {
  CoverageCounts counts;
  counts.add(selected, source, summary);
  return counts.prf();
}

double pearson_r(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw MetricError("pearson_r needs two equal series of length >= 2");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw MetricError("pearson_r: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

std::string format_report(const std::map<std::string, double>& values) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (const auto& [key, value] : values) out << key << ' ' << value << '\n';
  return out.str();
}

std::map<std::string, double> parse_report(const std::string& text) {
  std::map<std::string, double> out;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string key;
    double value = 0.0;
    if (!(fields >> key >> value)) throw ReportError("malformed report line '" + line + "'");
    out[key] = value;
  }
  return out;
}

}  // namespace stagesum
