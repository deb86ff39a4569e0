#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "stagesum/tensor.hpp"

namespace stagesum {

/// Ordered word-piece list; the line number in the vocabulary file is the id.
/// The reserved entries occupy ids 0..4 in the order below.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kMask = 4;
  static constexpr std::array<const char*, 5> kReserved = {"[PAD]", "[UNK]", "[BOS]", "[EOS]",
                                                           "[MASK]"};

  Vocabulary() = default;
  /// Validates reserved entries and uniqueness.
  explicit Vocabulary(std::vector<std::string> pieces);
  /// Reserved entries followed by `pieces` (duplicates dropped).
  static Vocabulary with_reserved(const std::vector<std::string>& pieces);

  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  std::size_t size() const { return pieces_.size(); }
  bool empty() const { return pieces_.empty(); }
  /// -1 when absent.
  int id(const std::string& piece) const;
  bool contains(const std::string& piece) const { return id(piece) >= 0; }
  const std::string& piece(int id) const;
  const std::vector<std::string>& pieces() const { return pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercases, splits on whitespace and ASCII punctuation.
std::vector<std::string> basic_tokenize(const std::string& text);

/// Greedy longest-match-first word-piece split of every basic token.
/// Continuation pieces carry "##"; words with no full split become [UNK].
std::vector<std::string> wordpiece_tokenize(const std::string& text, const Vocabulary& vocab);

std::vector<int> pieces_to_ids(std::span<const std::string> pieces, const Vocabulary& vocab);

/// Joins pieces back into text: "##" pieces merge with their predecessor,
/// everything else is separated by one space. Reserved pieces are dropped.
std::string detokenize(std::span<const std::string> pieces);
std::string detokenize_ids(std::span<const int> ids, const Vocabulary& vocab);
/// Ids up to (excluding) the first EOS, with PAD removed.
std::vector<int> strip_special(std::span<const int> ids);

struct SequenceLimits {
  std::size_t source = 128;
  std::size_t target = 64;
};

/// Tokenized, truncated and padded document/summary pair.
struct EncodedExample {
  std::vector<int> source_ids;
  std::vector<int> target_ids;
  Mask source_pad_mask;  // 1 at PAD positions
  Mask target_pad_mask;
  bool source_truncated = false;
  bool target_truncated = false;

  std::size_t source_length() const;
  std::size_t target_length() const;
  /// Copy without trailing padding (at least one position kept per side).
  EncodedExample trimmed() const;
};

/// Tail truncation (the beginning is kept). EOS is appended to a non-empty
/// summary before the target limit is applied.
EncodedExample encode_pair(const std::string& document, const std::string& summary,
                           const Vocabulary& vocab, const SequenceLimits& limits);

struct DocumentSummary {
  std::string document;
  std::string summary;
};

struct TruncationReport {
  double input_trunc_rate = 0.0;
  double output_trunc_rate = 0.0;
  std::size_t examples = 0;
};

TruncationReport truncation_report(std::span<const DocumentSummary> corpus, const Vocabulary& vocab,
                                   const SequenceLimits& limits);

/// Corpus file: one record per line, either "document<TAB>summary" or a JSON
/// object with "document" and "summary" fields.
std::vector<DocumentSummary> read_corpus(const std::string& path);
void write_corpus(const std::string& path, std::span<const DocumentSummary> corpus);

}  // namespace stagesum
