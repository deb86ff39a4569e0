#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stagesum/tokenizer.hpp"

namespace stagesum {

enum class CorpusKind { kGeneric, kShortform, kLongform };

std::string corpus_kind_name(CorpusKind kind);
CorpusKind parse_corpus_kind(const std::string& name);

struct LengthRange {
  std::size_t min = 1;
  std::size_t max = 1;
};

struct CorpusSpec {
  std::size_t vocab_size = 120;  // word types in the lexicon
  std::size_t num_examples = 100;
  LengthRange input_length{8, 24};
  LengthRange output_length{3, 8};
  /// Target rate of summary tokens absent from the document. Salient words
  /// written with a modifier always become their synonym; a small share of
  /// bare ones does too, unpredictably.
  double abstraction = 0.0;
  std::uint64_t seed = 1;
  CorpusKind kind = CorpusKind::kShortform;

  void validate() const;
};

/// Desk defaults for each kind.
CorpusSpec default_corpus_spec(CorpusKind kind);

/// Closed word list shared by every corpus built with the same vocab_size.
struct Lexicon {
  std::vector<std::string> function_words;  // "the", "a", "in", "."
  std::vector<std::string> adjectives;
  std::vector<std::string> adverbs;
  std::vector<std::string> nouns;
  std::vector<std::string> verbs;
  std::vector<std::string> noun_synonyms;  // parallel to nouns; documents of summary corpora never use them
  std::vector<std::string> verb_synonyms;
  std::size_t cue_verbs = 0;  // verbs[0..cue_verbs) mark salient sentences

  std::size_t size() const;
};

/// Throws SpecError when vocab_size cannot hold the synonym table.
Lexicon build_lexicon(std::size_t vocab_size);

/// Reserved pieces followed by every lexicon word.
Vocabulary corpus_vocabulary(std::size_t vocab_size);

/// Generic examples carry an empty summary.
std::vector<DocumentSummary> generate_corpus(const CorpusSpec& spec);

/// Pooled percentage of summary scoring tokens absent from their document.
double corpus_abstraction_rate(const std::vector<DocumentSummary>& corpus);

/// Writes the corpus file and a JSON sidecar `<path>.spec.json`.
void write_generated_corpus(const CorpusSpec& spec, const std::string& path);

std::string corpus_spec_json(const CorpusSpec& spec);
CorpusSpec parse_corpus_spec_json(const std::string& text);

}  // namespace stagesum
