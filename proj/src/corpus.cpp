#include "stagesum/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"
#include "stagesum/errors.hpp"
#include "stagesum/metrics.hpp"
#include "stagesum/random.hpp"

namespace stagesum {

namespace {

constexpr std::uint64_t kLexiconSeed = 0x1E71C0;
constexpr std::size_t kMinVocab = 32;
constexpr int kMaxAttempts = 1000;
constexpr double kGenericModifierRate = 0.3;
// Share of the abstraction rate spent on bare words, which no rule predicts.
constexpr double kFreeShare = 0.1;

struct Sentence {
  std::vector<std::string> words;
  std::size_t subject = 0, verb = 0, object = 0;
  bool subject_modified = false, verb_modified = false, object_modified = false;
  bool cue = false;
};

class Generator {
 public:
  Generator(const CorpusSpec& spec, const Lexicon& lex) : spec_(spec), lex_(lex) {}

  DocumentSummary example(std::size_t index) const {
    Rng rng(derive_seed(spec_.seed, index));
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      DocumentSummary out;
      bool ok = false;
      switch (spec_.kind) {
        case CorpusKind::kGeneric:
          ok = generic(rng, out);
          break;
        case CorpusKind::kShortform:
          ok = shortform(rng, out);
          break;
        case CorpusKind::kLongform:
          ok = longform(rng, out);
          break;
      }
      if (ok) return out;
    }
    throw SpecError("no example fits the requested length ranges after " + std::to_string(kMaxAttempts) +
                    " attempts");
  }

 private:
  /// Each noun and verb slot carries a modifier with probability `modifier_rate`.
  /// Nouns and verbs come from the pools when given, else from the whole lexicon.
  Sentence sentence(Rng& rng, bool cue, double modifier_rate, const std::vector<std::size_t>* noun_pool = nullptr,
                    const std::vector<std::size_t>* verb_pool = nullptr) const {
    Sentence s;
    s.cue = cue;
    const std::size_t regular = lex_.verbs.size() - lex_.cue_verbs;
    auto noun = [&] { return noun_pool ? (*noun_pool)[rng.index(noun_pool->size())] : rng.index(lex_.nouns.size()); };
    if (verb_pool) {
      s.verb = (*verb_pool)[rng.index(verb_pool->size())];
      s.cue = s.verb < lex_.cue_verbs;
    } else {
      s.verb = cue ? rng.index(lex_.cue_verbs) : lex_.cue_verbs + rng.index(regular);
    }
    s.subject = noun();
    s.object = noun();
    auto phrase = [&](std::size_t n, bool& modified) {
      s.words.push_back(lex_.function_words[rng.index(2)]);
      modified = rng.bernoulli(modifier_rate);
      if (modified) s.words.push_back(lex_.adjectives[rng.index(lex_.adjectives.size())]);
      s.words.push_back(lex_.nouns[n]);
    };
    phrase(s.subject, s.subject_modified);
    s.verb_modified = rng.bernoulli(modifier_rate);
    if (s.verb_modified) s.words.push_back(lex_.adverbs[rng.index(lex_.adverbs.size())]);
    s.words.push_back(lex_.verbs[s.verb]);
    phrase(s.object, s.object_modified);
    if (rng.bernoulli(0.25)) {
      s.words.push_back(lex_.function_words[2]);
      s.words.push_back(lex_.function_words[0]);
      if (rng.bernoulli(modifier_rate)) s.words.push_back(lex_.adjectives[rng.index(lex_.adjectives.size())]);
      s.words.push_back(lex_.nouns[noun()]);
    }
    s.words.push_back(lex_.function_words[3]);
    return s;
  }

  /// Modifier rate m and bare-word substitution rate r with m + (1 - m)·r = abstraction.
  double modifier_rate() const {
    return spec_.abstraction * (1.0 - kFreeShare) / (1.0 - kFreeShare * spec_.abstraction);
  }
  double free_rate() const { return kFreeShare * spec_.abstraction; }

  /// A modified word is written as its synonym; a bare one mostly copied.
  std::vector<std::string> compress(Rng& rng, const Sentence& s) const {
    const auto swap = [&](bool modified) { return rng.bernoulli(free_rate()) || modified; };
    const bool subject = swap(s.subject_modified), verb = swap(s.verb_modified), object = swap(s.object_modified);
    return {subject ? lex_.noun_synonyms[s.subject] : lex_.nouns[s.subject],
            verb ? lex_.verb_synonyms[s.verb] : lex_.verbs[s.verb],
            object ? lex_.noun_synonyms[s.object] : lex_.nouns[s.object]};
  }

  bool in_range(std::size_t n, const LengthRange& r) const { return n >= r.min && n <= r.max; }

  static std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
      if (!out.empty()) out += ' ';
      out += w;
    }
    return out;
  }

  /// Sentences appended until a length drawn from the input range is reached.
  std::vector<Sentence> document(Rng& rng, double cue_rate, std::size_t& length) const {
    const std::size_t target = spec_.input_length.min + rng.index(spec_.input_length.max - spec_.input_length.min + 1);
    std::vector<Sentence> doc;
    length = 0;
    while (length < target) {
      Sentence s = sentence(rng, rng.bernoulli(cue_rate), modifier_rate());
      if (length + s.words.size() > spec_.input_length.max) break;
      length += s.words.size();
      doc.push_back(std::move(s));
    }
    return doc;
  }

  static std::string document_text(const std::vector<Sentence>& doc) {
    std::vector<std::string> words;
    for (const auto& s : doc) words.insert(words.end(), s.words.begin(), s.words.end());
    return join(words);
  }

  /// A few entities and actions recur through the sequence, each mention
  /// independently written as the original word or its synonym.
  bool generic(Rng& rng, DocumentSummary& out) const {
    std::vector<std::size_t> nouns, verbs;
    for (int i = 0; i < 3; ++i) nouns.push_back(rng.index(lex_.nouns.size()));
    for (int i = 0; i < 2; ++i) verbs.push_back(rng.index(lex_.verbs.size()));
    const std::size_t target = spec_.input_length.min + rng.index(spec_.input_length.max - spec_.input_length.min + 1);
    std::vector<std::string> words;
    while (words.size() < target) {
      const Sentence s = sentence(rng, false, kGenericModifierRate, &nouns, &verbs);
      if (words.size() + s.words.size() > spec_.input_length.max) break;
      words.insert(words.end(), s.words.begin(), s.words.end());
    }
    if (!in_range(words.size(), spec_.input_length)) return false;
    for (auto& w : words) {
      if (!rng.bernoulli(0.5)) continue;
      const auto n = std::find(lex_.nouns.begin(), lex_.nouns.end(), w);
      if (n != lex_.nouns.end()) {
        w = lex_.noun_synonyms[static_cast<std::size_t>(n - lex_.nouns.begin())];
        continue;
      }
      const auto v = std::find(lex_.verbs.begin(), lex_.verbs.end(), w);
      if (v != lex_.verbs.end()) w = lex_.verb_synonyms[static_cast<std::size_t>(v - lex_.verbs.begin())];
    }
    out.document = join(words);
    return true;
  }

  bool shortform(Rng& rng, DocumentSummary& out) const {
    std::size_t length = 0;
    auto doc = document(rng, 0.5, length);
    if (doc.empty() || !in_range(length, spec_.input_length)) return false;
    const auto first_cue = std::find_if(doc.begin(), doc.end(), [](const Sentence& s) { return s.cue; });
    if (first_cue == doc.end()) return false;
    const auto headline = compress(rng, *first_cue);
    if (!in_range(headline.size(), spec_.output_length)) return false;
    out.document = document_text(doc);
    out.summary = join(headline);
    return true;
  }

  bool longform(Rng& rng, DocumentSummary& out) const {
    std::size_t length = 0;
    auto doc = document(rng, 0.45, length);
    if (doc.empty() || !in_range(length, spec_.input_length)) return false;
    std::vector<std::string> bullets;
    for (const auto& s : doc) {
      if (!s.cue) continue;
      const auto bullet = compress(rng, s);
      bullets.insert(bullets.end(), bullet.begin(), bullet.end());
    }
    if (!in_range(bullets.size(), spec_.output_length)) return false;
    out.document = document_text(doc);
    out.summary = join(bullets);
    return true;
  }

  const CorpusSpec& spec_;
  const Lexicon& lex_;
};

}  // namespace

std::string corpus_kind_name(CorpusKind kind) {
  switch (kind) {
    case CorpusKind::kGeneric:
      return "generic";
    case CorpusKind::kShortform:
      return "shortform";
    case CorpusKind::kLongform:
      return "longform";
  }
  return "generic";
}

CorpusKind parse_corpus_kind(const std::string& name) {
  if (name == "generic") return CorpusKind::kGeneric;
  if (name == "shortform") return CorpusKind::kShortform;
  if (name == "longform") return CorpusKind::kLongform;
  throw SpecError("unknown corpus kind '" + name + "'");
}

void CorpusSpec::validate() const {
  build_lexicon(vocab_size);
  if (num_examples == 0) throw SpecError("num_examples must be positive");
  if (!(abstraction >= 0.0 && abstraction <= 1.0)) throw SpecError("abstraction must lie in [0, 1]");
  if (input_length.min == 0 || input_length.min > input_length.max) throw SpecError("invalid input_length range");
  if (kind != CorpusKind::kGeneric) {
    if (output_length.min == 0 || output_length.min > output_length.max) {
      throw SpecError("invalid output_length range");
    }
    if (output_length.max >= input_length.max) {
      throw SpecError("output_length must be shorter than input_length for summarization corpora");
    }
  }
}

CorpusSpec default_corpus_spec(CorpusKind kind) {
  CorpusSpec spec;
  spec.kind = kind;
  switch (kind) {
    case CorpusKind::kGeneric:
      spec.num_examples = 10000;
      spec.input_length = {16, 64};
      spec.output_length = {0, 0};
      break;
    case CorpusKind::kShortform:
      spec.num_examples = 5000;
      spec.input_length = {5, 12};
      spec.output_length = {3, 8};
      spec.abstraction = 0.5;
      break;
    case CorpusKind::kLongform:
      spec.num_examples = 1000;
      spec.input_length = {40, 64};
      spec.output_length = {6, 30};
      spec.abstraction = 0.15;
      break;
  }
  return spec;
}

std::size_t Lexicon::size() const {
  return function_words.size() + adjectives.size() + adverbs.size() + nouns.size() + verbs.size() + noun_synonyms.size() +
         verb_synonyms.size();
}

Lexicon build_lexicon(std::size_t vocab_size) {
  if (vocab_size < kMinVocab) {
    throw SpecError("vocab_size " + std::to_string(vocab_size) + " cannot hold the synonym table (minimum " +
                    std::to_string(kMinVocab) + ")");
  }
  Lexicon lex;
  lex.function_words = {"the", "a", "in", "."};
  std::size_t adjectives = std::max<std::size_t>(1, vocab_size / 20);
  const std::size_t adverbs = std::max<std::size_t>(1, vocab_size / 20);
  const std::size_t rest = vocab_size - lex.function_words.size() - adjectives - adverbs;
  const std::size_t nouns = rest * 3 / 10;
  const std::size_t verbs = (rest - 2 * nouns) / 2;
  adjectives += rest - 2 * nouns - 2 * verbs;

  // Two-syllable consonant-vowel words in a fixed shuffled order.
  const std::string consonants = "bdfgklmnprstvz";
  const std::string vowels = "aeiou";
  std::vector<std::string> words;
  for (char c1 : consonants) {
    for (char v1 : vowels) {
      for (char c2 : consonants) {
        for (char v2 : vowels) words.push_back(std::string{c1, v1, c2, v2});
      }
    }
  }
  Rng rng(kLexiconSeed);
  rng.shuffle(words);
  std::size_t next = 0;
  auto take = [&](std::size_t n) {
    std::vector<std::string> out(words.begin() + static_cast<std::ptrdiff_t>(next),
                                 words.begin() + static_cast<std::ptrdiff_t>(next + n));
    next += n;
    return out;
  };
  lex.adjectives = take(adjectives);
  lex.adverbs = take(adverbs);
  lex.nouns = take(nouns);
  lex.noun_synonyms = take(nouns);
  lex.verbs = take(verbs);
  lex.verb_synonyms = take(verbs);
  lex.cue_verbs = std::max<std::size_t>(1, verbs / 4);
  return lex;
}

Vocabulary corpus_vocabulary(std::size_t vocab_size) {
  const Lexicon lex = build_lexicon(vocab_size);
  std::vector<std::string> pieces;
  for (const auto* group : {&lex.function_words, &lex.adjectives, &lex.adverbs, &lex.nouns, &lex.noun_synonyms, &lex.verbs,
                            &lex.verb_synonyms}) {
    pieces.insert(pieces.end(), group->begin(), group->end());
  }
  return Vocabulary::with_reserved(pieces);
}

std::vector<DocumentSummary> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const Lexicon lex = build_lexicon(spec.vocab_size);
  const Generator gen(spec, lex);
  std::vector<DocumentSummary> out;
  out.reserve(spec.num_examples);
  for (std::size_t i = 0; i < spec.num_examples; ++i) out.push_back(gen.example(i));
  return out;
}

double corpus_abstraction_rate(const std::vector<DocumentSummary>& corpus) {
  std::size_t total = 0, novel = 0;
  for (const auto& ex : corpus) {
    const auto source = rouge_tokens(ex.document);
    const std::set<std::string> present(source.begin(), source.end());
    for (const auto& t : rouge_tokens(ex.summary)) {
      ++total;
      if (!present.count(t)) ++novel;
    }
  }
  if (total == 0) throw MetricError("corpus has no summary tokens");
  return 100.0 * static_cast<double>(novel) / static_cast<double>(total);
}

std::string corpus_spec_json(const CorpusSpec& spec) {
  nlohmann::json j = {
      {"kind", corpus_kind_name(spec.kind)},
      {"vocab_size", spec.vocab_size},
      {"num_examples", spec.num_examples},
      {"input_length", {spec.input_length.min, spec.input_length.max}},
      {"output_length", {spec.output_length.min, spec.output_length.max}},
      {"abstraction", spec.abstraction},
      {"seed", spec.seed},
  };
  return j.dump(2);
}

CorpusSpec parse_corpus_spec_json(const std::string& text) {
  CorpusSpec spec;
  try {
    const auto j = nlohmann::json::parse(text);
    spec.kind = parse_corpus_kind(j.at("kind").get<std::string>());
    spec = [&] {
      CorpusSpec base = default_corpus_spec(spec.kind);
      base.vocab_size = j.value("vocab_size", base.vocab_size);
      base.num_examples = j.value("num_examples", base.num_examples);
      if (j.contains("input_length")) base.input_length = {j["input_length"].at(0), j["input_length"].at(1)};
      if (j.contains("output_length")) base.output_length = {j["output_length"].at(0), j["output_length"].at(1)};
      base.abstraction = j.value("abstraction", base.abstraction);
      base.seed = j.value("seed", base.seed);
      return base;
    }();
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("invalid corpus spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

void write_generated_corpus(const CorpusSpec& spec, const std::string& path) {
  const auto corpus = generate_corpus(spec);
  write_corpus(path, corpus);
  nlohmann::json sidecar = nlohmann::json::parse(corpus_spec_json(spec));
  if (spec.kind != CorpusKind::kGeneric) sidecar["measured_abstraction_rate"] = corpus_abstraction_rate(corpus);
  std::ofstream out(path + ".spec.json");
  if (!out) throw FormatError("cannot write corpus spec record '" + path + ".spec.json'");
  out << sidecar.dump(2) << '\n';
}

}  // namespace stagesum
