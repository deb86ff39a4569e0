#include "stagesum/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "json.hpp"

#include "stagesum/errors.hpp"

namespace stagesum {

namespace {

constexpr std::size_t kMaxWordChars = 100;

bool is_reserved(const std::string& piece) {
  return std::find(Vocabulary::kReserved.begin(), Vocabulary::kReserved.end(), piece) !=
         Vocabulary::kReserved.end();
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
  if (pieces_.size() < kReserved.size()) {
    throw ConfigError("vocabulary must start with the reserved entries");
  }
  for (std::size_t i = 0; i < kReserved.size(); ++i) {
    if (pieces_[i] != kReserved[i]) {
      throw ConfigError("vocabulary entry " + std::to_string(i) + " must be " + kReserved[i] +
                        ", found '" + pieces_[i] + "'");
    }
  }
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    if (pieces_[i].empty()) throw ConfigError("empty vocabulary entry at line " + std::to_string(i + 1));
    if (!index_.emplace(pieces_[i], static_cast<int>(i)).second) {
      throw ConfigError("duplicate vocabulary entry '" + pieces_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::with_reserved(const std::vector<std::string>& pieces) {
  std::vector<std::string> all(kReserved.begin(), kReserved.end());
  std::unordered_map<std::string, int> seen;
  for (const auto& r : all) seen.emplace(r, 0);
  for (const auto& p : pieces) {
    if (seen.emplace(p, 0).second) all.push_back(p);
  }
  return Vocabulary(std::move(all));
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary file '" + path + "'");
  std::vector<std::string> pieces;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pieces.push_back(line);
  }
  if (pieces.empty()) throw ConfigError("vocabulary file '" + path + "' is empty");
  return Vocabulary(std::move(pieces));
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write vocabulary file '" + path + "'");
  for (const auto& p : pieces_) out << p << '\n';
}

int Vocabulary::id(const std::string& piece) const {
  const auto it = index_.find(piece);
  return it == index_.end() ? -1 : it->second;
}

const std::string& Vocabulary::piece(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(pieces_.size()));
  }
  return pieces_[static_cast<std::size_t>(id)];
}

std::vector<std::string> basic_tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      tokens.emplace_back(1, raw);
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return tokens;
}

std::vector<std::string> wordpiece_tokenize(const std::string& text, const Vocabulary& vocab) {
  if (vocab.empty()) throw ConfigError("wordpiece_tokenize needs a loaded vocabulary");
  std::vector<std::string> out;
  for (const auto& word : basic_tokenize(text)) {
    if (word.size() > kMaxWordChars) {
      out.emplace_back(Vocabulary::kReserved[Vocabulary::kUnk]);
      continue;
    }
    std::vector<std::string> pieces;
    std::size_t start = 0;
    bool ok = true;
    while (start < word.size()) {
      std::size_t end = word.size();
      std::string match;
      while (end > start) {
        std::string candidate = word.substr(start, end - start);
        if (start > 0) candidate = "##" + candidate;
        if (vocab.contains(candidate)) {
          match = std::move(candidate);
          break;
        }
        --end;
      }
      if (match.empty()) {
        ok = false;
        break;
      }
      pieces.push_back(std::move(match));
      start = end;
    }
    if (ok) {
      out.insert(out.end(), pieces.begin(), pieces.end());
    } else {
      out.emplace_back(Vocabulary::kReserved[Vocabulary::kUnk]);
    }
  }
  return out;
}

std::vector<int> pieces_to_ids(std::span<const std::string> pieces, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(pieces.size());
  for (const auto& p : pieces) {
    const int id = vocab.id(p);
    ids.push_back(id < 0 ? Vocabulary::kUnk : id);
  }
  return ids;
}

std::string detokenize(std::span<const std::string> pieces) {
  std::string out;
  for (const auto& p : pieces) {
    if (is_reserved(p) && p != Vocabulary::kReserved[Vocabulary::kUnk]) continue;
    if (p.rfind("##", 0) == 0 && !out.empty()) {
      out += p.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += p;
    }
  }
  return out;
}

std::string detokenize_ids(std::span<const int> ids, const Vocabulary& vocab) {
  std::vector<std::string> pieces;
  for (int id : strip_special(ids)) pieces.push_back(vocab.piece(id));
  return detokenize(pieces);
}

std::vector<int> strip_special(std::span<const int> ids) {
  std::vector<int> out;
  for (int id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id == Vocabulary::kPad || id == Vocabulary::kBos) continue;
    out.push_back(id);
  }
  return out;
}

std::size_t EncodedExample::source_length() const {
  return static_cast<std::size_t>(std::count(source_pad_mask.begin(), source_pad_mask.end(), 0));
}

std::size_t EncodedExample::target_length() const {
  return static_cast<std::size_t>(std::count(target_pad_mask.begin(), target_pad_mask.end(), 0));
}

EncodedExample EncodedExample::trimmed() const {
  EncodedExample out = *this;
  const std::size_t s = std::max<std::size_t>(1, source_length());
  const std::size_t t = std::max<std::size_t>(1, target_length());
  out.source_ids.resize(std::min(s, source_ids.size()));
  out.source_pad_mask.resize(out.source_ids.size());
  out.target_ids.resize(std::min(t, target_ids.size()));
  out.target_pad_mask.resize(out.target_ids.size());
  return out;
}

EncodedExample encode_pair(const std::string& document, const std::string& summary,
                           const Vocabulary& vocab, const SequenceLimits& limits) {
  if (limits.source == 0 || limits.target == 0) throw ConfigError("sequence limits must be positive");
  EncodedExample ex;
  auto source = pieces_to_ids(wordpiece_tokenize(document, vocab), vocab);
  auto target = pieces_to_ids(wordpiece_tokenize(summary, vocab), vocab);
  if (!target.empty()) target.push_back(Vocabulary::kEos);
  ex.source_truncated = source.size() > limits.source;
  ex.target_truncated = target.size() > limits.target;
  source.resize(std::min(source.size(), limits.source));
  target.resize(std::min(target.size(), limits.target));
  ex.source_pad_mask.assign(limits.source, 1);
  ex.target_pad_mask.assign(limits.target, 1);
  std::fill_n(ex.source_pad_mask.begin(), source.size(), 0);
  std::fill_n(ex.target_pad_mask.begin(), target.size(), 0);
  source.resize(limits.source, Vocabulary::kPad);
  target.resize(limits.target, Vocabulary::kPad);
  ex.source_ids = std::move(source);
  ex.target_ids = std::move(target);
  return ex;
}

TruncationReport truncation_report(std::span<const DocumentSummary> corpus, const Vocabulary& vocab,
                                   const SequenceLimits& limits) {
  if (corpus.empty()) throw ReportError("truncation report over an empty corpus");
  TruncationReport report;
  std::size_t inputs = 0, outputs = 0;
  for (const auto& record : corpus) {
    const auto ex = encode_pair(record.document, record.summary, vocab, limits);
    inputs += ex.source_truncated ? 1 : 0;
    outputs += ex.target_truncated ? 1 : 0;
  }
  report.examples = corpus.size();
  report.input_trunc_rate = static_cast<double>(inputs) / static_cast<double>(corpus.size());
  report.output_trunc_rate = static_cast<double>(outputs) / static_cast<double>(corpus.size());
  return report;
}

std::vector<DocumentSummary> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus file '" + path + "'");
  std::vector<DocumentSummary> corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    DocumentSummary record;
    if (line.front() == '{') {
      try {
        const auto j = nlohmann::json::parse(line);
        record.document = j.at("document").get<std::string>();
        record.summary = j.value("summary", std::string{});
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
      }
    } else {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        record.document = line;
      } else {
        if (line.find('\t', tab + 1) != std::string::npos) {
          throw FormatError(path + ":" + std::to_string(line_no) + ": more than one TAB separator");
        }
        record.document = line.substr(0, tab);
        record.summary = line.substr(tab + 1);
      }
    }
    corpus.push_back(std::move(record));
  }
  return corpus;
}

void write_corpus(const std::string& path, std::span<const DocumentSummary> corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write corpus file '" + path + "'");
  for (const auto& record : corpus) {
    out << record.document;
    if (!record.summary.empty()) out << '\t' << record.summary;
    out << '\n';
  }
}

}  // namespace stagesum
