#include "stagesum/harness.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <set>
#include <sstream>

#include "json.hpp"
#include "stagesum/errors.hpp"
#include "stagesum/metrics.hpp"
#include "stagesum/selection.hpp"

namespace stagesum {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCheckpointFile = "best.ckpt";
constexpr const char* kTrainReportFile = "train_report.txt";
constexpr const char* kSurgeryReportFile = "surgery_report.txt";
constexpr const char* kSelectionReportFile = "selection_report.txt";
constexpr const char* kMetricsFile = "metrics.txt";
constexpr const char* kConfigFile = "config.json";

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read '" + path + "'");
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << text;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read '" + path + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + '\n';
  write_text(path, text);
}

std::string join_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

std::string source_kind_name(SourceKind kind) {
  switch (kind) {
    case SourceKind::kRandom:
      return "random";
    case SourceKind::kCheckpoint:
      return "checkpoint";
    case SourceKind::kSymmetric:
      return "symmetric";
  }
  return "random";
}

SourceKind parse_source_kind(const std::string& name) {
  if (name == "random") return SourceKind::kRandom;
  if (name == "checkpoint") return SourceKind::kCheckpoint;
  if (name == "symmetric") return SourceKind::kSymmetric;
  throw ConfigError("unknown init source '" + name + "'");
}

json corpus_entry_json(const CorpusEntry& e) {
  json j = json::parse(corpus_spec_json(e.spec));
  j.erase("vocab_size");
  j["dev_examples"] = e.dev_examples;
  if (!e.path.empty()) j["path"] = e.path;
  return j;
}

CorpusEntry parse_corpus_entry(const json& j, std::size_t vocab_size, const std::string& name) {
  check_keys(j, {"kind", "num_examples", "input_length", "output_length", "abstraction", "seed", "dev_examples", "path"},
             "corpus '" + name + "'");
  CorpusEntry e;
  json spec = j;
  spec.erase("dev_examples");
  spec.erase("path");
  spec["vocab_size"] = vocab_size;
  e.spec = parse_corpus_spec_json(spec.dump());
  e.dev_examples = j.value("dev_examples", std::size_t{0});
  e.path = j.value("path", std::string{});
  return e;
}

json data_json(const DataConfig& d) {
  json corpora = json::object();
  for (const auto& [name, entry] : d.corpora) corpora[name] = corpus_entry_json(entry);
  json j = {{"dir", d.dir}, {"vocab_size", d.vocab_size}, {"corpora", corpora}};
  if (!d.vocab_file.empty()) j["vocab_file"] = d.vocab_file;
  return j;
}

DataConfig parse_data(const json& j) {
  check_keys(j, {"dir", "vocab_size", "vocab_file", "corpora"}, "data");
  DataConfig d;
  d.dir = j.value("dir", d.dir);
  d.vocab_size = j.value("vocab_size", d.vocab_size);
  d.vocab_file = j.value("vocab_file", std::string{});
  if (j.contains("corpora")) {
    for (const auto& [name, entry] : j.at("corpora").items()) {
      d.corpora[name] = parse_corpus_entry(entry, d.vocab_size, name);
    }
  }
  return d;
}

json component_json(const ComponentConfig& c) {
  json j = {{"kind", source_kind_name(c.kind)}};
  if (!c.checkpoint.empty()) j["checkpoint"] = c.checkpoint;
  return j;
}

ComponentConfig parse_component(const json& j, const std::string& where) {
  check_keys(j, {"kind", "checkpoint"}, where);
  ComponentConfig c;
  c.kind = parse_source_kind(j.value("kind", std::string{"random"}));
  c.checkpoint = j.value("checkpoint", std::string{});
  return c;
}

ModelConfig run_model(const RunConfig& config, const Vocabulary& vocab) {
  ModelConfig m = config.model;
  m.vocab_size = vocab.size();
  m.dropout_rate = config.train.dropout;
  m.validate();
  return m;
}

TrainConfig run_train(const RunConfig& config) {
  TrainConfig t = config.train;
  t.seed = config.seed;
  t.kind = config.stage;
  return t;
}

std::string output_dir(const RunConfig& config) { return resolve_output_path(config.output_dir); }

void begin_run(const RunConfig& config) {
  config.validate();
  write_text(join_path(output_dir(config), kConfigFile), run_config_json(config) + "\n");
}

void require_stage(const RunConfig& config, StageKind kind, const std::string& command) {
  if (config.stage != kind) {
    throw ConfigError(command + " needs stage '" + stage_kind_name(kind) + "', config has '" +
                      stage_kind_name(config.stage) + "'");
  }
}

/// Applies the init section; source stores are loaded once per path.
SurgeryResult build_init(const RunConfig& config, const ModelConfig& model, StoreLayout layout) {
  std::map<std::string, ParamStore> stores;
  auto source = [&](const ComponentConfig& c) {
    ComponentSource s;
    s.kind = c.kind;
    if (c.kind == SourceKind::kRandom) return s;
    if (c.checkpoint.empty()) throw ConfigError("init source '" + source_kind_name(c.kind) + "' needs a checkpoint");
    const std::string path = resolve_output_path(c.checkpoint);
    if (!stores.count(path)) stores.emplace(path, load_checkpoint(path));
    s.store = &stores.at(path);
    s.label = c.checkpoint;
    return s;
  };
  InitScheme scheme;
  scheme.encoder = source(config.init.encoder);
  scheme.decoder = source(config.init.decoder);
  scheme.layers_to_load = config.init.layers_to_load;
  return apply_scheme(scheme, model, layout, config.seed);
}

void finish_training(const RunConfig& config, TrainResult& result, const SurgeryResult& init) {
  const std::string dir = output_dir(config);
  result.report.best_checkpoint = kCheckpointFile;
  save_checkpoint(result.best, join_path(dir, kCheckpointFile));
  write_text(join_path(dir, kTrainReportFile), train_report_text(result.report));
  write_text(join_path(dir, kSurgeryReportFile), surgery_report_text(init.report));
}

std::vector<std::vector<int>> document_ids(std::span<const DocumentSummary> corpus, const Vocabulary& vocab,
                                           std::size_t limit) {
  std::vector<std::vector<int>> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus) {
    auto ids = pieces_to_ids(wordpiece_tokenize(ex.document, vocab), vocab);
    if (ids.size() > limit) ids.resize(limit);
    if (ids.empty()) throw ValidationError("empty document in denoising corpus");
    out.push_back(std::move(ids));
  }
  return out;
}

std::vector<std::string> pieces_of(std::span<const int> ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (int id : ids) out.push_back(vocab.piece(id));
  return out;
}

std::vector<int> content_ids(const EncodedExample& enc) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < enc.source_ids.size(); ++i) {
    if (!enc.source_pad_mask[i]) ids.push_back(enc.source_ids[i]);
  }
  return ids;
}

/// Checkpoint directory whose train report describes the decoded model.
std::string model_dir(const RunConfig& config) {
  if (config.decode.checkpoint.empty()) return output_dir(config);
  return fs::path(resolve_output_path(config.decode.checkpoint)).parent_path().string();
}

std::optional<std::size_t> read_best_epoch(const std::string& dir) {
  const std::string path = join_path(dir, kTrainReportFile);
  if (!fs::exists(path)) return std::nullopt;
  return parse_train_report(read_text(path)).best_epoch;
}

double sample_stdev(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

void substitute(json& j, const std::string& key, const std::string& value) {
  if (j.is_string()) {
    std::string s = j.get<std::string>();
    for (std::size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size())) {
      s.replace(pos, key.size(), value);
    }
    j = s;
  } else if (j.is_structured()) {
    for (auto& child : j) substitute(child, key, value);
  }
}

}  // namespace

std::string resolve_output_path(const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  const char* root = std::getenv(kOutputRootEnv);
  if (root == nullptr || *root == '\0') return path;
  return join_path(root, path);
}

std::string selection_mode_name(SelectionMode mode) {
  switch (mode) {
    case SelectionMode::kNone:
      return "none";
    case SelectionMode::kPredicted:
      return "predicted";
    case SelectionMode::kOracle:
      return "oracle";
  }
  return "none";
}

SelectionMode parse_selection_mode(const std::string& name) {
  if (name == "none") return SelectionMode::kNone;
  if (name == "predicted") return SelectionMode::kPredicted;
  if (name == "oracle") return SelectionMode::kOracle;
  throw ConfigError("unknown selection mode '" + name + "'");
}

void RunConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("output_dir must be set");
  if (corpus.empty()) throw ConfigError("corpus must name an entry of the data section");
  if (!data.corpora.count(corpus)) throw ConfigError("corpus '" + corpus + "' is not in the data section");
  train.validate();
  if (limits.source == 0 || limits.source > model.encoder_positions) {
    throw ConfigError("limits.source must lie in [1, encoder_positions]");
  }
  if (limits.target == 0 || limits.target > model.decoder_positions) {
    throw ConfigError("limits.target must lie in [1, decoder_positions]");
  }
  if (decode.settings.beam_width == 0) throw ConfigError("decode.beam_width must be positive");
  if (selection.mode == SelectionMode::kPredicted && selection.selector.empty()) {
    throw ConfigError("predicted selection needs selection.selector");
  }
  if (init.layers_to_load && *init.layers_to_load > 2 * model.num_layers) {
    throw ConfigError("layers_to_load must lie in [0, 2·num_layers]");
  }
}

std::string run_config_json(const RunConfig& c) {
  json init = {{"encoder", component_json(c.init.encoder)}, {"decoder", component_json(c.init.decoder)}};
  init["layers_to_load"] = c.init.layers_to_load ? json(*c.init.layers_to_load) : json(nullptr);
  json decode = {{"beam_width", c.decode.settings.beam_width},
                 {"alpha", c.decode.settings.alpha},
                 {"max_len", c.decode.settings.max_len}};
  if (!c.decode.checkpoint.empty()) decode["checkpoint"] = c.decode.checkpoint;
  json selection = {{"mode", selection_mode_name(c.selection.mode)}};
  if (!c.selection.selector.empty()) selection["selector"] = c.selection.selector;
  json j = {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"stage", stage_kind_name(c.stage)},
      {"corpus", c.corpus},
      {"model",
       {{"num_layers", c.model.num_layers},
        {"hidden_size", c.model.hidden_size},
        {"num_heads", c.model.num_heads},
        {"ffn_size", c.model.ffn_size},
        {"encoder_positions", c.model.encoder_positions},
        {"decoder_positions", c.model.decoder_positions},
        {"copy_enabled", c.model.copy_enabled},
        {"copy_head_index", c.model.copy_head_index}}},
      {"data", data_json(c.data)},
      {"init", init},
      {"train",
       {{"lr", c.train.lr},
        {"dropout", c.train.dropout},
        {"batch_size", c.train.batch_size},
        {"max_epochs", c.train.max_epochs},
        {"eval_every", c.train.eval_every}}},
      {"decode", decode},
      {"limits", {{"source", c.limits.source}, {"target", c.limits.target}}},
      {"selection", selection},
  };
  return j.dump(2);
}

RunConfig parse_run_config(const std::string& text, const std::string& base_dir) {
  RunConfig c;
  try {
    json j = json::parse(text);
    if (j.contains("seed")) substitute(j, "{seed}", std::to_string(j.at("seed").get<std::uint64_t>()));
    if (j.contains("init") && j["init"].contains("layers_to_load") && !j["init"]["layers_to_load"].is_null()) {
      substitute(j, "{k}", std::to_string(j["init"]["layers_to_load"].get<std::size_t>()));
    }
    check_keys(j, {"seed", "output_dir", "stage", "corpus", "model", "data", "init", "train", "decode", "limits",
                   "selection"},
               "run config");
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.stage = parse_stage_kind(j.value("stage", std::string{"summarize"}));
    c.corpus = j.value("corpus", std::string{});
    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m, {"num_layers", "hidden_size", "num_heads", "ffn_size", "encoder_positions", "decoder_positions",
                     "copy_enabled", "copy_head_index"},
                 "model");
      c.model.num_layers = m.value("num_layers", c.model.num_layers);
      c.model.hidden_size = m.value("hidden_size", c.model.hidden_size);
      c.model.num_heads = m.value("num_heads", c.model.num_heads);
      c.model.ffn_size = m.value("ffn_size", c.model.ffn_size);
      c.model.encoder_positions = m.value("encoder_positions", c.model.encoder_positions);
      c.model.decoder_positions = m.value("decoder_positions", c.model.decoder_positions);
      c.model.copy_enabled = m.value("copy_enabled", c.model.copy_enabled);
      c.model.copy_head_index = m.value("copy_head_index", c.model.copy_head_index);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      if (d.is_string()) {
        const std::string path = join_path(base_dir, d.get<std::string>());
        c.data = parse_data(json::parse(read_text(path)));
      } else {
        c.data = parse_data(d);
      }
    }
    if (j.contains("init")) {
      const auto& i = j.at("init");
      check_keys(i, {"encoder", "decoder", "layers_to_load"}, "init");
      if (i.contains("encoder")) c.init.encoder = parse_component(i.at("encoder"), "init.encoder");
      if (i.contains("decoder")) c.init.decoder = parse_component(i.at("decoder"), "init.decoder");
      if (i.contains("layers_to_load") && !i.at("layers_to_load").is_null()) {
        c.init.layers_to_load = i.at("layers_to_load").get<std::size_t>();
      }
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, {"lr", "dropout", "batch_size", "max_epochs", "eval_every"}, "train");
      c.train.lr = t.value("lr", c.train.lr);
      c.train.dropout = t.value("dropout", c.train.dropout);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
      c.train.eval_every = t.value("eval_every", c.train.eval_every);
    }
    if (j.contains("decode")) {
      const auto& d = j.at("decode");
      check_keys(d, {"beam_width", "alpha", "max_len", "checkpoint"}, "decode");
      c.decode.settings.beam_width = d.value("beam_width", c.decode.settings.beam_width);
      c.decode.settings.alpha = d.value("alpha", c.decode.settings.alpha);
      c.decode.settings.max_len = d.value("max_len", c.decode.settings.max_len);
      c.decode.checkpoint = d.value("checkpoint", std::string{});
    }
    if (j.contains("limits")) {
      const auto& l = j.at("limits");
      check_keys(l, {"source", "target"}, "limits");
      c.limits.source = l.value("source", c.limits.source);
      c.limits.target = l.value("target", c.limits.target);
    }
    if (j.contains("selection")) {
      const auto& s = j.at("selection");
      check_keys(s, {"mode", "selector"}, "selection");
      c.selection.mode = parse_selection_mode(s.value("mode", std::string{"none"}));
      c.selection.selector = s.value("selector", std::string{});
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_text(path), fs::path(path).parent_path().string());
}

Vocabulary run_vocabulary(const RunConfig& config) {
  if (!config.data.vocab_file.empty()) return Vocabulary::load(resolve_output_path(config.data.vocab_file));
  return corpus_vocabulary(config.data.vocab_size);
}

CorpusSplit load_split(const RunConfig& config, const std::string& name) {
  const auto it = config.data.corpora.find(name);
  if (it == config.data.corpora.end()) throw ConfigError("corpus '" + name + "' is not in the data section");
  const CorpusEntry& entry = it->second;
  const std::string path =
      resolve_output_path(entry.path.empty() ? join_path(config.data.dir, name + ".txt") : entry.path);
  if (!fs::exists(path)) throw FormatError("corpus file '" + path + "' is missing; run generate first");
  auto all = read_corpus(path);
  if (entry.dev_examples == 0 || entry.dev_examples >= all.size()) {
    throw ConfigError("corpus '" + name + "' has " + std::to_string(all.size()) + " examples, cannot hold " +
                      std::to_string(entry.dev_examples) + " dev examples and a training set");
  }
  CorpusSplit split;
  const auto cut = all.begin() + static_cast<std::ptrdiff_t>(all.size() - entry.dev_examples);
  split.train.assign(all.begin(), cut);
  split.dev.assign(cut, all.end());
  return split;
}

void cmd_generate(const RunConfig& config) {
  for (const auto& [name, entry] : config.data.corpora) {
    if (!entry.path.empty()) continue;
    const std::string path = resolve_output_path(join_path(config.data.dir, name + ".txt"));
    fs::create_directories(fs::path(path).parent_path());
    write_generated_corpus(entry.spec, path);
  }
}

void cmd_pretrain(const RunConfig& config) {
  require_stage(config, StageKind::kDenoise, "pretrain");
  begin_run(config);
  const Vocabulary vocab = run_vocabulary(config);
  const ModelConfig model = run_model(config, vocab);
  const CorpusSplit split = load_split(config, config.corpus);
  const auto train = document_ids(split.train, vocab, config.limits.source);
  const auto dev = document_ids(split.dev, vocab, config.limits.source);
  const SurgeryResult init = build_init(config, model, StoreLayout::kDenoiser);
  TrainResult result = denoise_pretrain(init.params, model, run_train(config), train, dev);
  finish_training(config, result, init);
  write_text(join_path(output_dir(config), kMetricsFile),
             format_report({{"best_dev_metric", result.report.best_metric},
                            {"best_epoch", static_cast<double>(result.report.best_epoch)}}));
}

void cmd_train(const RunConfig& config) {
  require_stage(config, StageKind::kSummarize, "train");
  begin_run(config);
  const Vocabulary vocab = run_vocabulary(config);
  const ModelConfig model = run_model(config, vocab);
  const CorpusSplit split = load_split(config, config.corpus);
  const auto train = encode_summaries(split.train, vocab, config.limits);
  const auto dev = encode_summaries(split.dev, vocab, config.limits);
  const SurgeryResult init = build_init(config, model, StoreLayout::kSummarizer);
  TrainResult result = train_summarizer(init.params, model, run_train(config), train, dev, vocab,
                                        config.decode.settings);
  finish_training(config, result, init);
}

void cmd_select_train(const RunConfig& config) {
  require_stage(config, StageKind::kSelect, "select-train");
  begin_run(config);
  const Vocabulary vocab = run_vocabulary(config);
  const ModelConfig model = run_model(config, vocab);
  const CorpusSplit split = load_split(config, config.corpus);
  const auto train_summaries = encode_summaries(split.train, vocab, config.limits);
  const auto dev_summaries = encode_summaries(split.dev, vocab, config.limits);
  const auto train = selector_examples(train_summaries);
  const auto dev = selector_examples(dev_summaries);
  const SurgeryResult init = build_init(config, model, StoreLayout::kSelector);
  TrainResult result = train_selector(init.params, model, run_train(config), train, dev);
  finish_training(config, result, init);

  const PooledPredictions pooled = pool_predictions(result.best, model, dev);
  const Calibration cal = calibrate_threshold(pooled.p, pooled.y);
  const AucReport areas = auc(pooled.p, pooled.y);
  CoverageCounts predicted, oracle;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < dev.size(); ++i) {
    const auto source = pieces_of(dev[i].source_ids, vocab);
    const auto summary = pieces_of(strip_special(dev_summaries[i].encoded.target_ids), vocab);
    Mask selected(source.size());
    for (std::size_t j = 0; j < source.size(); ++j) selected[j] = pooled.p[offset + j] > cal.threshold ? 1 : 0;
    offset += source.size();
    predicted.add(selected, source, summary);
    oracle.add(dev[i].labels.y, source, summary);
  }
  const Prf pc = predicted.prf(), oc = oracle.prf();
  write_text(join_path(output_dir(config), kSelectionReportFile),
             format_report({{"threshold", cal.threshold},
                            {"f1", cal.f1},
                            {"auc_roc", areas.auc_roc},
                            {"auc_pr", areas.auc_pr},
                            {"coverage_precision", pc.precision},
                            {"coverage_recall", pc.recall},
                            {"oracle_precision", oc.precision},
                            {"oracle_recall", oc.recall}}));
  write_text(join_path(output_dir(config), kMetricsFile),
             format_report({{"threshold", cal.threshold},
                            {"f1", cal.f1},
                            {"auc_roc", areas.auc_roc},
                            {"best_epoch", static_cast<double>(result.report.best_epoch)}}));
}

void cmd_decode(const RunConfig& config) {
  require_stage(config, StageKind::kSummarize, "decode");
  config.validate();
  const Vocabulary vocab = run_vocabulary(config);
  const ModelConfig model = run_model(config, vocab);
  const std::string dir = output_dir(config);
  const std::string ckpt = config.decode.checkpoint.empty() ? join_path(dir, kCheckpointFile)
                                                            : resolve_output_path(config.decode.checkpoint);
  const ParamStore params = load_checkpoint(ckpt);
  check_compatible(params, model, StoreLayout::kSummarizer);
  const CorpusSplit split = load_split(config, config.corpus);
  const auto dev = encode_summaries(split.dev, vocab, config.limits);

  std::vector<Mask> keeps;
  if (config.selection.mode == SelectionMode::kOracle) {
    for (const auto& ex : dev) {
      const auto labels = build_labels(std::span<const int>(content_ids(ex.encoded)),
                                       std::span<const int>(strip_special(ex.encoded.target_ids)));
      keeps.push_back(keep_from_labels(labels, ex.encoded.source_pad_mask));
    }
  } else if (config.selection.mode == SelectionMode::kPredicted) {
    const std::string sel_dir = resolve_output_path(config.selection.selector);
    const RunConfig sel_config = load_run_config(join_path(sel_dir, kConfigFile));
    const ModelConfig sel_model = run_model(sel_config, vocab);
    const ParamStore sel_params = load_checkpoint(join_path(sel_dir, kCheckpointFile));
    check_compatible(sel_params, sel_model, StoreLayout::kSelector);
    const auto report = parse_report(read_text(join_path(sel_dir, kSelectionReportFile)));
    const auto threshold = report.find("threshold");
    if (threshold == report.end()) throw FormatError("selection report in '" + sel_dir + "' has no threshold");
    NoGradGuard guard;
    for (const auto& ex : dev) {
      const SourceView source{ex.encoded.source_ids, ex.encoded.source_pad_mask};
      SelectionPrediction pred = prediction_values(selector_forward(sel_params, sel_model, source),
                                                   ex.encoded.source_pad_mask);
      pred.threshold = threshold->second;
      keeps.push_back(keep_from_prediction(pred, ex.encoded.source_pad_mask));
    }
  }
  const auto decoded = decode_corpus(params, model, dev, config.decode.settings, keeps);
  std::vector<std::string> hyps, refs, srcs;
  for (std::size_t i = 0; i < dev.size(); ++i) {
    hyps.push_back(detokenize_ids(decoded[i], vocab));
    refs.push_back(dev[i].reference);
    srcs.push_back(split.dev[i].document);
  }
  write_lines(join_path(dir, "dev.hyp.txt"), hyps);
  write_lines(join_path(dir, "dev.ref.txt"), refs);
  write_lines(join_path(dir, "dev.src.txt"), srcs);
}

std::map<std::string, double> evaluate_files(const std::string& reference_path, const std::string& hypothesis_path,
                                             const std::string& source_path) {
  const auto refs = read_lines(reference_path);
  const auto hyps = read_lines(hypothesis_path);
  if (refs.size() != hyps.size()) {
    throw FormatError("reference file has " + std::to_string(refs.size()) + " lines, hypothesis file " +
                      std::to_string(hyps.size()));
  }
  const RougeReport rouge = corpus_rouge(refs, hyps);
  std::map<std::string, double> report = {
      {"rouge1_precision", rouge.rouge1.precision}, {"rouge1_recall", rouge.rouge1.recall},
      {"rouge1_f1", rouge.rouge1.f1},               {"rouge2_precision", rouge.rouge2.precision},
      {"rouge2_recall", rouge.rouge2.recall},       {"rouge2_f1", rouge.rouge2.f1},
      {"rougeL_precision", rouge.rougeL.precision}, {"rougeL_recall", rouge.rougeL.recall},
      {"rougeL_f1", rouge.rougeL.f1},               {"examples", static_cast<double>(refs.size())},
  };
  if (!source_path.empty()) {
    const auto srcs = read_lines(source_path);
    if (srcs.size() != hyps.size()) throw FormatError("source file line count differs from hypothesis file");
    // Pooled over every hypothesis token; no tokens at all counts as 0%.
    std::size_t total = 0, novel = 0, ref_total = 0, ref_novel = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const auto src = rouge_tokens(srcs[i]);
      const std::set<std::string> present(src.begin(), src.end());
      for (const auto& t : rouge_tokens(hyps[i])) {
        ++total;
        novel += present.count(t) ? 0 : 1;
      }
      for (const auto& t : rouge_tokens(refs[i])) {
        ++ref_total;
        ref_novel += present.count(t) ? 0 : 1;
      }
    }
    report["abstraction_rate"] = total ? 100.0 * static_cast<double>(novel) / static_cast<double>(total) : 0.0;
    report["reference_abstraction_rate"] =
        ref_total ? 100.0 * static_cast<double>(ref_novel) / static_cast<double>(ref_total) : 0.0;
  }
  return report;
}

std::map<std::string, double> cmd_eval(const RunConfig& config) {
  const std::string dir = output_dir(config);
  auto report = evaluate_files(join_path(dir, "dev.ref.txt"), join_path(dir, "dev.hyp.txt"),
                               join_path(dir, "dev.src.txt"));
  if (const auto best = read_best_epoch(model_dir(config))) report["best_epoch"] = static_cast<double>(*best);
  write_text(join_path(dir, kMetricsFile), format_report(report));
  return report;
}

void cmd_run(const RunConfig& config) {
  switch (config.stage) {
    case StageKind::kDenoise:
      cmd_pretrain(config);
      return;
    case StageKind::kSelect:
      cmd_select_train(config);
      return;
    case StageKind::kSummarize:
      if (config.decode.checkpoint.empty()) {
        cmd_train(config);
      } else {
        begin_run(config);
      }
      cmd_decode(config);
      cmd_eval(config);
      return;
  }
}

ExperimentGrid parse_grid(const std::string& text, const std::string& base_dir) {
  ExperimentGrid grid;
  try {
    const json j = json::parse(text);
    check_keys(j, {"name", "runs", "report"}, "grid");
    grid.name = j.value("name", std::string{});
    grid.report = j.value("report", grid.report);
    for (const auto& r : j.at("runs")) {
      check_keys(r, {"label", "config", "seeds", "layers"}, "grid run");
      GridEntry e;
      e.label = r.at("label").get<std::string>();
      e.config = join_path(base_dir, r.at("config").get<std::string>());
      e.seeds = r.value("seeds", std::vector<std::uint64_t>{});
      e.layers = r.value("layers", std::vector<std::size_t>{});
      grid.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid grid: ") + e.what());
  }
  if (grid.name.empty()) throw ConfigError("grid needs a name");
  return grid;
}

ExperimentGrid load_grid(const std::string& path) {
  return parse_grid(read_text(path), fs::path(path).parent_path().string());
}

std::vector<ExpandedRun> expand_grid(const ExperimentGrid& grid) {
  std::vector<ExpandedRun> out;
  for (const auto& entry : grid.entries) {
    std::optional<json> base;
    try {
      base = json::parse(read_text(entry.config));
    } catch (const std::exception&) {
      base.reset();
    }
    const std::vector<std::optional<std::uint64_t>> seeds =
        entry.seeds.empty() ? std::vector<std::optional<std::uint64_t>>{std::nullopt}
                            : std::vector<std::optional<std::uint64_t>>(entry.seeds.begin(), entry.seeds.end());
    const std::vector<std::optional<std::size_t>> layers =
        entry.layers.empty() ? std::vector<std::optional<std::size_t>>{std::nullopt}
                             : std::vector<std::optional<std::size_t>>(entry.layers.begin(), entry.layers.end());
    for (const auto& seed : seeds) {
      for (const auto& k : layers) {
        ExpandedRun run;
        run.label = entry.label;
        if (base) {
          try {
            json j = *base;
            if (seed) j["seed"] = *seed;
            if (k) j["init"]["layers_to_load"] = *k;
            run.config = parse_run_config(j.dump(), fs::path(entry.config).parent_path().string());
          } catch (const Error&) {
            run.config.reset();
          }
        }
        run.seed = run.config ? run.config->seed : seed.value_or(0);
        run.layers = run.config ? run.config->init.layers_to_load : k;
        out.push_back(std::move(run));
      }
    }
  }
  return out;
}

GridReport collect_grid(const ExperimentGrid& grid) {
  GridReport report;
  report.name = grid.name;
  for (const auto& run : expand_grid(grid)) {
    GridRow row;
    row.label = run.label;
    row.seed = run.seed;
    row.layers = run.layers;
    if (run.config) {
      const std::string metrics = join_path(output_dir(*run.config), kMetricsFile);
      if (fs::exists(metrics)) {
        try {
          row.metrics = parse_report(read_text(metrics));
          row.present = true;
          row.best_epoch = read_best_epoch(model_dir(*run.config));
        } catch (const Error&) {
          row.present = false;
        }
      }
    }
    report.rows.push_back(std::move(row));
  }
  std::map<std::size_t, std::vector<double>> by_layers;
  for (const auto& row : report.rows) {
    if (!row.layers || !row.present) continue;
    const auto it = row.metrics.find("rougeL_f1");
    if (it != row.metrics.end()) by_layers[*row.layers].push_back(it->second);
  }
  std::vector<double> xs, ys;
  for (const auto& [k, values] : by_layers) {
    SweepPoint p;
    p.layers = k;
    p.runs = values.size();
    for (double v : values) p.mean_rougeL += v;
    p.mean_rougeL /= static_cast<double>(values.size());
    p.spread = sample_stdev(values);
    report.sweep.push_back(p);
    xs.push_back(static_cast<double>(k));
    ys.push_back(p.mean_rougeL);
  }
  if (xs.size() >= 2) {
    try {
      report.pearson_r = pearson_r(xs, ys);
    } catch (const MetricError&) {
      report.pearson_r.reset();
    }
  }
  return report;
}

std::string grid_report_text(const GridReport& report) {
  std::ostringstream out;
  char buf[256];
  out << "grid " << report.name << '\n';
  std::snprintf(buf, sizeof buf, "%-20s %6s %4s %9s %9s %9s %9s %10s\n", "label", "seed", "k", "rouge1", "rouge2",
                "rougeL", "abstr%", "best_epoch");
  out << buf;
  auto cell = [](const GridRow& row, const std::string& key) {
    const auto it = row.metrics.find(key);
    if (it == row.metrics.end()) return std::string("-");
    char v[32];
    std::snprintf(v, sizeof v, "%.4f", it->second);
    return std::string(v);
  };
  for (const auto& row : report.rows) {
    const std::string k = row.layers ? std::to_string(*row.layers) : "-";
    if (!row.present) {
      std::snprintf(buf, sizeof buf, "%-20s %6llu %4s %9s\n", row.label.c_str(),
                    static_cast<unsigned long long>(row.seed), k.c_str(), "absent");
    } else {
      const std::string best = row.best_epoch ? std::to_string(*row.best_epoch) : "-";
      std::snprintf(buf, sizeof buf, "%-20s %6llu %4s %9s %9s %9s %9s %10s\n", row.label.c_str(),
                    static_cast<unsigned long long>(row.seed), k.c_str(), cell(row, "rouge1_f1").c_str(),
                    cell(row, "rouge2_f1").c_str(), cell(row, "rougeL_f1").c_str(),
                    cell(row, "abstraction_rate").c_str(), best.c_str());
    }
    out << buf;
  }
  if (!report.sweep.empty()) {
    out << "sweep k mean_rougeL spread runs\n";
    for (const auto& p : report.sweep) {
      std::snprintf(buf, sizeof buf, "sweep %zu %.17g %.17g %zu\n", p.layers, p.mean_rougeL, p.spread, p.runs);
      out << buf;
    }
    if (report.pearson_r) {
      std::snprintf(buf, sizeof buf, "pearson_r %.17g\n", *report.pearson_r);
      out << buf;
    } else {
      out << "pearson_r undefined\n";
    }
  }
  return out.str();
}

void run_grid(const ExperimentGrid& grid, std::size_t jobs, const std::string& executable) {
  std::vector<RunConfig> pending;
  for (const auto& run : expand_grid(grid)) {
    if (!run.config) throw ConfigError("grid entry '" + run.label + "' has an unusable config");
    if (!fs::exists(join_path(output_dir(*run.config), kMetricsFile))) pending.push_back(*run.config);
  }
  if (jobs <= 1) {
    for (const auto& config : pending) cmd_run(config);
    return;
  }
  for (std::size_t start = 0; start < pending.size(); start += jobs) {
    std::vector<std::future<int>> batch;
    for (std::size_t i = start; i < std::min(pending.size(), start + jobs); ++i) {
      const std::string path = join_path(output_dir(pending[i]), "grid_config.json");
      write_text(path, run_config_json(pending[i]) + "\n");
      const std::string command = "\"" + executable + "\" run \"" + path + "\"";
      batch.push_back(std::async(std::launch::async, [command] { return std::system(command.c_str()); }));
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch[i].get() != 0) throw StageError("grid run '" + pending[start + i].output_dir + "' failed");
    }
  }
}

}  // namespace stagesum
