#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stagesum/checkpoint.hpp"
#include "stagesum/corpus.hpp"
#include "stagesum/model.hpp"
#include "stagesum/trainer.hpp"

namespace stagesum {

/// Environment variable naming the directory that relative run paths live under.
inline constexpr const char* kOutputRootEnv = "STAGESUM_OUTPUT_ROOT";

/// Prefixes relative paths with $STAGESUM_OUTPUT_ROOT when it is set.
std::string resolve_output_path(const std::string& path);

struct CorpusEntry {
  CorpusSpec spec;
  std::size_t dev_examples = 0;  // taken from the end of the file
  std::string path;              // empty: <data dir>/<name>.txt
};

struct DataConfig {
  std::string dir = "data";
  std::size_t vocab_size = 120;  // lexicon size of the synthetic vocabulary
  std::string vocab_file;        // overrides the synthetic vocabulary when set
  std::map<std::string, CorpusEntry> corpora;
};

struct ComponentConfig {
  SourceKind kind = SourceKind::kRandom;
  std::string checkpoint;
};

struct InitConfig {
  ComponentConfig encoder;
  ComponentConfig decoder;
  std::optional<std::size_t> layers_to_load;
};

enum class SelectionMode { kNone, kPredicted, kOracle };

std::string selection_mode_name(SelectionMode mode);
SelectionMode parse_selection_mode(const std::string& name);

struct SelectionConfig {
  SelectionMode mode = SelectionMode::kNone;
  std::string selector;  // run directory of a select-train run
};

struct DecodeConfig {
  DecodeSettings settings;
  std::string checkpoint;  // empty: <output_dir>/best.ckpt
};

/// Everything one pipeline stage needs. Relative paths are resolved against
/// the output root at use time.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "run";
  ModelConfig model;  // vocab_size is filled from the vocabulary
  DataConfig data;
  StageKind stage = StageKind::kSummarize;
  std::string corpus;
  InitConfig init;
  TrainConfig train;
  DecodeConfig decode;
  SequenceLimits limits;
  SelectionConfig selection;

  void validate() const;
};

std::string run_config_json(const RunConfig& config);
/// "{seed}" and "{k}" in any string are replaced by the seed and layers_to_load.
/// `base_dir` resolves a "data" entry given as a file name.
RunConfig parse_run_config(const std::string& text, const std::string& base_dir = ".");
RunConfig load_run_config(const std::string& path);

Vocabulary run_vocabulary(const RunConfig& config);

/// Corpus of `name` split into train and dev parts.
struct CorpusSplit {
  std::vector<DocumentSummary> train;
  std::vector<DocumentSummary> dev;
};

CorpusSplit load_split(const RunConfig& config, const std::string& name);

/// Writes every synthetic corpus of the data section.
void cmd_generate(const RunConfig& config);
/// Denoising stage on config.corpus.
void cmd_pretrain(const RunConfig& config);
/// Summarization stage on config.corpus.
void cmd_train(const RunConfig& config);
/// Content selector on config.corpus; calibrates its threshold on dev.
void cmd_select_train(const RunConfig& config);
/// Decodes the dev split into dev.hyp.txt next to dev.ref.txt and dev.src.txt.
void cmd_decode(const RunConfig& config);
/// Scores dev.hyp.txt against dev.ref.txt into metrics.txt.
std::map<std::string, double> cmd_eval(const RunConfig& config);
/// The stage's training command, then decode and eval for summarization.
/// A summarization config with decode.checkpoint set skips training.
void cmd_run(const RunConfig& config);

/// Reference and hypothesis files of equal line count scored into a report.
std::map<std::string, double> evaluate_files(const std::string& reference_path, const std::string& hypothesis_path,
                                             const std::string& source_path);

/// One entry of an experiment grid, expanded over seeds and layer counts.
struct GridEntry {
  std::string label;
  std::string config;
  std::vector<std::uint64_t> seeds;   // empty: the config's own seed
  std::vector<std::size_t> layers;    // empty: the config's own layers_to_load
};

struct ExperimentGrid {
  std::string name;  // e.g. "cnndm-table", "layerwise-sweep"
  std::vector<GridEntry> entries;
  std::string report = "grid_report.txt";
};

ExperimentGrid parse_grid(const std::string& text, const std::string& base_dir = ".");
ExperimentGrid load_grid(const std::string& path);

struct ExpandedRun {
  std::string label;
  std::optional<RunConfig> config;  // unset when the config file is unusable
  std::uint64_t seed = 0;
  std::optional<std::size_t> layers;
};

std::vector<ExpandedRun> expand_grid(const ExperimentGrid& grid);

struct GridRow {
  std::string label;
  std::uint64_t seed = 0;
  std::optional<std::size_t> layers;
  bool present = false;
  std::map<std::string, double> metrics;  // the run's metrics.txt, verbatim
  std::optional<std::size_t> best_epoch;
};

struct SweepPoint {
  std::size_t layers = 0;
  double mean_rougeL = 0.0;
  double spread = 0.0;  // sample standard deviation over seeds
  std::size_t runs = 0;
};

struct GridReport {
  std::string name;
  std::vector<GridRow> rows;
  std::vector<SweepPoint> sweep;     // filled when entries carry layer counts
  std::optional<double> pearson_r;  // over (layers, mean ROUGE-L)
};

/// Reads each run's metrics and train report; missing runs are listed as absent.
GridReport collect_grid(const ExperimentGrid& grid);
std::string grid_report_text(const GridReport& report);

/// Runs grid entries whose metrics are missing, `jobs` processes at a time
/// via `executable run <config>`; jobs = 1 runs in-process.
void run_grid(const ExperimentGrid& grid, std::size_t jobs, const std::string& executable);

}  // namespace stagesum
