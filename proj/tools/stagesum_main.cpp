#include <cstdio>
#include <filesystem>
#include <string>

#include "CLI11.hpp"
#include "stagesum/errors.hpp"
#include "stagesum/harness.hpp"
#include "stagesum/metrics.hpp"

using namespace stagesum;

int main(int argc, char** argv) {
  CLI::App app{"Multi-stage summarization pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  auto stage = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("config", config_path, "Run configuration file")->required()->check(CLI::ExistingFile);
    return sub;
  };
  auto* generate = stage("generate", "Write the synthetic corpora of the data section");
  auto* pretrain = stage("pretrain", "Denoising stage");
  auto* train = stage("train", "Summarization stage");
  auto* select_train = stage("select-train", "Content selector and threshold calibration");
  auto* decode = stage("decode", "Decode the dev split");
  auto* eval = stage("eval", "Score decoded dev output");
  auto* run = stage("run", "Training stage, then decode and eval for summarization");

  std::string grid_path;
  bool grid_run = false;
  std::size_t jobs = 1;
  auto* grid = app.add_subcommand("grid", "Comparative report over an experiment grid");
  grid->add_option("grid", grid_path, "Grid file")->required()->check(CLI::ExistingFile);
  grid->add_flag("--run", grid_run, "Run entries whose metrics are missing first");
  grid->add_option("--jobs", jobs, "Parallel processes for --run")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (grid->parsed()) {
      const ExperimentGrid g = load_grid(grid_path);
      if (grid_run) run_grid(g, jobs, std::filesystem::canonical("/proc/self/exe").string());
      const std::string text = grid_report_text(collect_grid(g));
      const std::string report_path = resolve_output_path(g.report);
      if (const auto parent = std::filesystem::path(report_path).parent_path(); !parent.empty()) {
        std::filesystem::create_directories(parent);
      }
      if (std::FILE* f = std::fopen(report_path.c_str(), "w")) {
        std::fputs(text.c_str(), f);
        std::fclose(f);
      } else {
        throw FormatError("cannot write '" + report_path + "'");
      }
      std::fputs(text.c_str(), stdout);
      return 0;
    }
    const RunConfig config = load_run_config(config_path);
    if (generate->parsed()) cmd_generate(config);
    if (pretrain->parsed()) cmd_pretrain(config);
    if (train->parsed()) cmd_train(config);
    if (select_train->parsed()) cmd_select_train(config);
    if (decode->parsed()) cmd_decode(config);
    if (eval->parsed()) std::fputs(format_report(cmd_eval(config)).c_str(), stdout);
    if (run->parsed()) cmd_run(config);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "stagesum: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
