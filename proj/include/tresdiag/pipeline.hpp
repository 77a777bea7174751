#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tresdiag/config.hpp"
#include "tresdiag/eval.hpp"
#include "tresdiag/interpret.hpp"
#include "tresdiag/select.hpp"

namespace tresdiag {

struct SelectConfig {
  std::size_t k = 15;
  double gradcam_weight = 0.5;
  double lime_weight = 0.5;

  friend bool operator==(const SelectConfig&, const SelectConfig&) = default;
};

struct PathsConfig {
  std::filesystem::path dataset = "data";
  std::filesystem::path full_run = "runs/full";
  std::filesystem::path selected_run = "runs/selected";
  std::filesystem::path attributions = "attributions";
  std::filesystem::path selection = "selection";
  std::filesystem::path report = "report";

  friend bool operator==(const PathsConfig&, const PathsConfig&) = default;
};

// The arch's channels and samples are taken from the data at train time.
struct PipelineConfig {
  GeneratorConfig dataset;
  ArchConfig arch;
  TrainConfig train;
  LimeConfig interpret;
  SelectConfig select;
  PathsConfig paths;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

Json to_json(const PipelineConfig& config);
// Missing keys keep their defaults; unknown keys are a ConfigError.
PipelineConfig pipeline_config_from_json(const Json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// Named child streams of the master seed.
std::uint64_t dataset_seed(std::uint64_t master);
Rng init_stream(std::uint64_t master);
Rng lime_stream(std::uint64_t master);

// Creates dir. A non-empty dir is refused (ConfigError) unless force, in which
// case the listed artifacts inside it are removed first.
void prepare_output(const std::filesystem::path& dir, bool force, const std::vector<std::string>& artifacts);

inline constexpr const char* kCheckpointFile = "checkpoint.json";
inline constexpr const char* kTrainLogFile = "train_log.jsonl";
inline constexpr const char* kChannelsFile = "channels.txt";
inline constexpr const char* kSignificanceFile = "significance.json";
inline constexpr const char* kLumpedFile = "lumped_saliency.csv";
inline constexpr const char* kSelectedFile = "selected_channels.txt";
inline constexpr const char* kReportJson = "report.json";
inline constexpr const char* kReportMarkdown = "report.md";

struct GenerateResult {
  std::size_t cases = 0;
  std::size_t train = 0;
  std::size_t test = 0;
};

GenerateResult cmd_generate(const PipelineConfig& config, const std::filesystem::path& out, bool force);

struct TrainRunResult {
  std::size_t channels = 0;
  std::size_t iterations = 0;
  std::string termination;
};

// Trains on the training split of data with every catalog channel, or with the
// channels listed in channel_file. Writes checkpoint.json and train_log.jsonl.
TrainRunResult cmd_train(const PipelineConfig& config, const std::filesystem::path& data,
                         const std::filesystem::path& out, const std::optional<std::filesystem::path>& channel_file,
                         bool force, const std::function<void(const IterationRecord&)>& progress = {});

// Files read by cmd_attribute / cmd_select, in order. With dry_run nothing
// is computed or written.
struct AccessList {
  std::vector<std::filesystem::path> read;
};

// One attribution file per training case, plus channels.txt.
AccessList cmd_attribute(const PipelineConfig& config, const std::filesystem::path& run,
                         const std::filesystem::path& data, const std::filesystem::path& out, bool force,
                         bool dry_run = false);

struct SelectResult {
  SignificanceRanking ranking;
  AccessList access;
};

SelectResult cmd_select(const PipelineConfig& config, const std::filesystem::path& attributions,
                        const std::filesystem::path& out, bool force, bool dry_run = false);

struct ReportResult {
  ComparisonReport report;
  SelectionRecovery recovery;
};

// Evaluates both runs on the test split, compares them and checks the
// selection against the manifest's informative flags.
ReportResult cmd_report(const PipelineConfig& config, const std::filesystem::path& full_run,
                        const std::filesystem::path& selected_run, const std::filesystem::path& data,
                        const std::filesystem::path& selection, const std::filesystem::path& out, bool force);

// generate -> train -> attribute -> select -> train(selected) -> report, with
// every path of config.paths taken relative to root.
ReportResult run_pipeline(const PipelineConfig& config, const std::filesystem::path& root, bool force,
                          const std::function<void(const std::string&)>& log = {});

}  // namespace tresdiag
