#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tresdiag/select.hpp"
#include "tresdiag/train.hpp"

namespace tresdiag {

struct Metrics {
  double accuracy = 0.0;
  double micro_f1 = 0.0;
  double sse_avg = 0.0;
  std::size_t cases = 0;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);
// 2 TP / (2 TP + FP + FN) with counts pooled over the classes.
double micro_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth, std::size_t classes);
// Mean over cases of (x - y)^2.
double sse_avg(std::span<const double> predicted, std::span<const double> truth);

// Metrics of the model on one split of the dataset.
Metrics evaluate(const TrainedModel& model, const Dataset& ds, Split split);

// (selected - full) / full * 100; empty when full is zero.
std::optional<double> relative_error(double full, double selected);
// "+4.64%", "-0.52%", or "undefined".
std::string format_relative(const std::optional<double>& percent);

struct RunSummary {
  Metrics metrics;
  TrainLog log;
  std::size_t channels = 0;
};

struct ComparisonReport {
  RunSummary full;
  RunSummary selected;
  std::optional<double> accuracy_change;
  std::optional<double> micro_f1_change;
  std::optional<double> sse_change;
  std::size_t iterations_full = 0;
  std::size_t iterations_selected = 0;
  std::optional<double> iteration_ratio;  // selected / full
  std::vector<std::string> selected_channels;
};

ComparisonReport compare_runs(const RunSummary& full, const RunSummary& selected,
                              std::vector<std::string> selected_channels = {});

// How many selected channels carry the informative flag, and whether any
// decoy made the top five of the ranking.
struct SelectionRecovery {
  std::size_t informative = 0;
  std::size_t selected = 0;
  std::vector<std::string> decoys_in_top5;
};

SelectionRecovery selection_recovery(const SignificanceRanking& ranking, const std::vector<ChannelSpec>& catalog);

// Deterministic: no wall times. Loss curves are embedded per iteration.
Json report_to_json(const ComparisonReport& report, const SelectionRecovery* recovery = nullptr);
// Wall times are only in the markdown rendering.
std::string report_markdown(const ComparisonReport& report, const SelectionRecovery* recovery = nullptr);

}  // namespace tresdiag
