#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tresdiag/interpret.hpp"

namespace tresdiag {

struct CombinedCase {
  std::size_t case_id = 0;
  Tensor map;                 // P x T
  std::vector<double> score;  // per channel: row sum of map
};

// gradcam_weight * Grad-CAM++ map + lime_weight * broadcast LIME map.
// ValidationError when the two refer to different cases, ShapeError when the
// shapes disagree.
CombinedCase combine_case_attribution(const SaliencyMap& gradcam, const LimeExplanation& lime,
                                      double gradcam_weight = 0.5, double lime_weight = 0.5);

struct LumpedSaliency {
  Tensor values;
  std::size_t cases = 0;
};

// Elementwise sum, reduced in ascending case_id order whatever the input order.
LumpedSaliency aggregate(const std::vector<CombinedCase>& cases);

struct IqrResult {
  std::vector<double> kept;
  std::vector<std::size_t> removed;  // indices into the input
  double q1 = 0.0;
  double q3 = 0.0;
  double low = 0.0;   // fence Q1 - 1.5 IQR
  double high = 0.0;  // fence Q3 + 1.5 IQR
  bool too_few = false;
};

// Tukey hinges: medians of the lower and upper halves, each half taking the
// median too when the count is odd. Keeps x in [low, high]. Fewer than four
// samples are returned unfiltered with too_few set.
IqrResult remove_outliers_iqr(std::span<const double> samples);

struct SignificanceRanking {
  std::vector<std::string> channels;             // catalog order
  std::vector<double> scores;                    // per channel, after filtering
  std::vector<std::vector<double>> retained;     // per channel
  std::vector<std::vector<std::size_t>> removed;  // per channel, sample indices
  std::vector<std::size_t> order;                // channel indices, best first
  std::vector<std::string> selected;             // first k of order
  std::size_t k = 0;
};

// case_scores[p][n] is the score of channel p in case n.
SignificanceRanking rank_and_select(const std::vector<std::vector<double>>& case_scores,
                                    const std::vector<std::string>& channels, std::size_t k = 15);

// Channel scores of every case, transposed to channel-major.
std::vector<std::vector<double>> channel_major_scores(const std::vector<CombinedCase>& cases);

Json significance_to_json(const SignificanceRanking& ranking);
SignificanceRanking significance_from_json(const Json& j);

void write_significance(const SignificanceRanking& ranking, const std::filesystem::path& path);
SignificanceRanking read_significance(const std::filesystem::path& path);
// One row per channel: name then T values.
void write_lumped_saliency(const LumpedSaliency& lumped, const std::vector<std::string>& channels,
                           const std::filesystem::path& path);
// One channel name per line; blank lines and '#' comments are skipped.
void write_channel_list(const std::vector<std::string>& channels, const std::filesystem::path& path);
std::vector<std::string> read_channel_list(const std::filesystem::path& path);

}  // namespace tresdiag
