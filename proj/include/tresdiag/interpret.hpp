#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tresdiag/datagen.hpp"
#include "tresdiag/model.hpp"

namespace tresdiag {

enum class SaliencySource { grad_campp, lime_broadcast };
std::string to_string(SaliencySource source);
SaliencySource parse_saliency_source(const std::string& text);

// P x T, non-negative, max 1 (or all zero).
struct SaliencyMap {
  std::size_t case_id = 0;
  SaliencySource source = SaliencySource::grad_campp;
  Tensor values;

  friend bool operator==(const SaliencyMap&, const SaliencyMap&) = default;
};

struct LimeExplanation {
  std::size_t case_id = 0;
  std::vector<double> weights;  // one per channel, signed
  double intercept = 0.0;
  double r2 = 0.0;  // weighted, on the perturbation sample
  std::size_t perturbations = 0;

  friend bool operator==(const LimeExplanation&, const LimeExplanation&) = default;
};

// Divides by the maximum; an all-zero map stays zero.
void max_normalize(Tensor& map);

// Bilinear resampling of an H x W map to rows x cols, corners aligned.
Tensor bilinear_resize(const Tensor& map, std::size_t rows, std::size_t cols);

// Grad-CAM++ of the size output over the last convolutional block (before
// its pooling), upsampled to the input grid and max-normalized.
// UnsupportedError for architectures without convolutions.
SaliencyMap grad_campp(const TrainedModel& model, const Tensor& values, std::size_t case_id = 0);

struct LimeConfig {
  std::size_t perturbations = 500;
  // <= 0 means 0.75 sqrt(P).
  double kernel_width = 0.0;
  double ridge = 1e-3;

  friend bool operator==(const LimeConfig&, const LimeConfig&) = default;
};

// Black box over channel masks: mask[p] false means channel p is removed.
using MaskFunction = std::function<double(const std::vector<bool>& mask)>;

// Weighted ridge surrogate of f around the all-ones mask of `channels` bits.
// Each bit is kept with probability 1/2; a mask with r removed channels has
// kernel weight exp(-r / width^2), i.e. Euclidean distance sqrt(r). A design where every mask is the
// same is redrawn once, then ValidationError.
LimeExplanation lime_explain(const MaskFunction& f, std::size_t channels, const LimeConfig& config, Rng& rng);

// LIME on the probability of the predicted class; a removed channel is set
// to its training-split mean over the whole series.
LimeExplanation lime_explain(const TrainedModel& model, const Tensor& values, const LimeConfig& config, Rng& rng,
                             std::size_t case_id = 0);

// |weight| of each channel repeated across time, max-normalized.
SaliencyMap lime_broadcast(const LimeExplanation& lime, std::size_t samples);

struct CaseAttribution {
  SaliencyMap gradcam;
  LimeExplanation lime;

  friend bool operator==(const CaseAttribution&, const CaseAttribution&) = default;
};

// Both attributions of one case (values already in model channel order); the
// LIME stream is rng.child(case_id).
CaseAttribution explain_case(const TrainedModel& model, const Tensor& values, std::size_t case_id,
                             const LimeConfig& config, const Rng& rng);

// Attributions of the given dataset indices, in that order, optionally on
// several threads (results do not depend on the count).
std::vector<CaseAttribution> explain_cases(const TrainedModel& model, const Dataset& ds,
                                           const std::vector<std::size_t>& indices, const LimeConfig& config,
                                           const Rng& rng, unsigned threads = 1);

Json attribution_to_json(const CaseAttribution& a, const std::vector<std::string>& channels);
CaseAttribution attribution_from_json(const Json& j, const std::vector<std::string>& channels);

// One file per case, named case_NNNN.json.
void save_attributions(const std::vector<CaseAttribution>& attributions, const std::vector<std::string>& channels,
                       const std::filesystem::path& directory);
std::vector<CaseAttribution> load_attributions(const std::filesystem::path& directory,
                                               const std::vector<std::string>& channels);

}  // namespace tresdiag
