#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tresdiag/datagen.hpp"
#include "tresdiag/model.hpp"

namespace tresdiag {

struct TrainConfig {
  double alpha = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  std::size_t batch_size = 16;
  std::size_t max_iterations = 2000;
  std::size_t window = 10;
  double threshold = 0.05;
  // Root of the shuffle and dropout streams.
  std::uint64_t seed = 0;
  // Cases of one minibatch may be processed on this many threads. Results do
  // not depend on it.
  unsigned threads = 1;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void validate(const TrainConfig& config);

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t t = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// One Adam update of every parameter. A non-finite gradient throws
// NumericError naming the parameter, before anything is modified.
void adam_step(std::map<std::string, Tensor>& params, const Gradients& grads, AdamState& state,
               const TrainConfig& config);

// True iff history has at least `window` entries and every one of the last
// `window` losses lies within threshold (relative) of the last loss. A last
// loss of exactly 0 counts as converged.
bool should_terminate(std::span<const double> history, std::size_t window = 10, double threshold = 0.05);

struct IterationRecord {
  std::size_t iteration = 0;  // 1-based epoch index
  double loss = 0.0;
  double loss_cl = 0.0;
  double loss_re = 0.0;
  double wall_time_s = 0.0;

  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

struct TrainLog {
  std::vector<IterationRecord> records;
  std::string termination;  // "converged", "max_iterations" or "non_finite_loss"

  std::size_t iterations() const { return records.size(); }
  std::vector<double> losses() const;
};

// One JSON object per line; the last line also carries "termination".
void save_train_log(const TrainLog& log, const std::filesystem::path& path);
TrainLog load_train_log(const std::filesystem::path& path);

// Model-ready training cases: rows already reduced to the model's channels.
struct TrainingSet {
  std::vector<std::size_t> case_ids;
  std::vector<Tensor> inputs;
  std::vector<BreakLocation> labels;
  std::vector<double> sizes;

  std::size_t size() const { return inputs.size(); }
};

// Cases of `which` split, restricted to `channels` (in that order).
TrainingSet make_training_set(const Dataset& ds, Split which, const std::vector<std::string>& channels);

struct StepLosses {
  double cl = 0.0;
  double re = 0.0;
};

// Forward/backward of the cases `batch` (indices into set), gradients summed
// in batch order, then one Adam step. Dropout for case i draws from
// dropout.child(set.case_ids[i]).
StepLosses minibatch_step(TrainedModel& model, AdamState& adam, const TrainingSet& set,
                          std::span<const std::size_t> batch, const TrainConfig& config, const Rng& dropout);

// Training order of epoch `iteration` (1-based): a permutation of 0..n-1.
std::vector<std::size_t> epoch_order(std::size_t n, std::size_t iteration, std::uint64_t seed);

// State needed to continue training bitwise-identically.
Json adam_to_json(const AdamState& state);
AdamState adam_from_json(const Json& j);

struct TrainOptions {
  // Where to write the last good model if the loss turns non-finite.
  std::filesystem::path abort_checkpoint;
  std::function<void(const IterationRecord&)> on_iteration;
};

struct TrainResult {
  TrainedModel model;
  TrainLog log;
  AdamState adam;
};

// Sets the normalization statistics from the training split, then trains
// epoch by epoch until should_terminate or max_iterations. A non-finite
// epoch loss throws NumericError after saving the last good model.
TrainResult train(TrainedModel model, const Dataset& ds, const TrainConfig& config, const TrainOptions& options = {});

}  // namespace tresdiag
