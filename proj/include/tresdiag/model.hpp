#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tresdiag/datagen.hpp"
#include "tresdiag/json_io.hpp"
#include "tresdiag/numerics.hpp"

namespace tresdiag {

enum class ArchKind { tres_cnn, tres_cnn_plain, mlp_baseline };

std::string to_string(ArchKind kind);
ArchKind parse_arch_kind(const std::string& text);

// One residual block: conv -> relu -> conv -> (+ skip) -> relu -> time pool.
// Kernels must have odd sizes; padding keeps the spatial size. pool_w == 1
// disables pooling.
struct BlockConfig {
  std::size_t filters = 8;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 5;
  std::size_t pool_w = 2;

  friend bool operator==(const BlockConfig&, const BlockConfig&) = default;
};

struct ArchConfig {
  ArchKind kind = ArchKind::tres_cnn;
  std::vector<BlockConfig> blocks{{4, 3, 5, 4}, {8, 3, 5, 4}, {16, 3, 5, 4}};
  std::size_t dense_width = 32;
  double dropout = 0.2;
  std::size_t num_classes = 2;
  std::size_t channels = 38;  // P
  std::size_t samples = 200;  // T

  // Residual skips and dropout as actually used by forward().
  bool residual() const { return kind == ArchKind::tres_cnn; }
  double effective_dropout() const { return kind == ArchKind::tres_cnn_plain ? 0.0 : dropout; }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

void validate(const ArchConfig& arch);

// Spatial size (rows, time) after each block.
std::vector<std::array<std::size_t, 2>> block_output_sizes(const ArchConfig& arch);

// Class order of the classification head.
inline constexpr std::array<BreakLocation, 2> kClassOrder = kBreakLocations;

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline constexpr double kStdFloor = 1e-8;

struct ModelMetadata {
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  std::string termination;

  friend bool operator==(const ModelMetadata&, const ModelMetadata&) = default;
};

struct TrainedModel {
  ArchConfig arch;
  std::vector<std::string> channels;  // input rows, in order
  NormStats norm;
  std::map<std::string, Tensor> weights;
  ModelMetadata metadata;

  std::size_t parameter_count() const;

  friend bool operator==(const TrainedModel&, const TrainedModel&) = default;
};

// Weight names and shapes declared by an architecture, in a fixed order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ArchConfig& arch);

// Untrained model: every weight uniform on +-sqrt(1 / fan_in), drawn from a
// child stream of rng named after the weight. Norm stats start at mean 0,
// std 1.
TrainedModel build_model(const ArchConfig& arch, const Rng& rng,
                         std::vector<std::string> channels = {});

// Even i: sin(pos / 10000^(i/dim)); odd i: cos(pos / 10000^((i-1)/dim)).
double positional_encoding(std::size_t pos, std::size_t i, std::size_t dim);
// P x T map with entry (p, t) = positional_encoding(t, p, P).
Tensor positional_encoding_map(std::size_t channels, std::size_t samples);

// Per-channel mean and population standard deviation over all samples of the
// given P x T cases, std floored at kStdFloor.
NormStats compute_norm_stats(const std::vector<const Tensor*>& cases);

// Normalized input plus positional encoding, P x T.
Tensor preprocess(const TrainedModel& model, const Tensor& values);

// Row indices of `wanted` inside `available`. Missing names are a
// ValidationError listing them.
std::vector<std::size_t> channel_rows(const std::vector<std::string>& wanted,
                                      const std::vector<std::string>& available);
Tensor take_rows(const Tensor& values, const std::vector<std::size_t>& rows);

struct Prediction {
  std::vector<double> class_probs;
  double size = 0.0;

  // argmax of class_probs, ties to the lower index.
  std::size_t predicted_class() const;
};

// Nodes of one forward pass recorded on a Graph.
struct ForwardNodes {
  NodeId logits;
  NodeId size;
  // Output of the last convolutional block, before its pooling. Only set for
  // convolutional architectures.
  std::optional<NodeId> last_conv;
};

// Records the forward pass of a P x T input on g. dropout_rng is used only
// when training is true and the architecture has dropout.
ForwardNodes build_forward(Graph& g, const TrainedModel& model, const Tensor& values, bool training,
                           Rng* dropout_rng = nullptr);

Prediction forward(const TrainedModel& model, const Tensor& values, bool training = false,
                   Rng* dropout_rng = nullptr);
Prediction forward(const TrainedModel& model, const TransientCase& tc, bool training = false,
                   Rng* dropout_rng = nullptr);

// Throws ValidationError unless values is P x T for this model.
void check_input(const TrainedModel& model, const Tensor& values);

// sum_n (x_n - y_n)^2
double loss_regression(const std::vector<double>& pred, const std::vector<double>& truth);
// sum_n -sum_c y_nc log softmax(x_n)_c over N x C logits and one-hot labels.
double loss_classification(const Tensor& logits, const Tensor& onehot);
double loss_total(double classification, double regression);

std::vector<double> one_hot(BreakLocation location);

// Checkpoint: one JSON document. extra, when given, is stored under
// "training" and handed back by load_checkpoint.
void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path,
                     const Json* extra = nullptr);
TrainedModel load_checkpoint(const std::filesystem::path& path, Json* extra = nullptr);

Json model_to_json(const TrainedModel& model);
TrainedModel model_from_json(const Json& j);

}  // namespace tresdiag
