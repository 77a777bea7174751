#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tresdiag/error.hpp"
#include "tresdiag/rng.hpp"
#include "tresdiag/tensor.hpp"

namespace tresdiag {

struct Conv2dOptions {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

struct Pool2dOptions {
  std::size_t window_h = 1;
  std::size_t window_w = 2;
  std::size_t stride_h = 1;
  std::size_t stride_w = 2;
};

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);
std::size_t pool_output_size(std::size_t in, std::size_t window, std::size_t stride);

// 2-D cross-correlation (the kernel is not flipped):
//   out[o, y, x] = bias[o] + sum_{c, dy, dx} k[o, c, dy, dx] * in[c, y*sh + dy - ph, x*sw + dx - pw]
// with zero padding. input is Cin x H x W, kernels Cout x Cin x kh x kw,
// bias (optional) has Cout entries.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Conv2dOptions& options = {},
              const Tensor* bias = nullptr);

Tensor relu(const Tensor& x);

struct PoolResult {
  Tensor output;
  // Flat input index of the winning element for every output element.
  std::vector<std::size_t> argmax;
};
PoolResult maxpool2d(const Tensor& input, const Pool2dOptions& options);

// weights is out x in, bias has out entries; x is flattened.
Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias);

// Inverted dropout: kept activations are scaled by 1 / (1 - rate) so that
// inference (training == false) is the identity.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

// Softmax over a vector, computed with max subtraction.
Tensor softmax(const Tensor& logits);
double log_sum_exp(std::span<const double> values);

// Central differences (f(t + h e_k) - f(t - h e_k)) / 2h for every coordinate.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                            double h = 1e-5);

// Handle to a node of one Graph. Using it on another graph is a LookupError.
struct NodeId {
  std::size_t index = 0;
  std::uint64_t graph = 0;
};

using Gradients = std::map<std::string, Tensor>;

// Tape of primitive operations recorded during one forward pass. Nodes are
// appended in evaluation order, so the tape is always topologically sorted
// and backward() is a single reverse sweep.
class Graph {
 public:
  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  NodeId constant(Tensor value);
  // Named trainable leaf. Gradients are reported under this name.
  NodeId parameter(std::string name, Tensor value);

  NodeId conv2d(NodeId input, NodeId kernels, std::optional<NodeId> bias, const Conv2dOptions& options);
  NodeId add(NodeId a, NodeId b);
  NodeId relu(NodeId x);
  NodeId maxpool2d(NodeId x, const Pool2dOptions& options);
  // C x H x W -> C, mean over the spatial axes.
  NodeId global_avg_pool(NodeId x);
  // C x H x W -> C x H, mean over the last (time) axis.
  NodeId time_avg_pool(NodeId x);
  NodeId dense(NodeId x, NodeId weights, NodeId bias);
  NodeId dropout(NodeId x, double rate, Rng& rng, bool training);
  NodeId scale(NodeId x, double factor);
  NodeId sum_squares(NodeId x);
  // Sum of all elements of x.
  NodeId sum(NodeId x);
  // Sum of scalar nodes.
  NodeId add_scalars(const std::vector<NodeId>& terms);
  // -sum_c y_c log softmax(logits)_c, log-sum-exp stable.
  NodeId softmax_cross_entropy(NodeId logits, const Tensor& onehot);
  // sum_i (x_i - target_i)^2
  NodeId squared_error(NodeId x, const Tensor& target);

  const Tensor& value(NodeId id) const;
  // Gradient of the last backward() output with respect to any node.
  const Tensor& grad(NodeId id) const;

  // Reverse sweep from output. A non-scalar output needs a seed cotangent of
  // the same shape. Returns a gradient for every parameter; parameters that
  // do not reach the output get zeros.
  Gradients backward(NodeId output, std::optional<Tensor> seed = std::nullopt);

  std::size_t size() const { return nodes_.size(); }

 private:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::string param_name;
    BackwardFn backward;
  };

  std::size_t check(NodeId id) const;
  NodeId push(Tensor value, BackwardFn backward, std::string param_name = {});
  Tensor& grad_slot(std::size_t index);

  std::uint64_t tag_;
  std::vector<Node> nodes_;
};

}  // namespace tresdiag
