#include "tresdiag/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>

#include "tresdiag/config.hpp"
#include "tresdiag/error.hpp"

namespace tresdiag {

namespace fs = std::filesystem;

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::tres_cnn:
      return "tres_cnn";
    case ArchKind::tres_cnn_plain:
      return "tres_cnn_plain";
    case ArchKind::mlp_baseline:
      return "mlp_baseline";
  }
  return "?";
}

ArchKind parse_arch_kind(const std::string& text) {
  for (ArchKind k : {ArchKind::tres_cnn, ArchKind::tres_cnn_plain, ArchKind::mlp_baseline}) {
    if (text == to_string(k)) return k;
  }
  throw ValidationError("unknown architecture \"" + text + "\"");
}

void validate(const ArchConfig& a) {
  if (a.num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (a.channels == 0 || a.samples == 0) throw ConfigError("input dimensions must be positive");
  if (a.dense_width == 0) throw ConfigError("dense_width must be positive");
  if (!(a.dropout >= 0.0 && a.dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (a.kind == ArchKind::mlp_baseline) return;
  if (a.blocks.empty()) throw ConfigError("a convolutional trunk needs at least one block");
  std::size_t t = a.samples;
  for (std::size_t b = 0; b < a.blocks.size(); ++b) {
    const BlockConfig& blk = a.blocks[b];
    const std::string where = "block " + std::to_string(b + 1);
    if (blk.filters == 0) throw ConfigError(where + ": filters must be positive");
    if (blk.kernel_h % 2 == 0 || blk.kernel_w % 2 == 0) {
      throw ConfigError(where + ": kernel sizes must be odd");
    }
    if (blk.pool_w == 0) throw ConfigError(where + ": pool_w must be at least 1");
    if (t / blk.pool_w < 1) {
      throw ConfigError(where + ": pooling by " + std::to_string(blk.pool_w) + " shrinks " +
                        std::to_string(t) + " time steps below 1");
    }
    t /= blk.pool_w;
  }
}

std::vector<std::array<std::size_t, 2>> block_output_sizes(const ArchConfig& a) {
  validate(a);
  std::vector<std::array<std::size_t, 2>> sizes;
  std::size_t t = a.samples;
  for (const auto& blk : a.blocks) {
    t /= blk.pool_w;
    sizes.push_back({a.channels, t});
  }
  return sizes;
}

namespace {

std::string block_prefix(std::size_t b) { return "block" + std::to_string(b + 1) + "."; }

std::size_t fan_in(const Shape& shape) {
  // conv kernels: Cout x Cin x kh x kw; dense: out x in; biases take the
  // fan-in of their layer and are handled by the caller.
  std::size_t n = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) n *= shape[i];
  return n;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ArchConfig& a) {
  validate(a);
  std::vector<std::pair<std::string, Shape>> shapes;
  std::size_t features = 0;
  if (a.kind == ArchKind::mlp_baseline) {
    features = a.channels * a.samples;
  } else {
    std::size_t cin = 1;
    for (std::size_t b = 0; b < a.blocks.size(); ++b) {
      const BlockConfig& blk = a.blocks[b];
      const std::string p = block_prefix(b);
      shapes.push_back({p + "conv1.weight", {blk.filters, cin, blk.kernel_h, blk.kernel_w}});
      shapes.push_back({p + "conv1.bias", {blk.filters}});
      shapes.push_back({p + "conv2.weight", {blk.filters, blk.filters, blk.kernel_h, blk.kernel_w}});
      shapes.push_back({p + "conv2.bias", {blk.filters}});
      if (cin != blk.filters) {
        shapes.push_back({p + "skip.weight", {blk.filters, cin, 1, 1}});
        shapes.push_back({p + "skip.bias", {blk.filters}});
      }
      cin = blk.filters;
    }
    features = cin * a.channels;
  }
  shapes.push_back({"dense.weight", {a.dense_width, features}});
  shapes.push_back({"dense.bias", {a.dense_width}});
  shapes.push_back({"class.weight", {a.num_classes, a.dense_width}});
  shapes.push_back({"class.bias", {a.num_classes}});
  shapes.push_back({"size.weight", {1, a.dense_width}});
  shapes.push_back({"size.bias", {1}});
  return shapes;
}

std::size_t TrainedModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, w] : weights) n += w.size();
  return n;
}

TrainedModel build_model(const ArchConfig& arch, const Rng& rng, std::vector<std::string> channels) {
  validate(arch);
  TrainedModel m;
  m.arch = arch;
  if (channels.empty()) {
    for (std::size_t p = 0; p < arch.channels; ++p) channels.push_back("ch" + std::to_string(p));
  }
  if (channels.size() != arch.channels) {
    throw ConfigError("architecture expects " + std::to_string(arch.channels) + " channels, got " +
                      std::to_string(channels.size()) + " names");
  }
  m.channels = std::move(channels);
  m.norm.mean.assign(arch.channels, 0.0);
  m.norm.std.assign(arch.channels, 1.0);
  std::size_t layer_fan_in = 1;
  for (const auto& [name, shape] : parameter_shapes(arch)) {
    if (shape.size() > 1) layer_fan_in = fan_in(shape);
    const double bound = std::sqrt(1.0 / static_cast<double>(layer_fan_in));
    Rng draw = rng.child(name);
    Tensor w(shape);
    for (double& v : w.values()) v = draw.uniform(-bound, bound);
    m.weights.emplace(name, std::move(w));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Input pipeline

double positional_encoding(std::size_t pos, std::size_t i, std::size_t dim) {
  if (i >= dim) {
    throw LookupError("parameter index " + std::to_string(i) + " out of range for dim " + std::to_string(dim));
  }
  const double exponent = static_cast<double>(i % 2 == 0 ? i : i - 1) / static_cast<double>(dim);
  const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
  return i % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

Tensor positional_encoding_map(std::size_t channels, std::size_t samples) {
  static std::mutex mutex;
  static std::map<std::pair<std::size_t, std::size_t>, Tensor> cache;
  std::lock_guard lock(mutex);
  auto [it, inserted] = cache.try_emplace({channels, samples});
  if (inserted) {
    Tensor pe(Shape{channels, samples});
    for (std::size_t p = 0; p < channels; ++p) {
      for (std::size_t t = 0; t < samples; ++t) pe.at(p, t) = positional_encoding(t, p, channels);
    }
    it->second = std::move(pe);
  }
  return it->second;
}

NormStats compute_norm_stats(const std::vector<const Tensor*>& cases) {
  if (cases.empty()) throw ValidationError("normalization needs at least one case");
  const std::size_t p = cases.front()->dim(0);
  NormStats s;
  s.mean.assign(p, 0.0);
  s.std.assign(p, 0.0);
  double count = 0.0;
  for (const Tensor* c : cases) {
    if (c->rank() != 2 || c->dim(0) != p) {
      throw ShapeError("normalization: case shape " + shape_string(c->shape()) + " differs from " +
                       std::to_string(p) + " channels");
    }
    count += static_cast<double>(c->dim(1));
  }
  for (std::size_t row = 0; row < p; ++row) {
    double sum = 0.0;
    for (const Tensor* c : cases) {
      for (std::size_t t = 0; t < c->dim(1); ++t) sum += c->at(row, t);
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (const Tensor* c : cases) {
      for (std::size_t t = 0; t < c->dim(1); ++t) {
        const double d = c->at(row, t) - mean;
        sq += d * d;
      }
    }
    s.mean[row] = mean;
    s.std[row] = std::max(std::sqrt(sq / count), kStdFloor);
  }
  return s;
}

void check_input(const TrainedModel& model, const Tensor& values) {
  const Shape want{model.arch.channels, model.arch.samples};
  if (values.shape() != want) {
    throw ValidationError("model expects input " + shape_string(want) + ", got " + shape_string(values.shape()));
  }
}

Tensor preprocess(const TrainedModel& model, const Tensor& values) {
  check_input(model, values);
  Tensor x = positional_encoding_map(model.arch.channels, model.arch.samples);
  const std::size_t t_len = model.arch.samples;
  for (std::size_t p = 0; p < model.arch.channels; ++p) {
    const double mean = model.norm.mean[p], sd = model.norm.std[p];
    for (std::size_t t = 0; t < t_len; ++t) x.at(p, t) += (values.at(p, t) - mean) / sd;
  }
  return x;
}

std::vector<std::size_t> channel_rows(const std::vector<std::string>& wanted,
                                      const std::vector<std::string>& available) {
  std::vector<std::size_t> rows;
  std::vector<std::string> missing;
  for (const auto& name : wanted) {
    auto it = std::find(available.begin(), available.end(), name);
    if (it == available.end()) {
      missing.push_back(name);
    } else {
      rows.push_back(static_cast<std::size_t>(it - available.begin()));
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw ValidationError("unknown channels: " + list);
  }
  return rows;
}

Tensor take_rows(const Tensor& values, const std::vector<std::size_t>& rows) {
  if (values.rank() != 2) throw ShapeError("take_rows expects a P x T matrix, got " + shape_string(values.shape()));
  const std::size_t t = values.dim(1);
  Tensor out(Shape{rows.size(), t});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= values.dim(0)) throw LookupError("row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(values.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * t), t,
                out.values().begin() + static_cast<std::ptrdiff_t>(i * t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward

std::size_t Prediction::predicted_class() const {
  std::size_t best = 0;
  for (std::size_t c = 1; c < class_probs.size(); ++c) {
    if (class_probs[c] > class_probs[best]) best = c;
  }
  return best;
}

namespace {

NodeId param(Graph& g, const TrainedModel& m, const std::string& name) {
  auto it = m.weights.find(name);
  if (it == m.weights.end()) throw LookupError("model has no weight \"" + name + "\"");
  return g.parameter(name, it->second);
}

}  // namespace

ForwardNodes build_forward(Graph& g, const TrainedModel& m, const Tensor& values, bool training,
                           Rng* dropout_rng) {
  const ArchConfig& a = m.arch;
  Tensor input = preprocess(m, values);
  ForwardNodes out;
  NodeId features;
  if (a.kind == ArchKind::mlp_baseline) {
    features = g.constant(std::move(input));
  } else {
    NodeId x = g.constant(input.reshaped({1, a.channels, a.samples}));
    std::size_t cin = 1;
    for (std::size_t b = 0; b < a.blocks.size(); ++b) {
      const BlockConfig& blk = a.blocks[b];
      const std::string p = block_prefix(b);
      const Conv2dOptions same{1, 1, blk.kernel_h / 2, blk.kernel_w / 2};
      NodeId h = g.conv2d(x, param(g, m, p + "conv1.weight"), param(g, m, p + "conv1.bias"), same);
      h = g.relu(h);
      h = g.conv2d(h, param(g, m, p + "conv2.weight"), param(g, m, p + "conv2.bias"), same);
      if (a.residual()) {
        NodeId skip = x;
        if (cin != blk.filters) {
          skip = g.conv2d(x, param(g, m, p + "skip.weight"), param(g, m, p + "skip.bias"), Conv2dOptions{});
        }
        h = g.add(h, skip);
      } else if (cin != blk.filters) {
        // Registered but unused, so backward() reports zero gradients for them.
        param(g, m, p + "skip.weight");
        param(g, m, p + "skip.bias");
      }
      h = g.relu(h);
      if (b + 1 == a.blocks.size()) out.last_conv = h;
      if (blk.pool_w > 1) h = g.maxpool2d(h, Pool2dOptions{1, blk.pool_w, 1, blk.pool_w});
      x = h;
      cin = blk.filters;
    }
    // Pool over time only: the parameter axis reaches the dense layer intact.
    features = g.time_avg_pool(x);
  }
  NodeId shared = g.relu(g.dense(features, param(g, m, "dense.weight"), param(g, m, "dense.bias")));
  const double rate = a.effective_dropout();
  if (training && rate > 0.0) {
    if (dropout_rng == nullptr) throw ConfigError("training forward with dropout needs a random stream");
    shared = g.dropout(shared, rate, *dropout_rng, true);
  }
  out.logits = g.dense(shared, param(g, m, "class.weight"), param(g, m, "class.bias"));
  out.size = g.dense(shared, param(g, m, "size.weight"), param(g, m, "size.bias"));
  return out;
}

Prediction forward(const TrainedModel& model, const Tensor& values, bool training, Rng* dropout_rng) {
  Graph g;
  const ForwardNodes nodes = build_forward(g, model, values, training, dropout_rng);
  const Tensor probs = softmax(g.value(nodes.logits));
  return Prediction{probs.data(), g.value(nodes.size).item()};
}

Prediction forward(const TrainedModel& model, const TransientCase& tc, bool training, Rng* dropout_rng) {
  return forward(model, tc.values, training, dropout_rng);
}

// ---------------------------------------------------------------------------
// Losses

double loss_regression(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw ShapeError("loss_regression: lengths " + std::to_string(pred.size()) + " and " +
                     std::to_string(truth.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return s;
}

double loss_classification(const Tensor& logits, const Tensor& onehot) {
  if (logits.rank() != 2 || logits.shape() != onehot.shape()) {
    throw ShapeError("loss_classification: logits " + shape_string(logits.shape()) + " vs labels " +
                     shape_string(onehot.shape()));
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ones = 0;
    for (std::size_t k = 0; k < c; ++k) {
      const double y = onehot.at(i, k);
      if (y != 0.0 && y != 1.0) ones = c + 1;
      if (y == 1.0) ++ones;
    }
    if (ones != 1) throw ValidationError("label row " + std::to_string(i) + " is not one-hot");
    const auto row = logits.values().subspan(i * c, c);
    const double lse = log_sum_exp(row);
    for (std::size_t k = 0; k < c; ++k) {
      if (onehot.at(i, k) == 1.0) total += lse - row[k];
    }
  }
  return total;
}

double loss_total(double classification, double regression) { return classification + regression; }

std::vector<double> one_hot(BreakLocation location) {
  std::vector<double> y(kClassOrder.size(), 0.0);
  for (std::size_t c = 0; c < kClassOrder.size(); ++c) y[c] = kClassOrder[c] == location ? 1.0 : 0.0;
  return y;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

Json nest(const Tensor& t, std::size_t axis, std::size_t offset, std::size_t stride) {
  Json arr = Json::array();
  const std::size_t n = t.dim(axis);
  const std::size_t inner = stride / n;
  for (std::size_t i = 0; i < n; ++i) {
    if (axis + 1 == t.rank()) {
      arr.push_back(t[offset + i]);
    } else {
      arr.push_back(nest(t, axis + 1, offset + i * inner, inner));
    }
  }
  return arr;
}

Json nested_array(const Tensor& t) {
  if (t.rank() == 0) return t.item();
  return nest(t, 0, 0, t.size());
}

void flatten(const Json& j, const Shape& shape, std::size_t axis, std::vector<double>& out,
             const std::string& name) {
  if (axis == shape.size()) {
    if (!j.is_number()) throw ValidationError("weight " + name + ": expected a number");
    out.push_back(j.get<double>());
    return;
  }
  if (!j.is_array() || j.size() != shape[axis]) {
    throw ValidationError("weight " + name + ": does not match shape " + shape_string(shape));
  }
  for (const Json& e : j) flatten(e, shape, axis + 1, out, name);
}

}  // namespace

Json model_to_json(const TrainedModel& m) {
  Json weights = Json::object();
  for (const auto& [name, w] : m.weights) weights[name] = nested_array(w);
  Json classes = Json::array();
  for (BreakLocation c : kClassOrder) classes.push_back(to_string(c));
  return Json{{"format", "tres-diag-checkpoint/1"},
              {"arch", to_json(m.arch)},
              {"class_order", classes},
              {"channels", m.channels},
              {"norm_stats", {{"mean", m.norm.mean}, {"std", m.norm.std}}},
              {"metadata",
               {{"seed", m.metadata.seed},
                {"iterations", m.metadata.iterations},
                {"termination", m.metadata.termination}}},
              {"weights", weights}};
}

TrainedModel model_from_json(const Json& j) {
  TrainedModel m;
  try {
    m.arch = arch_config_from_json(j.at("arch"));
    std::vector<std::string> classes = j.at("class_order").get<std::vector<std::string>>();
    std::vector<std::string> expected;
    for (BreakLocation c : kClassOrder) expected.push_back(to_string(c));
    if (classes != expected) throw ValidationError("checkpoint class order differs from [cold_leg, hot_leg]");
    m.channels = j.at("channels").get<std::vector<std::string>>();
    m.norm.mean = j.at("norm_stats").at("mean").get<std::vector<double>>();
    m.norm.std = j.at("norm_stats").at("std").get<std::vector<double>>();
    const Json& meta = j.at("metadata");
    m.metadata.seed = meta.at("seed").get<std::uint64_t>();
    m.metadata.iterations = meta.at("iterations").get<std::size_t>();
    m.metadata.termination = meta.at("termination").get<std::string>();
    const Json& weights = j.at("weights");
    const auto shapes = parameter_shapes(m.arch);
    if (weights.size() != shapes.size()) {
      throw ValidationError("checkpoint has " + std::to_string(weights.size()) + " weights, architecture declares " +
                            std::to_string(shapes.size()));
    }
    for (const auto& [name, shape] : shapes) {
      if (!weights.contains(name)) throw ValidationError("checkpoint lacks weight " + name);
      std::vector<double> values;
      flatten(weights.at(name), shape, 0, values, name);
      m.weights.emplace(name, Tensor(shape, std::move(values)));
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
  const std::size_t p = m.arch.channels;
  if (m.channels.size() != p || m.norm.mean.size() != p || m.norm.std.size() != p) {
    throw ValidationError("checkpoint channel list or norm stats do not have " + std::to_string(p) + " entries");
  }
  for (double s : m.norm.std) {
    if (!(s >= kStdFloor)) throw ValidationError("checkpoint norm std below the floor");
  }
  return m;
}

void save_checkpoint(const TrainedModel& model, const fs::path& path, const Json* extra) {
  Json j = model_to_json(model);
  if (extra) j["training"] = *extra;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

TrainedModel load_checkpoint(const fs::path& path, Json* extra) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw IoError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  if (extra) *extra = j.contains("training") ? j.at("training") : Json();
  try {
    return model_from_json(j);
  } catch (const ConfigError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace tresdiag
