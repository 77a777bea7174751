#include "tresdiag/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "tresdiag/error.hpp"

namespace tresdiag {

namespace fs = std::filesystem;

void validate(const TrainConfig& c) {
  if (!(c.alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(c.epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (c.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (c.max_iterations < 1) throw ConfigError("max_iterations must be at least 1");
  if (c.window < 1) throw ConfigError("termination window must be at least 1");
  if (!(c.threshold > 0.0)) throw ConfigError("termination threshold must be positive");
}

void adam_step(std::map<std::string, Tensor>& params, const Gradients& grads, AdamState& s,
               const TrainConfig& c) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw LookupError("no gradient for parameter " + name);
    if (it->second.shape() != p.shape()) {
      throw ShapeError("gradient of " + name + " has shape " + shape_string(it->second.shape()) +
                       ", parameter has " + shape_string(p.shape()));
    }
    if (!it->second.all_finite()) throw NumericError("non-finite gradient in parameter " + name);
  }
  ++s.t;
  const double t = static_cast<double>(s.t);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    auto [mi, m_new] = s.m.try_emplace(name, p.shape());
    auto [vi, v_new] = s.v.try_emplace(name, p.shape());
    auto m = mi->second.values();
    auto v = vi->second.values();
    auto theta = p.values();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double m_hat = m[k] / correct1;
      const double v_hat = v[k] / correct2;
      theta[k] -= c.alpha * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

bool should_terminate(std::span<const double> history, std::size_t window, double threshold) {
  if (history.empty()) throw ValidationError("should_terminate needs a non-empty history");
  if (history.size() < window) return false;
  const double last = history.back();
  if (last == 0.0) return true;
  double worst = 0.0;
  for (std::size_t j = history.size() - window; j < history.size(); ++j) {
    worst = std::max(worst, std::abs(history[j] - last) / std::abs(last));
  }
  return worst < threshold;
}

std::vector<double> TrainLog::losses() const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.loss);
  return out;
}

void save_train_log(const TrainLog& log, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write train log " + path.string());
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const IterationRecord& r = log.records[i];
    Json line{{"iteration", r.iteration},
              {"loss", r.loss},
              {"loss_cl", r.loss_cl},
              {"loss_re", r.loss_re},
              {"wall_time_s", r.wall_time_s}};
    if (i + 1 == log.records.size()) line["termination"] = log.termination;
    out << line.dump() << '\n';
  }
  if (!out) throw IoError("failed writing train log " + path.string());
}

TrainLog load_train_log(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read train log " + path.string());
  TrainLog log;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      IterationRecord r;
      r.iteration = j.at("iteration").get<std::size_t>();
      r.loss = j.at("loss").get<double>();
      r.loss_cl = j.at("loss_cl").get<double>();
      r.loss_re = j.at("loss_re").get<double>();
      r.wall_time_s = j.at("wall_time_s").get<double>();
      if (r.iteration != log.records.size() + 1) {
        throw IoError(path.string() + ":" + std::to_string(number) + ": iteration " + std::to_string(r.iteration) +
                      " out of sequence");
      }
      log.records.push_back(r);
      if (j.contains("termination")) log.termination = j.at("termination").get<std::string>();
    } catch (const Json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  if (log.records.empty()) throw IoError("train log " + path.string() + " has no records");
  return log;
}

TrainingSet make_training_set(const Dataset& ds, Split which, const std::vector<std::string>& channels) {
  const std::vector<std::size_t> rows = channel_rows(channels, ds.channel_names());
  TrainingSet set;
  for (std::size_t i : ds.indices(which)) {
    const TransientCase& tc = ds.cases[i];
    set.case_ids.push_back(tc.case_id);
    set.inputs.push_back(take_rows(tc.values, rows));
    set.labels.push_back(tc.label.location);
    set.sizes.push_back(tc.label.diameter);
  }
  return set;
}

namespace {

struct CaseResult {
  Gradients grads;
  StepLosses losses;
};

CaseResult case_backward(const TrainedModel& model, const TrainingSet& set, std::size_t i, const Rng& dropout) {
  Graph g;
  Rng rng = dropout.child(set.case_ids[i]);
  const ForwardNodes nodes = build_forward(g, model, set.inputs[i], true, &rng);
  const NodeId cl = g.softmax_cross_entropy(nodes.logits, Tensor::vector(one_hot(set.labels[i])));
  const NodeId re = g.squared_error(nodes.size, Tensor::vector({set.sizes[i]}));
  const NodeId total = g.add_scalars({cl, re});
  CaseResult r;
  r.losses = {g.value(cl).item(), g.value(re).item()};
  r.grads = g.backward(total);
  return r;
}

}  // namespace

StepLosses minibatch_step(TrainedModel& model, AdamState& adam, const TrainingSet& set,
                          std::span<const std::size_t> batch, const TrainConfig& config, const Rng& dropout) {
  if (batch.empty()) throw ValidationError("empty minibatch");
  std::vector<CaseResult> results(batch.size());
  const unsigned threads = std::min<std::size_t>(std::max(1u, config.threads), batch.size());
  if (threads <= 1) {
    for (std::size_t b = 0; b < batch.size(); ++b) results[b] = case_backward(model, set, batch[b], dropout);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (unsigned w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t b = w; b < batch.size(); b += threads) {
            results[b] = case_backward(model, set, batch[b], dropout);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  // Reduce in batch order so the sum does not depend on the thread count.
  Gradients total = std::move(results.front().grads);
  StepLosses losses = results.front().losses;
  for (std::size_t b = 1; b < results.size(); ++b) {
    for (auto& [name, g] : total) {
      const Tensor& add = results[b].grads.at(name);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += add[k];
    }
    losses.cl += results[b].losses.cl;
    losses.re += results[b].losses.re;
  }
  adam_step(model.weights, total, adam, config);
  return losses;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::size_t iteration, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).child("shuffle").child(iteration);
  rng.shuffle(order);
  return order;
}

Json adam_to_json(const AdamState& s) {
  auto moments = [](const std::map<std::string, Tensor>& tensors) {
    Json out = Json::object();
    for (const auto& [name, t] : tensors) out[name] = Json{{"shape", t.shape()}, {"values", t.data()}};
    return out;
  };
  const Json m = moments(s.m), v = moments(s.v);
  return Json{{"t", s.t}, {"m", m}, {"v", v}};
}

AdamState adam_from_json(const Json& j) {
  AdamState s;
  try {
    s.t = j.at("t").get<std::uint64_t>();
    for (const char* key : {"m", "v"}) {
      auto& target = key[0] == 'm' ? s.m : s.v;
      for (const auto& [name, entry] : j.at(key).items()) {
        target.emplace(name, Tensor(entry.at("shape").get<Shape>(), entry.at("values").get<std::vector<double>>()));
      }
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed optimizer state: ") + e.what());
  }
  return s;
}

TrainResult train(TrainedModel model, const Dataset& ds, const TrainConfig& config, const TrainOptions& options) {
  validate(config);
  const TrainingSet set = make_training_set(ds, Split::train, model.channels);
  if (set.size() == 0) throw ValidationError("the dataset has no training cases");
  check_input(model, set.inputs.front());
  std::vector<const Tensor*> inputs;
  for (const Tensor& t : set.inputs) inputs.push_back(&t);
  model.norm = compute_norm_stats(inputs);
  model.metadata.seed = config.seed;

  TrainResult result{std::move(model), {}, {}};
  const Rng dropout_root = Rng(config.seed).child("dropout");
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t it = 1; it <= config.max_iterations; ++it) {
    const TrainedModel last_good = result.model;
    const std::vector<std::size_t> order = epoch_order(set.size(), it, config.seed);
    const Rng dropout = dropout_root.child(it);
    StepLosses epoch;
    try {
      for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
        const std::size_t end = std::min(order.size(), b + config.batch_size);
        const StepLosses l = minibatch_step(result.model, result.adam, set,
                                            std::span<const std::size_t>(order).subspan(b, end - b), config, dropout);
        epoch.cl += l.cl;
        epoch.re += l.re;
      }
      if (!std::isfinite(epoch.cl + epoch.re)) {
        throw NumericError("non-finite loss (classification " + std::to_string(epoch.cl) + ", regression " +
                           std::to_string(epoch.re) + ")");
      }
    } catch (const NumericError& e) {
      result.log.termination = "non_finite_loss";
      std::string where;
      if (!options.abort_checkpoint.empty()) {
        TrainedModel saved = last_good;
        saved.metadata.iterations = it - 1;
        saved.metadata.termination = "non_finite_loss";
        save_checkpoint(saved, options.abort_checkpoint);
        where = "; last good model saved to " + options.abort_checkpoint.string();
      }
      throw NumericError("training aborted at iteration " + std::to_string(it) + ": " + e.what() + where);
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const IterationRecord record{it, loss_total(epoch.cl, epoch.re), epoch.cl, epoch.re, elapsed};
    result.log.records.push_back(record);
    if (options.on_iteration) options.on_iteration(record);
    const std::vector<double> history = result.log.losses();
    if (should_terminate(history, config.window, config.threshold)) {
      result.log.termination = "converged";
      break;
    }
  }
  if (result.log.termination.empty()) result.log.termination = "max_iterations";
  result.model.metadata.iterations = result.log.iterations();
  result.model.metadata.termination = result.log.termination;
  return result;
}

}  // namespace tresdiag
