#include "tresdiag/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "tresdiag/error.hpp"

namespace tresdiag {

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a) + " predictions vs " + std::to_string(b) +
                     " labels");
  }
  if (a == 0) throw ValidationError(std::string(what) + " of an empty set");
}

std::size_t class_index(BreakLocation location) {
  for (std::size_t c = 0; c < kClassOrder.size(); ++c) {
    if (kClassOrder[c] == location) return c;
  }
  throw ValidationError("unknown break location");
}

}  // namespace

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  check_lengths(predicted.size(), truth.size(), "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double micro_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth, std::size_t classes) {
  check_lengths(predicted.size(), truth.size(), "micro_f1");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      if (predicted[i] >= classes || truth[i] >= classes) {
        throw ValidationError("label " + std::to_string(std::max(predicted[i], truth[i])) + " outside " +
                              std::to_string(classes) + " classes");
      }
      const bool p = predicted[i] == c, t = truth[i] == c;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
  }
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

double sse_avg(std::span<const double> predicted, std::span<const double> truth) {
  check_lengths(predicted.size(), truth.size(), "sse_avg");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) s += (predicted[i] - truth[i]) * (predicted[i] - truth[i]);
  return s / static_cast<double>(predicted.size());
}

Metrics evaluate(const TrainedModel& model, const Dataset& ds, Split split) {
  const TrainingSet set = make_training_set(ds, split, model.channels);
  if (set.size() == 0) {
    throw ValidationError(std::string("the ") + (split == Split::train ? "training" : "test") + " split has no cases");
  }
  std::vector<std::size_t> pred, truth;
  std::vector<double> size_pred;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Prediction p = forward(model, set.inputs[i]);
    pred.push_back(p.predicted_class());
    truth.push_back(class_index(set.labels[i]));
    size_pred.push_back(p.size);
  }
  return Metrics{accuracy(pred, truth), micro_f1(pred, truth, kClassOrder.size()), sse_avg(size_pred, set.sizes),
                 set.size()};
}

std::optional<double> relative_error(double full, double selected) {
  if (full == 0.0) return std::nullopt;
  return (selected - full) / full * 100.0;
}

std::string format_relative(const std::optional<double>& percent) {
  if (!percent) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f%%", *percent);
  return buf;
}

ComparisonReport compare_runs(const RunSummary& full, const RunSummary& selected,
                              std::vector<std::string> selected_channels) {
  ComparisonReport r;
  r.full = full;
  r.selected = selected;
  r.accuracy_change = relative_error(full.metrics.accuracy, selected.metrics.accuracy);
  r.micro_f1_change = relative_error(full.metrics.micro_f1, selected.metrics.micro_f1);
  r.sse_change = relative_error(full.metrics.sse_avg, selected.metrics.sse_avg);
  r.iterations_full = full.log.iterations();
  r.iterations_selected = selected.log.iterations();
  if (r.iterations_full > 0) {
    r.iteration_ratio = static_cast<double>(r.iterations_selected) / static_cast<double>(r.iterations_full);
  }
  r.selected_channels = std::move(selected_channels);
  return r;
}

SelectionRecovery selection_recovery(const SignificanceRanking& ranking, const std::vector<ChannelSpec>& catalog) {
  auto informative = [&](const std::string& name) {
    const auto it = std::find_if(catalog.begin(), catalog.end(), [&](const auto& c) { return c.name == name; });
    if (it == catalog.end()) throw LookupError("channel " + name + " is not in the catalog");
    return it->informative;
  };
  SelectionRecovery r;
  r.selected = ranking.selected.size();
  for (const auto& name : ranking.selected) r.informative += informative(name);
  for (std::size_t i = 0; i < std::min<std::size_t>(5, ranking.order.size()); ++i) {
    const std::string& name = ranking.channels[ranking.order[i]];
    if (!informative(name)) r.decoys_in_top5.push_back(name);
  }
  return r;
}

namespace {

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json("undefined"); }

Json metrics_json(const Metrics& m) {
  return Json{{"accuracy", m.accuracy}, {"micro_f1", m.micro_f1}, {"sse_avg", m.sse_avg}, {"cases", m.cases}};
}

Json run_json(const RunSummary& run) {
  Json curve = Json::array();
  for (const auto& rec : run.log.records) {
    curve.push_back(Json{{"iteration", rec.iteration}, {"loss", rec.loss}, {"loss_cl", rec.loss_cl},
                         {"loss_re", rec.loss_re}});
  }
  return Json{{"metrics", metrics_json(run.metrics)},
              {"channels", run.channels},
              {"iterations", run.log.iterations()},
              {"termination", run.log.termination},
              {"loss_curve", curve}};
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

Json report_to_json(const ComparisonReport& r, const SelectionRecovery* recovery) {
  Json j{{"full", run_json(r.full)},
         {"selected", run_json(r.selected)},
         {"relative_error_percent",
          {{"accuracy", optional_json(r.accuracy_change)},
           {"micro_f1", optional_json(r.micro_f1_change)},
           {"sse_avg", optional_json(r.sse_change)}}},
         {"iterations_full", r.iterations_full},
         {"iterations_selected", r.iterations_selected},
         {"iteration_ratio", optional_json(r.iteration_ratio)},
         {"selected_channels", r.selected_channels}};
  if (recovery != nullptr) {
    j["recovery"] = Json{{"informative", recovery->informative},
                         {"selected", recovery->selected},
                         {"fraction", recovery->selected == 0 ? 0.0
                                                              : static_cast<double>(recovery->informative) /
                                                                    static_cast<double>(recovery->selected)},
                         {"decoys_in_top5", recovery->decoys_in_top5}};
  }
  return j;
}

std::string report_markdown(const ComparisonReport& r, const SelectionRecovery* recovery) {
  auto wall = [](const RunSummary& run) {
    return run.log.records.empty() ? std::string("n/a") : fixed(run.log.records.back().wall_time_s, 1) + " s";
  };
  std::ostringstream md;
  md << "# Diagnosis report\n\n";
  md << "## Test metrics\n\n";
  md << "| Input | Channels | SSE (average) | Micro-F1 | Accuracy |\n";
  md << "|---|---|---|---|---|\n";
  md << "| All parameters | " << r.full.channels << " | " << fixed(r.full.metrics.sse_avg, 4) << " | "
     << fixed(r.full.metrics.micro_f1, 3) << " | " << fixed(r.full.metrics.accuracy, 3) << " |\n";
  md << "| Selected parameters | " << r.selected.channels << " | " << fixed(r.selected.metrics.sse_avg, 4) << " | "
     << fixed(r.selected.metrics.micro_f1, 3) << " | " << fixed(r.selected.metrics.accuracy, 3) << " |\n";
  md << "| Relative error | | " << format_relative(r.sse_change) << " | " << format_relative(r.micro_f1_change)
     << " | " << format_relative(r.accuracy_change) << " |\n\n";
  md << "## Training\n\n";
  md << "| Input | Iterations | Termination | Wall time |\n|---|---|---|---|\n";
  md << "| All parameters | " << r.iterations_full << " | " << r.full.log.termination << " | " << wall(r.full)
     << " |\n";
  md << "| Selected parameters | " << r.iterations_selected << " | " << r.selected.log.termination << " | "
     << wall(r.selected) << " |\n\n";
  md << "Iteration ratio (selected / full): "
     << (r.iteration_ratio ? fixed(*r.iteration_ratio, 3) : std::string("undefined")) << "\n\n";
  if (!r.selected_channels.empty()) {
    md << "## Selected parameters\n\n";
    for (std::size_t i = 0; i < r.selected_channels.size(); ++i) {
      md << i + 1 << ". " << r.selected_channels[i] << "\n";
    }
    md << "\n";
  }
  if (recovery != nullptr) {
    md << "Informative among selected: " << recovery->informative << " / " << recovery->selected << "\n";
    md << "Decoys in the top five: "
       << (recovery->decoys_in_top5.empty() ? std::string("none") : std::to_string(recovery->decoys_in_top5.size()))
       << "\n";
  }
  return md.str();
}

}  // namespace tresdiag
