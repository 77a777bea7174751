#include "tresdiag/select.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "tresdiag/error.hpp"

namespace tresdiag {

namespace fs = std::filesystem;

CombinedCase combine_case_attribution(const SaliencyMap& gradcam, const LimeExplanation& lime,
                                      double gradcam_weight, double lime_weight) {
  if (!(gradcam_weight >= 0.0) || !(lime_weight >= 0.0)) throw ConfigError("combination weights must be non-negative");
  if (gradcam.case_id != lime.case_id) {
    throw ValidationError("attributions of case " + std::to_string(gradcam.case_id) + " and case " +
                          std::to_string(lime.case_id) + " cannot be combined");
  }
  const Tensor& g = gradcam.values;
  if (g.rank() != 2 || g.dim(0) != lime.weights.size()) {
    throw ShapeError("case " + std::to_string(gradcam.case_id) + ": map " + shape_string(g.shape()) + " vs " +
                     std::to_string(lime.weights.size()) + " LIME weights");
  }
  const Tensor l = lime_broadcast(lime, g.dim(1)).values;
  CombinedCase out{gradcam.case_id, Tensor(g.shape()), std::vector<double>(g.dim(0), 0.0)};
  for (std::size_t i = 0; i < g.size(); ++i) out.map[i] = gradcam_weight * g[i] + lime_weight * l[i];
  for (std::size_t r = 0; r < g.dim(0); ++r) {
    for (std::size_t j = 0; j < g.dim(1); ++j) out.score[r] += out.map.at(r, j);
  }
  return out;
}

LumpedSaliency aggregate(const std::vector<CombinedCase>& cases) {
  if (cases.empty()) throw ValidationError("aggregate needs at least one case map");
  std::vector<const CombinedCase*> sorted;
  for (const auto& c : cases) sorted.push_back(&c);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const CombinedCase* a, const CombinedCase* b) { return a->case_id < b->case_id; });
  LumpedSaliency out{Tensor(sorted.front()->map.shape()), cases.size()};
  for (const CombinedCase* c : sorted) {
    if (c->map.shape() != out.values.shape()) {
      throw ShapeError("case " + std::to_string(c->case_id) + " has map shape " + shape_string(c->map.shape()) +
                       ", expected " + shape_string(out.values.shape()));
    }
    for (std::size_t i = 0; i < c->map.size(); ++i) out.values[i] += c->map[i];
  }
  return out;
}

namespace {

double median_of(std::span<const double> sorted) {
  const std::size_t n = sorted.size();
  return n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

}  // namespace

IqrResult remove_outliers_iqr(std::span<const double> samples) {
  IqrResult r;
  if (samples.size() < 4) {
    r.kept.assign(samples.begin(), samples.end());
    r.too_few = true;
    return r;
  }
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const std::size_t half = (n + 1) / 2;
  r.q1 = median_of(std::span<const double>(sorted).first(half));
  r.q3 = median_of(std::span<const double>(sorted).last(half));
  const double iqr = r.q3 - r.q1;
  r.low = r.q1 - 1.5 * iqr;
  r.high = r.q3 + 1.5 * iqr;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i] >= r.low && samples[i] <= r.high) {
      r.kept.push_back(samples[i]);
    } else {
      r.removed.push_back(i);
    }
  }
  return r;
}

SignificanceRanking rank_and_select(const std::vector<std::vector<double>>& case_scores,
                                    const std::vector<std::string>& channels, std::size_t k) {
  const std::size_t p = channels.size();
  if (k == 0) throw ConfigError("k must be at least 1");
  if (k > p) throw ConfigError("k = " + std::to_string(k) + " exceeds the " + std::to_string(p) + " channels");
  if (case_scores.size() != p) {
    throw ShapeError("case scores have " + std::to_string(case_scores.size()) + " channels, expected " +
                     std::to_string(p));
  }
  SignificanceRanking r;
  r.channels = channels;
  r.k = k;
  for (std::size_t c = 0; c < p; ++c) {
    IqrResult f = remove_outliers_iqr(case_scores[c]);
    double total = 0.0;
    for (double v : f.kept) total += v;
    r.scores.push_back(total);
    r.retained.push_back(std::move(f.kept));
    r.removed.push_back(std::move(f.removed));
  }
  r.order.resize(p);
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t a, std::size_t b) { return r.scores[a] > r.scores[b]; });
  for (std::size_t i = 0; i < k; ++i) r.selected.push_back(channels[r.order[i]]);
  return r;
}

std::vector<std::vector<double>> channel_major_scores(const std::vector<CombinedCase>& cases) {
  if (cases.empty()) throw ValidationError("no case scores");
  const std::size_t p = cases.front().score.size();
  std::vector<std::vector<double>> out(p);
  for (const auto& c : cases) {
    if (c.score.size() != p) throw ShapeError("case " + std::to_string(c.case_id) + " has a different channel count");
    for (std::size_t i = 0; i < p; ++i) out[i].push_back(c.score[i]);
  }
  return out;
}

Json significance_to_json(const SignificanceRanking& r) {
  Json ranked = Json::array();
  for (std::size_t pos = 0; pos < r.order.size(); ++pos) {
    const std::size_t c = r.order[pos];
    ranked.push_back(Json{{"rank", pos + 1},
                          {"name", r.channels[c]},
                          {"index", c},
                          {"score", r.scores[c]},
                          {"retained", r.retained[c]},
                          {"removed", r.removed[c]},
                          {"removed_count", r.removed[c].size()}});
  }
  return Json{{"k", r.k}, {"channels", r.channels}, {"ranked", ranked}, {"selected", r.selected}};
}

SignificanceRanking significance_from_json(const Json& j) {
  SignificanceRanking r;
  try {
    r.k = j.at("k").get<std::size_t>();
    r.channels = j.at("channels").get<std::vector<std::string>>();
    const std::size_t p = r.channels.size();
    r.scores.assign(p, 0.0);
    r.retained.assign(p, {});
    r.removed.assign(p, {});
    std::set<std::size_t> seen;
    for (const auto& e : j.at("ranked")) {
      const std::size_t c = e.at("index").get<std::size_t>();
      if (c >= p || !seen.insert(c).second || e.at("name").get<std::string>() != r.channels[c]) {
        throw ValidationError("ranked entry " + e.dump() + " does not match the channel list");
      }
      r.order.push_back(c);
      r.scores[c] = e.at("score").get<double>();
      r.retained[c] = e.at("retained").get<std::vector<double>>();
      r.removed[c] = e.at("removed").get<std::vector<std::size_t>>();
    }
    if (r.order.size() != p) throw ValidationError("ranking does not cover every channel");
    r.selected = j.at("selected").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed significance ranking: ") + e.what());
  }
  return r;
}

void write_significance(const SignificanceRanking& ranking, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << significance_to_json(ranking).dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

SignificanceRanking read_significance(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw IoError("corrupt " + path.string() + ": " + e.what());
  }
  try {
    return significance_from_json(j);
  } catch (const ValidationError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_lumped_saliency(const LumpedSaliency& lumped, const std::vector<std::string>& channels,
                           const fs::path& path) {
  const Tensor& v = lumped.values;
  if (v.rank() != 2 || v.dim(0) != channels.size()) throw ShapeError("lumped map does not match the channel list");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t r = 0; r < v.dim(0); ++r) {
    out << channels[r];
    for (std::size_t j = 0; j < v.dim(1); ++j) out << ',' << format_double(v.at(r, j));
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_channel_list(const std::vector<std::string>& channels, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& c : channels) out << c << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::string> read_channel_list(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read channel list " + path.string());
  std::vector<std::string> out;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto last = line.find_last_not_of(" \t\r");
    std::string name = line.substr(first, last - first + 1);
    if (!seen.insert(name).second) throw ValidationError("channel " + name + " listed twice in " + path.string());
    out.push_back(std::move(name));
  }
  if (out.empty()) throw ValidationError("channel list " + path.string() + " is empty");
  return out;
}

}  // namespace tresdiag
