#include "tresdiag/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "tresdiag/error.hpp"

namespace tresdiag {

namespace fs = std::filesystem;

std::string to_string(SaliencySource source) {
  return source == SaliencySource::grad_campp ? "grad_campp" : "lime_broadcast";
}

SaliencySource parse_saliency_source(const std::string& text) {
  if (text == "grad_campp") return SaliencySource::grad_campp;
  if (text == "lime_broadcast") return SaliencySource::lime_broadcast;
  throw ValidationError("unknown saliency source \"" + text + "\"");
}

void max_normalize(Tensor& map) {
  double top = 0.0;
  for (double v : map.values()) top = std::max(top, v);
  if (top <= 0.0) return;
  for (double& v : map.values()) v /= top;
}

Tensor bilinear_resize(const Tensor& map, std::size_t rows, std::size_t cols) {
  if (map.rank() != 2 || map.empty()) throw ShapeError("bilinear_resize needs a non-empty matrix");
  const std::size_t h = map.dim(0), w = map.dim(1);
  auto source = [](std::size_t i, std::size_t out, std::size_t in) {
    return out <= 1 || in <= 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  };
  Tensor out(Shape{rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    const double y = source(i, rows, h);
    const std::size_t y0 = std::min(static_cast<std::size_t>(y), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = source(j, cols, w);
      const std::size_t x0 = std::min(static_cast<std::size_t>(x), w - 1), x1 = std::min(x0 + 1, w - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = (1.0 - fx) * map.at(y0, x0) + fx * map.at(y0, x1);
      const double bottom = (1.0 - fx) * map.at(y1, x0) + fx * map.at(y1, x1);
      out.at(i, j) = (1.0 - fy) * top + fy * bottom;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grad-CAM++

SaliencyMap grad_campp(const TrainedModel& model, const Tensor& values, std::size_t case_id) {
  if (model.arch.kind == ArchKind::mlp_baseline) {
    throw UnsupportedError("Grad-CAM++ needs a convolutional architecture, got " + to_string(model.arch.kind));
  }
  check_input(model, values);
  Graph g;
  const ForwardNodes nodes = build_forward(g, model, values, false);
  g.backward(nodes.size);
  const Tensor& a = g.value(*nodes.last_conv);
  const Tensor& grad = g.grad(*nodes.last_conv);
  const std::size_t k_count = a.dim(0), h = a.dim(1), w = a.dim(2);

  Tensor cam(Shape{h, w});
  for (std::size_t k = 0; k < k_count; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) total += a.at(k, i, j);
    }
    double weight = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double gij = grad.at(k, i, j);
        const double g2 = gij * gij;
        const double denom = 2.0 * g2 + total * g2 * gij;
        const double alpha = denom != 0.0 ? g2 / denom : 0.0;
        weight += alpha * std::max(0.0, gij);
      }
    }
    if (weight == 0.0) continue;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) cam.at(i, j) += weight * a.at(k, i, j);
    }
  }
  for (double& v : cam.values()) v = std::max(0.0, v);
  Tensor map = bilinear_resize(cam, model.arch.channels, model.arch.samples);
  for (double& v : map.values()) v = std::max(0.0, v);
  max_normalize(map);
  if (!map.all_finite()) throw NumericError("non-finite Grad-CAM++ map for case " + std::to_string(case_id));
  return SaliencyMap{case_id, SaliencySource::grad_campp, std::move(map)};
}

// ---------------------------------------------------------------------------
// LIME

namespace {

// Solves the symmetric positive definite system a x = b in place (Cholesky).
std::vector<double> solve_spd(std::vector<double> a, std::vector<double> b, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0)) throw NumericError("LIME normal equations are not positive definite");
    d = std::sqrt(d);
    a[j * n + j] = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / d;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
    b[i] = s / a[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
    b[i] = s / a[i * n + i];
  }
  return b;
}

std::vector<std::vector<bool>> draw_masks(std::size_t n, std::size_t p, Rng& rng) {
  std::vector<std::vector<bool>> masks(n, std::vector<bool>(p));
  for (auto& m : masks) {
    for (std::size_t i = 0; i < p; ++i) m[i] = rng.uniform() < 0.5;
  }
  return masks;
}

bool all_same(const std::vector<std::vector<bool>>& masks) {
  return std::all_of(masks.begin(), masks.end(), [&](const auto& m) { return m == masks.front(); });
}

}  // namespace

LimeExplanation lime_explain(const MaskFunction& f, std::size_t p, const LimeConfig& config, Rng& rng) {
  if (p == 0) throw ValidationError("LIME needs at least one channel");
  const std::size_t n = config.perturbations;
  if (n < p + 2) {
    throw ConfigError("LIME needs at least P + 2 = " + std::to_string(p + 2) + " perturbations, got " +
                      std::to_string(n));
  }
  if (!(config.ridge >= 0.0)) throw ConfigError("LIME ridge penalty must be non-negative");
  const double width = config.kernel_width > 0.0 ? config.kernel_width : 0.75 * std::sqrt(static_cast<double>(p));

  std::vector<std::vector<bool>> masks = draw_masks(n, p, rng);
  if (all_same(masks)) {
    masks = draw_masks(n, p, rng);
    if (all_same(masks)) throw ValidationError("LIME design is degenerate: every perturbation mask is identical");
  }

  std::vector<double> y(n), weight(n);
  for (std::size_t s = 0; s < n; ++s) {
    y[s] = f(masks[s]);
    if (!std::isfinite(y[s])) throw NumericError("LIME black box returned a non-finite value");
    // Squared Euclidean distance to the all-ones mask.
    const double d2 = static_cast<double>(std::count(masks[s].begin(), masks[s].end(), false));
    weight[s] = std::exp(-d2 / (width * width));
  }

  // Column 0 is the intercept (not penalized).
  const std::size_t m = p + 1;
  std::vector<double> a(m * m, 0.0), b(m, 0.0), row(m);
  for (std::size_t s = 0; s < n; ++s) {
    row[0] = 1.0;
    for (std::size_t i = 0; i < p; ++i) row[i + 1] = masks[s][i] ? 1.0 : 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (row[i] == 0.0) continue;
      b[i] += weight[s] * row[i] * y[s];
      for (std::size_t j = 0; j < m; ++j) a[i * m + j] += weight[s] * row[i] * row[j];
    }
  }
  for (std::size_t i = 1; i < m; ++i) a[i * m + i] += config.ridge;
  // A channel never removed (or never kept) is collinear with the intercept;
  // a tiny diagonal keeps the system solvable without ridge.
  if (config.ridge == 0.0) {
    for (std::size_t i = 1; i < m; ++i) a[i * m + i] += 1e-12;
  }
  const std::vector<double> coef = solve_spd(a, b, m);

  double wsum = 0.0, wy = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    wsum += weight[s];
    wy += weight[s] * y[s];
  }
  const double ybar = wy / wsum;
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    double fit = coef[0];
    for (std::size_t i = 0; i < p; ++i) fit += masks[s][i] ? coef[i + 1] : 0.0;
    ss_res += weight[s] * (y[s] - fit) * (y[s] - fit);
    ss_tot += weight[s] * (y[s] - ybar) * (y[s] - ybar);
  }

  LimeExplanation out;
  out.weights.assign(coef.begin() + 1, coef.end());
  out.intercept = coef[0];
  out.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res <= 1e-24 ? 1.0 : 0.0);
  out.perturbations = n;
  return out;
}

LimeExplanation lime_explain(const TrainedModel& model, const Tensor& values, const LimeConfig& config, Rng& rng,
                             std::size_t case_id) {
  check_input(model, values);
  const std::size_t p = model.arch.channels, t = model.arch.samples;
  if (model.norm.mean.size() != p) throw ValidationError("model has no normalization statistics");
  const std::size_t target = forward(model, values).predicted_class();
  const MaskFunction f = [&](const std::vector<bool>& mask) {
    Tensor perturbed = values;
    for (std::size_t row = 0; row < p; ++row) {
      if (mask[row]) continue;
      for (std::size_t j = 0; j < t; ++j) perturbed.at(row, j) = model.norm.mean[row];
    }
    return forward(model, perturbed).class_probs[target];
  };
  LimeExplanation out = lime_explain(f, p, config, rng);
  out.case_id = case_id;
  return out;
}

SaliencyMap lime_broadcast(const LimeExplanation& lime, std::size_t samples) {
  Tensor map(Shape{lime.weights.size(), samples});
  for (std::size_t row = 0; row < lime.weights.size(); ++row) {
    for (std::size_t j = 0; j < samples; ++j) map.at(row, j) = std::abs(lime.weights[row]);
  }
  max_normalize(map);
  return SaliencyMap{lime.case_id, SaliencySource::lime_broadcast, std::move(map)};
}

CaseAttribution explain_case(const TrainedModel& model, const Tensor& values, std::size_t case_id,
                             const LimeConfig& config, const Rng& rng) {
  CaseAttribution out;
  out.gradcam = grad_campp(model, values, case_id);
  Rng stream = rng.child(case_id);
  out.lime = lime_explain(model, values, config, stream, case_id);
  return out;
}

std::vector<CaseAttribution> explain_cases(const TrainedModel& model, const Dataset& ds,
                                           const std::vector<std::size_t>& indices, const LimeConfig& config,
                                           const Rng& rng, unsigned threads) {
  const std::vector<std::size_t> rows = channel_rows(model.channels, ds.channel_names());
  std::vector<CaseAttribution> out(indices.size());
  auto work = [&](std::size_t i) {
    const TransientCase& tc = ds.cases.at(indices[i]);
    out[i] = explain_case(model, take_rows(tc.values, rows), tc.case_id, config, rng);
  };
  threads = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), std::max<std::size_t>(1, indices.size())));
  if (threads <= 1) {
    for (std::size_t i = 0; i < indices.size(); ++i) work(i);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < indices.size(); i += threads) work(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

Json attribution_to_json(const CaseAttribution& a, const std::vector<std::string>& channels) {
  if (a.lime.weights.size() != channels.size() || a.gradcam.values.dim(0) != channels.size()) {
    throw ShapeError("attribution of case " + std::to_string(a.gradcam.case_id) + " does not match " +
                     std::to_string(channels.size()) + " channels");
  }
  if (a.gradcam.case_id != a.lime.case_id) {
    throw ValidationError("Grad-CAM++ and LIME refer to different cases");
  }
  Json rows = Json::array();
  const Tensor& v = a.gradcam.values;
  for (std::size_t r = 0; r < v.dim(0); ++r) {
    rows.push_back(std::vector<double>(v.data().begin() + r * v.dim(1), v.data().begin() + (r + 1) * v.dim(1)));
  }
  Json weights = Json::object();
  for (std::size_t i = 0; i < channels.size(); ++i) weights[channels[i]] = a.lime.weights[i];
  return Json{{"case_id", a.gradcam.case_id},
              {"source", to_string(a.gradcam.source)},
              {"map", rows},
              {"lime",
               {{"weights", weights},
                {"intercept", a.lime.intercept},
                {"r2", a.lime.r2},
                {"perturbations", a.lime.perturbations}}}};
}

CaseAttribution attribution_from_json(const Json& j, const std::vector<std::string>& channels) {
  CaseAttribution a;
  try {
    a.gradcam.case_id = j.at("case_id").get<std::size_t>();
    a.gradcam.source = parse_saliency_source(j.at("source").get<std::string>());
    const auto rows = j.at("map").get<std::vector<std::vector<double>>>();
    if (rows.size() != channels.size() || rows.empty()) {
      throw ValidationError("map has " + std::to_string(rows.size()) + " rows, expected " +
                            std::to_string(channels.size()));
    }
    const std::size_t t = rows.front().size();
    Tensor map(Shape{rows.size(), t});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != t) throw ValidationError("ragged map row " + std::to_string(r));
      for (std::size_t c = 0; c < t; ++c) map.at(r, c) = rows[r][c];
    }
    a.gradcam.values = std::move(map);
    const Json& lime = j.at("lime");
    a.lime.case_id = a.gradcam.case_id;
    for (const auto& name : channels) a.lime.weights.push_back(lime.at("weights").at(name).get<double>());
    if (lime.at("weights").size() != channels.size()) throw ValidationError("LIME weights name unknown channels");
    a.lime.intercept = lime.at("intercept").get<double>();
    a.lime.r2 = lime.at("r2").get<double>();
    a.lime.perturbations = lime.at("perturbations").get<std::size_t>();
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed attribution: ") + e.what());
  }
  return a;
}

namespace {

std::string attribution_file_name(std::size_t case_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu.json", case_id);
  return buf;
}

}  // namespace

void save_attributions(const std::vector<CaseAttribution>& attributions, const std::vector<std::string>& channels,
                       const fs::path& directory) {
  std::error_code ec;
  fs::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());
  for (const auto& a : attributions) {
    const fs::path path = directory / attribution_file_name(a.gradcam.case_id);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << attribution_to_json(a, channels).dump() << '\n';
    if (!out) throw IoError("failed writing " + path.string());
  }
}

std::vector<CaseAttribution> load_attributions(const fs::path& directory, const std::vector<std::string>& channels) {
  if (!fs::is_directory(directory)) throw IoError("missing attribution directory " + directory.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(directory)) {
    const std::string name = entry.path().filename().string();
    if (name.starts_with("case_") && name.ends_with(".json")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no attribution files in " + directory.string());
  std::vector<CaseAttribution> out;
  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    Json j;
    try {
      in >> j;
    } catch (const Json::exception& e) {
      throw IoError("corrupt attribution file " + path.string() + ": " + e.what());
    }
    try {
      out.push_back(attribution_from_json(j, channels));
    } catch (const ValidationError& e) {
      throw IoError(path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace tresdiag
