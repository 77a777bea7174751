#include "tresdiag/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "tresdiag/config.hpp"
#include "tresdiag/error.hpp"
#include "tresdiag/json_io.hpp"
#include "tresdiag/rng.hpp"

namespace tresdiag {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Enum names

std::string to_string(BreakLocation location) {
  return location == BreakLocation::cold_leg ? "cold_leg" : "hot_leg";
}

BreakLocation parse_break_location(const std::string& text) {
  if (text == "cold_leg") return BreakLocation::cold_leg;
  if (text == "hot_leg") return BreakLocation::hot_leg;
  throw ValidationError("unknown break location \"" + text + "\"");
}

void validate(const BreakSpec& spec) {
  if (!(spec.diameter > 0.0 && spec.diameter <= 1.0)) {
    throw ValidationError("break diameter must lie in (0, 1], got " + format_double(spec.diameter));
  }
  if (spec.location != BreakLocation::cold_leg && spec.location != BreakLocation::hot_leg) {
    throw ValidationError("invalid break location");
  }
}

namespace {

constexpr const char* kKindNames[] = {"pressure", "fluid_temperature", "pump_speed", "void_fraction",
                                      "level",    "control_variable",  "flow"};

constexpr const char* kLawNames[] = {
    "rcs_pressure", "pump_break_loop", "pump_intact_loop", "sit_void",     "sit_level",
    "pzr_level",    "suction_void",    "core_void",        "temperature",  "break_flow",
    "loop_flow",    "trip_signal",     "si_demand",        "decoy_constant", "decoy_drift"};

}  // namespace

std::string to_string(ChannelKind kind) { return kKindNames[static_cast<int>(kind)]; }

ChannelKind parse_channel_kind(const std::string& text) {
  for (int i = 0; i < 7; ++i) {
    if (text == kKindNames[i]) return static_cast<ChannelKind>(i);
  }
  throw ValidationError("unknown channel kind \"" + text + "\"");
}

std::string to_string(ResponseLaw law) { return kLawNames[static_cast<int>(law)]; }

ResponseLaw parse_response_law(const std::string& text) {
  for (int i = 0; i < 15; ++i) {
    if (text == kLawNames[i]) return static_cast<ResponseLaw>(i);
  }
  throw ValidationError("unknown response law \"" + text + "\"");
}

// ---------------------------------------------------------------------------
// Laws

namespace laws {

namespace {

constexpr double kBaseRate = 0.25;  // 1/s at full diameter, cold leg

double hot(const BreakSpec& b) { return b.location == BreakLocation::hot_leg ? 1.0 : 0.0; }

double location_weight(const ResponseSpec& r, const BreakSpec& b) {
  return 1.0 + r.hot_weight * hot(b) + r.cold_weight * (1.0 - hot(b));
}

double since(double t, double start) { return std::max(0.0, t - start); }

// Fraction of nominal speed of the break-loop pump.
double break_pump_fraction(const BreakSpec& b, double t, double rate, double lag) {
  const double onset = pump_drop_onset(b) + lag;
  if (t <= onset) return 1.0;
  const double depth = 0.3 + 0.6 * std::min(1.0, b.diameter);
  const double speed = (0.05 + 0.3 * b.diameter) * rate;
  return 1.0 - depth * (1.0 - std::exp(-speed * (t - onset)));
}

}  // namespace

double depressurization_rate(const BreakSpec& b) {
  return kBaseRate * std::pow(b.diameter, 1.5) * (1.0 + 0.15 * hot(b));
}

double pressure_fraction(const BreakSpec& b, double t) {
  return kPressureFloor + (1.0 - kPressureFloor) * std::exp(-depressurization_rate(b) * t);
}

double threshold_crossing_time(const BreakSpec& b, double threshold, double rate_scale) {
  const double k = depressurization_rate(b) * rate_scale;
  if (threshold <= kPressureFloor || k <= 0.0) return std::numeric_limits<double>::infinity();
  if (threshold >= 1.0) return 0.0;
  return std::log((1.0 - kPressureFloor) / (threshold - kPressureFloor)) / k;
}

double pump_drop_onset(const BreakSpec& b) {
  // Cold-leg breaks sit next to the pump: the void reaches it sooner.
  const double d = b.diameter;
  const double shortfall = std::max(0.0, 1.0 - d);
  return b.location == BreakLocation::cold_leg ? 2.0 + 6.0 * shortfall : 12.0 + 14.0 * shortfall;
}

double sit_injection_time(const BreakSpec& b) { return threshold_crossing_time(b, kSitSetpoint); }

double evaluate(const ResponseSpec& r, const BreakSpec& b, double t, double case_offset,
                double case_drift) {
  const double d = b.diameter;
  const double k = depressurization_rate(b) * r.rate;
  const double lw = location_weight(r, b);
  const double te = since(t, r.lag);
  switch (r.law) {
    case ResponseLaw::rcs_pressure:
      return r.baseline * (kPressureFloor + (1.0 - kPressureFloor) * std::exp(-k * lw * te));
    case ResponseLaw::pump_break_loop:
      return r.baseline * break_pump_fraction(b, t, r.rate, r.lag);
    case ResponseLaw::pump_intact_loop: {
      const double trip = threshold_crossing_time(b, kPumpTripSetpoint, r.rate) + r.lag;
      if (t <= trip) return r.baseline;
      return r.baseline * (0.25 + 0.75 * std::exp(-(t - trip) / 20.0));
    }
    case ResponseLaw::sit_void:
    case ResponseLaw::sit_level: {
      const double start = sit_injection_time(b) + r.lag;
      if (t <= start) return r.baseline;
      const double drained = r.span * (1.0 - std::exp(-(t - start) / 12.0));
      return r.law == ResponseLaw::sit_void ? r.baseline + drained : r.baseline - drained;
    }
    case ResponseLaw::pzr_level:
      return r.baseline - r.span * (1.0 - std::exp(-2.0 * k * lw * te));
    case ResponseLaw::suction_void: {
      const double start = std::max(0.0, pump_drop_onset(b) - 1.0) + r.lag;
      if (t <= start) return r.baseline;
      const double amplitude = (0.25 + 0.75 * d) * lw;
      return r.baseline + r.span * amplitude * (1.0 - std::exp(-(0.1 + 0.4 * d) * (t - start)));
    }
    case ResponseLaw::core_void:
      return r.baseline + r.span * std::pow(d, 0.8) * lw * (1.0 - std::exp(-3.0 * k * te));
    case ResponseLaw::temperature:
      return r.baseline -
             r.span * std::pow(d, 0.7) * lw * (1.0 - std::exp(-te * (0.2 + d) * r.rate / 25.0));
    case ResponseLaw::break_flow:
      return r.baseline + r.span * d * d * lw * (1.0 - std::exp(-te / 0.5)) * std::exp(-0.5 * k * te);
    case ResponseLaw::loop_flow:
      return r.baseline * break_pump_fraction(b, t, r.rate, r.lag) *
             (1.0 - 0.2 * (lw - 1.0) * (1.0 - std::exp(-te / 5.0)));
    case ResponseLaw::trip_signal: {
      const double trip = threshold_crossing_time(b, kTripSetpoint, r.rate) + r.lag;
      if (t <= trip) return r.baseline;
      return r.baseline * (0.07 + 0.93 * std::exp(-(t - trip) / 3.0));
    }
    case ResponseLaw::si_demand: {
      const double start = threshold_crossing_time(b, kSiSetpoint, r.rate) + r.lag;
      if (t <= start) return r.baseline;
      return r.baseline + r.span * (1.0 - std::exp(-(t - start) / 5.0));
    }
    case ResponseLaw::decoy_constant:
      return r.baseline + case_offset;
    case ResponseLaw::decoy_drift:
      return r.baseline + case_offset + case_drift * t;
  }
  throw ValidationError("unhandled response law");
}

}  // namespace laws

// ---------------------------------------------------------------------------
// Catalog

namespace {

std::size_t kind_index(ChannelKind kind) {
  for (std::size_t i = 0; i < kChannelKinds.size(); ++i) {
    if (kChannelKinds[i] == kind) return i;
  }
  return 0;
}

ChannelSpec make_channel(std::string name, ChannelKind kind, bool informative, ResponseSpec r,
                         double noise_fraction) {
  r.noise_sd = noise_fraction * r.span;
  return ChannelSpec{std::move(name), kind, informative, r};
}

std::string numbered(const char* prefix, std::size_t j, const char* suffix) {
  return prefix + std::to_string(j) + suffix;
}

// j-th informative channel of a kind. The first few carry plant-style names;
// further ones are systematic variants of the same law.
ChannelSpec informative_channel(ChannelKind kind, std::size_t j, double nf) {
  using L = ResponseLaw;
  const double jj = static_cast<double>(j);
  switch (kind) {
    case ChannelKind::pressure: {
      static const char* names[] = {"p_155010000", "p_120010000", "p_280010000", "p_335010000"};
      static const double rates[] = {1.0, 0.9, 1.1, 0.85};
      static const double lags[] = {0.0, 0.5, 1.0, 1.5};
      const double base = 15.5 - 0.05 * jj;
      ResponseSpec r{L::rcs_pressure, base, base * (1.0 - laws::kPressureFloor)};
      r.rate = j < 4 ? rates[j] : 1.0 + 0.05 * (jj - 3.0);
      r.lag = j < 4 ? lags[j] : 0.5 * jj;
      r.hot_weight = j == 1 ? 0.1 : 0.0;
      return make_channel(j < 4 ? names[j] : numbered("p_4", j, "0010000"), kind, true, r, nf);
    }
    case ChannelKind::pump_speed: {
      if (j == 0) {
        return make_channel("pmpvel_235", kind, true, ResponseSpec{L::pump_break_loop, 124.0, 124.0 * 0.9},
                            nf);
      }
      ResponseSpec r{L::pump_intact_loop, 124.0, 124.0 * 0.75};
      r.lag = 2.0 * (jj - 1.0);
      r.rate = 1.0 - 0.1 * (jj - 1.0) / (1.0 + jj);
      const std::string name = j == 1 ? "pmpvel_135" : j == 2 ? "pmpvel_335" : numbered("pmpvel_", j, "45");
      return make_channel(name, kind, true, r, nf);
    }
    case ChannelKind::void_fraction: {
      if (j == 0) return make_channel("voidf_811010000", kind, true, ResponseSpec{L::sit_void, 0.0, 0.95}, nf);
      if (j == 1) {
        return make_channel("voidf_235010000", kind, true, ResponseSpec{L::suction_void, 0.0, 0.6}, nf);
      }
      ResponseSpec r{L::core_void, 0.0, 0.6};
      r.hot_weight = 0.3;
      r.rate = j == 2 ? 1.0 : 1.5 + 0.1 * (jj - 3.0);
      const std::string name = j == 2 ? "voidf_155010000" : j == 3 ? "voidf_120010000" : numbered("voidf_2", j, "0010000");
      return make_channel(name, kind, true, r, nf);
    }
    case ChannelKind::level: {
      if (j == 1) {
        ResponseSpec r{L::pzr_level, 7.0, 5.95};
        r.hot_weight = 0.3;
        return make_channel("level_120010000", kind, true, r, nf);
      }
      ResponseSpec r{L::sit_level, 3.0, 2.4};
      r.lag = j == 0 ? 0.0 : jj;
      return make_channel(j == 0 ? "level_811010000" : numbered("level_8", j, "1010000"), kind, true, r, nf);
    }
    case ChannelKind::fluid_temperature: {
      static const char* names[] = {"tempf_155010000", "tempf_135010000", "tempf_235010000",
                                    "tempf_335010000"};
      static const double base[] = {600.0, 600.0, 565.0, 565.0};
      static const double span[] = {40.0, 30.0, 35.0, 20.0};
      static const double hw[] = {0.4, 0.8, 0.0, 0.2};
      static const double cw[] = {0.0, 0.0, 0.8, 0.0};
      ResponseSpec r{L::temperature, j < 4 ? base[j] : 580.0, j < 4 ? span[j] : 25.0};
      r.hot_weight = j < 4 ? hw[j] : 0.3;
      r.cold_weight = j < 4 ? cw[j] : 0.0;
      r.rate = j < 4 ? 1.0 : 1.0 + 0.1 * (jj - 3.0);
      return make_channel(j < 4 ? names[j] : numbered("tempf_", j, "55010000"), kind, true, r, nf);
    }
    case ChannelKind::flow: {
      if (j == 0) {
        ResponseSpec r{L::break_flow, 0.0, 4000.0};
        r.cold_weight = 0.6;
        return make_channel("mflowj_900010000", kind, true, r, nf);
      }
      if (j == 1) {
        ResponseSpec r{L::loop_flow, 5000.0, 5000.0 * 0.9};
        r.hot_weight = 1.0;
        return make_channel("mflowj_235010000", kind, true, r, nf);
      }
      ResponseSpec r{L::pump_intact_loop, 5000.0, 5000.0 * 0.75};
      r.lag = 1.0 + 2.0 * (jj - 2.0);
      return make_channel(j == 2 ? "mflowj_135010000" : numbered("mflowj_3", j, "0010000"), kind, true, r, nf);
    }
    case ChannelKind::control_variable: {
      if (j == 0) return make_channel("cntlrv_200", kind, true, ResponseSpec{L::trip_signal, 1.0, 0.93}, nf);
      ResponseSpec r{L::si_demand, 0.0, 1.0};
      r.lag = 2.0 * (jj - 1.0);
      return make_channel(j == 1 ? "cntlrv_300" : numbered("cntlrv_3", j, "0"), kind, true, r, nf);
    }
  }
  throw ConfigError("unhandled channel kind");
}

// j-th decoy of a kind: secondary-side and auxiliary-system signals that do
// not see the break.
ChannelSpec decoy_channel(ChannelKind kind, std::size_t j, double nf) {
  const ResponseLaw law = j % 2 == 0 ? ResponseLaw::decoy_constant : ResponseLaw::decoy_drift;
  double base = 1.0, span = 1.0;
  std::string name;
  switch (kind) {
    case ChannelKind::pressure:
      base = 6.7, span = 1.0, name = numbered("p_5", j + 1, "0010000");
      break;
    case ChannelKind::pump_speed:
      base = 300.0, span = 30.0, name = numbered("pmpvel_7", j + 3, "5");
      break;
    case ChannelKind::void_fraction:
      base = 0.1, span = 0.05, name = numbered("voidf_9", j + 1, "0010000");
      break;
    case ChannelKind::level:
      base = 12.0, span = 1.5, name = numbered("level_", 5 + j, "20010000");
      break;
    case ChannelKind::fluid_temperature:
      base = 500.0, span = 10.0, name = numbered("tempf_6", j + 1, "0010000");
      break;
    case ChannelKind::flow:
      base = 480.0, span = 40.0, name = numbered("mflowj_6", j + 1, "0010000");
      break;
    case ChannelKind::control_variable:
      base = 0.5, span = 0.5, name = numbered("cntlrv_90", j + 1, "");
      break;
  }
  return make_channel(std::move(name), kind, false, ResponseSpec{law, base, span}, nf);
}

}  // namespace

std::vector<ChannelSpec> channel_catalog(const CatalogConfig& config) {
  const std::size_t informative = std::accumulate(config.informative.begin(), config.informative.end(), std::size_t{0});
  const std::size_t decoys = std::accumulate(config.decoys.begin(), config.decoys.end(), std::size_t{0});
  if (informative + decoys != config.total) {
    throw ConfigError("catalog counts sum to " + std::to_string(informative + decoys) + ", expected " +
                      std::to_string(config.total));
  }
  if (config.total != 38) {
    throw ConfigError("catalog must declare 38 channels, got " + std::to_string(config.total));
  }
  if (!(config.noise_fraction >= 0.0)) throw ConfigError("noise_fraction must be non-negative");
  std::vector<ChannelSpec> catalog;
  for (ChannelKind kind : kChannelKinds) {
    for (std::size_t j = 0; j < config.informative[kind_index(kind)]; ++j) {
      catalog.push_back(informative_channel(kind, j, config.noise_fraction));
    }
  }
  for (ChannelKind kind : kChannelKinds) {
    for (std::size_t j = 0; j < config.decoys[kind_index(kind)]; ++j) {
      catalog.push_back(decoy_channel(kind, j, config.noise_fraction));
    }
  }
  std::vector<std::string> names;
  for (const auto& c : catalog) names.push_back(c.name);
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end()) {
    throw ConfigError("catalog produced duplicate channel names");
  }
  return catalog;
}

// ---------------------------------------------------------------------------
// Generation

std::size_t GeneratorConfig::num_samples() const {
  return static_cast<std::size_t>(std::llround(duration_s * sample_rate_hz));
}

void validate(const GeneratorConfig& c) {
  if (c.num_cases < 2) throw ConfigError("num_cases must be at least 2");
  if (c.num_test < 1 || c.num_test >= c.num_cases) {
    throw ConfigError("num_test must lie in [1, num_cases - 1]");
  }
  if (!(c.duration_s > 0.0) || !(c.sample_rate_hz > 0.0) || c.num_samples() < 1) {
    throw ConfigError("duration and sample rate must be positive");
  }
  const double exact = c.duration_s * c.sample_rate_hz;
  if (std::abs(exact - std::round(exact)) > 1e-9) {
    throw ConfigError("duration x sample rate must be a whole number of samples");
  }
  if (!(c.min_diameter > 0.0 && c.min_diameter <= c.max_diameter && c.max_diameter <= 1.0)) {
    throw ConfigError("diameter range must satisfy 0 < min <= max <= 1");
  }
  if (!(c.discharge_spread >= 0.0 && c.discharge_spread <= 1.0)) {
    throw ConfigError("discharge_spread must lie in [0, 1]");
  }
}

TransientCase generate_case(const std::vector<ChannelSpec>& catalog, const BreakSpec& spec,
                            std::uint64_t seed, const GeneratorConfig& config, std::size_t case_id) {
  validate(spec);
  const std::size_t p = catalog.size(), t = config.num_samples();
  if (p == 0 || t == 0) throw ConfigError("generate_case needs channels and samples");
  Tensor values(Shape{p, t});
  const Rng root(seed);
  BreakSpec effective = spec;
  if (config.discharge_spread > 0.0) {
    effective.diameter *= std::exp(config.discharge_spread * root.child("discharge").normal());
  }
  for (std::size_t row = 0; row < p; ++row) {
    const ResponseSpec& r = catalog[row].response;
    Rng draws = root.child("decoy").child(row);
    const double offset = 0.05 * r.span * draws.normal();
    const double drift = 0.001 * r.span * draws.normal();
    Rng noise = root.child("noise").child(row);
    for (std::size_t j = 0; j < t; ++j) {
      const double time = static_cast<double>(j) / config.sample_rate_hz;
      double v = laws::evaluate(r, effective, time, offset, drift);
      if (config.noise) v += r.noise_sd * noise.normal();
      values.at(row, j) = v;
    }
  }
  return TransientCase{case_id, seed, spec, std::move(values)};
}

Dataset generate_dataset(const GeneratorConfig& config, std::uint64_t seed, unsigned threads) {
  validate(config);
  Dataset ds;
  ds.catalog = channel_catalog(config.catalog);
  ds.config = config;
  ds.master_seed = seed;

  const Rng master(seed);
  const std::size_t n = config.num_cases;
  Rng label_rng = master.child("labels");
  std::vector<BreakSpec> labels(n);
  const double lo = std::log(config.min_diameter), hi = std::log(config.max_diameter);
  for (auto& l : labels) l.diameter = std::min(1.0, std::exp(label_rng.uniform(lo, hi)));
  std::vector<BreakLocation> locations(n);
  for (std::size_t i = 0; i < n; ++i) locations[i] = kBreakLocations[i % 2];
  label_rng.shuffle(locations);
  for (std::size_t i = 0; i < n; ++i) labels[i].location = locations[i];

  const Rng case_seeds = master.child("cases");
  ds.cases.resize(n);
  auto work = [&](std::size_t i) {
    ds.cases[i] = generate_case(ds.catalog, labels[i], case_seeds.child(i).seed(), config, i);
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += threads) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = master.child("split");
  split_rng.shuffle(order);
  ds.split.assign(n, Split::train);
  for (std::size_t i = 0; i < config.num_test; ++i) ds.split[order[i]] = Split::test;
  return ds;
}

std::vector<std::size_t> Dataset::indices(Split which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == which) out.push_back(i);
  }
  return out;
}

std::vector<std::string> Dataset::channel_names() const {
  std::vector<std::string> names;
  for (const auto& c : catalog) names.push_back(c.name);
  return names;
}

std::vector<double> Dataset::time_axis() const {
  const std::size_t t = cases.empty() ? config.num_samples() : cases.front().values.dim(1);
  std::vector<double> axis(t);
  for (std::size_t j = 0; j < t; ++j) axis[j] = static_cast<double>(j) / config.sample_rate_hz;
  return axis;
}

// ---------------------------------------------------------------------------
// Persistence

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::string case_file_name(std::size_t case_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu.csv", case_id);
  return buf;
}

namespace {

Json channel_to_json(const ChannelSpec& c) {
  const ResponseSpec& r = c.response;
  return Json{{"name", c.name},
              {"kind", to_string(c.kind)},
              {"informative", c.informative},
              {"response",
               {{"law", to_string(r.law)},
                {"baseline", r.baseline},
                {"span", r.span},
                {"rate", r.rate},
                {"lag", r.lag},
                {"hot_weight", r.hot_weight},
                {"cold_weight", r.cold_weight},
                {"noise_sd", r.noise_sd}}}};
}

ChannelSpec channel_from_json(const Json& j) {
  ChannelSpec c;
  c.name = j.at("name").get<std::string>();
  c.kind = parse_channel_kind(j.at("kind").get<std::string>());
  c.informative = j.at("informative").get<bool>();
  const Json& r = j.at("response");
  c.response.law = parse_response_law(r.at("law").get<std::string>());
  c.response.baseline = r.at("baseline").get<double>();
  c.response.span = r.at("span").get<double>();
  c.response.rate = r.at("rate").get<double>();
  c.response.lag = r.at("lag").get<double>();
  c.response.hot_weight = r.at("hot_weight").get<double>();
  c.response.cold_weight = r.at("cold_weight").get<double>();
  c.response.noise_sd = r.at("noise_sd").get<double>();
  return c;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    fields.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return fields;
}

double parse_number(const std::string& text, const fs::path& file, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw IoError(file.string() + ":" + std::to_string(line) + ": malformed number \"" + text + "\"");
  }
  return v;
}

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& directory) {
  std::error_code ec;
  fs::create_directories(directory / "cases", ec);
  if (ec) throw IoError("cannot create " + (directory / "cases").string() + ": " + ec.message());

  Json manifest;
  manifest["format"] = "tres-diag-dataset/1";
  manifest["master_seed"] = ds.master_seed;
  manifest["generator"] = to_json(ds.config);
  manifest["samples"] = ds.cases.empty() ? ds.config.num_samples() : ds.cases.front().values.dim(1);
  manifest["class_order"] = Json::array({"cold_leg", "hot_leg"});
  manifest["channels"] = Json::array();
  for (const auto& c : ds.catalog) manifest["channels"].push_back(channel_to_json(c));
  manifest["cases"] = Json::array();
  const std::vector<double> time = ds.time_axis();
  for (std::size_t i = 0; i < ds.cases.size(); ++i) {
    const TransientCase& tc = ds.cases[i];
    const std::string file = "cases/" + case_file_name(tc.case_id);
    manifest["cases"].push_back(Json{{"id", tc.case_id},
                                     {"file", file},
                                     {"seed", tc.seed},
                                     {"location", to_string(tc.label.location)},
                                     {"diameter", tc.label.diameter},
                                     {"split", ds.split[i] == Split::train ? "train" : "test"}});
    std::ofstream out(directory / file, std::ios::binary);
    if (!out) throw IoError("cannot write " + (directory / file).string());
    out << "time";
    for (const auto& c : ds.catalog) out << ',' << c.name;
    out << '\n';
    const std::size_t p = tc.values.dim(0), t = tc.values.dim(1);
    for (std::size_t j = 0; j < t; ++j) {
      out << format_double(time[j]);
      for (std::size_t row = 0; row < p; ++row) out << ',' << format_double(tc.values.at(row, j));
      out << '\n';
    }
    if (!out) throw IoError("failed writing " + (directory / file).string());
  }
  std::ofstream mf(directory / "manifest.json", std::ios::binary);
  if (!mf) throw IoError("cannot write " + (directory / "manifest.json").string());
  mf << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& directory, const LoadOptions& options) {
  const fs::path manifest_path = directory / "manifest.json";
  if (options.accessed != nullptr) options.accessed->push_back(manifest_path);
  std::ifstream mf(manifest_path, std::ios::binary);
  if (!mf) throw IoError("missing manifest " + manifest_path.string());
  Json manifest;
  try {
    mf >> manifest;
  } catch (const Json::exception& e) {
    throw IoError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }

  Dataset ds;
  std::size_t samples = 0;
  try {
    ds.master_seed = manifest.at("master_seed").get<std::uint64_t>();
    ds.config = generator_config_from_json(manifest.at("generator"));
    samples = manifest.at("samples").get<std::size_t>();
    for (const Json& c : manifest.at("channels")) ds.catalog.push_back(channel_from_json(c));
  } catch (const Json::exception& e) {
    throw IoError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw IoError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  const std::size_t p = ds.catalog.size();
  if (p == 0) throw IoError("manifest " + manifest_path.string() + " lists no channels");

  for (const Json& entry : manifest.at("cases")) {
    TransientCase tc;
    std::string file;
    Split split = Split::train;
    try {
      tc.case_id = entry.at("id").get<std::size_t>();
      tc.seed = entry.at("seed").get<std::uint64_t>();
      tc.label.location = parse_break_location(entry.at("location").get<std::string>());
      tc.label.diameter = entry.at("diameter").get<double>();
      file = entry.at("file").get<std::string>();
      const std::string s = entry.at("split").get<std::string>();
      if (s != "train" && s != "test") throw ValidationError("bad split \"" + s + "\"");
      split = s == "train" ? Split::train : Split::test;
    } catch (const std::exception& e) {
      throw IoError("corrupt manifest " + manifest_path.string() + ": " + e.what());
    }
    if (options.only && split != *options.only) continue;
    const fs::path path = directory / file;
    if (options.accessed != nullptr) options.accessed->push_back(path);
    if (!options.read_values) {
      ds.cases.push_back(std::move(tc));
      ds.split.push_back(split);
      continue;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      throw IoError("case " + std::to_string(tc.case_id) + ": missing file " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
    const std::vector<std::string> header = split_csv_line(line);
    if (header.size() != p + 1) {
      throw IoError(path.string() + ": header has " + std::to_string(header.size() - 1) +
                    " channels, manifest declares " + std::to_string(p));
    }
    if (header[0] != "time") throw IoError(path.string() + ": first column must be \"time\"");
    for (std::size_t row = 0; row < p; ++row) {
      if (header[row + 1] != ds.catalog[row].name) {
        throw IoError(path.string() + ": column " + std::to_string(row + 1) + " is \"" + header[row + 1] +
                      "\" but the manifest lists \"" + ds.catalog[row].name + "\"");
      }
    }
    tc.values = Tensor(Shape{p, samples});
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (rows >= samples) {
        throw IoError(path.string() + ": more than " + std::to_string(samples) + " data rows");
      }
      const std::vector<std::string> fields = split_csv_line(line);
      if (fields.size() != p + 1) {
        throw IoError(path.string() + ":" + std::to_string(rows + 2) + ": expected " +
                      std::to_string(p + 1) + " fields, got " + std::to_string(fields.size()));
      }
      for (std::size_t row = 0; row < p; ++row) {
        tc.values.at(row, rows) = parse_number(fields[row + 1], path, rows + 2);
      }
      ++rows;
    }
    if (rows != samples) {
      throw IoError(path.string() + ": " + std::to_string(rows) + " data rows, expected " +
                    std::to_string(samples));
    }
    ds.cases.push_back(std::move(tc));
    ds.split.push_back(split);
  }
  return ds;
}

}  // namespace tresdiag
