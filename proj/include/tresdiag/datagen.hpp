#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tresdiag/tensor.hpp"

namespace tresdiag {

// ---------------------------------------------------------------------------
// Labels

enum class BreakLocation { cold_leg = 0, hot_leg = 1 };

inline constexpr std::array<BreakLocation, 2> kBreakLocations{BreakLocation::cold_leg,
                                                               BreakLocation::hot_leg};
std::string to_string(BreakLocation location);
BreakLocation parse_break_location(const std::string& text);

struct BreakSpec {
  BreakLocation location = BreakLocation::cold_leg;
  // Fraction of the largest modeled break, in (0, 1].
  double diameter = 0.5;

  friend bool operator==(const BreakSpec&, const BreakSpec&) = default;
};

void validate(const BreakSpec& spec);

// ---------------------------------------------------------------------------
// Channel catalog

enum class ChannelKind {
  pressure,
  fluid_temperature,
  pump_speed,
  void_fraction,
  level,
  control_variable,
  flow,
};

inline constexpr std::array<ChannelKind, 7> kChannelKinds{
    ChannelKind::pressure,     ChannelKind::pump_speed,       ChannelKind::void_fraction,
    ChannelKind::level,        ChannelKind::fluid_temperature, ChannelKind::flow,
    ChannelKind::control_variable};

std::string to_string(ChannelKind kind);
ChannelKind parse_channel_kind(const std::string& text);

enum class ResponseLaw {
  rcs_pressure,      // exponential depressurization
  pump_break_loop,   // speed drop after a location-dependent delay
  pump_intact_loop,  // coast-down after a pressure trip
  sit_void,          // accumulator gas fraction, rises once injection starts
  sit_level,         // accumulator level, falls once injection starts
  pzr_level,         // pressurizer level drains with the primary inventory
  suction_void,      // pump suction void rising ahead of the pump drop
  core_void,         // core void growing with the depressurization
  temperature,       // saturating cooldown
  break_flow,        // discharge through the break
  loop_flow,         // loop flow following its pump
  trip_signal,       // reactor power after the low-pressure trip
  si_demand,         // safety injection demand after its setpoint
  decoy_constant,    // label-independent constant plus case offset
  decoy_drift,       // label-independent slow linear drift
};

std::string to_string(ResponseLaw law);
ResponseLaw parse_response_law(const std::string& text);

// Parameters of a channel's closed-form response. Units are the channel's
// physical units; span is the dynamic range that scales the noise.
struct ResponseSpec {
  ResponseLaw law = ResponseLaw::decoy_constant;
  double baseline = 0.0;
  double span = 1.0;
  double rate = 1.0;        // multiplies the characteristic rate of the law
  double lag = 0.0;         // seconds
  double hot_weight = 0.0;  // extra response when the break is on the hot leg
  double cold_weight = 0.0; // extra response when the break is on the cold leg
  double noise_sd = 0.0;

  friend bool operator==(const ResponseSpec&, const ResponseSpec&) = default;
};

struct ChannelSpec {
  std::string name;
  ChannelKind kind = ChannelKind::pressure;
  bool informative = false;
  ResponseSpec response;

  friend bool operator==(const ChannelSpec&, const ChannelSpec&) = default;
};

// Number of channels of each kind (indexed in kChannelKinds order), split by
// informativeness.
struct CatalogConfig {
  std::array<std::size_t, 7> informative{4, 3, 4, 2, 4, 3, 2};
  std::array<std::size_t, 7> decoys{2, 2, 1, 2, 3, 2, 4};
  std::size_t total = 38;
  // Noise standard deviation as a fraction of each channel's span.
  double noise_fraction = 0.01;

  friend bool operator==(const CatalogConfig&, const CatalogConfig&) = default;
};

// Informative channels first (grouped by kind, in kChannelKinds order), then
// decoys in the same kind order.
std::vector<ChannelSpec> channel_catalog(const CatalogConfig& config);

// ---------------------------------------------------------------------------
// Closed-form laws, exposed so tests can evaluate them independently.
namespace laws {

inline constexpr double kPressureFloor = 0.05;     // residual pressure fraction
inline constexpr double kSitSetpoint = 0.30;       // accumulator injection pressure fraction
inline constexpr double kTripSetpoint = 0.85;      // low-pressure reactor trip
inline constexpr double kPumpTripSetpoint = 0.70;  // intact-loop pump trip
inline constexpr double kSiSetpoint = 0.50;        // safety injection actuation

double depressurization_rate(const BreakSpec& b);
// p(t) / p(0) for the reference primary pressure channel.
double pressure_fraction(const BreakSpec& b, double t);
// First time the reference pressure fraction reaches threshold; +inf if never.
double threshold_crossing_time(const BreakSpec& b, double threshold, double rate_scale = 1.0);
// Time at which the break-loop pump speed starts to fall.
double pump_drop_onset(const BreakSpec& b);
double sit_injection_time(const BreakSpec& b);

// Noise-free value of a channel at time t. case_offset and case_drift are the
// per-case draws used by the decoy laws (ignored by the others).
double evaluate(const ResponseSpec& r, const BreakSpec& b, double t, double case_offset = 0.0,
                double case_drift = 0.0);

}  // namespace laws

// ---------------------------------------------------------------------------
// Cases and datasets

struct GeneratorConfig {
  CatalogConfig catalog;
  std::size_t num_cases = 346;
  std::size_t num_test = 70;
  double duration_s = 100.0;
  double sample_rate_hz = 2.0;
  // Diameters are log-uniform on [min_diameter, max_diameter].
  double min_diameter = 0.05;
  double max_diameter = 1.0;
  // false disables noise entirely (used by the separability oracle).
  bool noise = true;
  // Log-sd of the per-case discharge factor: the break drains like one of
  // diameter d * exp(spread * N(0, 1)) while the label keeps d.
  double discharge_spread = 0.0;

  std::size_t num_samples() const;

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

void validate(const GeneratorConfig& config);

struct TransientCase {
  std::size_t case_id = 0;
  std::uint64_t seed = 0;
  BreakSpec label;
  // P x T, rows in catalog order.
  Tensor values;

  friend bool operator==(const TransientCase&, const TransientCase&) = default;
};

enum class Split { train, test };

struct Dataset {
  std::vector<ChannelSpec> catalog;
  std::vector<TransientCase> cases;
  std::vector<Split> split;  // parallel to cases
  GeneratorConfig config;
  std::uint64_t master_seed = 0;

  std::vector<std::size_t> indices(Split which) const;
  std::vector<std::string> channel_names() const;
  std::vector<double> time_axis() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

TransientCase generate_case(const std::vector<ChannelSpec>& catalog, const BreakSpec& spec,
                            std::uint64_t seed, const GeneratorConfig& config = {},
                            std::size_t case_id = 0);

// threads == 0 uses the hardware concurrency. The result does not depend on
// the thread count.
Dataset generate_dataset(const GeneratorConfig& config, std::uint64_t seed, unsigned threads = 1);

// Layout: manifest.json + cases/case_<id:04>.csv
void save_dataset(const Dataset& dataset, const std::filesystem::path& directory);

struct LoadOptions {
  // Load only the cases of this split.
  std::optional<Split> only;
  // false keeps the manifest metadata and leaves every case's values empty.
  bool read_values = true;
  // Receives every file read (or that would be read when read_values is
  // false), in order.
  std::vector<std::filesystem::path>* accessed = nullptr;
};

Dataset load_dataset(const std::filesystem::path& directory, const LoadOptions& options = {});

std::string case_file_name(std::size_t case_id);
// Decimal text that parses back to the identical double.
std::string format_double(double value);

}  // namespace tresdiag
