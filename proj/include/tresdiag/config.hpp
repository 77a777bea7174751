#pragma once

#include "tresdiag/datagen.hpp"
#include "tresdiag/json_io.hpp"
#include "tresdiag/model.hpp"
#include "tresdiag/train.hpp"

namespace tresdiag {

// JSON forms of the module configs. Readers start from the defaults, accept
// partial objects, and reject unknown keys with a ConfigError.

Json to_json(const GeneratorConfig& config);
GeneratorConfig generator_config_from_json(const Json& j);

Json to_json(const ArchConfig& arch);
ArchConfig arch_config_from_json(const Json& j);

Json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const Json& j);

}  // namespace tresdiag
