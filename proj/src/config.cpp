#include "tresdiag/config.hpp"

namespace tresdiag {

Json to_json(const GeneratorConfig& c) {
  return Json{{"catalog",
               {{"informative", c.catalog.informative},
                {"decoys", c.catalog.decoys},
                {"total", c.catalog.total},
                {"noise_fraction", c.catalog.noise_fraction}}},
              {"num_cases", c.num_cases},
              {"num_test", c.num_test},
              {"duration_s", c.duration_s},
              {"sample_rate_hz", c.sample_rate_hz},
              {"min_diameter", c.min_diameter},
              {"max_diameter", c.max_diameter},
              {"noise", c.noise},
              {"discharge_spread", c.discharge_spread}};
}

GeneratorConfig generator_config_from_json(const Json& j) {
  GeneratorConfig c;
  StrictObject o(j, "dataset");
  if (const Json* cat = o.child("catalog")) {
    StrictObject co(*cat, "dataset.catalog");
    co.read("informative", c.catalog.informative);
    co.read("decoys", c.catalog.decoys);
    co.read("total", c.catalog.total);
    co.read("noise_fraction", c.catalog.noise_fraction);
    co.finish();
  }
  o.read("num_cases", c.num_cases);
  o.read("num_test", c.num_test);
  o.read("duration_s", c.duration_s);
  o.read("sample_rate_hz", c.sample_rate_hz);
  o.read("min_diameter", c.min_diameter);
  o.read("max_diameter", c.max_diameter);
  o.read("noise", c.noise);
  o.read("discharge_spread", c.discharge_spread);
  o.finish();
  return c;
}

Json to_json(const ArchConfig& a) {
  Json blocks = Json::array();
  for (const auto& b : a.blocks) {
    blocks.push_back(
        {{"filters", b.filters}, {"kernel_h", b.kernel_h}, {"kernel_w", b.kernel_w}, {"pool_w", b.pool_w}});
  }
  return Json{{"kind", to_string(a.kind)},   {"blocks", blocks},
              {"dense_width", a.dense_width}, {"dropout", a.dropout},
              {"num_classes", a.num_classes}, {"channels", a.channels},
              {"samples", a.samples}};
}

ArchConfig arch_config_from_json(const Json& j) {
  ArchConfig a;
  StrictObject o(j, "arch");
  std::string kind = to_string(a.kind);
  o.read("kind", kind);
  try {
    a.kind = parse_arch_kind(kind);
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("arch.kind: ") + e.what());
  }
  if (const Json* blocks = o.child("blocks")) {
    if (!blocks->is_array()) throw ConfigError("arch.blocks: expected an array");
    a.blocks.clear();
    for (std::size_t i = 0; i < blocks->size(); ++i) {
      BlockConfig b;
      StrictObject bo((*blocks)[i], "arch.blocks[" + std::to_string(i) + "]");
      bo.read("filters", b.filters);
      bo.read("kernel_h", b.kernel_h);
      bo.read("kernel_w", b.kernel_w);
      bo.read("pool_w", b.pool_w);
      bo.finish();
      a.blocks.push_back(b);
    }
  }
  o.read("dense_width", a.dense_width);
  o.read("dropout", a.dropout);
  o.read("num_classes", a.num_classes);
  o.read("channels", a.channels);
  o.read("samples", a.samples);
  o.finish();
  return a;
}

Json to_json(const TrainConfig& c) {
  return Json{{"alpha", c.alpha},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"batch_size", c.batch_size},
              {"max_iterations", c.max_iterations},
              {"window", c.window},
              {"threshold", c.threshold},
              {"threads", c.threads}};
}

// The seed is not part of the file form: it comes from the pipeline's master seed.
TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  StrictObject o(j, "train");
  o.read("alpha", c.alpha);
  o.read("beta1", c.beta1);
  o.read("beta2", c.beta2);
  o.read("epsilon", c.epsilon);
  o.read("batch_size", c.batch_size);
  o.read("max_iterations", c.max_iterations);
  o.read("window", c.window);
  o.read("threshold", c.threshold);
  o.read("threads", c.threads);
  o.finish();
  return c;
}

}  // namespace tresdiag
