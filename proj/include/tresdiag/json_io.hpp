#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "tresdiag/error.hpp"

namespace tresdiag {

using Json = nlohmann::json;

// Reads fields of a JSON object, keeping the defaults for absent keys and
// rejecting keys that were never asked for.
class StrictObject {
 public:
  StrictObject(const Json& object, std::string context) : object_(object), context_(std::move(context)) {
    if (!object_.is_object()) throw ConfigError(context_ + ": expected a JSON object");
  }

  template <typename T>
  void read(const char* key, T& target) {
    seen_.insert(key);
    auto it = object_.find(key);
    if (it == object_.end()) return;
    try {
      target = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(context_ + "." + key + ": " + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = object_.find(key);
    return it == object_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = object_.begin(); it != object_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(context_ + ": unknown key \"" + it.key() + "\"");
    }
  }

 private:
  const Json& object_;
  std::string context_;
  std::set<std::string> seen_;
};

}  // namespace tresdiag
