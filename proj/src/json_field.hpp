#pragma once

#include "catk/common.hpp"

#include <nlohmann/json.hpp>

#include <string>

namespace catk {

// Optional config field; a present value of the wrong type is an error naming the key.
template <class T>
T field(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

}  // namespace catk
