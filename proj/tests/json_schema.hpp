// Copyright 2026 The PrivateXR Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace privatexr::testing {

inline nlohmann::json load_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

inline std::filesystem::path source_dir() { return PRIVATEXR_SOURCE_DIR; }

// Validates the subset of JSON Schema used by the shipped schemas: type,
// const, enum, required, properties, items, minimum, maximum,
// exclusiveMinimum. Returns violations as "path: reason" strings.
inline void validate_schema(const nlohmann::json& v, const nlohmann::json& schema,
                            const std::string& path, std::vector<std::string>& errors) {
  auto type_ok = [&](const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    return false;
  };
  if (schema.contains("type")) {
    bool ok = false;
    if (schema["type"].is_array()) {
      for (const auto& t : schema["type"]) ok = ok || type_ok(t.get<std::string>());
    } else {
      ok = type_ok(schema["type"].get<std::string>());
    }
    if (!ok) {
      errors.push_back(path + ": wrong type");
      return;
    }
  }
  if (schema.contains("const") && v != schema["const"]) errors.push_back(path + ": const");
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found = found || e == v;
    if (!found) errors.push_back(path + ": not in enum");
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (!std::isfinite(x)) errors.push_back(path + ": not finite");
    if (schema.contains("minimum") && x < schema["minimum"].get<double>())
      errors.push_back(path + ": below minimum");
    if (schema.contains("maximum") && x > schema["maximum"].get<double>())
      errors.push_back(path + ": above maximum");
    if (schema.contains("exclusiveMinimum") && x <= schema["exclusiveMinimum"].get<double>())
      errors.push_back(path + ": not above exclusiveMinimum");
  }
  if (v.is_object()) {
    if (schema.contains("required"))
      for (const auto& k : schema["required"])
        if (!v.contains(k.get<std::string>())) errors.push_back(path + ": missing " + k.get<std::string>());
    if (schema.contains("properties"))
      for (const auto& [k, sub] : schema["properties"].items())
        if (v.contains(k)) validate_schema(v[k], sub, path + "/" + k, errors);
  }
  if (v.is_array() && schema.contains("items"))
    for (std::size_t i = 0; i < v.size(); ++i)
      validate_schema(v[i], schema["items"], path + "/" + std::to_string(i), errors);
}

inline std::vector<std::string> schema_errors(const nlohmann::json& v, const nlohmann::json& schema) {
  std::vector<std::string> errors;
  validate_schema(v, schema, "", errors);
  return errors;
}

}  // namespace privatexr::testing
