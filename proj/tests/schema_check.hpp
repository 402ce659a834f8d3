#pragma once

// Minimal structural JSON-schema checker covering the subset used by the
// schemas under docs/schemas: type, required, properties, items, enum,
// minimum/maximum, and $ref into #/definitions. Returns "" when the value
// conforms, else a short path-annotated reason.

#include <string>

#include "json.hpp"

namespace schema_check {

inline bool type_matches(const nlohmann::json& value, const std::string& type) {
  if (type == "object") return value.is_object();
  if (type == "array") return value.is_array();
  if (type == "string") return value.is_string();
  if (type == "boolean") return value.is_boolean();
  if (type == "null") return value.is_null();
  if (type == "integer") return value.is_number_integer() || value.is_number_unsigned();
  if (type == "number") return value.is_number();
  return false;
}

inline std::string validate(const nlohmann::json& value, const nlohmann::json& schema,
                            const nlohmann::json& root, const std::string& path) {
  if (schema.contains("$ref")) {
    const std::string ref = schema.at("$ref").get<std::string>();
    const std::string prefix = "#/definitions/";
    if (ref.rfind(prefix, 0) != 0) return path + ": unsupported $ref " + ref;
    return validate(value, root.at("definitions").at(ref.substr(prefix.size())), root, path);
  }

  if (schema.contains("type")) {
    const auto& t = schema.at("type");
    bool ok = false;
    if (t.is_string()) {
      ok = type_matches(value, t.get<std::string>());
    } else {
      for (const auto& alt : t) ok = ok || type_matches(value, alt.get<std::string>());
    }
    if (!ok) return path + ": type mismatch (" + value.dump().substr(0, 40) + ")";
  }

  if (schema.contains("enum")) {
    bool ok = false;
    for (const auto& alt : schema.at("enum")) ok = ok || alt == value;
    if (!ok) return path + ": " + value.dump() + " not in enum";
  }

  if (value.is_number()) {
    if (schema.contains("minimum") && value.get<double>() < schema.at("minimum").get<double>())
      return path + ": below minimum";
    if (schema.contains("maximum") && value.get<double>() > schema.at("maximum").get<double>())
      return path + ": above maximum";
  }

  if (value.is_object()) {
    if (schema.contains("required"))
      for (const auto& key : schema.at("required"))
        if (!value.contains(key.get<std::string>()))
          return path + ": missing required key " + key.get<std::string>();
    if (schema.contains("properties"))
      for (const auto& [key, sub] : schema.at("properties").items())
        if (value.contains(key)) {
          std::string err = validate(value.at(key), sub, root, path + "/" + key);
          if (!err.empty()) return err;
        }
  }

  if (value.is_array() && schema.contains("items")) {
    std::size_t i = 0;
    for (const auto& element : value) {
      std::string err =
          validate(element, schema.at("items"), root, path + "/" + std::to_string(i++));
      if (!err.empty()) return err;
    }
  }
  return "";
}

inline std::string validate(const nlohmann::json& value, const nlohmann::json& schema) {
  return validate(value, schema, schema, "$");
}

}  // namespace schema_check
