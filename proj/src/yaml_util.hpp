#pragma once

// Shared helpers for the YAML documents (experiment config, profiles).

#include <yaml-cpp/yaml.h>

#include <initializer_list>
#include <string>
#include <vector>

#include "colext/error.hpp"

namespace colext::yaml {

inline std::string location(const std::string& source, const YAML::Node& node) {
  const auto m = node.Mark();
  if (m.is_null()) return source;
  return source + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
}

inline void require_map(const std::string& source, const YAML::Node& node, const std::string& what) {
  if (!node.IsMap()) throw ConfigError(what + " must be a mapping", location(source, node));
}

inline void reject_unknown(const std::string& source, const YAML::Node& map, const std::string& section,
                           std::initializer_list<const char*> allowed) {
  for (const auto& kv : map) {
    const auto key = kv.first.as<std::string>();
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) {
      throw ConfigError("unknown key '" + key + "' in " + section, location(source, kv.first));
    }
  }
}

template <class T>
T get(const std::string& source, const YAML::Node& node, const std::string& what) {
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("bad type for " + what, location(source, node));
  }
}

template <class T>
T require(const std::string& source, const YAML::Node& map, const char* key, const std::string& section) {
  const auto node = map[key];
  if (!node) throw ConfigError("missing required key '" + std::string(key) + "' in " + section, location(source, map));
  return get<T>(source, node, section + "." + key);
}

template <class T>
T optional(const std::string& source, const YAML::Node& map, const char* key, const std::string& section,
           T fallback) {
  const auto node = map[key];
  if (!node) return fallback;
  return get<T>(source, node, section + "." + key);
}

inline YAML::Node load(const std::string& text, const std::string& source) {
  try {
    return YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(e.msg, source + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1));
  }
}

}  // namespace colext::yaml
