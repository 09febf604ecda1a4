#ifndef SOPSSL_JSON_UTIL_HPP
#define SOPSSL_JSON_UTIL_HPP

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "sopssl/tensor.hpp"

namespace sopssl::jsonutil {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace sopssl::jsonutil

#endif
