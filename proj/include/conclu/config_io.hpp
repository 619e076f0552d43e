#pragma once

#include "json.hpp"

#include "conclu/network.hpp"

namespace conclu {

nlohmann::json to_json(const net::NetworkConfig& cfg);
// Strict: unknown keys raise ConfigError naming the key.
net::NetworkConfig network_config_from_json(const nlohmann::json& j);

}  // namespace conclu
