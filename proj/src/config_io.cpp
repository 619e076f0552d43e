#include "conclu/config_io.hpp"

#include <set>

#include "conclu/errors.hpp"

namespace conclu {

nlohmann::json to_json(const net::NetworkConfig& cfg) {
  return {
      {"encoder_widths", cfg.encoder_widths},
      {"head_widths", cfg.head_widths},
      {"proj_hidden", cfg.proj_hidden},
      {"proj_out", cfg.proj_out},
      {"pred_hidden", cfg.pred_hidden},
      {"num_prototypes", cfg.num_prototypes},
      {"seed", cfg.seed},
      {"bn_over_batch", cfg.bn_over_batch},
      {"leaky_slope", cfg.leaky_slope},
      {"bn_eps", cfg.bn_eps},
      {"bn_momentum", cfg.bn_momentum},
  };
}

net::NetworkConfig network_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("network config must be a JSON object");
  net::NetworkConfig cfg;
  const std::set<std::string> known{"encoder_widths", "head_widths", "proj_hidden",
                                    "proj_out",       "pred_hidden", "num_prototypes",
                                    "seed",           "bn_over_batch", "leaky_slope",
                                    "bn_eps",         "bn_momentum"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown network config key '" + key + "'");
  }
  try {
    if (j.contains("encoder_widths")) j.at("encoder_widths").get_to(cfg.encoder_widths);
    if (j.contains("head_widths")) j.at("head_widths").get_to(cfg.head_widths);
    if (j.contains("proj_hidden")) j.at("proj_hidden").get_to(cfg.proj_hidden);
    if (j.contains("proj_out")) j.at("proj_out").get_to(cfg.proj_out);
    if (j.contains("pred_hidden")) j.at("pred_hidden").get_to(cfg.pred_hidden);
    if (j.contains("num_prototypes")) j.at("num_prototypes").get_to(cfg.num_prototypes);
    if (j.contains("seed")) j.at("seed").get_to(cfg.seed);
    if (j.contains("bn_over_batch")) j.at("bn_over_batch").get_to(cfg.bn_over_batch);
    if (j.contains("leaky_slope")) j.at("leaky_slope").get_to(cfg.leaky_slope);
    if (j.contains("bn_eps")) j.at("bn_eps").get_to(cfg.bn_eps);
    if (j.contains("bn_momentum")) j.at("bn_momentum").get_to(cfg.bn_momentum);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad network config value: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace conclu
