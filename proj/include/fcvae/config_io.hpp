#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "fcvae/error.hpp"
#include "fcvae/training.hpp"

namespace fcvae {

namespace detail {
template <class T>
T json_as(const nlohmann::json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  }
}
}  // namespace detail

// Flat key set. Returns false for keys that do not belong to TrainConfig.
inline bool apply_train_key(TrainConfig& c, const std::string& k, const nlohmann::json& v) {
  using detail::json_as;
  if (k == "variant") c.model.variant = parse_variant(json_as<std::string>(v, k));
  else if (k == "vocab_size") c.model.vocab_size = json_as<std::size_t>(v, k);
  else if (k == "d_h") c.model.d_h = json_as<std::size_t>(v, k);
  else if (k == "d_z") c.model.d_z = json_as<std::size_t>(v, k);
  else if (k == "init_scale") c.model.init_scale = json_as<double>(v, k);
  else if (k == "log_var_min") c.model.log_var_min = json_as<double>(v, k);
  else if (k == "log_var_max") c.model.log_var_max = json_as<double>(v, k);
  else if (k == "condition_s0_on_z") c.model.condition_s0_on_z = json_as<bool>(v, k);
  else if (k == "context_from_augmented") c.model.context_from_augmented = json_as<bool>(v, k);
  else if (k == "batch_size") c.batch_size = json_as<std::size_t>(v, k);
  else if (k == "total_steps") c.total_steps = json_as<std::size_t>(v, k);
  else if (k == "warmup_steps") c.warmup_steps = json_as<std::size_t>(v, k);
  else if (k == "peak_lr") c.peak_lr = json_as<double>(v, k);
  else if (k == "kl_anneal_steps") c.kl_anneal_steps = json_as<std::size_t>(v, k);
  else if (k == "seed") c.seed = json_as<std::uint64_t>(v, k);
  else if (k == "clip_norm") c.clip_norm = json_as<double>(v, k);
  else if (k == "max_post_len") c.max_post_len = json_as<std::size_t>(v, k);
  else if (k == "max_resp_len") c.max_resp_len = json_as<std::size_t>(v, k);
  else if (k == "max_decode_len") c.max_decode_len = json_as<std::size_t>(v, k);
  else if (k == "checkpoint_interval") c.checkpoint_interval = json_as<std::size_t>(v, k);
  else if (k == "adam_beta1") c.adam.beta1 = json_as<double>(v, k);
  else if (k == "adam_beta2") c.adam.beta2 = json_as<double>(v, k);
  else if (k == "adam_eps") c.adam.eps = json_as<double>(v, k);
  else if (k == "w_seq") c.weights.seq = json_as<double>(v, k);
  else if (k == "w_foc") c.weights.foc = json_as<double>(v, k);
  else if (k == "w_kl") c.weights.kl = json_as<double>(v, k);
  else if (k == "w_bow") c.weights.bow = json_as<double>(v, k);
  else return false;
  return true;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{{"variant", to_string(c.model.variant)},
                        {"vocab_size", c.model.vocab_size},
                        {"d_h", c.model.d_h},
                        {"d_z", c.model.d_z},
                        {"init_scale", c.model.init_scale},
                        {"log_var_min", c.model.log_var_min},
                        {"log_var_max", c.model.log_var_max},
                        {"condition_s0_on_z", c.model.condition_s0_on_z},
                        {"context_from_augmented", c.model.context_from_augmented},
                        {"batch_size", c.batch_size},
                        {"total_steps", c.total_steps},
                        {"warmup_steps", c.warmup_steps},
                        {"peak_lr", c.peak_lr},
                        {"kl_anneal_steps", c.kl_anneal_steps},
                        {"seed", c.seed},
                        {"clip_norm", c.clip_norm},
                        {"max_post_len", c.max_post_len},
                        {"max_resp_len", c.max_resp_len},
                        {"max_decode_len", c.max_decode_len},
                        {"checkpoint_interval", c.checkpoint_interval},
                        {"adam_beta1", c.adam.beta1},
                        {"adam_beta2", c.adam.beta2},
                        {"adam_eps", c.adam.eps},
                        {"w_seq", c.weights.seq},
                        {"w_foc", c.weights.foc},
                        {"w_kl", c.weights.kl},
                        {"w_bow", c.weights.bow}};
}

// Overlays `j` onto `base`; any key outside TrainConfig is a ConfigError.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!apply_train_key(base, k, v)) throw ConfigError("unknown config key '" + k + "'");
  return base;
}

}  // namespace fcvae
