#include "moespeq/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <string>

namespace moespeq {

namespace {

void expect_keys(const nlohmann::json& j, const char* where,
                 std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw Error(ErrorCode::InvalidConfig, std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool known = false;
    for (const char* name : allowed)
      if (key == name) {
        known = true;
        break;
      }
    if (!known)
      throw Error(ErrorCode::InvalidConfig,
                  std::string("unknown key \"") + key + "\" in " + where);
  }
}

double get_number(const nlohmann::json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number())
    throw Error(ErrorCode::InvalidConfig, std::string(key) + " must be a number");
  return j[key].get<double>();
}

std::int64_t get_integer(const nlohmann::json& j, const char* key, std::int64_t fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number_integer())
    throw Error(ErrorCode::InvalidConfig, std::string(key) + " must be an integer");
  return j[key].get<std::int64_t>();
}

bool get_bool(const nlohmann::json& j, const char* key, bool fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_boolean())
    throw Error(ErrorCode::InvalidConfig, std::string(key) + " must be a boolean");
  return j[key].get<bool>();
}

ModelShape parse_shape(const nlohmann::json& j) {
  expect_keys(j, "generator.shape", {"L", "N", "top_k", "shared", "expert_bytes"});
  for (const char* key : {"L", "N", "top_k"})
    if (!j.contains(key))
      throw Error(ErrorCode::InvalidConfig,
                  std::string("generator.shape requires \"") + key + "\"");
  ModelShape shape;
  shape.num_moe_layers = static_cast<int>(get_integer(j, "L", 0));
  shape.experts_per_layer = static_cast<int>(get_integer(j, "N", 0));
  shape.top_k = static_cast<int>(get_integer(j, "top_k", 0));
  shape.shared_experts = static_cast<int>(get_integer(j, "shared", 0));
  shape.expert_size_bytes =
      static_cast<std::uint64_t>(get_integer(j, "expert_bytes", 0));
  shape.validate();
  return shape;
}

GeneratorSpec parse_generator(const nlohmann::json& j) {
  expect_keys(j, "generator",
              {"shape", "tokens", "fidelity", "accept_rate", "skew", "seed"});
  if (!j.contains("shape"))
    throw Error(ErrorCode::InvalidConfig, "generator requires a \"shape\" object");
  GeneratorSpec spec;
  spec.shape = parse_shape(j["shape"]);
  spec.tokens = static_cast<int>(get_integer(j, "tokens", spec.tokens));
  if (j.contains("fidelity")) {
    const auto& f = j["fidelity"];
    if (!f.is_array() || f.size() != 3 || !f[0].is_number() || !f[1].is_number() ||
        !f[2].is_number())
      throw Error(ErrorCode::InvalidConfig,
                  "generator.fidelity must be [hard, soft, mismatch]");
    spec.hard_rate = f[0].get<double>();
    spec.soft_rate = f[1].get<double>();
    spec.mismatch_rate = f[2].get<double>();
  }
  spec.accept_rate = get_number(j, "accept_rate", spec.accept_rate);
  spec.skew = get_number(j, "skew", spec.skew);
  spec.seed = static_cast<std::uint64_t>(get_integer(j, "seed", 0));
  return spec;
}

}  // namespace

RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  expect_keys(j, "run config",
              {"policy", "capacity_mode", "cache_capacity", "entropy_weighted_capacity", "k",
               "governor", "phases", "prefetch_budget", "rollback_s", "ema_alpha",
               "initial_accept", "seed", "collect_plans", "profile", "profile_path",
               "generator"});
  RunConfig cfg;
  if (j.contains("policy")) {
    if (!j["policy"].is_string())
      throw Error(ErrorCode::InvalidConfig, "policy must be a string");
    cfg.sim.policy = parse_policy(j["policy"].get<std::string>());
  }
  if (j.contains("capacity_mode")) {
    if (!j["capacity_mode"].is_string())
      throw Error(ErrorCode::InvalidConfig, "capacity_mode must be a string");
    const std::string mode = j["capacity_mode"].get<std::string>();
    if (mode == "per_layer")
      cfg.sim.capacity_mode = CapacityMode::PerLayer;
    else if (mode == "global")
      cfg.sim.capacity_mode = CapacityMode::Global;
    else
      throw Error(ErrorCode::InvalidConfig,
                  "capacity_mode must be \"per_layer\" or \"global\", got \"" + mode + "\"");
  }
  cfg.sim.cache_capacity = static_cast<std::size_t>(
      get_integer(j, "cache_capacity", static_cast<std::int64_t>(cfg.sim.cache_capacity)));
  cfg.sim.entropy_weighted_capacity =
      get_bool(j, "entropy_weighted_capacity", cfg.sim.entropy_weighted_capacity);
  if (j.contains("k")) {
    const auto& k = j["k"];
    if (k.is_string() && k.get<std::string>() == "governor") {
      cfg.sim.use_governor = true;
    } else if (k.is_number_integer()) {
      cfg.sim.use_governor = false;
      cfg.sim.fixed_k = k.get<int>();
    } else {
      throw Error(ErrorCode::InvalidConfig, "k must be an integer or \"governor\"");
    }
  }
  if (j.contains("governor")) {
    expect_keys(j["governor"], "governor", {"k_min", "k_max", "k_slo", "ttft_budget_s"});
    const auto& g = j["governor"];
    cfg.sim.governor.k_min = static_cast<int>(get_integer(g, "k_min", cfg.sim.governor.k_min));
    cfg.sim.governor.k_max = static_cast<int>(get_integer(g, "k_max", cfg.sim.governor.k_max));
    cfg.sim.governor.k_slo = static_cast<int>(get_integer(g, "k_slo", cfg.sim.governor.k_slo));
    cfg.sim.governor.ttft_budget =
        get_number(g, "ttft_budget_s", cfg.sim.governor.ttft_budget);
  }
  if (j.contains("phases")) {
    expect_keys(j["phases"], "phases", {"f1", "f2"});
    cfg.sim.phase_f1 = get_number(j["phases"], "f1", cfg.sim.phase_f1);
    cfg.sim.phase_f2 = get_number(j["phases"], "f2", cfg.sim.phase_f2);
  }
  cfg.sim.prefetch_budget = static_cast<int>(
      get_integer(j, "prefetch_budget", cfg.sim.prefetch_budget));
  cfg.sim.rollback_duration = get_number(j, "rollback_s", cfg.sim.rollback_duration);
  cfg.sim.ema_alpha = get_number(j, "ema_alpha", cfg.sim.ema_alpha);
  cfg.sim.initial_accept = get_number(j, "initial_accept", cfg.sim.initial_accept);
  cfg.sim.seed = static_cast<std::uint64_t>(get_integer(j, "seed", 0));
  cfg.sim.collect_plans = get_bool(j, "collect_plans", cfg.sim.collect_plans);

  if (j.contains("profile") && j.contains("profile_path"))
    throw Error(ErrorCode::InvalidConfig, "give either profile or profile_path, not both");
  if (j.contains("profile")) {
    cfg.sim.profile = HardwareProfile::from_json(j["profile"]);
  } else if (j.contains("profile_path")) {
    if (!j["profile_path"].is_string())
      throw Error(ErrorCode::InvalidConfig, "profile_path must be a string");
    std::filesystem::path path = j["profile_path"].get<std::string>();
    if (path.is_relative()) path = base_dir / path;
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open profile file: " + path.string());
    nlohmann::json pj = nlohmann::json::parse(in, nullptr, false);
    if (pj.is_discarded())
      throw Error(ErrorCode::InvalidConfig, "profile file is not valid JSON: " + path.string());
    cfg.sim.profile = HardwareProfile::from_json(pj);
  }

  if (j.contains("generator")) cfg.generator = parse_generator(j["generator"]);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config file: " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded())
    throw Error(ErrorCode::InvalidConfig, "config file is not valid JSON: " + path.string());
  return parse_run_config(j, path.parent_path());
}

std::optional<std::string> config_path_from_env() {
  const char* value = std::getenv("MOESPEQ_CONFIG");
  if (value == nullptr || *value == '\0') return std::nullopt;
  return std::string(value);
}

}  // namespace moespeq
