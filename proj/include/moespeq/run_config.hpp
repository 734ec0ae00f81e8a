#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "moespeq/sim.hpp"
#include "moespeq/trace.hpp"

namespace moespeq {

/// Parameters for the synthetic trace generator, as embedded in a run config
/// under the "generator" key.
struct GeneratorSpec {
  ModelShape shape;
  int tokens = 1000;
  double hard_rate = 0.441;
  double soft_rate = 0.468;
  double mismatch_rate = 0.091;
  double accept_rate = 0.8;
  double skew = 1.0;
  std::uint64_t seed = 0;
};

/// A full run description: simulator settings plus an optional generator
/// block for runs that synthesize their own trace.
///
/// The JSON schema is strict: unknown keys anywhere raise InvalidConfig, so
/// typos fail loudly instead of silently falling back to defaults.
///
/// Top-level keys (all optional): "policy", "capacity_mode" ("per_layer" |
/// "global"), "cache_capacity", "entropy_weighted_capacity", "k" (integer or
/// "governor"), "governor" {"k_min","k_max","k_slo","ttft_budget_s"},
/// "phases" {"f1","f2"}, "prefetch_budget", "rollback_s", "ema_alpha",
/// "initial_accept", "seed", "collect_plans", "profile" (inline hardware
/// profile object) or "profile_path" (file reference, relative to the config
/// file), and "generator" {"shape" {"L","N","top_k","shared","expert_bytes"},
/// "tokens", "fidelity" [hard, soft, mismatch], "accept_rate", "skew",
/// "seed"}.
struct RunConfig {
  SimConfig sim;
  std::optional<GeneratorSpec> generator;
};

/// Parses a run config from JSON. `base_dir` anchors "profile_path".
RunConfig parse_run_config(const nlohmann::json& j,
                           const std::filesystem::path& base_dir = ".");

/// Loads and parses a run config file. Throws IoError / InvalidConfig.
RunConfig load_run_config(const std::filesystem::path& path);

/// Path from the MOESPEQ_CONFIG environment variable, if set and non-empty.
std::optional<std::string> config_path_from_env();

}  // namespace moespeq
