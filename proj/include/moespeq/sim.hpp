#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moespeq/perfmodel.hpp"
#include "moespeq/scheduler.hpp"
#include "moespeq/trace.hpp"

namespace moespeq {

struct SimConfig {
  Policy policy = Policy::Speculative;
  CapacityMode capacity_mode = CapacityMode::PerLayer;
  std::size_t cache_capacity = 8;
  bool entropy_weighted_capacity = false;  // per-layer caps scaled by layer entropy
  int fixed_k = 4;
  bool use_governor = false;
  GovernorConfig governor;
  HardwareProfile profile;
  double phase_f1 = 0.25;
  double phase_f2 = 0.75;
  int prefetch_budget = 2;
  double rollback_duration = 0.0;  // charged when a cycle rejects a suffix
  double ema_alpha = 0.1;
  double initial_accept = 0.8;
  std::uint64_t seed = 0;  // reserved; the replay itself is deterministic
  bool collect_plans = false;

  void validate(const ModelShape& shape) const;
};

struct Segment {
  std::string label;  // draft | io_init | io_new | verify | rollback
  double start = 0.0;
  double duration = 0.0;
  int lane = 0;  // 0 = compute, 1 = io
};

struct CycleRecord {
  int cycle_index = 0;
  int k_used = 0;
  int accepted_count = 0;
  int bonus_token = 0;
  double start_time = 0.0;
  double span = 0.0;
  std::vector<Segment> segments;
  // Residency of each layer's required union at verification start.
  std::vector<double> per_layer_coverage;
  // Mean per-(token,layer) step coverage across the verify window.
  double step_coverage_mean = 0.0;
  int step_count = 0;
  int new_experts_fetched = 0;
  std::uint64_t bytes_transferred = 0;
  double io_wait = 0.0;         // verify-start wait on in-flight required transfers
  double sync_fetch_time = 0.0; // synchronous fetch charge at verify start
  int sync_fetch_count = 0;
  nlohmann::ordered_json prefetch_plan;   // present when collect_plans
  nlohmann::ordered_json execution_plan;  // present when collect_plans
};

struct SimReport {
  std::uint64_t total_tokens = 0;
  double total_time = 0.0;
  double tpot = 0.0;
  double ttft = 0.0;  // first cycle wall-clock span
  double mean_coverage = 0.0;       // verify-start union residency
  double mean_step_coverage = 0.0;  // per-(token,layer) step coverage
  double mean_accepted = 0.0;
  double stall_time = 0.0;
  std::uint64_t total_new_experts = 0;
  std::vector<CycleRecord> cycles;

  nlohmann::ordered_json to_json() const;
  std::string to_json_string() const;
  std::string cycles_csv() const;    // cycle,k,accepted,coverage,span_s,bytes
  std::string timeline_csv() const;  // cycle,lane,label,start_s,duration_s
};

// Deterministic trace replay of the speculative decode + prefetch control
// loop. Compute and I/O run on separate lanes; the I/O lane is a FIFO channel
// at PCIe bandwidth with a per-batch overhead.
SimReport run_simulation(const Trace& trace, const SimConfig& config);

struct PolicyRow {
  Policy policy;
  std::size_t capacity = 0;
  double coverage = 0.0;  // mean per-step coverage
  double tpot = 0.0;
};

std::vector<PolicyRow> compare_policies(const Trace& trace, const SimConfig& base,
                                        std::span<const Policy> policies,
                                        std::span<const std::size_t> capacities);

std::string policy_table_csv(std::span<const PolicyRow> rows);

struct SweepRow {
  int k = 0;
  double tpot = 0.0;
  double mean_accepted = 0.0;
  double coverage = 0.0;
  double first_cycle_latency = 0.0;
};

std::vector<SweepRow> sweep_k(const Trace& trace, const SimConfig& base, std::span<const int> ks);

}  // namespace moespeq
