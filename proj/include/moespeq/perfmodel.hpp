#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moespeq/errors.hpp"

namespace moespeq {

struct HardwareProfile {
  double pcie_bandwidth = 16e9;     // bytes per second, one direction
  double pcie_init_latency = 20e-3; // first mandatory fetch latency, seconds
  double pcie_overhead = 2e-3;      // fixed per-batch transfer overhead, seconds
  std::uint64_t expert_size_bytes = 25'000'000;
  double draft_base = 5e-3;         // draft pass fixed cost, seconds
  double draft_per_token = 3e-3;    // marginal draft cost per token, seconds
  // (window_size, seconds) samples for the verification pass; window = k+1.
  std::vector<std::pair<double, double>> verify_samples =
      {{1.0, 10e-3}, {5.0, 20e-3}, {9.0, 40e-3}, {17.0, 75e-3}};
  double token_bytes = 1.0;         // useful bytes produced per accepted token

  void validate() const;
  static HardwareProfile from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Per-position acceptance probabilities p[i] = P(draft token i+1 accepted |
// previous accepted), refreshed online by an EMA.
struct AcceptanceModel {
  std::vector<double> p;
  double ema_alpha = 0.1;

  static AcceptanceModel constant(double prob, int k_max);
};

struct GovernorConfig {
  int k_min = 1;
  int k_max = 16;
  int k_slo = 16;       // hard upper bound from the latency SLO
  double ttft_budget = 0.0;  // seconds; 0 disables the TTFT constraint
};

struct OperatingPoint {
  int k = 0;
  double intensity = 0.0;     // amortization intensity, dimensionless
  double throughput = 0.0;    // accepted tokens per second
  double compute_roof = 0.0;
  double io_roof = 0.0;
};

using NewExpertEstimator = std::function<int(int)>;

// Expected accepted draft tokens per cycle: sum over i<=k of prod_{j<=i} p_j.
double k_accept(const AcceptanceModel& model, int k);

double t_draft(const HardwareProfile& profile, int k);

// Synchronous transfer time for n new experts: overhead + n*S/B, exactly 0
// when n == 0.
double t_pcie_new(const HardwareProfile& profile, int num_new_experts);

// Piecewise-linear interpolation of the verify samples over window = k+1,
// linear extrapolation outside the sampled range.
double t_verify(const HardwareProfile& profile, double window);

// max(T_draft(k), T_pcie_init) + T_pcie_new(n) + T_verify(k+1)
double t_cycle(const HardwareProfile& profile, int k, int num_new_experts);

double throughput(const HardwareProfile& profile, const AcceptanceModel& model,
                  int k, int num_new_experts);

// Useful bytes per synchronous I/O byte; +infinity when sync_io_bytes == 0.
double amortization_intensity(const HardwareProfile& profile, const AcceptanceModel& model,
                              int k, double sync_io_bytes);

std::vector<OperatingPoint> roofline(const HardwareProfile& profile, const AcceptanceModel& model,
                                     int k_lo, int k_hi, const NewExpertEstimator& new_experts);

// argmax of throughput over [k_min, min(k_max, k_slo)], smallest k on ties.
int select_k(const HardwareProfile& profile, const AcceptanceModel& model,
             const GovernorConfig& governor, const NewExpertEstimator& new_experts);

// Largest k in [k_min, k_max] whose first-cycle latency fits the budget.
int k_slo_from_ttft(const HardwareProfile& profile, double ttft_budget,
                    const NewExpertEstimator& new_experts, int k_min, int k_max);

// EMA update from one cycle's per-position outcomes; anything after the first
// rejection is unobserved and left unchanged.
AcceptanceModel update_acceptance(const AcceptanceModel& model, const std::vector<bool>& outcomes);

struct FootprintComponent {
  std::string name;
  double draft_gb = 0.0;
  double target_gb = 0.0;
  double shared_gb = 0.0;
};

struct FootprintTotals {
  double draft_gb = 0.0;
  double target_gb = 0.0;
  double shared_gb = 0.0;
  double total_gb = 0.0;
};

FootprintTotals memory_footprint(std::span<const FootprintComponent> components);

// CSV with header k,intensity,throughput,compute_roof,io_roof.
std::string roofline_csv(std::span<const OperatingPoint> points);

}  // namespace moespeq
