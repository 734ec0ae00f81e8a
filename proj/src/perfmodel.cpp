#include "moespeq/perfmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace moespeq {

namespace {

void check_window_samples(const std::vector<std::pair<double, double>>& samples) {
  if (samples.size() < 2)
    throw Error(ErrorCode::InsufficientSamples, "need at least two verify samples");
  for (std::size_t i = 1; i < samples.size(); ++i)
    if (samples[i].first <= samples[i - 1].first)
      throw Error(ErrorCode::InvalidConfig, "verify sample windows must be strictly increasing");
}

}  // namespace

void HardwareProfile::validate() const {
  if (pcie_bandwidth <= 0.0) throw Error(ErrorCode::InvalidConfig, "pcie_bandwidth must be > 0");
  if (pcie_init_latency < 0.0 || pcie_overhead < 0.0)
    throw Error(ErrorCode::InvalidConfig, "pcie latencies must be >= 0");
  if (expert_size_bytes == 0) throw Error(ErrorCode::InvalidConfig, "expert_size_bytes must be > 0");
  if (draft_base < 0.0 || draft_per_token <= 0.0)
    throw Error(ErrorCode::InvalidConfig, "draft costs must be positive");
  if (token_bytes <= 0.0) throw Error(ErrorCode::InvalidConfig, "token_bytes must be > 0");
  check_window_samples(verify_samples);
}

HardwareProfile HardwareProfile::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "profile must be a JSON object");
  HardwareProfile p;
  static const char* known[] = {"pcie_bandwidth_bytes_per_s", "pcie_init_latency_s",
                                "pcie_overhead_s",            "expert_size_bytes",
                                "draft_base_s",               "draft_per_token_s",
                                "verify_samples",             "token_bytes"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(std::begin(known), std::end(known),
                     [&](const char* k) { return key == k; }) == std::end(known))
      throw Error(ErrorCode::InvalidConfig, "unknown profile field: " + key);
  }
  if (j.contains("pcie_bandwidth_bytes_per_s")) p.pcie_bandwidth = j["pcie_bandwidth_bytes_per_s"].get<double>();
  if (j.contains("pcie_init_latency_s")) p.pcie_init_latency = j["pcie_init_latency_s"].get<double>();
  if (j.contains("pcie_overhead_s")) p.pcie_overhead = j["pcie_overhead_s"].get<double>();
  if (j.contains("expert_size_bytes")) p.expert_size_bytes = j["expert_size_bytes"].get<std::uint64_t>();
  if (j.contains("draft_base_s")) p.draft_base = j["draft_base_s"].get<double>();
  if (j.contains("draft_per_token_s")) p.draft_per_token = j["draft_per_token_s"].get<double>();
  if (j.contains("token_bytes")) p.token_bytes = j["token_bytes"].get<double>();
  if (j.contains("verify_samples")) {
    p.verify_samples.clear();
    for (const auto& s : j["verify_samples"]) {
      if (!s.is_array() || s.size() != 2)
        throw Error(ErrorCode::InvalidConfig, "verify_samples entries must be [window, seconds]");
      p.verify_samples.emplace_back(s[0].get<double>(), s[1].get<double>());
    }
  }
  p.validate();
  return p;
}

nlohmann::json HardwareProfile::to_json() const {
  nlohmann::json j;
  j["pcie_bandwidth_bytes_per_s"] = pcie_bandwidth;
  j["pcie_init_latency_s"] = pcie_init_latency;
  j["pcie_overhead_s"] = pcie_overhead;
  j["expert_size_bytes"] = expert_size_bytes;
  j["draft_base_s"] = draft_base;
  j["draft_per_token_s"] = draft_per_token;
  j["token_bytes"] = token_bytes;
  j["verify_samples"] = nlohmann::json::array();
  for (const auto& [w, s] : verify_samples) j["verify_samples"].push_back({w, s});
  return j;
}

AcceptanceModel AcceptanceModel::constant(double prob, int k_max) {
  AcceptanceModel m;
  m.p.assign(static_cast<std::size_t>(std::max(0, k_max)), prob);
  return m;
}

double k_accept(const AcceptanceModel& model, int k) {
  if (k < 0 || k > static_cast<int>(model.p.size()))
    throw Error(ErrorCode::KOutOfRange,
                "k = " + std::to_string(k) + " but model has " + std::to_string(model.p.size()) +
                    " positions");
  double sum = 0.0;
  double prefix = 1.0;
  for (int i = 0; i < k; ++i) {
    prefix *= model.p[i];
    sum += prefix;
  }
  return sum;
}

double t_draft(const HardwareProfile& profile, int k) {
  if (k < 0) throw Error(ErrorCode::KOutOfRange, "k must be >= 0");
  return profile.draft_base + static_cast<double>(k) * profile.draft_per_token;
}

double t_pcie_new(const HardwareProfile& profile, int num_new_experts) {
  if (num_new_experts < 0) throw Error(ErrorCode::RangeOutOfBounds, "num_new_experts must be >= 0");
  if (num_new_experts == 0) return 0.0;
  return profile.pcie_overhead + static_cast<double>(num_new_experts) *
                                     static_cast<double>(profile.expert_size_bytes) /
                                     profile.pcie_bandwidth;
}

double t_verify(const HardwareProfile& profile, double window) {
  const auto& s = profile.verify_samples;
  check_window_samples(s);
  // Pick the bracketing segment; outside the range, the nearest segment
  // extrapolates linearly.
  std::size_t hi = 1;
  while (hi + 1 < s.size() && s[hi].first < window) ++hi;
  const auto& [x0, y0] = s[hi - 1];
  const auto& [x1, y1] = s[hi];
  const double t = (window - x0) / (x1 - x0);
  return y0 + t * (y1 - y0);
}

double t_cycle(const HardwareProfile& profile, int k, int num_new_experts) {
  return std::max(t_draft(profile, k), profile.pcie_init_latency) +
         t_pcie_new(profile, num_new_experts) + t_verify(profile, static_cast<double>(k + 1));
}

double throughput(const HardwareProfile& profile, const AcceptanceModel& model, int k,
                  int num_new_experts) {
  return k_accept(model, k) / t_cycle(profile, k, num_new_experts);
}

double amortization_intensity(const HardwareProfile& profile, const AcceptanceModel& model, int k,
                              double sync_io_bytes) {
  const double useful = k_accept(model, k) * profile.token_bytes;
  if (sync_io_bytes <= 0.0) return std::numeric_limits<double>::infinity();
  return useful / sync_io_bytes;
}

std::vector<OperatingPoint> roofline(const HardwareProfile& profile, const AcceptanceModel& model,
                                     int k_lo, int k_hi, const NewExpertEstimator& new_experts) {
  if (k_lo > k_hi) throw Error(ErrorCode::EmptyRange, "k range is empty");
  if (k_lo < 1) throw Error(ErrorCode::KOutOfRange, "k range must start at 1 or above");
  std::vector<OperatingPoint> points;
  points.reserve(static_cast<std::size_t>(k_hi - k_lo + 1));
  for (int k = k_lo; k <= k_hi; ++k) {
    const int n = new_experts ? new_experts(k) : 0;
    if (n < 0) throw Error(ErrorCode::RangeOutOfBounds, "estimator returned negative count");
    OperatingPoint pt;
    pt.k = k;
    const double ka = k_accept(model, k);
    const double sync_bytes = static_cast<double>(n) * static_cast<double>(profile.expert_size_bytes);
    pt.intensity = amortization_intensity(profile, model, k, sync_bytes);
    pt.throughput = throughput(profile, model, k, n);
    pt.compute_roof =
        ka / (std::max(t_draft(profile, k), profile.pcie_init_latency) +
              t_verify(profile, static_cast<double>(k + 1)));
    pt.io_roof = pt.intensity * profile.pcie_bandwidth / profile.token_bytes;
    points.push_back(pt);
  }
  return points;
}

int select_k(const HardwareProfile& profile, const AcceptanceModel& model,
             const GovernorConfig& governor, const NewExpertEstimator& new_experts) {
  const int hi = std::min(governor.k_max, governor.k_slo);
  if (governor.k_min > hi)
    throw Error(ErrorCode::EmptyRange, "k_min exceeds the SLO-constrained maximum");
  if (governor.k_min < 1) throw Error(ErrorCode::KOutOfRange, "k_min must be >= 1");
  int best_k = governor.k_min;
  double best = -1.0;
  for (int k = governor.k_min; k <= hi; ++k) {
    const int n = new_experts ? new_experts(k) : 0;
    const double value = throughput(profile, model, k, n);
    if (value > best) {  // strict: ties keep the smallest k
      best = value;
      best_k = k;
    }
  }
  return best_k;
}

int k_slo_from_ttft(const HardwareProfile& profile, double ttft_budget,
                    const NewExpertEstimator& new_experts, int k_min, int k_max) {
  if (k_min < 1 || k_min > k_max) throw Error(ErrorCode::EmptyRange, "invalid [k_min, k_max]");
  auto latency = [&](int k) {
    const int n = new_experts ? new_experts(k) : 0;
    return t_cycle(profile, k, n);
  };
  if (ttft_budget < latency(k_min))
    throw Error(ErrorCode::InfeasibleBudget, "budget below the k_min cycle latency");
  // Latency is monotone in k for monotone estimators, so bisect.
  int lo = k_min, hi = k_max;
  while (lo < hi) {
    const int mid = lo + (hi - lo + 1) / 2;
    if (latency(mid) <= ttft_budget)
      lo = mid;
    else
      hi = mid - 1;
  }
  return lo;
}

AcceptanceModel update_acceptance(const AcceptanceModel& model,
                                  const std::vector<bool>& outcomes) {
  if (outcomes.size() > model.p.size())
    throw Error(ErrorCode::KOutOfRange, "more outcomes than modeled positions");
  AcceptanceModel next = model;
  const double a = model.ema_alpha;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    next.p[i] = (1.0 - a) * next.p[i] + a * (outcomes[i] ? 1.0 : 0.0);
    if (!outcomes[i]) break;  // positions past the first rejection are unobserved
  }
  return next;
}

FootprintTotals memory_footprint(std::span<const FootprintComponent> components) {
  FootprintTotals totals;
  for (const auto& c : components) {
    totals.draft_gb += c.draft_gb;
    totals.target_gb += c.target_gb;
    totals.shared_gb += c.shared_gb;
  }
  totals.total_gb = totals.draft_gb + totals.target_gb + totals.shared_gb;
  return totals;
}

std::string roofline_csv(std::span<const OperatingPoint> points) {
  std::ostringstream out;
  out << "k,intensity,throughput,compute_roof,io_roof\n";
  out.precision(12);
  for (const auto& pt : points) {
    out << pt.k << ',';
    if (std::isinf(pt.intensity))
      out << "inf";
    else
      out << pt.intensity;
    out << ',' << pt.throughput << ',' << pt.compute_roof << ',';
    if (std::isinf(pt.io_roof))
      out << "inf";
    else
      out << pt.io_roof;
    out << '\n';
  }
  return out.str();
}

}  // namespace moespeq
