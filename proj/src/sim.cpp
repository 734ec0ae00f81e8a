#include "moespeq/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace moespeq {

namespace {

struct Batch {
  double issue_time = 0.0;
  int count = 0;
  bool has_required = false;
  double start = 0.0;
  double end = 0.0;
};

std::set<ExpertKey> target_key_set(const TokenRecord& tok, int layer) {
  std::set<ExpertKey> keys;
  for (int e : tok.target_sets[layer]) keys.insert({layer, e});
  return keys;
}

std::vector<std::size_t> entropy_weighted_caps(const Trace& trace, std::size_t base_capacity) {
  const int L = trace.shape.num_moe_layers;
  std::vector<double> h(L, 0.0);
  double mean = 0.0;
  for (int l = 0; l < L; ++l) {
    h[l] = layer_entropy(trace, l);
    mean += h[l];
  }
  mean /= static_cast<double>(L);
  std::vector<std::size_t> caps(L, base_capacity);
  if (mean <= 0.0) return caps;
  for (int l = 0; l < L; ++l) {
    const double scaled = static_cast<double>(base_capacity) * h[l] / mean;
    caps[l] = std::max<std::size_t>(static_cast<std::size_t>(trace.shape.top_k),
                                    static_cast<std::size_t>(std::llround(scaled)));
  }
  return caps;
}

class Engine {
 public:
  Engine(const Trace& trace, const SimConfig& cfg)
      : trace_(trace),
        cfg_(cfg),
        profile_(cfg.profile),
        cache_(make_cache(trace, cfg)) {
    // The trace header describes the model being replayed; its expert size
    // wins over the profile default so byte and time accounting agree.
    if (trace.shape.expert_size_bytes > 0)
      profile_.expert_size_bytes = trace.shape.expert_size_bytes;
    const int k_cap = std::max(cfg.use_governor ? cfg.governor.k_max : cfg.fixed_k, 1);
    accept_ = AcceptanceModel::constant(cfg.initial_accept, k_cap);
    accept_.ema_alpha = cfg.ema_alpha;
    // First-cycle pessimistic estimate: every prediction is a new expert.
    g_per_token_ = static_cast<double>(trace.shape.num_moe_layers) *
                   static_cast<double>(trace.shape.top_k);
  }

  SimReport run();

 private:
  static CacheState make_cache(const Trace& trace, const SimConfig& cfg) {
    if (cfg.capacity_mode == CapacityMode::PerLayer && cfg.entropy_weighted_capacity &&
        !trace.tokens.empty())
      return CacheState(cfg.capacity_mode, cfg.cache_capacity,
                        entropy_weighted_caps(trace, cfg.cache_capacity));
    return CacheState(cfg.capacity_mode, cfg.cache_capacity);
  }

  NewExpertEstimator estimator() const {
    const double g = g_per_token_;
    return [g](int k) { return static_cast<int>(std::llround(g * static_cast<double>(k))); };
  }

  int choose_k() const {
    if (!cfg_.use_governor) return cfg_.fixed_k;
    GovernorConfig gov = cfg_.governor;
    gov.k_slo = k_slo_;
    return select_k(profile_, accept_, gov, estimator());
  }

  const Trace& trace_;
  SimConfig cfg_;
  HardwareProfile profile_;
  CacheState cache_;
  AcceptanceModel accept_;
  double g_per_token_ = 0.0;
  int k_slo_ = 0;
  int head_pos_ = -1;  // previous cycle's bonus token, verified as window head
  double channel_free_ = 0.0;
};

SimReport Engine::run() {
  const int L = trace_.shape.num_moe_layers;
  const auto& tokens = trace_.tokens;
  const int len = static_cast<int>(tokens.size());

  k_slo_ = cfg_.governor.k_slo;
  if (cfg_.use_governor && cfg_.governor.ttft_budget > 0.0)
    k_slo_ = std::min(k_slo_, k_slo_from_ttft(profile_, cfg_.governor.ttft_budget, estimator(),
                                              cfg_.governor.k_min, cfg_.governor.k_max));

  SimReport report;
  double now = 0.0;
  int pos = 0;
  int cycle_index = 0;
  double step_cov_total = 0.0;
  std::uint64_t step_total = 0;
  double layer_cov_total = 0.0;
  std::uint64_t layer_cov_count = 0;
  std::uint64_t accepted_total = 0;

  while (pos < len) {
    const int rem = len - pos;
    const int k_eff = std::min(choose_k(), rem);
    const double t0 = now;

    CycleRecord rec;
    rec.cycle_index = cycle_index;
    rec.k_used = k_eff;
    rec.start_time = t0;

    auto elb = build_elb(std::span<const TokenRecord>(tokens.data() + pos,
                                                      static_cast<std::size_t>(k_eff)),
                         L);
    const double draft_dur = t_draft(profile_, k_eff);
    const double draft_end = t0 + draft_dur;
    rec.segments.push_back({"draft", t0, draft_dur, 0});
    auto draft_done_at = [&](int row) {
      return t0 + profile_.draft_base + static_cast<double>(row + 1) * profile_.draft_per_token;
    };

    // Verification window: previous bonus token first (no predictions for
    // it), then the k drafted positions.
    std::vector<std::pair<int, int>> window;  // (trace position, elb row or -1)
    if (head_pos_ >= 0) window.emplace_back(head_pos_, -1);
    for (int i = 0; i < k_eff; ++i) window.emplace_back(pos + i, i);

    std::set<ExpertKey> required_union;
    for (const auto& [vpos, row] : window) {
      (void)row;
      for (int l = 0; l < L; ++l)
        for (int e : tokens[static_cast<std::size_t>(vpos)].target_sets[l])
          required_union.insert({l, e});
    }

    int fetched = 0;
    std::vector<Batch> batches;
    const auto victim_layer = [&](ExpertKey key) {
      return cache_.mode() == CapacityMode::PerLayer ? key.layer : -1;
    };
    // Logical insert for prefetched keys; returns false if already resident.
    auto prefetch_insert = [&](ExpertKey key, bool belady, int now_row) {
      if (cache_.contains(key)) {
        if (!belady) cache_.touch(key);
        return false;
      }
      if (cache_.needs_eviction(key.layer)) {
        ExpertKey victim{};
        if (belady) {
          victim = select_victim_lookahead(cache_, elb, now_row, victim_layer(key));
        } else {
          auto v = cache_.lru_victim(victim_layer(key));
          if (!v) throw Error(ErrorCode::EmptyCache, "no LRU victim available");
          victim = *v;
        }
        cache_.erase(victim);
      }
      cache_.insert(key);
      ++fetched;
      return true;
    };

    // Mid-draft prefetches land before verification; the final flush is
    // issued at the end of drafting, so its transfers arrive around verify
    // start and its cache effects apply after the window's first (carried)
    // position has executed.
    PrefetchPlan plan;
    std::vector<ExpertKey> flush_keys;
    if (cfg_.policy == Policy::Speculative) {
      plan = plan_prefetch(elb, cache_, cfg_.prefetch_budget, cfg_.phase_f1, cfg_.phase_f2);
      std::size_t i = 0;
      while (i < plan.items.size()) {
        const int issue_token = plan.items[i].issue_after_token;
        Batch batch;
        batch.issue_time = draft_done_at(issue_token);
        while (i < plan.items.size() && plan.items[i].issue_after_token == issue_token) {
          const ExpertKey key = plan.items[i].key;
          if (plan.items[i].phase == 3) {
            if (!cache_.contains(key)) {
              flush_keys.push_back(key);
              ++batch.count;
              if (required_union.count(key)) batch.has_required = true;
            }
          } else if (prefetch_insert(key, true, 0)) {
            // Eviction looks ahead from row 0: nothing has been verified yet,
            // so every drafted row's predicted use still counts as future.
            ++batch.count;
            if (required_union.count(key)) batch.has_required = true;
          }
          ++i;
        }
        if (batch.count > 0) batches.push_back(batch);
      }
    }

    // Residency of each layer's required union at verification start.
    rec.per_layer_coverage.resize(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
      std::set<ExpertKey> layer_required;
      for (const auto& [vpos, row] : window) {
        (void)row;
        for (int e : tokens[static_cast<std::size_t>(vpos)].target_sets[l])
          layer_required.insert({l, e});
      }
      rec.per_layer_coverage[static_cast<std::size_t>(l)] = step_coverage(cache_, layer_required);
      layer_cov_total += rec.per_layer_coverage[static_cast<std::size_t>(l)];
      ++layer_cov_count;
    }

    // Per-token verification steps, serialized as (token, layer) slots.
    // Coverage is measured before a step's own demand fetches mutate the
    // cache.
    struct Slot {
      int vpos;
      int row;  // ELB row, -1 for the unpredicted head position
      int layer;
    };
    std::vector<Slot> slots;
    slots.reserve(window.size() * static_cast<std::size_t>(L));
    for (const auto& [vpos, row] : window)
      for (int l = 0; l < L; ++l) slots.push_back({vpos, row, l});

    double step_cov_sum = 0.0;
    int step_count = 0;
    int demand_count = 0;
    // The single-prefetch baselines fetch one cell of predictions per step:
    // "sooner" a layer ahead of its use, "later" at the step itself. Their
    // transfers are batched per token against the I/O channel.
    std::map<int, Batch> row_batches;
    auto jit_insert_cell = [&](int row, int layer) {
      for (const auto& entry : elb.cell(row, layer)) {
        const ExpertKey key{layer, entry.expert_id};
        if (prefetch_insert(key, false, row)) {
          Batch& batch = row_batches[row];
          ++batch.count;
          if (required_union.count(key)) batch.has_required = true;
        }
      }
    };
    const bool sooner = cfg_.policy == Policy::SinglePrefetchSooner;
    const bool later = cfg_.policy == Policy::SinglePrefetchLater;
    if (sooner && !slots.empty() && slots.front().row >= 0)
      jit_insert_cell(slots.front().row, slots.front().layer);
    bool flush_applied = flush_keys.empty();
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const Slot& slot = slots[s];
      if (!flush_applied && slot.row >= 0) {
        for (const ExpertKey key : flush_keys) prefetch_insert(key, true, 0);
        flush_applied = true;
      }
      if (later && slot.row >= 0) jit_insert_cell(slot.row, slot.layer);
      if (sooner && s + 1 < slots.size() && slots[s + 1].row >= 0)
        jit_insert_cell(slots[s + 1].row, slots[s + 1].layer);
      if (cfg_.policy == Policy::Speculative && slot.row >= 0 && slot.layer == 0) {
        // Staged refill: anything predicted for this row but not resident
        // comes back before the row executes, as channel traffic.
        for (int l = 0; l < L; ++l)
          for (const auto& entry : elb.cell(slot.row, l)) {
            const ExpertKey key{l, entry.expert_id};
            if (!cache_.contains(key) && prefetch_insert(key, true, slot.row)) {
              Batch& batch = row_batches[slot.row];
              ++batch.count;
              if (required_union.count(key)) batch.has_required = true;
            }
          }
      }
      PolicyContext ctx{&elb, std::max(slot.row, 0)};
      const auto required = target_key_set(tokens[static_cast<std::size_t>(slot.vpos)], slot.layer);
      step_cov_sum += step_coverage(cache_, required);
      ++step_count;
      for (const auto& key : required) {
        const bool was_resident = cache_.contains(key);
        policy_step(cfg_.policy, cache_, key, &ctx);
        if (!was_resident) {
          ++fetched;
          ++demand_count;
        }
      }
    }
    std::vector<Batch> jit_batches;
    for (auto& [row, batch] : row_batches) {
      (void)row;
      if (batch.count > 0) jit_batches.push_back(batch);
    }

    // I/O lane layout. The init fetch is charged only when this cycle moves
    // at least one verification-required expert.
    const bool any_required_io =
        demand_count > 0 ||
        std::any_of(batches.begin(), batches.end(), [](const Batch& b) { return b.has_required; }) ||
        std::any_of(jit_batches.begin(), jit_batches.end(),
                    [](const Batch& b) { return b.has_required; });
    double p0 = draft_end;
    double channel = std::max(t0, channel_free_);
    if (any_required_io) {
      const double init_start = channel;
      channel = init_start + profile_.pcie_init_latency;
      rec.segments.push_back({"io_init", init_start, profile_.pcie_init_latency, 1});
      p0 = std::max(draft_end, channel);
    }
    double required_drain = p0;
    for (auto& b : batches) {
      b.start = std::max(b.issue_time, channel);
      const double dur = profile_.pcie_overhead + static_cast<double>(b.count) *
                                                      static_cast<double>(profile_.expert_size_bytes) /
                                                      profile_.pcie_bandwidth;
      b.end = b.start + dur;
      channel = b.end;
      rec.segments.push_back({"io_new", b.start, dur, 1});
      if (b.has_required) required_drain = std::max(required_drain, b.end);
    }
    for (auto& b : jit_batches) {
      b.start = std::max(p0, channel);
      const double dur = profile_.pcie_overhead + static_cast<double>(b.count) *
                                                      static_cast<double>(profile_.expert_size_bytes) /
                                                      profile_.pcie_bandwidth;
      b.end = b.start + dur;
      channel = b.end;
      rec.segments.push_back({"io_new", b.start, dur, 1});
      if (b.has_required) required_drain = std::max(required_drain, b.end);
    }
    const double sync_dur = t_pcie_new(profile_, demand_count);
    double io_wait = std::max(0.0, required_drain - p0);
    if (demand_count > 0) io_wait = std::max(io_wait, channel - p0);  // sync queues FIFO
    if (sync_dur > 0.0) {
      rec.segments.push_back({"io_new", p0 + io_wait, sync_dur, 1});
      channel = std::max(channel, p0 + io_wait + sync_dur);
    }
    channel_free_ = channel;

    const double verify_start = p0 + io_wait + sync_dur;
    const double verify_dur = t_verify(profile_, static_cast<double>(k_eff + 1));
    rec.segments.push_back({"verify", verify_start, verify_dur, 0});
    double cycle_end = verify_start + verify_dur;

    // Acceptance of the drafted prefix.
    int accepted = 0;
    while (accepted < k_eff && tokens[static_cast<std::size_t>(pos + accepted)].draft_accepted)
      ++accepted;

    if (accepted < k_eff && cfg_.rollback_duration > 0.0) {
      rec.segments.push_back({"rollback", cycle_end, cfg_.rollback_duration, 0});
      cycle_end += cfg_.rollback_duration;
    }

    const int consumed = std::min(accepted + 1, rem);
    rec.bonus_token = consumed - std::min(accepted, consumed);
    rec.accepted_count = consumed - rec.bonus_token;
    head_pos_ = rec.bonus_token > 0 ? pos + accepted : -1;

    rec.step_coverage_mean = step_count > 0 ? step_cov_sum / step_count : 0.0;
    rec.step_count = step_count;
    rec.new_experts_fetched = fetched;
    rec.bytes_transferred =
        static_cast<std::uint64_t>(fetched) * profile_.expert_size_bytes;
    rec.io_wait = io_wait;
    rec.sync_fetch_time = sync_dur;
    rec.sync_fetch_count = demand_count;
    rec.span = cycle_end - t0;

    if (cfg_.collect_plans) {
      rec.prefetch_plan = plan.to_json();
      std::vector<int> window_positions;
      std::vector<std::vector<std::vector<int>>> routing(static_cast<std::size_t>(L));
      for (const auto& [vpos, row] : window) {
        (void)row;
        window_positions.push_back(vpos);
      }
      for (int l = 0; l < L; ++l)
        for (const auto& [vpos, row] : window) {
          (void)row;
          routing[static_cast<std::size_t>(l)].push_back(
              tokens[static_cast<std::size_t>(vpos)].target_sets[l]);
        }
      rec.execution_plan = reorder_verification(window_positions, routing).to_json();
    }

    // Online acceptance refresh: observed outcomes stop at the first
    // rejection.
    std::vector<bool> outcomes;
    for (int i = 0; i < k_eff; ++i) {
      const bool ok = tokens[static_cast<std::size_t>(pos + i)].draft_accepted;
      outcomes.push_back(ok);
      if (!ok) break;
    }
    if (outcomes.size() > accept_.p.size()) outcomes.resize(accept_.p.size());
    accept_ = update_acceptance(accept_, outcomes);
    g_per_token_ = static_cast<double>(fetched) / static_cast<double>(k_eff);

    report.stall_time += verify_start - draft_end;
    step_cov_total += step_cov_sum;
    step_total += static_cast<std::uint64_t>(step_count);
    accepted_total += static_cast<std::uint64_t>(rec.accepted_count);
    report.total_new_experts += static_cast<std::uint64_t>(fetched);
    report.cycles.push_back(std::move(rec));

    now = cycle_end;
    pos += consumed;
    ++cycle_index;
  }

  report.total_tokens = static_cast<std::uint64_t>(pos);
  report.total_time = now;
  report.tpot = report.total_tokens > 0 ? report.total_time / static_cast<double>(report.total_tokens)
                                        : 0.0;
  report.ttft = report.cycles.empty() ? 0.0 : report.cycles.front().span;
  report.mean_coverage =
      layer_cov_count > 0 ? layer_cov_total / static_cast<double>(layer_cov_count) : 0.0;
  report.mean_step_coverage =
      step_total > 0 ? step_cov_total / static_cast<double>(step_total) : 0.0;
  report.mean_accepted = report.cycles.empty()
                             ? 0.0
                             : static_cast<double>(accepted_total) /
                                   static_cast<double>(report.cycles.size());
  return report;
}

}  // namespace

void SimConfig::validate(const ModelShape& shape) const {
  profile.validate();
  if (!use_governor && fixed_k < 1)
    throw Error(ErrorCode::InvalidConfig, "fixed k must be >= 1");
  if (use_governor) {
    if (governor.k_min < 1 || governor.k_min > governor.k_max)
      throw Error(ErrorCode::InvalidConfig, "governor needs 1 <= k_min <= k_max");
    if (governor.k_slo < governor.k_min)
      throw Error(ErrorCode::InvalidConfig, "governor k_slo below k_min");
  }
  if (cache_capacity < static_cast<std::size_t>(shape.top_k))
    throw Error(ErrorCode::InvalidConfig, "cache capacity below top_k cannot serve one step");
  if (phase_f1 < 0.0 || phase_f2 < phase_f1 || phase_f2 > 1.0)
    throw Error(ErrorCode::InvalidConfig, "phase boundaries need 0 <= f1 <= f2 <= 1");
  if (prefetch_budget < 0) throw Error(ErrorCode::InvalidConfig, "prefetch budget must be >= 0");
  if (rollback_duration < 0.0) throw Error(ErrorCode::InvalidConfig, "rollback must be >= 0");
  if (ema_alpha < 0.0 || ema_alpha > 1.0)
    throw Error(ErrorCode::InvalidConfig, "ema_alpha must be in [0, 1]");
  if (initial_accept < 0.0 || initial_accept > 1.0)
    throw Error(ErrorCode::InvalidConfig, "initial_accept must be in [0, 1]");
}

SimReport run_simulation(const Trace& trace, const SimConfig& config) {
  trace.validate();
  config.validate(trace.shape);
  if (trace.tokens.empty()) {
    return SimReport{};
  }
  Engine engine(trace, config);
  return engine.run();
}

nlohmann::ordered_json SimReport::to_json() const {
  nlohmann::ordered_json j;
  j["total_tokens"] = total_tokens;
  j["total_time_s"] = total_time;
  j["tpot_s"] = tpot;
  j["ttft_s"] = ttft;
  j["mean_coverage"] = mean_coverage;
  j["mean_step_coverage"] = mean_step_coverage;
  j["mean_accepted"] = mean_accepted;
  j["stall_time_s"] = stall_time;
  j["total_new_experts"] = total_new_experts;
  j["cycles"] = nlohmann::ordered_json::array();
  for (const auto& c : cycles) {
    nlohmann::ordered_json cj;
    cj["cycle"] = c.cycle_index;
    cj["k"] = c.k_used;
    cj["accepted"] = c.accepted_count;
    cj["bonus"] = c.bonus_token;
    cj["start_s"] = c.start_time;
    cj["span_s"] = c.span;
    cj["coverage"] = c.per_layer_coverage;
    cj["step_coverage"] = c.step_coverage_mean;
    cj["steps"] = c.step_count;
    cj["new_experts"] = c.new_experts_fetched;
    cj["bytes"] = c.bytes_transferred;
    cj["io_wait_s"] = c.io_wait;
    cj["sync_fetch_s"] = c.sync_fetch_time;
    cj["sync_count"] = c.sync_fetch_count;
    cj["segments"] = nlohmann::ordered_json::array();
    for (const auto& s : c.segments) {
      nlohmann::ordered_json sj;
      sj["lane"] = s.lane == 0 ? "compute" : "io";
      sj["label"] = s.label;
      sj["start_s"] = s.start;
      sj["duration_s"] = s.duration;
      cj["segments"].push_back(std::move(sj));
    }
    if (!c.prefetch_plan.is_null()) cj["prefetch_plan"] = c.prefetch_plan;
    if (!c.execution_plan.is_null()) cj["execution_plan"] = c.execution_plan;
    j["cycles"].push_back(std::move(cj));
  }
  return j;
}

std::string SimReport::to_json_string() const { return to_json().dump(2); }

std::string SimReport::cycles_csv() const {
  std::ostringstream out;
  out.precision(12);
  out << "cycle,k,accepted,coverage,span_s,bytes\n";
  for (const auto& c : cycles) {
    double cov = 0.0;
    for (double v : c.per_layer_coverage) cov += v;
    if (!c.per_layer_coverage.empty()) cov /= static_cast<double>(c.per_layer_coverage.size());
    out << c.cycle_index << ',' << c.k_used << ',' << c.accepted_count << ',' << cov << ','
        << c.span << ',' << c.bytes_transferred << '\n';
  }
  return out.str();
}

std::string SimReport::timeline_csv() const {
  std::ostringstream out;
  out.precision(12);
  out << "cycle,lane,label,start_s,duration_s\n";
  for (const auto& c : cycles)
    for (const auto& s : c.segments)
      out << c.cycle_index << ',' << (s.lane == 0 ? "compute" : "io") << ',' << s.label << ','
          << s.start << ',' << s.duration << '\n';
  return out.str();
}

std::vector<PolicyRow> compare_policies(const Trace& trace, const SimConfig& base,
                                        std::span<const Policy> policies,
                                        std::span<const std::size_t> capacities) {
  std::vector<PolicyRow> rows;
  for (const Policy policy : policies)
    for (const std::size_t capacity : capacities) {
      SimConfig cfg = base;
      cfg.policy = policy;
      cfg.cache_capacity = capacity;
      const SimReport report = run_simulation(trace, cfg);
      rows.push_back({policy, capacity, report.mean_step_coverage, report.tpot});
    }
  return rows;
}

std::string policy_table_csv(std::span<const PolicyRow> rows) {
  std::ostringstream out;
  out.precision(12);
  out << "policy,capacity,coverage,tpot\n";
  for (const auto& row : rows)
    out << to_string(row.policy) << ',' << row.capacity << ',' << row.coverage << ',' << row.tpot
        << '\n';
  return out.str();
}

std::vector<SweepRow> sweep_k(const Trace& trace, const SimConfig& base, std::span<const int> ks) {
  std::vector<SweepRow> rows;
  for (const int k : ks) {
    SimConfig cfg = base;
    cfg.use_governor = false;
    cfg.fixed_k = k;
    const SimReport report = run_simulation(trace, cfg);
    rows.push_back({k, report.tpot, report.mean_accepted, report.mean_step_coverage, report.ttft});
  }
  return rows;
}

}  // namespace moespeq
