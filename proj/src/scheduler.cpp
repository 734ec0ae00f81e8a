#include "moespeq/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace moespeq {

ExpertLookaheadBuffer::ExpertLookaheadBuffer(int draft_len, int num_layers)
    : draft_len_(draft_len), num_layers_(num_layers) {
  if (draft_len < 0 || num_layers < 1)
    throw Error(ErrorCode::ShapeMismatch, "ELB needs draft_len >= 0 and num_layers >= 1");
  rows_.resize(static_cast<std::size_t>(draft_len));
}

void ExpertLookaheadBuffer::push_token(const std::vector<std::vector<ElbEntry>>& per_layer) {
  if (filled_ >= draft_len_)
    throw Error(ErrorCode::RangeOutOfBounds, "ELB already holds draft_len rows");
  if (per_layer.size() != static_cast<std::size_t>(num_layers_))
    throw Error(ErrorCode::ShapeMismatch, "row must cover every layer");
  rows_[static_cast<std::size_t>(filled_)] = per_layer;
  ++filled_;
}

const std::vector<ElbEntry>& ExpertLookaheadBuffer::cell(int token, int layer) const {
  if (token < 0 || token >= filled_)
    throw Error(ErrorCode::RangeOutOfBounds, "token row " + std::to_string(token));
  if (layer < 0 || layer >= num_layers_)
    throw Error(ErrorCode::LayerOutOfRange, "layer " + std::to_string(layer));
  return rows_[static_cast<std::size_t>(token)][static_cast<std::size_t>(layer)];
}

std::optional<int> ExpertLookaheadBuffer::next_use(ExpertKey key, int now) const {
  if (key.layer < 0 || key.layer >= num_layers_) return std::nullopt;
  for (int i = std::max(now, 0); i < filled_; ++i)
    for (const auto& entry : rows_[static_cast<std::size_t>(i)][static_cast<std::size_t>(key.layer)])
      if (entry.expert_id == key.expert) return i;
  return std::nullopt;
}

ExpertLookaheadBuffer build_elb(std::span<const TokenRecord> window, int num_layers) {
  ExpertLookaheadBuffer elb(static_cast<int>(window.size()), num_layers);
  for (const auto& tok : window) {
    if (tok.draft_sets.size() != static_cast<std::size_t>(num_layers))
      throw Error(ErrorCode::ShapeMismatch, "draft prediction layer count mismatch");
    const bool has_gates = !tok.draft_gates.empty();
    std::vector<std::vector<ElbEntry>> row(tok.draft_sets.size());
    for (std::size_t l = 0; l < tok.draft_sets.size(); ++l) {
      const auto& experts = tok.draft_sets[l];
      row[l].reserve(experts.size());
      double norm = 0.0;
      if (has_gates)
        for (double g : tok.draft_gates[l]) norm += g;
      for (std::size_t s = 0; s < experts.size(); ++s) {
        double conf = 1.0;
        if (has_gates && norm > 0.0) conf = tok.draft_gates[l][s] / norm;
        row[l].push_back({experts[s], conf});
      }
    }
    elb.push_token(row);
  }
  return elb;
}

std::set<ExpertKey> predicted_union(const ExpertLookaheadBuffer& elb, int begin_token,
                                    int end_token) {
  if (begin_token < 0 || end_token > elb.filled() || begin_token > end_token)
    throw Error(ErrorCode::RangeOutOfBounds, "token range outside the filled ELB prefix");
  std::set<ExpertKey> keys;
  for (int t = begin_token; t < end_token; ++t)
    for (int l = 0; l < elb.num_layers(); ++l)
      for (const auto& entry : elb.cell(t, l)) keys.insert({l, entry.expert_id});
  return keys;
}

CacheState::CacheState(CapacityMode mode, std::size_t capacity)
    : mode_(mode), capacity_(capacity) {}

CacheState::CacheState(CapacityMode mode, std::size_t capacity,
                       std::vector<std::size_t> per_layer_caps)
    : mode_(mode), capacity_(capacity), per_layer_caps_(std::move(per_layer_caps)) {
  if (mode_ != CapacityMode::PerLayer && !per_layer_caps_.empty())
    throw Error(ErrorCode::InvalidConfig, "per-layer capacities require PerLayer mode");
}

std::size_t CacheState::capacity_for(int layer) const {
  if (mode_ == CapacityMode::Global) return capacity_;
  if (!per_layer_caps_.empty() && layer >= 0 &&
      static_cast<std::size_t>(layer) < per_layer_caps_.size())
    return per_layer_caps_[static_cast<std::size_t>(layer)];
  return capacity_;
}

bool CacheState::contains(ExpertKey key) const { return resident_.count(key) != 0; }

void CacheState::touch(ExpertKey key) {
  auto it = where_.find(key);
  if (it == where_.end()) return;
  recency_.splice(recency_.end(), recency_, it->second);
}

void CacheState::insert(ExpertKey key) {
  if (contains(key)) {
    touch(key);
    return;
  }
  if (needs_eviction(key.layer))
    throw Error(ErrorCode::InvalidConfig, "cache insert would exceed capacity; evict first");
  recency_.push_back(key);
  where_[key] = std::prev(recency_.end());
  resident_.insert(key);
  ++layer_sizes_[key.layer];
}

void CacheState::erase(ExpertKey key) {
  auto it = where_.find(key);
  if (it == where_.end()) return;
  recency_.erase(it->second);
  where_.erase(it);
  resident_.erase(key);
  --layer_sizes_[key.layer];
}

bool CacheState::needs_eviction(int layer) const {
  if (mode_ == CapacityMode::Global) return recency_.size() >= capacity_;
  return layer_size(layer) >= capacity_for(layer);
}

std::optional<ExpertKey> CacheState::lru_victim(int layer) const {
  for (const auto& key : recency_)
    if (layer < 0 || key.layer == layer) return key;
  return std::nullopt;
}

std::size_t CacheState::layer_size(int layer) const {
  auto it = layer_sizes_.find(layer);
  return it == layer_sizes_.end() ? 0 : it->second;
}

Policy parse_policy(std::string_view name) {
  if (name == "lru") return Policy::Lru;
  if (name == "lookahead") return Policy::LookaheadAware;
  if (name == "sp-sooner") return Policy::SinglePrefetchSooner;
  if (name == "sp-later") return Policy::SinglePrefetchLater;
  if (name == "speculative") return Policy::Speculative;
  throw Error(ErrorCode::UnknownPolicy, std::string(name));
}

std::string to_string(Policy policy) {
  switch (policy) {
    case Policy::Lru: return "lru";
    case Policy::LookaheadAware: return "lookahead";
    case Policy::SinglePrefetchSooner: return "sp-sooner";
    case Policy::SinglePrefetchLater: return "sp-later";
    case Policy::Speculative: return "speculative";
  }
  throw Error(ErrorCode::UnknownPolicy, "unrecognized policy value");
}

nlohmann::ordered_json PrefetchPlan::to_json() const {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& item : items) {
    nlohmann::ordered_json j;
    j["issue_after_token"] = item.issue_after_token;
    j["layer"] = item.key.layer;
    j["expert"] = item.key.expert;
    j["phase"] = item.phase;
    arr.push_back(std::move(j));
  }
  return arr;
}

PrefetchPlan plan_prefetch(const ExpertLookaheadBuffer& elb, const CacheState& cache,
                           int bandwidth_budget, double f1, double f2) {
  if (f1 < 0.0 || f2 < f1 || f2 > 1.0)
    throw Error(ErrorCode::InvalidConfig, "phase boundaries need 0 <= f1 <= f2 <= 1");
  const int k = elb.draft_len();
  PrefetchPlan plan;
  if (k == 0) return plan;
  // floor with a nudge so representable fractions like 0.3*10 land exactly
  const int t1 = static_cast<int>(std::floor(f1 * k + 1e-9));
  const int t2 = static_cast<int>(std::floor(f2 * k + 1e-9));

  struct Candidate {
    double confidence = 0.0;  // best seen so far
    int first_use = 0;
  };
  std::map<ExpertKey, Candidate> candidates;
  std::set<ExpertKey> scheduled;

  auto absorb_row = [&](int row) {
    for (int l = 0; l < elb.num_layers(); ++l)
      for (const auto& entry : elb.cell(row, l)) {
        const ExpertKey key{l, entry.expert_id};
        if (cache.contains(key) || scheduled.count(key)) continue;
        auto [it, fresh] = candidates.try_emplace(key, Candidate{entry.confidence, row});
        if (!fresh) it->second.confidence = std::max(it->second.confidence, entry.confidence);
      }
  };

  const int filled = elb.filled();
  for (int i = 0; i < filled; ++i) {
    if (i < t1) {
      // Phase I: prime only; hits are free, transfers are not issued yet.
      absorb_row(i);
      continue;
    }
    if (i < t2) {
      // Phase II: up to bandwidth_budget transfers this step, highest
      // confidence * earliness first.
      absorb_row(i);
      if (bandwidth_budget <= 0) continue;
      std::vector<std::pair<ExpertKey, Candidate>> pool(candidates.begin(), candidates.end());
      std::sort(pool.begin(), pool.end(), [&](const auto& a, const auto& b) {
        const double pa = a.second.confidence * static_cast<double>(k - a.second.first_use) / k;
        const double pb = b.second.confidence * static_cast<double>(k - b.second.first_use) / k;
        if (pa != pb) return pa > pb;
        if (a.second.first_use != b.second.first_use) return a.second.first_use < b.second.first_use;
        return a.first < b.first;
      });
      const int take = std::min<int>(bandwidth_budget, static_cast<int>(pool.size()));
      for (int n = 0; n < take; ++n) {
        plan.items.push_back({i, pool[n].first, 2});
        scheduled.insert(pool[n].first);
        candidates.erase(pool[n].first);
      }
      continue;
    }
    // Phase III: full visibility; flush everything predicted and absent.
    for (int row = 0; row < filled; ++row) absorb_row(row);
    std::vector<std::pair<ExpertKey, Candidate>> rest(candidates.begin(), candidates.end());
    std::sort(rest.begin(), rest.end(), [](const auto& a, const auto& b) {
      if (a.second.first_use != b.second.first_use) return a.second.first_use < b.second.first_use;
      return a.first < b.first;
    });
    for (const auto& [key, cand] : rest) {
      plan.items.push_back({i, key, 3});
      scheduled.insert(key);
    }
    candidates.clear();
    break;  // everything predicted is now scheduled
  }
  if (t2 >= filled && filled > 0) {
    // Phase III falls on or after the last drafted token: flush at draft end.
    for (int row = 0; row < filled; ++row) absorb_row(row);
    std::vector<std::pair<ExpertKey, Candidate>> rest(candidates.begin(), candidates.end());
    std::sort(rest.begin(), rest.end(), [](const auto& a, const auto& b) {
      if (a.second.first_use != b.second.first_use) return a.second.first_use < b.second.first_use;
      return a.first < b.first;
    });
    for (const auto& [key, cand] : rest) plan.items.push_back({filled - 1, key, 3});
  }
  return plan;
}

ExpertKey select_victim_lookahead(const CacheState& cache, const ExpertLookaheadBuffer& elb,
                                  int now, int layer_filter) {
  constexpr int kNever = std::numeric_limits<int>::max();
  bool found = false;
  ExpertKey victim{};
  int victim_use = -1;
  for (const auto& key : cache.resident()) {
    if (layer_filter >= 0 && key.layer != layer_filter) continue;
    const auto use = elb.next_use(key, now);
    const int use_at = use ? *use : kNever;
    if (!found || use_at > victim_use || (use_at == victim_use && key > victim)) {
      found = true;
      victim = key;
      victim_use = use_at;
    }
  }
  if (!found) throw Error(ErrorCode::EmptyCache, "no resident key to evict");
  return victim;
}

StepResult policy_step(Policy policy, CacheState& cache, ExpertKey request,
                       const PolicyContext* ctx) {
  StepResult result;
  result.hit = cache.contains(request);
  const int victim_layer = cache.mode() == CapacityMode::PerLayer ? request.layer : -1;
  switch (policy) {
    case Policy::Lru:
    case Policy::SinglePrefetchSooner:
    case Policy::SinglePrefetchLater:
      if (result.hit) {
        cache.touch(request);
      } else {
        if (cache.needs_eviction(request.layer)) {
          result.evicted = cache.lru_victim(victim_layer);
          if (!result.evicted) throw Error(ErrorCode::EmptyCache, "no LRU victim available");
          cache.erase(*result.evicted);
        }
        cache.insert(request);
      }
      break;
    case Policy::LookaheadAware:
    case Policy::Speculative:
      if (!result.hit) {
        if (cache.needs_eviction(request.layer)) {
          if (!ctx || !ctx->elb)
            throw Error(ErrorCode::InvalidConfig, "lookahead policies need an ELB context");
          result.evicted = select_victim_lookahead(cache, *ctx->elb, ctx->now, victim_layer);
          cache.erase(*result.evicted);
        }
        cache.insert(request);
      }
      break;
    default:
      throw Error(ErrorCode::UnknownPolicy, "unrecognized policy value");
  }
  return result;
}

double step_coverage(const CacheState& cache, const std::set<ExpertKey>& required) {
  if (required.empty()) throw Error(ErrorCode::EmptyRequired, "required set is empty");
  std::size_t hits = 0;
  for (const auto& key : required)
    if (cache.contains(key)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(required.size());
}

nlohmann::ordered_json ExecutionPlan::to_json() const {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    nlohmann::ordered_json layer;
    layer["layer"] = l;
    layer["groups"] = nlohmann::ordered_json::array();
    for (const auto& group : layers[l]) {
      nlohmann::ordered_json g;
      g["expert"] = group.expert;
      g["tokens"] = group.tokens;
      layer["groups"].push_back(std::move(g));
    }
    arr.push_back(std::move(layer));
  }
  return arr;
}

ExecutionPlan reorder_verification(const std::vector<int>& window_tokens,
                                   const std::vector<std::vector<std::vector<int>>>& routing) {
  if (routing.empty()) throw Error(ErrorCode::IncompleteRouting, "routing has no layers");
  ExecutionPlan plan;
  plan.layers.resize(routing.size());
  for (std::size_t l = 0; l < routing.size(); ++l) {
    if (routing[l].size() != window_tokens.size())
      throw Error(ErrorCode::IncompleteRouting,
                  "layer " + std::to_string(l) + " routing does not cover the window");
    std::map<int, std::vector<int>> groups;
    for (std::size_t i = 0; i < window_tokens.size(); ++i) {
      if (routing[l][i].empty())
        throw Error(ErrorCode::IncompleteRouting, "token without routed experts");
      for (int e : routing[l][i]) groups[e].push_back(window_tokens[i]);
    }
    for (auto& [expert, tokens] : groups) plan.layers[l].push_back({expert, std::move(tokens)});
  }
  return plan;
}

}  // namespace moespeq
