#pragma once

#include <cstddef>
#include <list>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "moespeq/trace.hpp"

namespace moespeq {

struct ElbEntry {
  int expert_id = 0;
  double confidence = 1.0;
};

// Expert Lookahead Buffer: a k x L grid of predicted expert sets, one row per
// speculative draft token, filled incrementally as the draft emits tokens.
class ExpertLookaheadBuffer {
 public:
  ExpertLookaheadBuffer(int draft_len, int num_layers);

  void push_token(const std::vector<std::vector<ElbEntry>>& per_layer);

  int draft_len() const { return draft_len_; }
  int num_layers() const { return num_layers_; }
  int filled() const { return filled_; }

  const std::vector<ElbEntry>& cell(int token, int layer) const;

  // First filled row >= now predicting this expert, or nullopt.
  std::optional<int> next_use(ExpertKey key, int now) const;

 private:
  int draft_len_;
  int num_layers_;
  int filled_ = 0;
  std::vector<std::vector<std::vector<ElbEntry>>> rows_;
};

// Builds a full ELB from per-token draft predictions. Gate scores, when
// present, are normalized within each (token, layer) cell; absent gates mean
// confidence 1.0 everywhere.
ExpertLookaheadBuffer build_elb(std::span<const TokenRecord> window, int num_layers);

std::set<ExpertKey> predicted_union(const ExpertLookaheadBuffer& elb, int begin_token,
                                    int end_token);

enum class CapacityMode { PerLayer, Global };

// GPU expert cache. Capacity is either per layer (default) or one global
// budget. Shared/pinned experts live outside this accounting. Eviction is the
// caller's job: insert() refuses to exceed capacity.
class CacheState {
 public:
  CacheState(CapacityMode mode, std::size_t capacity);
  CacheState(CapacityMode mode, std::size_t capacity, std::vector<std::size_t> per_layer_caps);

  CapacityMode mode() const { return mode_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t capacity_for(int layer) const;

  bool contains(ExpertKey key) const;
  void touch(ExpertKey key);
  void insert(ExpertKey key);
  void erase(ExpertKey key);

  // True when inserting a (non-resident) key of this layer requires an
  // eviction first.
  bool needs_eviction(int layer) const;

  // Least recently used resident key; restricted to `layer` when >= 0.
  std::optional<ExpertKey> lru_victim(int layer = -1) const;

  std::size_t size() const { return recency_.size(); }
  std::size_t layer_size(int layer) const;
  const std::set<ExpertKey>& resident() const { return resident_; }

 private:
  CapacityMode mode_;
  std::size_t capacity_;
  std::vector<std::size_t> per_layer_caps_;  // optional entropy-weighted override
  std::set<ExpertKey> resident_;
  std::list<ExpertKey> recency_;  // front = least recent
  std::map<ExpertKey, std::list<ExpertKey>::iterator> where_;
  std::map<int, std::size_t> layer_sizes_;
};

enum class Policy {
  Lru,
  LookaheadAware,
  SinglePrefetchSooner,
  SinglePrefetchLater,
  Speculative,
};

Policy parse_policy(std::string_view name);
std::string to_string(Policy policy);

struct PrefetchItem {
  int issue_after_token = 0;  // draft-token index after which to issue
  ExpertKey key;
  int phase = 0;  // 2 or 3; phase 1 issues no transfers
};

struct PrefetchPlan {
  std::vector<PrefetchItem> items;

  nlohmann::ordered_json to_json() const;
};

// Three-phase prefetch schedule over the ELB against the current cache:
// tokens [0, f1*k) issue nothing, tokens [f1*k, f2*k) issue at most
// bandwidth_budget transfers each by descending confidence * (k - first_use)/k,
// and the first token at f2*k flushes every remaining non-resident predicted
// expert. Resident and already-scheduled keys are never planned.
PrefetchPlan plan_prefetch(const ExpertLookaheadBuffer& elb, const CacheState& cache,
                           int bandwidth_budget, double f1 = 0.25, double f2 = 0.75);

// Lookahead-aware (Belady) victim: furthest next predicted use, preferring
// keys with no future use at all; ties fall to the larger (layer, expert).
// `layer_filter` >= 0 restricts candidates to one layer.
ExpertKey select_victim_lookahead(const CacheState& cache, const ExpertLookaheadBuffer& elb,
                                  int now, int layer_filter = -1);

struct StepResult {
  bool hit = false;
  std::optional<ExpertKey> evicted;
};

struct PolicyContext {
  const ExpertLookaheadBuffer* elb = nullptr;
  int now = 0;
};

// Serves a single expert request under the given policy, mutating the cache.
// LRU-family policies track recency; lookahead-family policies evict via
// select_victim_lookahead and need `ctx`.
StepResult policy_step(Policy policy, CacheState& cache, ExpertKey request,
                       const PolicyContext* ctx = nullptr);

// Fraction of required experts resident right now.
double step_coverage(const CacheState& cache, const std::set<ExpertKey>& required);

struct ExpertGroup {
  int expert = 0;
  std::vector<int> tokens;  // original window order
};

struct ExecutionPlan {
  std::vector<std::vector<ExpertGroup>> layers;

  nlohmann::ordered_json to_json() const;
};

// Groups a verification window per layer so each activated expert is loaded
// once and applied to all of its tokens; token order inside a group is
// preserved.
ExecutionPlan reorder_verification(const std::vector<int>& window_tokens,
                                   const std::vector<std::vector<std::vector<int>>>& routing);

}  // namespace moespeq
