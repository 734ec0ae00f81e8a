#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "moespeq/errors.hpp"

namespace moespeq {

// Identifies one expert within the model: (MoE layer index, expert index).
struct ExpertKey {
  int layer = 0;
  int expert = 0;

  friend bool operator==(const ExpertKey& a, const ExpertKey& b) {
    return a.layer == b.layer && a.expert == b.expert;
  }
  friend bool operator!=(const ExpertKey& a, const ExpertKey& b) { return !(a == b); }
  friend bool operator<(const ExpertKey& a, const ExpertKey& b) {
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.expert < b.expert;
  }
  friend bool operator>(const ExpertKey& a, const ExpertKey& b) { return b < a; }
};

struct ModelShape {
  int num_moe_layers = 0;
  int experts_per_layer = 0;
  int top_k = 0;
  int shared_experts = 0;
  std::uint64_t expert_size_bytes = 0;

  void validate() const;  // throws ShapeViolation on nonsense dimensions
};

// One decoded token: the ground-truth routing (target model) and the draft
// model's predicted routing, both as per-layer ordered top-k expert lists.
// draft_gates is optional; when present it mirrors draft_sets and carries the
// raw gate scores used as prefetch confidences.
struct TokenRecord {
  int position = 0;
  std::vector<std::vector<int>> target_sets;
  std::vector<std::vector<int>> draft_sets;
  std::vector<std::vector<double>> draft_gates;
  bool draft_accepted = false;
};

struct Trace {
  ModelShape shape;
  std::vector<TokenRecord> tokens;
  std::map<std::string, std::string> metadata;

  void validate() const;
};

// Rates always sum to exactly 1.0 (mismatch_rate is derived as the
// complement). Counts carry the underlying integer partition.
struct FidelityStats {
  double hard_rate = 0.0;
  double soft_rate = 0.0;
  double mismatch_rate = 0.0;
  std::uint64_t hard_count = 0;
  std::uint64_t soft_count = 0;
  std::uint64_t mismatch_count = 0;
  std::uint64_t total = 0;
};

enum class FidelityGranularity {
  TokenLayer,  // one observation per (token, layer) pair
  Token,       // one observation per token, worst class across layers
};

// JSONL wire format. First line is a header record
//   {"shape":{"L":..,"N":..,"top_k":..,"shared":..,"expert_bytes":..},"meta":{...}}
// followed by one token record per line
//   {"pos":i,"target":[[l,[e,...]],...],"draft":[[l,[e,...]],...],"acc":true|false}
// with an optional "gates":[[l,[g,...]],...] member mirroring "draft".
Trace parse_trace(std::istream& in);
Trace parse_trace_file(const std::string& path);
void write_trace(const Trace& trace, std::ostream& out);
std::string write_trace(const Trace& trace);

// Seed-deterministic synthetic trace: per-layer categorical target routing
// with power-law skew (skew=0 is uniform), draft routing derived per
// (token,layer) from the requested hard/soft/mismatch rates, and i.i.d.
// draft acceptance flags.
Trace generate_synthetic_trace(const ModelShape& shape, int num_tokens,
                               double hard_rate, double soft_rate, double mismatch_rate,
                               double accept_rate, double skew, std::uint64_t seed);

// Shannon entropy (bits) of the empirical target expert distribution at one
// layer, counting every top-k activation.
double layer_entropy(const Trace& trace, int layer);

FidelityStats classify_fidelity(const Trace& trace,
                                FidelityGranularity granularity = FidelityGranularity::TokenLayer);

}  // namespace moespeq
