#include "moespeq/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace moespeq {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void malformed(int line, const std::string& what) {
  throw Error(ErrorCode::MalformedRecord, what, line);
}

[[noreturn]] void shape_violation(int line, const std::string& field, const std::string& what) {
  throw Error(ErrorCode::ShapeViolation, field + ": " + what, line);
}

// Deterministic sampling helpers on top of mt19937_64. The standard
// distributions are implementation-defined, so traces would not be stable
// across library versions; these are.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Unbiased integer in [0, bound) via rejection.
  std::uint64_t next_below(std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % bound;
  }

  double next_unit() {  // [0, 1) with 53 random bits
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

 private:
  std::mt19937_64 eng_;
};

std::vector<int> parse_expert_list(const json& arr, const ModelShape& shape, int line,
                                   const char* field) {
  if (!arr.is_array() || arr.size() != static_cast<std::size_t>(shape.top_k))
    shape_violation(line, field, "expected " + std::to_string(shape.top_k) + " experts");
  std::vector<int> experts;
  experts.reserve(arr.size());
  for (const auto& e : arr) {
    if (!e.is_number_integer()) malformed(line, std::string(field) + ": expert must be an integer");
    const int id = e.get<int>();
    if (id < 0 || id >= shape.experts_per_layer)
      shape_violation(line, field, "expert " + std::to_string(id) + " out of range");
    if (std::find(experts.begin(), experts.end(), id) != experts.end())
      shape_violation(line, field, "duplicate expert " + std::to_string(id));
    experts.push_back(id);
  }
  return experts;
}

// Parses [[layer,[e,...]],...] into a dense per-layer table.
std::vector<std::vector<int>> parse_routing(const json& arr, const ModelShape& shape, int line,
                                            const char* field) {
  if (!arr.is_array() || arr.size() != static_cast<std::size_t>(shape.num_moe_layers))
    shape_violation(line, field,
                    "expected " + std::to_string(shape.num_moe_layers) + " layer entries");
  std::vector<std::vector<int>> by_layer(shape.num_moe_layers);
  std::vector<bool> seen(shape.num_moe_layers, false);
  for (const auto& entry : arr) {
    if (!entry.is_array() || entry.size() != 2 || !entry[0].is_number_integer())
      malformed(line, std::string(field) + ": layer entry must be [layer, [experts]]");
    const int layer = entry[0].get<int>();
    if (layer < 0 || layer >= shape.num_moe_layers)
      shape_violation(line, field, "layer " + std::to_string(layer) + " out of range");
    if (seen[layer]) shape_violation(line, field, "duplicate layer " + std::to_string(layer));
    seen[layer] = true;
    by_layer[layer] = parse_expert_list(entry[1], shape, line, field);
  }
  return by_layer;
}

std::vector<std::vector<double>> parse_gates(const json& arr, const ModelShape& shape, int line) {
  if (!arr.is_array() || arr.size() != static_cast<std::size_t>(shape.num_moe_layers))
    shape_violation(line, "gates", "expected one entry per layer");
  std::vector<std::vector<double>> by_layer(shape.num_moe_layers);
  std::vector<bool> seen(shape.num_moe_layers, false);
  for (const auto& entry : arr) {
    if (!entry.is_array() || entry.size() != 2 || !entry[0].is_number_integer())
      malformed(line, "gates: layer entry must be [layer, [scores]]");
    const int layer = entry[0].get<int>();
    if (layer < 0 || layer >= shape.num_moe_layers)
      shape_violation(line, "gates", "layer out of range");
    if (seen[layer]) shape_violation(line, "gates", "duplicate layer");
    seen[layer] = true;
    const auto& scores = entry[1];
    if (!scores.is_array() || scores.size() != static_cast<std::size_t>(shape.top_k))
      shape_violation(line, "gates", "expected " + std::to_string(shape.top_k) + " scores");
    for (const auto& s : scores) {
      if (!s.is_number()) malformed(line, "gates: score must be a number");
      const double v = s.get<double>();
      if (!std::isfinite(v) || v < 0.0) shape_violation(line, "gates", "score must be finite and >= 0");
      by_layer[layer].push_back(v);
    }
  }
  return by_layer;
}

ordered_json routing_json(const std::vector<std::vector<int>>& by_layer) {
  ordered_json arr = ordered_json::array();
  for (std::size_t l = 0; l < by_layer.size(); ++l)
    arr.push_back(ordered_json::array({l, by_layer[l]}));
  return arr;
}

// Weighted sampling of `count` distinct experts; weight of expert e is
// (e+1)^-skew, so skew=0 is uniform.
std::vector<int> sample_target_set(Rng& rng, const std::vector<double>& weights, int count) {
  std::vector<double> w = weights;
  std::vector<int> picked;
  picked.reserve(count);
  for (int i = 0; i < count; ++i) {
    double total = 0.0;
    for (double v : w) total += v;
    double u = rng.next_unit() * total;
    int chosen = -1;
    for (std::size_t e = 0; e < w.size(); ++e) {
      if (w[e] <= 0.0) continue;
      if (u < w[e]) {
        chosen = static_cast<int>(e);
        break;
      }
      u -= w[e];
    }
    if (chosen < 0)  // float round-off spilled past the last slot
      for (int e = static_cast<int>(w.size()) - 1; e >= 0; --e)
        if (w[e] > 0.0) {
          chosen = e;
          break;
        }
    picked.push_back(chosen);
    w[chosen] = 0.0;
  }
  return picked;
}

}  // namespace

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::ShapeViolation: return "ShapeViolation";
    case ErrorCode::EmptyTrace: return "EmptyTrace";
    case ErrorCode::InvalidFidelity: return "InvalidFidelity";
    case ErrorCode::DegenerateShape: return "DegenerateShape";
    case ErrorCode::LayerOutOfRange: return "LayerOutOfRange";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::RangeOutOfBounds: return "RangeOutOfBounds";
    case ErrorCode::EmptyCache: return "EmptyCache";
    case ErrorCode::UnknownPolicy: return "UnknownPolicy";
    case ErrorCode::EmptyRequired: return "EmptyRequired";
    case ErrorCode::IncompleteRouting: return "IncompleteRouting";
    case ErrorCode::KOutOfRange: return "KOutOfRange";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::EmptyRange: return "EmptyRange";
    case ErrorCode::InfeasibleBudget: return "InfeasibleBudget";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

std::string Error::format(ErrorCode code, const std::string& message, int line) {
  std::string out = to_string(code);
  if (line > 0) out += " (line " + std::to_string(line) + ")";
  out += ": " + message;
  return out;
}

void ModelShape::validate() const {
  if (num_moe_layers < 1) throw Error(ErrorCode::ShapeViolation, "shape.L: must be >= 1");
  if (experts_per_layer < 1) throw Error(ErrorCode::ShapeViolation, "shape.N: must be >= 1");
  if (top_k < 1 || top_k > experts_per_layer)
    throw Error(ErrorCode::ShapeViolation, "shape.top_k: must be in [1, N]");
  if (shared_experts < 0) throw Error(ErrorCode::ShapeViolation, "shape.shared: must be >= 0");
}

void Trace::validate() const {
  shape.validate();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& tok = tokens[i];
    const int line = static_cast<int>(i) + 2;
    if (tok.position != static_cast<int>(i))
      shape_violation(line, "pos", "expected " + std::to_string(i));
    auto check = [&](const std::vector<std::vector<int>>& sets, const char* field) {
      if (sets.size() != static_cast<std::size_t>(shape.num_moe_layers))
        shape_violation(line, field, "layer count mismatch");
      for (const auto& s : sets) {
        if (s.size() != static_cast<std::size_t>(shape.top_k))
          shape_violation(line, field, "top_k mismatch");
        for (int e : s)
          if (e < 0 || e >= shape.experts_per_layer)
            shape_violation(line, field, "expert out of range");
      }
    };
    check(tok.target_sets, "target");
    check(tok.draft_sets, "draft");
    if (!tok.draft_gates.empty() &&
        tok.draft_gates.size() != static_cast<std::size_t>(shape.num_moe_layers))
      shape_violation(line, "gates", "layer count mismatch");
  }
}

Trace parse_trace(std::istream& in) {
  std::string line;
  int line_no = 0;
  Trace trace;

  if (!std::getline(in, line))
    throw Error(ErrorCode::EmptyTrace, "stream contains no header line");
  ++line_no;

  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.is_object()) malformed(line_no, "header is not a JSON object");
  if (!header.contains("shape") || !header["shape"].is_object())
    malformed(line_no, "header missing shape object");
  const auto& sh = header["shape"];
  for (const char* field : {"L", "N", "top_k", "shared", "expert_bytes"})
    if (!sh.contains(field) || !sh[field].is_number())
      malformed(line_no, std::string("shape missing numeric field ") + field);
  trace.shape.num_moe_layers = sh["L"].get<int>();
  trace.shape.experts_per_layer = sh["N"].get<int>();
  trace.shape.top_k = sh["top_k"].get<int>();
  trace.shape.shared_experts = sh["shared"].get<int>();
  trace.shape.expert_size_bytes = sh["expert_bytes"].get<std::uint64_t>();
  trace.shape.validate();
  if (header.contains("meta")) {
    if (!header["meta"].is_object()) malformed(line_no, "meta must be an object");
    for (const auto& [key, value] : header["meta"].items())
      trace.metadata[key] = value.is_string() ? value.get<std::string>() : value.dump();
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.is_object()) malformed(line_no, "record is not a JSON object");
    for (const char* field : {"pos", "target", "draft", "acc"})
      if (!rec.contains(field)) malformed(line_no, std::string("record missing field ") + field);
    if (!rec["pos"].is_number_integer()) malformed(line_no, "pos must be an integer");
    if (!rec["acc"].is_boolean()) malformed(line_no, "acc must be a boolean");

    TokenRecord tok;
    tok.position = rec["pos"].get<int>();
    const int expected = static_cast<int>(trace.tokens.size());
    if (tok.position != expected)
      shape_violation(line_no, "pos",
                      "expected " + std::to_string(expected) + ", got " + std::to_string(tok.position));
    tok.target_sets = parse_routing(rec["target"], trace.shape, line_no, "target");
    tok.draft_sets = parse_routing(rec["draft"], trace.shape, line_no, "draft");
    if (rec.contains("gates")) tok.draft_gates = parse_gates(rec["gates"], trace.shape, line_no);
    tok.draft_accepted = rec["acc"].get<bool>();
    trace.tokens.push_back(std::move(tok));
  }
  return trace;
}

Trace parse_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open trace file: " + path);
  return parse_trace(in);
}

void write_trace(const Trace& trace, std::ostream& out) {
  ordered_json header;
  header["shape"] = {{"L", trace.shape.num_moe_layers},
                     {"N", trace.shape.experts_per_layer},
                     {"top_k", trace.shape.top_k},
                     {"shared", trace.shape.shared_experts},
                     {"expert_bytes", trace.shape.expert_size_bytes}};
  header["meta"] = ordered_json::object();
  for (const auto& [key, value] : trace.metadata) header["meta"][key] = value;
  out << header.dump() << '\n';

  for (const auto& tok : trace.tokens) {
    ordered_json rec;
    rec["pos"] = tok.position;
    rec["target"] = routing_json(tok.target_sets);
    rec["draft"] = routing_json(tok.draft_sets);
    if (!tok.draft_gates.empty()) {
      ordered_json arr = ordered_json::array();
      for (std::size_t l = 0; l < tok.draft_gates.size(); ++l)
        arr.push_back(ordered_json::array({l, tok.draft_gates[l]}));
      rec["gates"] = arr;
    }
    rec["acc"] = tok.draft_accepted;
    out << rec.dump() << '\n';
  }
}

std::string write_trace(const Trace& trace) {
  std::ostringstream out;
  write_trace(trace, out);
  return out.str();
}

Trace generate_synthetic_trace(const ModelShape& shape, int num_tokens, double hard_rate,
                               double soft_rate, double mismatch_rate, double accept_rate,
                               double skew, std::uint64_t seed) {
  shape.validate();
  if (num_tokens < 0) throw Error(ErrorCode::RangeOutOfBounds, "num_tokens must be >= 0");
  if (hard_rate < 0 || soft_rate < 0 || mismatch_rate < 0 ||
      std::abs(hard_rate + soft_rate + mismatch_rate - 1.0) > 1e-9)
    throw Error(ErrorCode::InvalidFidelity, "fidelity rates must be >= 0 and sum to 1");
  if (accept_rate < 0.0 || accept_rate > 1.0)
    throw Error(ErrorCode::InvalidFidelity, "accept_rate must be in [0, 1]");
  if (mismatch_rate > 0.0 && shape.top_k == shape.experts_per_layer)
    throw Error(ErrorCode::DegenerateShape,
                "mismatch is impossible when top_k equals experts_per_layer");
  if (soft_rate > 0.0 && shape.top_k < 2)
    throw Error(ErrorCode::DegenerateShape, "soft reorders are impossible when top_k < 2");

  Rng rng(seed);
  const int L = shape.num_moe_layers;
  const int N = shape.experts_per_layer;
  const int K = shape.top_k;

  std::vector<double> weights(N);
  for (int e = 0; e < N; ++e) weights[e] = std::pow(static_cast<double>(e + 1), -skew);

  Trace trace;
  trace.shape = shape;
  trace.tokens.reserve(num_tokens);
  for (int t = 0; t < num_tokens; ++t) {
    TokenRecord tok;
    tok.position = t;
    tok.target_sets.resize(L);
    tok.draft_sets.resize(L);
    for (int l = 0; l < L; ++l) {
      tok.target_sets[l] = sample_target_set(rng, weights, K);
      auto& draft = tok.draft_sets[l];
      draft = tok.target_sets[l];
      const double u = rng.next_unit();
      if (u < hard_rate) {
        // order-identical copy
      } else if (u < hard_rate + soft_rate) {
        // random non-identity permutation of the target set
        do {
          for (int i = K - 1; i > 0; --i) {
            const int j = static_cast<int>(rng.next_below(i + 1));
            std::swap(draft[i], draft[j]);
          }
        } while (draft == tok.target_sets[l]);
      } else {
        // replace exactly one expert with one outside the target set
        const int slot = static_cast<int>(rng.next_below(K));
        auto outside = static_cast<int>(rng.next_below(N - K));
        std::vector<bool> member(N, false);
        for (int e : tok.target_sets[l]) member[e] = true;
        int replacement = -1;
        for (int e = 0; e < N; ++e) {
          if (member[e]) continue;
          if (outside == 0) {
            replacement = e;
            break;
          }
          --outside;
        }
        draft[slot] = replacement;
      }
    }
    tok.draft_accepted = rng.next_unit() < accept_rate;
    trace.tokens.push_back(std::move(tok));
  }

  auto fmt = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  trace.metadata["source"] = "synthetic";
  trace.metadata["seed"] = std::to_string(seed);
  trace.metadata["skew"] = fmt(skew);
  trace.metadata["accept_rate"] = fmt(accept_rate);
  trace.metadata["fidelity"] = fmt(hard_rate) + "," + fmt(soft_rate) + "," + fmt(mismatch_rate);
  return trace;
}

double layer_entropy(const Trace& trace, int layer) {
  if (trace.tokens.empty()) throw Error(ErrorCode::EmptyTrace, "layer_entropy needs tokens");
  if (layer < 0 || layer >= trace.shape.num_moe_layers)
    throw Error(ErrorCode::LayerOutOfRange, "layer " + std::to_string(layer));

  std::vector<std::uint64_t> counts(trace.shape.experts_per_layer, 0);
  std::uint64_t total = 0;
  for (const auto& tok : trace.tokens)
    for (int e : tok.target_sets[layer]) {
      ++counts[e];
      ++total;
    }
  double entropy = 0.0;
  for (std::uint64_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    entropy -= p * std::log2(p);
  }
  return entropy;
}

FidelityStats classify_fidelity(const Trace& trace, FidelityGranularity granularity) {
  if (trace.tokens.empty()) throw Error(ErrorCode::EmptyTrace, "classify_fidelity needs tokens");
  const int L = trace.shape.num_moe_layers;

  auto classify_cell = [](const std::vector<int>& target, const std::vector<int>& draft) {
    if (target == draft) return 0;  // hard
    auto a = target, b = draft;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return a == b ? 1 : 2;  // soft : mismatch
  };

  FidelityStats stats;
  for (const auto& tok : trace.tokens) {
    if (granularity == FidelityGranularity::TokenLayer) {
      for (int l = 0; l < L; ++l) {
        switch (classify_cell(tok.target_sets[l], tok.draft_sets[l])) {
          case 0: ++stats.hard_count; break;
          case 1: ++stats.soft_count; break;
          default: ++stats.mismatch_count; break;
        }
      }
    } else {
      int worst = 0;
      for (int l = 0; l < L && worst < 2; ++l)
        worst = std::max(worst, classify_cell(tok.target_sets[l], tok.draft_sets[l]));
      switch (worst) {
        case 0: ++stats.hard_count; break;
        case 1: ++stats.soft_count; break;
        default: ++stats.mismatch_count; break;
      }
    }
  }
  stats.total = stats.hard_count + stats.soft_count + stats.mismatch_count;
  const double n = static_cast<double>(stats.total);
  stats.hard_rate = static_cast<double>(stats.hard_count) / n;
  stats.soft_rate = static_cast<double>(stats.soft_count) / n;
  // Complement keeps the three rates summing to exactly 1.0.
  stats.mismatch_rate = 1.0 - stats.hard_rate - stats.soft_rate;
  return stats;
}

}  // namespace moespeq
