#include "moespeq/cli.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "moespeq/run_config.hpp"
#include "moespeq/sim.hpp"

namespace moespeq {

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string current;
  for (char c : text) {
    if (c == sep) {
      parts.push_back(current);
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  parts.push_back(current);
  return parts;
}

double to_double(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const double value = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw CLI::ValidationError(what + ": expected a number, got \"" + text + "\"");
  }
}

long long to_integer(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long value = std::stoll(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw CLI::ValidationError(what + ": expected an integer, got \"" + text + "\"");
  }
}

ModelShape parse_shape_flag(const std::string& text) {
  const auto parts = split(text, ',');
  if (parts.size() < 3 || parts.size() > 5)
    throw CLI::ValidationError("--shape: expected L,N,top_k[,shared[,expert_bytes]]");
  ModelShape shape;
  shape.num_moe_layers = static_cast<int>(to_integer(parts[0], "--shape L"));
  shape.experts_per_layer = static_cast<int>(to_integer(parts[1], "--shape N"));
  shape.top_k = static_cast<int>(to_integer(parts[2], "--shape top_k"));
  if (parts.size() >= 4)
    shape.shared_experts = static_cast<int>(to_integer(parts[3], "--shape shared"));
  if (parts.size() >= 5)
    shape.expert_size_bytes =
        static_cast<std::uint64_t>(to_integer(parts[4], "--shape expert_bytes"));
  return shape;
}

void write_text(const std::string& path, const std::string& content) {
  if (path == "-") {
    std::cout << content;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open output file: " + path);
  out << content;
  if (!out) throw Error(ErrorCode::IoError, "failed writing output file: " + path);
}

RunConfig load_config_or_default(const std::string& config_flag) {
  std::string path = config_flag;
  if (path.empty()) {
    if (auto env = config_path_from_env()) path = *env;
  }
  if (path.empty()) return RunConfig{};
  return load_run_config(path);
}

Trace load_or_generate_trace(const std::string& trace_path, const RunConfig& cfg) {
  if (!trace_path.empty()) return parse_trace_file(trace_path);
  if (cfg.generator) {
    const GeneratorSpec& g = *cfg.generator;
    return generate_synthetic_trace(g.shape, g.tokens, g.hard_rate, g.soft_rate,
                                    g.mismatch_rate, g.accept_rate, g.skew, g.seed);
  }
  throw Error(ErrorCode::InvalidConfig,
              "no trace given: pass --trace or a config with a generator block");
}

void print_report_summary(const SimReport& report) {
  std::uint64_t bytes = 0;
  for (const auto& c : report.cycles) bytes += c.bytes_transferred;
  std::ostringstream out;
  out.precision(9);
  out << "tokens: " << report.total_tokens << '\n'
      << "cycles: " << report.cycles.size() << '\n'
      << "total_time_s: " << report.total_time << '\n'
      << "tpot_s: " << report.tpot << '\n'
      << "ttft_s: " << report.ttft << '\n'
      << "mean_accepted: " << report.mean_accepted << '\n'
      << "mean_coverage: " << report.mean_coverage << '\n'
      << "mean_step_coverage: " << report.mean_step_coverage << '\n'
      << "stall_s: " << report.stall_time << '\n'
      << "new_experts: " << report.total_new_experts << '\n'
      << "bytes: " << bytes << '\n';
  std::cout << out.str();
}

void add_gen_trace(CLI::App& app) {
  auto* sub = app.add_subcommand("gen-trace", "Generate a synthetic routing trace");
  auto shape = std::make_shared<std::string>();
  auto tokens = std::make_shared<int>(1000);
  auto fidelity = std::make_shared<std::string>("0.441,0.468,0.091");
  auto accept = std::make_shared<double>(0.8);
  auto skew = std::make_shared<double>(1.0);
  auto seed = std::make_shared<std::uint64_t>(0);
  auto out = std::make_shared<std::string>();
  sub->add_option("--shape", *shape, "Model shape as L,N,top_k[,shared[,expert_bytes]]")
      ->required();
  sub->add_option("--tokens", *tokens, "Number of tokens to generate");
  sub->add_option("--fidelity", *fidelity,
                  "Draft prediction mix as hard,soft,mismatch rates (must sum to 1)");
  sub->add_option("--accept-rate", *accept, "Per-token draft acceptance probability");
  sub->add_option("--skew", *skew, "Expert popularity skew exponent (0 = uniform)");
  sub->add_option("--seed", *seed, "Generator seed");
  sub->add_option("--out", *out, "Output path (\"-\" for stdout)")->required();
  sub->callback([=]() {
    const auto parts = split(*fidelity, ',');
    if (parts.size() != 3)
      throw CLI::ValidationError("--fidelity: expected hard,soft,mismatch");
    const double hard = to_double(parts[0], "--fidelity hard");
    const double soft = to_double(parts[1], "--fidelity soft");
    const double mismatch = to_double(parts[2], "--fidelity mismatch");
    const Trace trace = generate_synthetic_trace(parse_shape_flag(*shape), *tokens, hard, soft,
                                                 mismatch, *accept, *skew, *seed);
    if (*out == "-") {
      write_trace(trace, std::cout);
    } else {
      std::ofstream file(*out, std::ios::binary);
      if (!file) throw Error(ErrorCode::IoError, "cannot open output file: " + *out);
      write_trace(trace, file);
      if (!file) throw Error(ErrorCode::IoError, "failed writing output file: " + *out);
      std::cout << "wrote " << trace.tokens.size() << " tokens -> " << *out << '\n';
    }
  });
}

void add_analyze(CLI::App& app) {
  auto* sub = app.add_subcommand("analyze", "Summarize a routing trace");
  auto trace_path = std::make_shared<std::string>();
  auto csv = std::make_shared<std::string>();
  sub->add_option("--trace", *trace_path, "Trace file (JSONL)")->required();
  sub->add_option("--csv", *csv, "Write per-layer entropy CSV to this path");
  sub->callback([=]() {
    const Trace trace = parse_trace_file(*trace_path);
    const int L = trace.shape.num_moe_layers;
    std::vector<double> entropy(static_cast<std::size_t>(L));
    double mean = 0.0, lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (int l = 0; l < L; ++l) {
      entropy[static_cast<std::size_t>(l)] = layer_entropy(trace, l);
      mean += entropy[static_cast<std::size_t>(l)];
      lo = std::min(lo, entropy[static_cast<std::size_t>(l)]);
      hi = std::max(hi, entropy[static_cast<std::size_t>(l)]);
    }
    mean /= static_cast<double>(L);
    const FidelityStats by_cell = classify_fidelity(trace, FidelityGranularity::TokenLayer);
    const FidelityStats by_token = classify_fidelity(trace, FidelityGranularity::Token);
    std::uint64_t accepted = 0;
    for (const auto& tok : trace.tokens) accepted += tok.draft_accepted ? 1 : 0;
    std::ostringstream out;
    out.precision(6);
    out << "tokens: " << trace.tokens.size() << '\n'
        << "shape: L=" << L << " N=" << trace.shape.experts_per_layer
        << " top_k=" << trace.shape.top_k << " shared=" << trace.shape.shared_experts
        << " expert_bytes=" << trace.shape.expert_size_bytes << '\n'
        << "accept_rate: "
        << static_cast<double>(accepted) / static_cast<double>(trace.tokens.size()) << '\n'
        << "fidelity(token-layer): hard=" << by_cell.hard_rate << " soft=" << by_cell.soft_rate
        << " mismatch=" << by_cell.mismatch_rate << '\n'
        << "fidelity(token): hard=" << by_token.hard_rate << " soft=" << by_token.soft_rate
        << " mismatch=" << by_token.mismatch_rate << '\n'
        << "entropy_bits: mean=" << mean << " min=" << lo << " max=" << hi << '\n';
    std::cout << out.str();
    if (!csv->empty()) {
      std::ostringstream table;
      table.precision(12);
      table << "layer,entropy_bits\n";
      for (int l = 0; l < L; ++l)
        table << l << ',' << entropy[static_cast<std::size_t>(l)] << '\n';
      write_text(*csv, table.str());
    }
  });
}

struct SimFlags {
  std::string trace_path;
  std::string config_path;
  std::string k;
  std::string policy;
  long long capacity = -1;
  std::string capacity_mode;
};

void apply_overrides(RunConfig& cfg, const SimFlags& flags) {
  if (!flags.k.empty()) {
    if (flags.k == "governor") {
      cfg.sim.use_governor = true;
    } else {
      cfg.sim.use_governor = false;
      cfg.sim.fixed_k = static_cast<int>(to_integer(flags.k, "--k"));
    }
  }
  if (!flags.policy.empty()) cfg.sim.policy = parse_policy(flags.policy);
  if (flags.capacity >= 0) cfg.sim.cache_capacity = static_cast<std::size_t>(flags.capacity);
  if (!flags.capacity_mode.empty()) {
    if (flags.capacity_mode == "per_layer")
      cfg.sim.capacity_mode = CapacityMode::PerLayer;
    else if (flags.capacity_mode == "global")
      cfg.sim.capacity_mode = CapacityMode::Global;
    else
      throw CLI::ValidationError("--capacity-mode: expected per_layer or global");
  }
}

void add_sim_flags(CLI::App* sub, const std::shared_ptr<SimFlags>& flags) {
  sub->add_option("--trace", flags->trace_path, "Trace file (JSONL)");
  sub->add_option("--config", flags->config_path,
                  "Run config JSON (default: $MOESPEQ_CONFIG if set)");
  sub->add_option("--k", flags->k, "Draft length: an integer or \"governor\"");
  sub->add_option("--policy", flags->policy,
                  "Cache policy: lru, lookahead, sp-sooner, sp-later, speculative");
  sub->add_option("--capacity", flags->capacity, "Cached experts per layer (or total)");
  sub->add_option("--capacity-mode", flags->capacity_mode, "per_layer or global");
}

void add_simulate(CLI::App& app) {
  auto* sub = app.add_subcommand("simulate", "Replay a trace through the cycle simulator");
  auto flags = std::make_shared<SimFlags>();
  auto out = std::make_shared<std::string>();
  auto out_csv = std::make_shared<std::string>();
  auto timeline = std::make_shared<std::string>();
  auto dump_plans = std::make_shared<bool>(false);
  add_sim_flags(sub, flags);
  sub->add_option("--out", *out, "Write the full JSON report here");
  sub->add_option("--out-csv", *out_csv, "Write per-cycle CSV here");
  sub->add_option("--timeline", *timeline, "Write two-lane timeline CSV here");
  sub->add_flag("--dump-plans", *dump_plans, "Embed prefetch/execution plans in the report");
  sub->callback([=]() {
    RunConfig cfg = load_config_or_default(flags->config_path);
    apply_overrides(cfg, *flags);
    if (*dump_plans) cfg.sim.collect_plans = true;
    const Trace trace = load_or_generate_trace(flags->trace_path, cfg);
    const SimReport report = run_simulation(trace, cfg.sim);
    print_report_summary(report);
    if (!out->empty()) write_text(*out, report.to_json_string() + "\n");
    if (!out_csv->empty()) write_text(*out_csv, report.cycles_csv());
    if (!timeline->empty()) write_text(*timeline, report.timeline_csv());
  });
}

void add_compare(CLI::App& app) {
  auto* sub = app.add_subcommand("compare", "Run a policy/capacity grid and tabulate results");
  auto flags = std::make_shared<SimFlags>();
  auto policies = std::make_shared<std::string>("lru,lookahead,sp-sooner,sp-later,speculative");
  auto capacities = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>("-");
  add_sim_flags(sub, flags);
  sub->add_option("--policies", *policies, "Comma-separated policy names");
  sub->add_option("--capacities", *capacities, "Comma-separated cache capacities");
  sub->add_option("--out", *out, "Output CSV path (\"-\" for stdout)");
  sub->callback([=]() {
    RunConfig cfg = load_config_or_default(flags->config_path);
    apply_overrides(cfg, *flags);
    const Trace trace = load_or_generate_trace(flags->trace_path, cfg);
    std::vector<Policy> policy_list;
    for (const auto& name : split(*policies, ','))
      if (!name.empty()) policy_list.push_back(parse_policy(name));
    if (policy_list.empty()) throw CLI::ValidationError("--policies: list is empty");
    std::vector<std::size_t> capacity_list;
    if (capacities->empty()) {
      capacity_list.push_back(cfg.sim.cache_capacity);
    } else {
      for (const auto& item : split(*capacities, ','))
        if (!item.empty())
          capacity_list.push_back(
              static_cast<std::size_t>(to_integer(item, "--capacities")));
    }
    if (capacity_list.empty()) throw CLI::ValidationError("--capacities: list is empty");
    const auto rows = compare_policies(trace, cfg.sim, policy_list, capacity_list);
    write_text(*out, policy_table_csv(rows));
  });
}

void add_roofline(CLI::App& app) {
  auto* sub = app.add_subcommand("roofline",
                                 "Sweep draft length against the amortization roofline");
  auto profile_path = std::make_shared<std::string>();
  auto k_range = std::make_shared<std::string>("1..16");
  auto accept = std::make_shared<double>(0.8);
  auto new_per_token = std::make_shared<double>(0.0);
  auto k_slo = std::make_shared<int>(0);
  auto out = std::make_shared<std::string>();
  sub->add_option("--profile", *profile_path, "Hardware profile JSON");
  sub->add_option("--k-range", *k_range, "Draft lengths to sweep, as a..b");
  sub->add_option("--accept", *accept, "Constant per-position acceptance probability");
  sub->add_option("--new-per-token", *new_per_token,
                  "Expected new experts fetched per drafted token");
  sub->add_option("--k-slo", *k_slo, "Upper bound on k from latency SLO (0 = none)");
  sub->add_option("--out", *out, "Write the sweep CSV here (\"-\" for stdout)");
  sub->callback([=]() {
    HardwareProfile profile;
    if (!profile_path->empty()) {
      std::ifstream in(*profile_path);
      if (!in) throw Error(ErrorCode::IoError, "cannot open profile file: " + *profile_path);
      nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
      if (j.is_discarded())
        throw Error(ErrorCode::InvalidConfig,
                    "profile file is not valid JSON: " + *profile_path);
      profile = HardwareProfile::from_json(j);
    }
    const auto parts = split(*k_range, '.');
    if (parts.size() != 3 || !parts[1].empty())
      throw CLI::ValidationError("--k-range: expected a..b");
    const int k_lo = static_cast<int>(to_integer(parts[0], "--k-range low"));
    const int k_hi = static_cast<int>(to_integer(parts[2], "--k-range high"));
    const AcceptanceModel acceptance = AcceptanceModel::constant(*accept, std::max(k_hi, 1));
    const double g = *new_per_token;
    const NewExpertEstimator estimator = [g](int k) {
      return static_cast<int>(std::llround(g * static_cast<double>(k)));
    };
    GovernorConfig gov;
    gov.k_min = k_lo;
    gov.k_max = k_hi;
    gov.k_slo = *k_slo > 0 ? *k_slo : k_hi;
    const int best = select_k(profile, acceptance, gov, estimator);
    std::ostringstream summary;
    summary.precision(9);
    summary << "k*: " << best << '\n'
            << "throughput_tok_per_s: "
            << throughput(profile, acceptance, best, estimator(best)) << '\n';
    std::cout << summary.str();
    if (!out->empty()) {
      const auto points = roofline(profile, acceptance, k_lo, k_hi, estimator);
      write_text(*out, roofline_csv(points));
    }
  });
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Trace-driven simulator for speculative MoE decoding with expert offloading"};
  app.require_subcommand(1);
  add_gen_trace(app);
  add_analyze(app);
  add_simulate(app);
  add_compare(app);
  add_roofline(app);

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("moespeq");
  for (const auto& arg : args) argv.push_back(arg.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace moespeq
