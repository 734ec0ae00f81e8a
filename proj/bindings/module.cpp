// Python bindings for the moespeq library: trace generation and analysis,
// the analytic performance model, the prefetch/eviction scheduling
// primitives, and the trace-driven simulator.

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "moespeq/cli.hpp"
#include "moespeq/errors.hpp"
#include "moespeq/perfmodel.hpp"
#include "moespeq/run_config.hpp"
#include "moespeq/scheduler.hpp"
#include "moespeq/sim.hpp"
#include "moespeq/trace.hpp"

namespace py = pybind11;
using namespace moespeq;

PYBIND11_MODULE(_moespeq, m) {
  m.doc() =
      "Trace-driven simulator and scheduling library for speculative "
      "mixture-of-experts decoding with expert offloading";

  py::register_exception<Error>(m, "Error");

  // --- trace ---------------------------------------------------------------

  py::class_<ExpertKey>(m, "ExpertKey")
      .def(py::init<>())
      .def(py::init([](int layer, int expert) {
             return ExpertKey{layer, expert};
           }),
           py::arg("layer"), py::arg("expert"))
      .def_readwrite("layer", &ExpertKey::layer)
      .def_readwrite("expert", &ExpertKey::expert)
      .def("__eq__", [](const ExpertKey& a, const ExpertKey& b) { return a == b; })
      .def("__lt__", [](const ExpertKey& a, const ExpertKey& b) { return a < b; })
      .def("__hash__",
           [](const ExpertKey& k) {
             return py::hash(py::make_tuple(k.layer, k.expert));
           })
      .def("__repr__", [](const ExpertKey& k) {
        return "ExpertKey(layer=" + std::to_string(k.layer) +
               ", expert=" + std::to_string(k.expert) + ")";
      });

  py::class_<ModelShape>(m, "ModelShape")
      .def(py::init<>())
      .def(py::init([](int layers, int experts, int top_k, int shared,
                       std::uint64_t expert_bytes) {
             return ModelShape{layers, experts, top_k, shared, expert_bytes};
           }),
           py::arg("num_moe_layers"), py::arg("experts_per_layer"), py::arg("top_k"),
           py::arg("shared_experts") = 0, py::arg("expert_size_bytes") = 25'000'000)
      .def_readwrite("num_moe_layers", &ModelShape::num_moe_layers)
      .def_readwrite("experts_per_layer", &ModelShape::experts_per_layer)
      .def_readwrite("top_k", &ModelShape::top_k)
      .def_readwrite("shared_experts", &ModelShape::shared_experts)
      .def_readwrite("expert_size_bytes", &ModelShape::expert_size_bytes)
      .def("validate", &ModelShape::validate);

  py::class_<TokenRecord>(m, "TokenRecord")
      .def(py::init<>())
      .def_readwrite("position", &TokenRecord::position)
      .def_readwrite("target_sets", &TokenRecord::target_sets)
      .def_readwrite("draft_sets", &TokenRecord::draft_sets)
      .def_readwrite("draft_gates", &TokenRecord::draft_gates)
      .def_readwrite("draft_accepted", &TokenRecord::draft_accepted);

  py::class_<Trace>(m, "Trace")
      .def(py::init<>())
      .def_readwrite("shape", &Trace::shape)
      .def_readwrite("tokens", &Trace::tokens)
      .def_readwrite("metadata", &Trace::metadata)
      .def("validate", &Trace::validate)
      .def("__len__", [](const Trace& t) { return t.tokens.size(); });

  py::enum_<FidelityGranularity>(m, "FidelityGranularity")
      .value("TokenLayer", FidelityGranularity::TokenLayer)
      .value("Token", FidelityGranularity::Token);

  py::class_<FidelityStats>(m, "FidelityStats")
      .def_readonly("hard_rate", &FidelityStats::hard_rate)
      .def_readonly("soft_rate", &FidelityStats::soft_rate)
      .def_readonly("mismatch_rate", &FidelityStats::mismatch_rate)
      .def_readonly("hard_count", &FidelityStats::hard_count)
      .def_readonly("soft_count", &FidelityStats::soft_count)
      .def_readonly("mismatch_count", &FidelityStats::mismatch_count)
      .def_readonly("total", &FidelityStats::total);

  m.def(
      "parse_trace",
      [](const std::string& text) {
        std::istringstream in(text);
        return parse_trace(in);
      },
      py::arg("text"), "Parses a JSONL trace from a string.");
  m.def("parse_trace_file", &parse_trace_file, py::arg("path"));
  m.def(
      "write_trace",
      [](const Trace& trace) { return write_trace(trace); }, py::arg("trace"),
      "Serializes a trace to its JSONL wire format.");
  m.def("generate_synthetic_trace", &generate_synthetic_trace, py::arg("shape"),
        py::arg("num_tokens"), py::arg("hard_rate") = 0.441, py::arg("soft_rate") = 0.468,
        py::arg("mismatch_rate") = 0.091, py::arg("accept_rate") = 0.8,
        py::arg("skew") = 1.0, py::arg("seed") = 0);
  m.def("layer_entropy", &layer_entropy, py::arg("trace"), py::arg("layer"));
  m.def("classify_fidelity", &classify_fidelity, py::arg("trace"),
        py::arg("granularity") = FidelityGranularity::TokenLayer);

  // --- performance model -----------------------------------------------------

  py::class_<HardwareProfile>(m, "HardwareProfile")
      .def(py::init<>())
      .def_readwrite("pcie_bandwidth", &HardwareProfile::pcie_bandwidth)
      .def_readwrite("pcie_init_latency", &HardwareProfile::pcie_init_latency)
      .def_readwrite("pcie_overhead", &HardwareProfile::pcie_overhead)
      .def_readwrite("expert_size_bytes", &HardwareProfile::expert_size_bytes)
      .def_readwrite("draft_base", &HardwareProfile::draft_base)
      .def_readwrite("draft_per_token", &HardwareProfile::draft_per_token)
      .def_readwrite("verify_samples", &HardwareProfile::verify_samples)
      .def_readwrite("token_bytes", &HardwareProfile::token_bytes)
      .def("validate", &HardwareProfile::validate)
      .def("to_json_string",
           [](const HardwareProfile& p) { return p.to_json().dump(2); })
      .def_static("from_json_string", [](const std::string& text) {
        return HardwareProfile::from_json(nlohmann::json::parse(text));
      });

  py::class_<AcceptanceModel>(m, "AcceptanceModel")
      .def(py::init<>())
      .def_readwrite("p", &AcceptanceModel::p)
      .def_readwrite("ema_alpha", &AcceptanceModel::ema_alpha)
      .def_static("constant", &AcceptanceModel::constant, py::arg("prob"),
                  py::arg("k_max"));

  py::class_<GovernorConfig>(m, "GovernorConfig")
      .def(py::init<>())
      .def_readwrite("k_min", &GovernorConfig::k_min)
      .def_readwrite("k_max", &GovernorConfig::k_max)
      .def_readwrite("k_slo", &GovernorConfig::k_slo)
      .def_readwrite("ttft_budget", &GovernorConfig::ttft_budget);

  py::class_<OperatingPoint>(m, "OperatingPoint")
      .def_readonly("k", &OperatingPoint::k)
      .def_readonly("intensity", &OperatingPoint::intensity)
      .def_readonly("throughput", &OperatingPoint::throughput)
      .def_readonly("compute_roof", &OperatingPoint::compute_roof)
      .def_readonly("io_roof", &OperatingPoint::io_roof);

  py::class_<FootprintComponent>(m, "FootprintComponent")
      .def(py::init<>())
      .def(py::init([](std::string name, double draft, double target, double shared) {
             return FootprintComponent{std::move(name), draft, target, shared};
           }),
           py::arg("name"), py::arg("draft_gb"), py::arg("target_gb"),
           py::arg("shared_gb") = 0.0)
      .def_readwrite("name", &FootprintComponent::name)
      .def_readwrite("draft_gb", &FootprintComponent::draft_gb)
      .def_readwrite("target_gb", &FootprintComponent::target_gb)
      .def_readwrite("shared_gb", &FootprintComponent::shared_gb);

  py::class_<FootprintTotals>(m, "FootprintTotals")
      .def_readonly("draft_gb", &FootprintTotals::draft_gb)
      .def_readonly("target_gb", &FootprintTotals::target_gb)
      .def_readonly("shared_gb", &FootprintTotals::shared_gb)
      .def_readonly("total_gb", &FootprintTotals::total_gb);

  m.def("k_accept", &k_accept, py::arg("model"), py::arg("k"));
  m.def("t_draft", &t_draft, py::arg("profile"), py::arg("k"));
  m.def("t_pcie_new", &t_pcie_new, py::arg("profile"), py::arg("num_new_experts"));
  m.def("t_verify", &t_verify, py::arg("profile"), py::arg("window"));
  m.def("t_cycle", &t_cycle, py::arg("profile"), py::arg("k"),
        py::arg("num_new_experts"));
  m.def("throughput", &throughput, py::arg("profile"), py::arg("model"), py::arg("k"),
        py::arg("num_new_experts"));
  m.def("amortization_intensity", &amortization_intensity, py::arg("profile"),
        py::arg("model"), py::arg("k"), py::arg("sync_io_bytes"));
  m.def("roofline", &roofline, py::arg("profile"), py::arg("model"), py::arg("k_lo"),
        py::arg("k_hi"), py::arg("new_experts"));
  m.def("select_k", &select_k, py::arg("profile"), py::arg("model"),
        py::arg("governor"), py::arg("new_experts"));
  m.def("k_slo_from_ttft", &k_slo_from_ttft, py::arg("profile"), py::arg("ttft_budget"),
        py::arg("new_experts"), py::arg("k_min"), py::arg("k_max"));
  m.def("update_acceptance", &update_acceptance, py::arg("model"), py::arg("outcomes"));
  m.def(
      "memory_footprint",
      [](const std::vector<FootprintComponent>& components) {
        return memory_footprint(components);
      },
      py::arg("components"));
  m.def(
      "roofline_csv",
      [](const std::vector<OperatingPoint>& points) { return roofline_csv(points); },
      py::arg("points"));

  // --- scheduler -------------------------------------------------------------

  py::enum_<CapacityMode>(m, "CapacityMode")
      .value("PerLayer", CapacityMode::PerLayer)
      .value("Global", CapacityMode::Global);

  py::enum_<Policy>(m, "Policy")
      .value("Lru", Policy::Lru)
      .value("LookaheadAware", Policy::LookaheadAware)
      .value("SinglePrefetchSooner", Policy::SinglePrefetchSooner)
      .value("SinglePrefetchLater", Policy::SinglePrefetchLater)
      .value("Speculative", Policy::Speculative);

  m.def("parse_policy", &parse_policy, py::arg("name"));
  m.def(
      "policy_name", [](Policy p) { return to_string(p); }, py::arg("policy"));

  py::class_<ElbEntry>(m, "ElbEntry")
      .def(py::init<>())
      .def(py::init([](int expert_id, double confidence) {
             return ElbEntry{expert_id, confidence};
           }),
           py::arg("expert_id"), py::arg("confidence") = 1.0)
      .def_readwrite("expert_id", &ElbEntry::expert_id)
      .def_readwrite("confidence", &ElbEntry::confidence);

  py::class_<ExpertLookaheadBuffer>(m, "ExpertLookaheadBuffer")
      .def(py::init<int, int>(), py::arg("draft_len"), py::arg("num_layers"))
      .def("push_token", &ExpertLookaheadBuffer::push_token, py::arg("per_layer"))
      .def_property_readonly("draft_len", &ExpertLookaheadBuffer::draft_len)
      .def_property_readonly("num_layers", &ExpertLookaheadBuffer::num_layers)
      .def_property_readonly("filled", &ExpertLookaheadBuffer::filled)
      .def("cell", &ExpertLookaheadBuffer::cell, py::arg("token"), py::arg("layer"))
      .def("next_use", &ExpertLookaheadBuffer::next_use, py::arg("key"),
           py::arg("now"));

  m.def(
      "build_elb",
      [](const std::vector<TokenRecord>& window, int num_layers) {
        return build_elb(std::span<const TokenRecord>(window.data(), window.size()),
                         num_layers);
      },
      py::arg("window"), py::arg("num_layers"));
  m.def("predicted_union", &predicted_union, py::arg("elb"), py::arg("begin_token"),
        py::arg("end_token"));

  py::class_<CacheState>(m, "CacheState")
      .def(py::init<CapacityMode, std::size_t>(), py::arg("mode"), py::arg("capacity"))
      .def(py::init<CapacityMode, std::size_t, std::vector<std::size_t>>(),
           py::arg("mode"), py::arg("capacity"), py::arg("per_layer_caps"))
      .def_property_readonly("mode", &CacheState::mode)
      .def_property_readonly("capacity", &CacheState::capacity)
      .def("capacity_for", &CacheState::capacity_for, py::arg("layer"))
      .def("contains", &CacheState::contains, py::arg("key"))
      .def("touch", &CacheState::touch, py::arg("key"))
      .def("insert", &CacheState::insert, py::arg("key"))
      .def("erase", &CacheState::erase, py::arg("key"))
      .def("needs_eviction", &CacheState::needs_eviction, py::arg("layer"))
      .def("lru_victim", &CacheState::lru_victim, py::arg("layer") = -1)
      .def("__len__", &CacheState::size)
      .def("layer_size", &CacheState::layer_size, py::arg("layer"))
      .def("resident", &CacheState::resident);

  py::class_<PrefetchItem>(m, "PrefetchItem")
      .def_readonly("issue_after_token", &PrefetchItem::issue_after_token)
      .def_readonly("key", &PrefetchItem::key)
      .def_readonly("phase", &PrefetchItem::phase);

  py::class_<PrefetchPlan>(m, "PrefetchPlan")
      .def_readonly("items", &PrefetchPlan::items)
      .def("to_json_string", [](const PrefetchPlan& p) { return p.to_json().dump(2); });

  m.def("plan_prefetch", &plan_prefetch, py::arg("elb"), py::arg("cache"),
        py::arg("bandwidth_budget"), py::arg("f1") = 0.25, py::arg("f2") = 0.75);
  m.def("select_victim_lookahead", &select_victim_lookahead, py::arg("cache"),
        py::arg("elb"), py::arg("now"), py::arg("layer_filter") = -1);

  py::class_<StepResult>(m, "StepResult")
      .def_readonly("hit", &StepResult::hit)
      .def_readonly("evicted", &StepResult::evicted);

  m.def(
      "policy_step",
      [](Policy policy, CacheState& cache, ExpertKey request,
         const ExpertLookaheadBuffer* elb, int now) {
        if (elb == nullptr) return policy_step(policy, cache, request);
        PolicyContext ctx{elb, now};
        return policy_step(policy, cache, request, &ctx);
      },
      py::arg("policy"), py::arg("cache"), py::arg("request"),
      py::arg("elb") = nullptr, py::arg("now") = 0);
  m.def("step_coverage", &step_coverage, py::arg("cache"), py::arg("required"));

  py::class_<ExpertGroup>(m, "ExpertGroup")
      .def_readonly("expert", &ExpertGroup::expert)
      .def_readonly("tokens", &ExpertGroup::tokens);

  py::class_<ExecutionPlan>(m, "ExecutionPlan")
      .def_readonly("layers", &ExecutionPlan::layers)
      .def("to_json_string", [](const ExecutionPlan& p) { return p.to_json().dump(2); });

  m.def("reorder_verification", &reorder_verification, py::arg("window_tokens"),
        py::arg("routing"));

  // --- simulator ---------------------------------------------------------------

  py::class_<SimConfig>(m, "SimConfig")
      .def(py::init<>())
      .def_readwrite("policy", &SimConfig::policy)
      .def_readwrite("capacity_mode", &SimConfig::capacity_mode)
      .def_readwrite("cache_capacity", &SimConfig::cache_capacity)
      .def_readwrite("entropy_weighted_capacity", &SimConfig::entropy_weighted_capacity)
      .def_readwrite("fixed_k", &SimConfig::fixed_k)
      .def_readwrite("use_governor", &SimConfig::use_governor)
      .def_readwrite("governor", &SimConfig::governor)
      .def_readwrite("profile", &SimConfig::profile)
      .def_readwrite("phase_f1", &SimConfig::phase_f1)
      .def_readwrite("phase_f2", &SimConfig::phase_f2)
      .def_readwrite("prefetch_budget", &SimConfig::prefetch_budget)
      .def_readwrite("rollback_duration", &SimConfig::rollback_duration)
      .def_readwrite("ema_alpha", &SimConfig::ema_alpha)
      .def_readwrite("initial_accept", &SimConfig::initial_accept)
      .def_readwrite("seed", &SimConfig::seed)
      .def_readwrite("collect_plans", &SimConfig::collect_plans)
      .def("validate", &SimConfig::validate, py::arg("shape"));

  py::class_<Segment>(m, "Segment")
      .def_readonly("label", &Segment::label)
      .def_readonly("start", &Segment::start)
      .def_readonly("duration", &Segment::duration)
      .def_readonly("lane", &Segment::lane);

  py::class_<CycleRecord>(m, "CycleRecord")
      .def_readonly("cycle_index", &CycleRecord::cycle_index)
      .def_readonly("k_used", &CycleRecord::k_used)
      .def_readonly("accepted_count", &CycleRecord::accepted_count)
      .def_readonly("bonus_token", &CycleRecord::bonus_token)
      .def_readonly("start_time", &CycleRecord::start_time)
      .def_readonly("span", &CycleRecord::span)
      .def_readonly("segments", &CycleRecord::segments)
      .def_readonly("per_layer_coverage", &CycleRecord::per_layer_coverage)
      .def_readonly("step_coverage_mean", &CycleRecord::step_coverage_mean)
      .def_readonly("step_count", &CycleRecord::step_count)
      .def_readonly("new_experts_fetched", &CycleRecord::new_experts_fetched)
      .def_readonly("bytes_transferred", &CycleRecord::bytes_transferred)
      .def_readonly("io_wait", &CycleRecord::io_wait)
      .def_readonly("sync_fetch_time", &CycleRecord::sync_fetch_time)
      .def_readonly("sync_fetch_count", &CycleRecord::sync_fetch_count);

  py::class_<SimReport>(m, "SimReport")
      .def_readonly("total_tokens", &SimReport::total_tokens)
      .def_readonly("total_time", &SimReport::total_time)
      .def_readonly("tpot", &SimReport::tpot)
      .def_readonly("ttft", &SimReport::ttft)
      .def_readonly("mean_coverage", &SimReport::mean_coverage)
      .def_readonly("mean_step_coverage", &SimReport::mean_step_coverage)
      .def_readonly("mean_accepted", &SimReport::mean_accepted)
      .def_readonly("stall_time", &SimReport::stall_time)
      .def_readonly("total_new_experts", &SimReport::total_new_experts)
      .def_readonly("cycles", &SimReport::cycles)
      .def("to_json_string", &SimReport::to_json_string)
      .def("cycles_csv", &SimReport::cycles_csv)
      .def("timeline_csv", &SimReport::timeline_csv);

  m.def("run_simulation", &run_simulation, py::arg("trace"), py::arg("config"));

  py::class_<PolicyRow>(m, "PolicyRow")
      .def_readonly("policy", &PolicyRow::policy)
      .def_readonly("capacity", &PolicyRow::capacity)
      .def_readonly("coverage", &PolicyRow::coverage)
      .def_readonly("tpot", &PolicyRow::tpot);

  m.def(
      "compare_policies",
      [](const Trace& trace, const SimConfig& base, const std::vector<Policy>& policies,
         const std::vector<std::size_t>& capacities) {
        return compare_policies(trace, base, policies, capacities);
      },
      py::arg("trace"), py::arg("base"), py::arg("policies"), py::arg("capacities"));
  m.def(
      "policy_table_csv",
      [](const std::vector<PolicyRow>& rows) { return policy_table_csv(rows); },
      py::arg("rows"));

  py::class_<SweepRow>(m, "SweepRow")
      .def_readonly("k", &SweepRow::k)
      .def_readonly("tpot", &SweepRow::tpot)
      .def_readonly("mean_accepted", &SweepRow::mean_accepted)
      .def_readonly("coverage", &SweepRow::coverage)
      .def_readonly("first_cycle_latency", &SweepRow::first_cycle_latency);

  m.def(
      "sweep_k",
      [](const Trace& trace, const SimConfig& base, const std::vector<int>& ks) {
        return sweep_k(trace, base, ks);
      },
      py::arg("trace"), py::arg("base"), py::arg("ks"));

  // --- run configs and the CLI entry point --------------------------------------

  py::class_<GeneratorSpec>(m, "GeneratorSpec")
      .def(py::init<>())
      .def_readwrite("shape", &GeneratorSpec::shape)
      .def_readwrite("tokens", &GeneratorSpec::tokens)
      .def_readwrite("hard_rate", &GeneratorSpec::hard_rate)
      .def_readwrite("soft_rate", &GeneratorSpec::soft_rate)
      .def_readwrite("mismatch_rate", &GeneratorSpec::mismatch_rate)
      .def_readwrite("accept_rate", &GeneratorSpec::accept_rate)
      .def_readwrite("skew", &GeneratorSpec::skew)
      .def_readwrite("seed", &GeneratorSpec::seed);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("sim", &RunConfig::sim)
      .def_readwrite("generator", &RunConfig::generator);

  m.def(
      "parse_run_config",
      [](const std::string& text, const std::string& base_dir) {
        return parse_run_config(nlohmann::json::parse(text), base_dir);
      },
      py::arg("text"), py::arg("base_dir") = ".");
  m.def(
      "load_run_config",
      [](const std::string& path) { return load_run_config(path); }, py::arg("path"));

  m.def("run_cli", &run_cli, py::arg("args"),
        "Runs the command-line tool in-process; returns its exit code.");
}
