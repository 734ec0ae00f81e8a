"""End-to-end smoke tests for the Python bindings and the CLI binary."""

import json
import os
import subprocess

import pytest

import moespeq


def small_trace(tokens=60, seed=3):
    shape = moespeq.ModelShape(
        num_moe_layers=2, experts_per_layer=8, top_k=2, expert_size_bytes=1_000_000
    )
    return moespeq.generate_synthetic_trace(
        shape, tokens, accept_rate=0.8, skew=1.0, seed=seed
    )


def test_trace_roundtrip_and_fidelity():
    trace = small_trace()
    assert len(trace) == 60
    text = moespeq.write_trace(trace)
    again = moespeq.parse_trace(text)
    assert len(again) == 60
    assert again.shape.experts_per_layer == 8
    stats = moespeq.classify_fidelity(trace)
    assert stats.hard_count + stats.soft_count + stats.mismatch_count == stats.total
    assert stats.hard_rate + stats.soft_rate + stats.mismatch_rate == pytest.approx(1.0)
    assert moespeq.layer_entropy(trace, 0) > 0.0


def test_simulation_conserves_tokens():
    trace = small_trace()
    cfg = moespeq.SimConfig()
    cfg.cache_capacity = 4
    cfg.fixed_k = 4
    report = moespeq.run_simulation(trace, cfg)
    assert report.total_tokens == 60
    consumed = sum(c.accepted_count + c.bonus_token for c in report.cycles)
    assert consumed == 60
    parsed = json.loads(report.to_json_string())
    assert parsed["total_tokens"] == 60
    assert report.cycles_csv().splitlines()[0].startswith("cycle,")


def test_performance_model_basics():
    model = moespeq.AcceptanceModel.constant(0.5, 8)
    assert moespeq.k_accept(model, 2) == pytest.approx(0.75)
    profile = moespeq.HardwareProfile()
    governor = moespeq.GovernorConfig()
    governor.k_max = 8
    governor.k_slo = 8
    best = moespeq.select_k(profile, model, governor, lambda k: 0)
    assert 1 <= best <= 8
    totals = moespeq.memory_footprint(
        [moespeq.FootprintComponent("weights", 2.0, 3.0, 1.0)]
    )
    assert totals.total_gb == pytest.approx(6.0)
    points = moespeq.roofline(profile, model, 1, 4, lambda k: 1)
    assert all(p.throughput <= min(p.compute_roof, p.io_roof) + 1e-9 for p in points)


def test_scheduler_primitives():
    trace = small_trace()
    window = trace.tokens[:4]
    elb = moespeq.build_elb(window, trace.shape.num_moe_layers)
    assert elb.filled == 4
    cache = moespeq.CacheState(moespeq.CapacityMode.PerLayer, 4)
    plan = moespeq.plan_prefetch(elb, cache, bandwidth_budget=2)
    keys = {(item.key.layer, item.key.expert) for item in plan.items}
    assert len(keys) == len(plan.items)  # no duplicate transfers
    cache.insert(moespeq.ExpertKey(0, 1))
    hit = moespeq.policy_step(moespeq.Policy.Lru, cache, moespeq.ExpertKey(0, 1))
    assert hit.hit and hit.evicted is None
    assert moespeq.parse_policy("lru") == moespeq.Policy.Lru


def test_policy_comparison():
    trace = small_trace()
    base = moespeq.SimConfig()
    base.fixed_k = 4
    rows = moespeq.compare_policies(
        trace, base, [moespeq.Policy.Lru, moespeq.Policy.Speculative], [4]
    )
    assert len(rows) == 2
    assert all(0.0 <= r.coverage <= 1.0 for r in rows)


@pytest.mark.skipif("MOESPEQ_CLI" not in os.environ, reason="CLI path not provided")
def test_cli_end_to_end(tmp_path):
    cli = os.environ["MOESPEQ_CLI"]
    env = dict(os.environ)
    env.pop("MOESPEQ_CONFIG", None)
    trace_path = tmp_path / "trace.jsonl"
    gen = subprocess.run(
        [cli, "gen-trace", "--shape", "2,8,2", "--tokens", "40", "--seed", "7",
         "--out", str(trace_path)],
        capture_output=True, text=True, env=env,
    )
    assert gen.returncode == 0, gen.stderr
    report_path = tmp_path / "report.json"
    sim = subprocess.run(
        [cli, "simulate", "--trace", str(trace_path), "--out", str(report_path)],
        capture_output=True, text=True, env=env,
    )
    assert sim.returncode == 0, sim.stderr
    report = json.loads(report_path.read_text())
    assert report["total_tokens"] == 40
