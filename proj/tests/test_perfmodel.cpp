#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "moespeq/perfmodel.hpp"

using namespace moespeq;

namespace {

// Scales every time constant of a profile by c (bandwidth is bytes/second,
// so dividing it by c scales transfer times up by c).
HardwareProfile scaled(const HardwareProfile& p, double c) {
  HardwareProfile s = p;
  s.pcie_bandwidth = p.pcie_bandwidth / c;
  s.pcie_init_latency = p.pcie_init_latency * c;
  s.pcie_overhead = p.pcie_overhead * c;
  s.draft_base = p.draft_base * c;
  s.draft_per_token = p.draft_per_token * c;
  for (auto& [w, t] : s.verify_samples) t *= c;
  return s;
}

HardwareProfile random_profile(std::mt19937& rng) {
  std::uniform_real_distribution<double> small(1e-4, 5e-2);
  std::uniform_real_distribution<double> bw(1e9, 64e9);
  std::uniform_int_distribution<int> nsamp(2, 5);
  HardwareProfile p;
  p.pcie_bandwidth = bw(rng);
  p.pcie_init_latency = small(rng);
  p.pcie_overhead = small(rng);
  p.expert_size_bytes = 1'000'000 + rng() % 100'000'000;
  p.draft_base = small(rng);
  p.draft_per_token = small(rng);
  p.verify_samples.clear();
  double w = 1.0, t = small(rng);
  const int n = nsamp(rng);
  for (int i = 0; i < n; ++i) {
    p.verify_samples.emplace_back(w, t);
    w += 1.0 + static_cast<double>(rng() % 8);
    t += small(rng);
  }
  return p;
}

AcceptanceModel random_model(std::mt19937& rng, int k_max) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AcceptanceModel m;
  m.p.resize(static_cast<std::size_t>(k_max));
  for (auto& v : m.p) v = u(rng);
  return m;
}

}  // namespace

TEST_CASE("expected accepted tokens: hand values and bounds") {
  AcceptanceModel certain;
  certain.p = {1.0, 1.0, 1.0};
  CHECK(k_accept(certain, 3) == doctest::Approx(3.0).epsilon(1e-15));

  AcceptanceModel halves;
  halves.p = {0.5, 0.5};
  CHECK(k_accept(halves, 2) == doctest::Approx(0.75).epsilon(1e-15));

  AcceptanceModel m = AcceptanceModel::constant(0.9, 16);
  const double closed = 0.9 * (1.0 - std::pow(0.9, 16)) / (1.0 - 0.9);
  CHECK(std::abs(k_accept(m, 16) - closed) <= 1e-12);
}

TEST_CASE("expected accepted tokens grow with k and never exceed k") {
  std::mt19937 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    AcceptanceModel m = random_model(rng, 12);
    double prev = 0.0;
    for (int k = 1; k <= 12; ++k) {
      const double v = k_accept(m, k);
      CHECK(v >= prev - 1e-15);
      CHECK(v <= static_cast<double>(k) + 1e-15);
      prev = v;
    }
  }
}

TEST_CASE("k_accept rejects k beyond the modeled positions") {
  AcceptanceModel m = AcceptanceModel::constant(0.8, 4);
  try {
    k_accept(m, 5);
    FAIL("expected KOutOfRange");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::KOutOfRange);
  }
}

TEST_CASE("draft time is affine in k") {
  HardwareProfile p;  // defaults: base 5 ms, 3 ms per token
  CHECK(t_draft(p, 0) == doctest::Approx(5e-3).epsilon(1e-15));
  CHECK(t_draft(p, 8) == doctest::Approx(29e-3).epsilon(1e-12));
  for (int k = 0; k < 10; ++k)
    CHECK(t_draft(p, k + 1) - t_draft(p, k) == doctest::Approx(p.draft_per_token).epsilon(1e-12));
}

TEST_CASE("synchronous transfer time: zero experts cost nothing") {
  HardwareProfile p;
  CHECK(t_pcie_new(p, 0) == 0.0);
}

TEST_CASE("synchronous transfer time: overhead plus linear payload") {
  HardwareProfile p;  // 25 MB experts, 16 GB/s, 2 ms overhead
  // 2 ms + 10 * 25e6 / 16e9 s = 2 ms + 15.625 ms
  CHECK(t_pcie_new(p, 10) == doctest::Approx(0.017625).epsilon(1e-12));
  // Doubling the count doubles the payload term exactly.
  const double payload1 = t_pcie_new(p, 7) - p.pcie_overhead;
  const double payload2 = t_pcie_new(p, 14) - p.pcie_overhead;
  CHECK(payload2 == doctest::Approx(2.0 * payload1).epsilon(1e-12));
}

TEST_CASE("verify time interpolates between profiled samples") {
  HardwareProfile p;
  p.verify_samples = {{1.0, 10e-3}, {5.0, 20e-3}};
  CHECK(t_verify(p, 1.0) == doctest::Approx(10e-3).epsilon(1e-12));
  CHECK(t_verify(p, 5.0) == doctest::Approx(20e-3).epsilon(1e-12));
  CHECK(t_verify(p, 3.0) == doctest::Approx(15e-3).epsilon(1e-12));
  // Beyond the last sample: linear continuation of the last segment.
  CHECK(t_verify(p, 9.0) == doctest::Approx(30e-3).epsilon(1e-12));
}

TEST_CASE("verify time matches an independent interpolation routine") {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    HardwareProfile p = random_profile(rng);
    std::uniform_real_distribution<double> win(p.verify_samples.front().first,
                                               p.verify_samples.back().first);
    const double w = win(rng);
    // Reference: find the bracketing segment and interpolate by hand.
    double expected = 0.0;
    for (std::size_t i = 0; i + 1 < p.verify_samples.size(); ++i) {
      const auto [w0, t0] = p.verify_samples[i];
      const auto [w1, t1] = p.verify_samples[i + 1];
      if (w >= w0 && w <= w1) {
        expected = t0 + (t1 - t0) * (w - w0) / (w1 - w0);
        break;
      }
    }
    CHECK(t_verify(p, w) == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("verify time needs at least two samples") {
  HardwareProfile p;
  p.verify_samples = {{1.0, 10e-3}};
  try {
    t_verify(p, 2.0);
    FAIL("expected InsufficientSamples");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InsufficientSamples);
  }
}

TEST_CASE("cycle time composes draft, init, transfer, and verify") {
  HardwareProfile p;  // defaults; verify sample at window 9 is 40 ms
  // k=8: draft 29 ms > init 20 ms; 10 new experts cost 17.625 ms; verify 40 ms.
  CHECK(t_cycle(p, 8, 10) == doctest::Approx(0.086625).epsilon(1e-12));
  // Zero new experts drop the transfer term entirely.
  CHECK(t_cycle(p, 8, 0) == doctest::Approx(0.029 + 0.040).epsilon(1e-12));
  // A short draft hides under the init latency (max semantics).
  CHECK(t_cycle(p, 0, 0) ==
        doctest::Approx(p.pcie_init_latency + t_verify(p, 1.0)).epsilon(1e-12));
}

TEST_CASE("throughput is the accepted-token / cycle-time ratio") {
  HardwareProfile p;
  AcceptanceModel m = AcceptanceModel::constant(0.9, 16);
  CHECK(throughput(p, m, 8, 10) ==
        doctest::Approx(k_accept(m, 8) / t_cycle(p, 8, 10)).epsilon(1e-15));

  AcceptanceModel zero = AcceptanceModel::constant(0.0, 16);
  CHECK(throughput(p, zero, 8, 10) == 0.0);
}

TEST_CASE("throughput scales inversely with uniform time scaling") {
  HardwareProfile p;
  AcceptanceModel m = AcceptanceModel::constant(0.7, 16);
  const double base = throughput(p, m, 6, 4);
  CHECK(throughput(scaled(p, 3.0), m, 6, 4) == doctest::Approx(base / 3.0).epsilon(1e-9));
}

TEST_CASE("amortization intensity follows the work-per-sync-byte ratio") {
  HardwareProfile p;
  p.token_bytes = 1.0;
  AcceptanceModel m;
  m.p = {1.0, 1.0};  // k_accept(2) = 2
  CHECK(amortization_intensity(p, m, 2, 50e6) == doctest::Approx(4e-8).epsilon(1e-12));
  CHECK(amortization_intensity(p, m, 2, 25e6) ==
        doctest::Approx(2.0 * amortization_intensity(p, m, 2, 50e6)).epsilon(1e-12));
  CHECK(std::isinf(amortization_intensity(p, m, 2, 0.0)));
}

TEST_CASE("roofline points never exceed their roofs") {
  HardwareProfile p;
  AcceptanceModel m = AcceptanceModel::constant(0.8, 32);
  auto points = roofline(p, m, 1, 16, [](int k) { return k / 2; });
  REQUIRE(points.size() == 16);
  for (const auto& pt : points) {
    CHECK(pt.throughput <= std::min(pt.compute_roof, pt.io_roof) + 1e-9);
    CHECK(pt.k >= 1);
  }
}

TEST_CASE("with no new experts the throughput sits on the compute roof") {
  HardwareProfile p;
  AcceptanceModel m = AcceptanceModel::constant(0.8, 32);
  auto points = roofline(p, m, 1, 16, [](int) { return 0; });
  for (const auto& pt : points) CHECK(pt.throughput == pt.compute_roof);
}

TEST_CASE("doubling bandwidth doubles the io roof and leaves the compute roof") {
  HardwareProfile p;
  AcceptanceModel m = AcceptanceModel::constant(0.8, 32);
  HardwareProfile fast = p;
  fast.pcie_bandwidth *= 2.0;
  auto slow_pts = roofline(p, m, 1, 8, [](int k) { return k; });
  auto fast_pts = roofline(fast, m, 1, 8, [](int k) { return k; });
  for (std::size_t i = 0; i < slow_pts.size(); ++i) {
    CHECK(fast_pts[i].io_roof == doctest::Approx(2.0 * slow_pts[i].io_roof).epsilon(1e-9));
    CHECK(fast_pts[i].compute_roof ==
          doctest::Approx(slow_pts[i].compute_roof).epsilon(1e-12));
  }
}

TEST_CASE("roofline CSV carries the documented header and one row per point") {
  HardwareProfile p;
  AcceptanceModel m = AcceptanceModel::constant(0.8, 32);
  auto points = roofline(p, m, 1, 4, [](int) { return 1; });
  const std::string csv = roofline_csv(points);
  std::istringstream in(csv);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "k,intensity,throughput,compute_roof,io_roof");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);
}

TEST_CASE("governor boundaries: monotone throughput pins k to an endpoint") {
  // Certain acceptance with nearly flat verify cost: throughput keeps rising.
  HardwareProfile rising;
  rising.draft_base = 1e-3;
  rising.draft_per_token = 1e-5;
  rising.verify_samples = {{1.0, 10e-3}, {33.0, 10.5e-3}};
  AcceptanceModel certain = AcceptanceModel::constant(1.0, 32);
  GovernorConfig g{1, 16, 12, 0.0};
  CHECK(select_k(rising, certain, g, [](int) { return 0; }) == 12);

  // Near-zero acceptance with growing cycle cost: throughput keeps falling.
  AcceptanceModel feeble = AcceptanceModel::constant(0.01, 32);
  HardwareProfile steep;
  CHECK(select_k(steep, feeble, g, [](int) { return 0; }) == 1);
}

TEST_CASE("governor equals a brute-force scan over randomized inputs") {
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    HardwareProfile p = random_profile(rng);
    AcceptanceModel m = random_model(rng, 24);
    GovernorConfig g;
    g.k_min = 1 + static_cast<int>(rng() % 4);
    g.k_max = g.k_min + static_cast<int>(rng() % 16);
    g.k_slo = g.k_min + static_cast<int>(rng() % (g.k_max - g.k_min + 1));
    const int spread = 1 + static_cast<int>(rng() % 5);
    auto estimator = [spread](int k) { return (k * spread) % 7; };

    int best = g.k_min;
    double best_theta = throughput(p, m, g.k_min, estimator(g.k_min));
    const int hi = std::min(g.k_max, g.k_slo);
    for (int k = g.k_min + 1; k <= hi; ++k) {
      const double theta = throughput(p, m, k, estimator(k));
      if (theta > best_theta) {
        best_theta = theta;
        best = k;
      }
    }
    CHECK(select_k(p, m, g, estimator) == best);
  }
}

TEST_CASE("governor choice is invariant under uniform time scaling") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    HardwareProfile p = random_profile(rng);
    AcceptanceModel m = random_model(rng, 16);
    GovernorConfig g{1, 16, 16, 0.0};
    auto est = [](int k) { return k % 3; };
    CHECK(select_k(p, m, g, est) == select_k(scaled(p, 10.0), m, g, est));
  }
}

TEST_CASE("TTFT bound: infeasible below the smallest cycle, k_max when generous") {
  HardwareProfile p;
  auto est = [](int) { return 2; };
  try {
    k_slo_from_ttft(p, t_cycle(p, 1, 2) * 0.5, est, 1, 16);
    FAIL("expected InfeasibleBudget");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InfeasibleBudget);
  }
  CHECK(k_slo_from_ttft(p, t_cycle(p, 16, 2) * 2.0, est, 1, 16) == 16);
}

TEST_CASE("TTFT bound equals a linear scan over randomized profiles") {
  std::mt19937 rng(31);
  for (int trial = 0; trial < 40; ++trial) {
    HardwareProfile p = random_profile(rng);
    auto est = [](int k) { return k / 4; };
    std::uniform_real_distribution<double> budget_scale(1.0, 3.0);
    const double budget = t_cycle(p, 1, est(1)) * budget_scale(rng);
    int expected = 0;
    for (int k = 1; k <= 16; ++k)
      if (t_cycle(p, k, est(k)) <= budget) expected = k;
    if (expected == 0) continue;  // random budget fell below k=1 after all
    CHECK(k_slo_from_ttft(p, budget, est, 1, 16) == expected);
  }
}

TEST_CASE("acceptance EMA: single observation arithmetic") {
  AcceptanceModel m;
  m.p = {0.9};
  m.ema_alpha = 0.1;
  AcceptanceModel out = update_acceptance(m, {true});
  CHECK(out.p[0] == doctest::Approx(0.91).epsilon(1e-12));

  m.ema_alpha = 1.0;
  out = update_acceptance(m, {false});
  CHECK(out.p[0] == 0.0);  // alpha = 1 jumps to the observation
}

TEST_CASE("acceptance EMA: positions past the first rejection stay untouched") {
  AcceptanceModel m;
  m.p = {0.5, 0.5, 0.5};
  m.ema_alpha = 0.1;
  AcceptanceModel out = update_acceptance(m, {true, false, true});
  CHECK(out.p[0] == doctest::Approx(0.55).epsilon(1e-12));
  CHECK(out.p[1] == doctest::Approx(0.45).epsilon(1e-12));
  CHECK(out.p[2] == 0.5);  // unobserved behind the rejection
}

TEST_CASE("acceptance EMA: repeated accepts approach 1 monotonically") {
  AcceptanceModel m;
  m.p = {0.2};
  m.ema_alpha = 0.3;
  double prev = m.p[0];
  for (int i = 0; i < 50; ++i) {
    m = update_acceptance(m, {true});
    CHECK(m.p[0] >= prev);
    CHECK(m.p[0] <= 1.0);
    prev = m.p[0];
  }
  CHECK(m.p[0] > 0.999);
}

TEST_CASE("acceptance EMA keeps probabilities in range for any sequence") {
  std::mt19937 rng(77);
  AcceptanceModel m = random_model(rng, 6);
  m.ema_alpha = 0.4;
  for (int step = 0; step < 200; ++step) {
    std::vector<bool> outcomes;
    const int len = static_cast<int>(rng() % 7);
    for (int i = 0; i < len; ++i) outcomes.push_back((rng() & 1) != 0);
    m = update_acceptance(m, outcomes);
    for (double v : m.p) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("acceptance EMA rejects more outcomes than modeled positions") {
  AcceptanceModel m = AcceptanceModel::constant(0.5, 2);
  try {
    update_acceptance(m, {true, true, true});
    FAIL("expected KOutOfRange");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::KOutOfRange);
  }
}

TEST_CASE("memory footprint sums columns and the grand total") {
  std::vector<FootprintComponent> parts = {
      {"experts", 4.58, 5.72, 1.55},
      {"other", 1.0, 2.0, 3.0},
  };
  FootprintTotals t = memory_footprint(parts);
  CHECK(t.draft_gb == doctest::Approx(5.58).epsilon(1e-12));
  CHECK(t.target_gb == doctest::Approx(7.72).epsilon(1e-12));
  CHECK(t.shared_gb == doctest::Approx(4.55).epsilon(1e-12));
  CHECK(t.total_gb == doctest::Approx(t.draft_gb + t.target_gb + t.shared_gb).epsilon(1e-12));
}

TEST_CASE("hardware profile JSON round-trips and rejects unknown keys") {
  HardwareProfile p;
  p.pcie_bandwidth = 12e9;
  p.verify_samples = {{1.0, 1e-3}, {9.0, 8e-3}};
  HardwareProfile back = HardwareProfile::from_json(p.to_json());
  CHECK(back.pcie_bandwidth == doctest::Approx(12e9));
  CHECK(back.verify_samples.size() == 2);

  nlohmann::json bad = p.to_json();
  bad["mystery_field"] = 1;
  try {
    HardwareProfile::from_json(bad);
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidConfig);
  }
}
