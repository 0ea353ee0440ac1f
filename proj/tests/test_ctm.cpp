#include <doctest.h>

#include <random>
#include <stdexcept>

#include "i2v/ctm.hpp"
#include "support/fixtures.hpp"
#include "support/oracle_ctm.hpp"

using namespace i2v;

namespace {

oracle::DenseNet to_dense(const Scenario& sc, const RoutingMatrix& R) {
  oracle::DenseNet net;
  net.n = sc.num_links();
  net.R.assign(net.n, std::vector<double>(net.n, 0.0));
  for (std::int32_t e = 0; e < R.nnz(); ++e)
    net.R[R.pattern().row(e)][R.pattern().col(e)] = R.value(e);
  for (std::int32_t i = 0; i < net.n; ++i) {
    net.on_ramp.push_back(sc.topology.is_on_ramp(i));
    net.B.push_back(sc.params[i].jam_density);
    net.L.push_back(sc.params[i].length);
    net.v.push_back(sc.params[i].free_speed);
    net.a.push_back(sc.params[i].demand_shape);
  }
  net.Ts = sc.step_hours;
  return net;
}

}  // namespace

TEST_CASE("demand function values") {
  const LinkParams p = fixtures::highway_params();
  CHECK(demand(0.0, p) == 0.0);
  CHECK(demand(100.0, p) == doctest::Approx(22.124219558999517).epsilon(1e-12));
  CHECK(demand(150.0, p) > demand(100.0, p));
  CHECK(demand(2000.0, p) < p.free_speed);  // saturates toward v from below
  CHECK_THROWS_AS(demand(-1.0, p), std::domain_error);
}

TEST_CASE("supply function values") {
  const LinkParams p = fixtures::highway_params();
  CHECK(supply(100.0, p, false) == doctest::Approx(666.6666666666667).epsilon(1e-12));
  CHECK(supply(200.0, p, false) == 0.0);
  CHECK(supply(250.0, p, false) == 0.0);  // clamped above jam density
  CHECK(supply(0.0, p, true) == kInfiniteSupply);
  CHECK(supply(1e6, p, true) == kInfiniteSupply);
}

TEST_CASE("cfl check reproduces the reference ratio") {
  Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 20.0, 100.0, 0.0, 10);
  SUBCASE("reference step passes at exactly one") {
    const CflReport report = check_cfl(sc);
    CHECK(report.max_ratio == 1.0);
    CHECK(report.pass);
  }
  SUBCASE("coarser step fails") {
    sc.step_hours = 0.2;
    const CflReport report = check_cfl(sc);
    CHECK(report.max_ratio == doctest::Approx(1.3333333333333333).epsilon(1e-15));
    CHECK(!report.pass);
  }
  SUBCASE("vanishing step passes") {
    sc.step_hours = 1e-9;
    CHECK(check_cfl(sc).pass);
  }
}

TEST_CASE("allocation kappa: surplus everywhere gives ones") {
  const Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 20.0, 50.0, 0.0, 1);
  const std::vector<double> kappa =
      allocation_kappa(sc.x0, sc.selfish_routing(), sc);
  for (double k : kappa) CHECK(k == 1.0);
}

TEST_CASE("allocation kappa: single receiver at half the sender demand") {
  Scenario sc = fixtures::basic_scenario(fixtures::chain_topology(), 0.0, 0.0, 0.0, 1);
  // Choose x so that s_2(x2) = d_1(x1) / 2 exactly: with x1 = 100,
  // d_1 = 22.1242...; set x2 = B - L*d_1/(2 v).
  std::vector<double> x = sc.x0;
  x[0] = 100.0;
  const double d1 = demand(100.0, sc.params[0]);
  x[1] = sc.params[1].jam_density - sc.params[1].length * d1 / (2.0 * sc.params[1].free_speed);
  const std::vector<double> kappa = allocation_kappa(x, sc.selfish_routing(), sc);
  CHECK(kappa[0] == doctest::Approx(0.5).epsilon(1e-12));
  // Inflow equals supply exactly at the binding receiver.
  const FlowState fs = evaluate_flows(x, sc.selfish_routing(), sc);
  CHECK(fs.outflow[0] == doctest::Approx(supply(x[1], sc.params[1], false)).epsilon(1e-12));
}

TEST_CASE("allocation kappa: jammed receiver blocks the sender") {
  Scenario sc = fixtures::basic_scenario(fixtures::chain_topology(), 0.0, 0.0, 0.0, 1);
  std::vector<double> x = sc.x0;
  x[0] = 100.0;
  x[1] = sc.params[1].jam_density;
  const std::vector<double> kappa = allocation_kappa(x, sc.selfish_routing(), sc);
  CHECK(kappa[0] == 0.0);
}

TEST_CASE("step: pure accumulation on an isolated on-ramp") {
  // Empty network except inflow: x0 = 0 so demand vanishes downstream.
  Scenario sc = fixtures::basic_scenario(fixtures::chain_topology(), 600.0, 0.0, 0.0, 1);
  const std::vector<double> next = step(sc.x0, sc.selfish_routing(), sc.inflow_at(0), sc);
  CHECK(next[0] == doctest::Approx(sc.step_hours * 600.0).epsilon(1e-12));
  CHECK(next[1] == 0.0);
  CHECK(next[2] == 0.0);
}

TEST_CASE("step: origin is an equilibrium") {
  Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 0.0, 0.0, 0.0, 1);
  const std::vector<double> next = step(sc.x0, sc.selfish_routing(), sc.inflow_at(0), sc);
  for (double v : next) CHECK(v == 0.0);
}

TEST_CASE("step matches the independent dense oracle on the mesh") {
  const Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 600.0, 100.0, 0.0, 1);
  const RoutingMatrix& rs = sc.selfish_routing();
  const oracle::DenseNet net = to_dense(sc, rs);
  const std::vector<double> got = step(sc.x0, rs, sc.inflow_at(0), sc);
  const std::vector<double> want = oracle::step(net, sc.x0, sc.inflow_at(0));
  for (std::int32_t i = 0; i < sc.num_links(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("simulate: zero horizon returns the initial state only") {
  const Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 20.0, 100.0, 0.0, 0);
  const Trajectory traj = simulate_mixed(sc, sc.selfish_routing());
  REQUIRE(traj.states.size() == 1);
  CHECK(traj.outflows.empty());
  CHECK(traj.states[0] == sc.x0);
}

TEST_CASE("simulate: broadcast routing equals the per-step list") {
  const Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 300.0, 100.0, 0.0, 8);
  const RoutingMatrix& rs = sc.selfish_routing();
  const Trajectory a = simulate(sc, std::span(&rs, 1));
  const std::vector<RoutingMatrix> list(8, rs);
  const Trajectory b = simulate(sc, list);
  for (std::size_t k = 0; k < a.states.size(); ++k)
    for (std::int32_t i = 0; i < sc.num_links(); ++i) CHECK(a.states[k][i] == b.states[k][i]);
}

TEST_CASE("simulate agrees with the dense oracle over a congested horizon") {
  std::mt19937 rng(17);
  Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 600.0, 100.0, 0.4, 12);
  const RoutingMatrix rc = fixtures::random_routing(sc.topology, rng);
  const RoutingMatrix mixed = compose_routing(sc.sigma_at(0), rc, sc.selfish_routing(), sc.topology);
  const Trajectory traj = simulate(sc, std::span(&mixed, 1));
  const oracle::DenseNet net = to_dense(sc, mixed);
  std::vector<double> x = sc.x0;
  for (std::int32_t k = 0; k < sc.horizon; ++k) {
    x = oracle::step(net, x, sc.inflow_at(k));
    for (std::int32_t i = 0; i < sc.num_links(); ++i)
      CHECK(traj.states[k + 1][i] == doctest::Approx(x[i]).epsilon(1e-10));
  }
}

TEST_CASE("total travel time: closed forms") {
  Trajectory traj;
  traj.states.assign(6, std::vector<double>(3, 42.0));  // h = 5 constant states
  traj.outflows.assign(5, std::vector<double>(3, 0.0));
  CHECK(total_travel_time(traj, 0.15) == doctest::Approx(0.15 * 5 * 3 * 42.0).epsilon(1e-14));
  for (auto& row : traj.states)
    for (double& v : row) v = 0.0;
  CHECK(total_travel_time(traj, 0.15) == 0.0);
  // Doubling every state doubles the figure.
  Trajectory twice;
  twice.states.assign(6, std::vector<double>(3, 84.0));
  twice.outflows.assign(5, std::vector<double>(3, 0.0));
  Trajectory base;
  base.states.assign(6, std::vector<double>(3, 42.0));
  base.outflows.assign(5, std::vector<double>(3, 0.0));
  CHECK(total_travel_time(twice, 0.15) == doctest::Approx(2.0 * total_travel_time(base, 0.15)));
}

TEST_CASE("mass balance holds per step on random scenarios") {
  std::mt19937 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const Scenario sc = fixtures::random_scenario(rng);
    const RoutingMatrix rc = fixtures::random_routing(sc.topology, rng);
    const Trajectory traj = simulate_mixed(sc, rc);
    for (std::int32_t k = 0; k < sc.horizon; ++k) {
      double before = 0.0, after = 0.0, inflow = 0.0, drained = 0.0;
      for (std::int32_t i = 0; i < sc.num_links(); ++i) {
        before += traj.states[k][i];
        after += traj.states[k + 1][i];
        inflow += sc.inflow_at(k)[i];
        if (sc.topology.is_off_ramp(i)) drained += traj.outflows[k][i];
      }
      CHECK(std::abs(after - before - sc.step_hours * (inflow - drained)) <= 1e-9);
    }
  }
}

TEST_CASE("states stay nonnegative and supply-capped links stay below jam") {
  std::mt19937 rng(123);
  for (int trial = 0; trial < 30; ++trial) {
    const Scenario sc = fixtures::random_scenario(rng);
    const RoutingMatrix rc = fixtures::random_routing(sc.topology, rng);
    const Trajectory traj = simulate_mixed(sc, rc);
    for (const auto& x : traj.states)
      for (std::int32_t i = 0; i < sc.num_links(); ++i) {
        CHECK(x[i] >= 0.0);
        if (!sc.topology.is_on_ramp(i))
          CHECK(x[i] <= sc.params[i].jam_density * (1.0 + 1e-12) + 1e-9);
      }
  }
}

TEST_CASE("flow bounds hold along simulations") {
  std::mt19937 rng(321);
  for (int trial = 0; trial < 20; ++trial) {
    const Scenario sc = fixtures::random_scenario(rng);
    const RoutingMatrix rc = fixtures::random_routing(sc.topology, rng);
    const RoutingMatrix mixed = compose_routing(sc.sigma_at(0), rc, sc.selfish_routing(), sc.topology);
    const Trajectory traj = simulate(sc, std::span(&mixed, 1));
    for (std::int32_t k = 0; k < sc.horizon; ++k) {
      const auto& x = traj.states[k];
      for (std::int32_t j = 0; j < sc.num_links(); ++j)
        CHECK(traj.outflows[k][j] <= demand(std::max(0.0, x[j]), sc.params[j]) * (1.0 + 1e-12));
      for (std::int32_t i = 0; i < sc.num_links(); ++i) {
        if (sc.topology.is_on_ramp(i)) continue;
        double fin = 0.0;
        for (std::int32_t e = 0; e < mixed.nnz(); ++e)
          if (mixed.pattern().row(e) == i) fin += mixed.value(e) * traj.outflows[k][mixed.pattern().col(e)];
        CHECK(fin <= supply(x[i], sc.params[i], false) * (1.0 + 1e-9) + 1e-12);
      }
    }
  }
}

TEST_CASE("kappa monotonicity: raising a receiver's supply never lowers kappa") {
  std::mt19937 rng(55);
  const Scenario base = fixtures::basic_scenario(fixtures::mesh16_topology(), 600.0, 180.0, 0.0, 1);
  const RoutingMatrix& rs = base.selfish_routing();
  std::uniform_int_distribution<int> link_d(3, 14);  // internal links
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x = base.x0;
    const std::vector<double> k0 = allocation_kappa(x, rs, base);
    const int i = link_d(rng);
    x[i] = std::max(0.0, x[i] - 40.0);  // more supply at receiver i
    const std::vector<double> k1 = allocation_kappa(x, rs, base);
    for (std::int32_t j = 0; j < base.num_links(); ++j) {
      if (j == i) continue;  // its own demand changed too
      CHECK(k1[j] >= k0[j] - 1e-12);
    }
  }
}

TEST_CASE("step derivatives match central finite differences") {
  std::mt19937 rng(77);
  Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 600.0, 160.0, 0.0, 1);
  // States spread out so that some receivers are supply-limited.
  for (std::int32_t i = 0; i < sc.num_links(); ++i) sc.x0[i] = 120.0 + 5.0 * (i % 5);
  const RoutingMatrix R = fixtures::random_routing(sc.topology, rng);
  const StepDerivatives d = step_derivatives(sc.x0, R, sc);
  const std::int32_t n = sc.num_links();
  const std::int32_t nnz = R.nnz();
  const double eps = 1e-6;

  for (std::int32_t m = 0; m < n; ++m) {
    std::vector<double> xp = sc.x0, xm = sc.x0;
    xp[m] += eps;
    xm[m] -= eps;
    const std::vector<double> fp = step(xp, R, sc.inflow_at(0), sc);
    const std::vector<double> fm = step(xm, R, sc.inflow_at(0), sc);
    for (std::int32_t i = 0; i < n; ++i) {
      const double fd = (fp[i] - fm[i]) / (2.0 * eps);
      CHECK(d.dx[i * n + m] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
    }
  }
  for (std::int32_t e = 0; e < nnz; ++e) {
    std::vector<double> vp(R.values().begin(), R.values().end());
    std::vector<double> vm = vp;
    vp[e] += eps;
    vm[e] -= eps;
    const RoutingMatrix Rp = RoutingMatrix::unchecked(R.pattern(), vp);
    const RoutingMatrix Rm = RoutingMatrix::unchecked(R.pattern(), vm);
    const std::vector<double> fp = step(sc.x0, Rp, sc.inflow_at(0), sc);
    const std::vector<double> fm = step(sc.x0, Rm, sc.inflow_at(0), sc);
    for (std::int32_t i = 0; i < n; ++i) {
      const double fd = (fp[i] - fm[i]) / (2.0 * eps);
      CHECK(d.dr[i * nnz + e] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
    }
  }
}

TEST_CASE("scenario validation rejects bad instances") {
  Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 20.0, 100.0, 0.3, 5);
  SUBCASE("inflow on a non-on-ramp") {
    sc.inflow[0][5] = 10.0;
    CHECK_THROWS_AS(sc.validate(), std::invalid_argument);
  }
  SUBCASE("state above jam density") {
    sc.x0[4] = 500.0;
    CHECK_THROWS_AS(sc.validate(), std::invalid_argument);
  }
  SUBCASE("nonpositive step") {
    sc.step_hours = 0.0;
    CHECK_THROWS_AS(sc.validate(), std::invalid_argument);
  }
  SUBCASE("valid instance passes") { CHECK_NOTHROW(sc.validate()); }
}

TEST_CASE("step failures propagate with the step index") {
  // Demand shape violating a*L <= 1 drains faster than the CFL step allows.
  Scenario sc = fixtures::basic_scenario(fixtures::chain_topology(), 0.0, 0.0, 0.0, 3);
  for (auto& p : sc.params) {
    p.length = 1.0;
    p.free_speed = 30.0;
    p.demand_shape = 5.0;
  }
  sc.step_hours = 1.0 / 30.0;
  sc.x0 = {0.0, 0.5, 0.0};
  try {
    simulate_mixed(sc, sc.selfish_routing());
    FAIL("expected a numerical error");
  } catch (const std::runtime_error& err) {
    CHECK(std::string(err.what()).find("step 0") != std::string::npos);
    CHECK(std::string(err.what()).find("link 2") != std::string::npos);
  }
}
