#include <doctest.h>

#include <random>
#include <stdexcept>

#include "i2v/optimize.hpp"
#include "support/fixtures.hpp"

using namespace i2v;

namespace {

// Free-flow merge with a congested and an empty branch; interior optimum.
Scenario merge_toy(double sigma, std::int32_t h = 30) {
  Scenario sc = fixtures::basic_scenario(fixtures::merge_topology(), 120.0, 0.0, sigma, h);
  for (auto& p : sc.params) p.jam_density = 10000.0;
  sc.x0 = {100.0, 30.0, 0.0, 20.0};
  return sc;
}

// Moderate-load mesh used as the bundled instance.
Scenario mesh_bundled(double sigma, std::int32_t h = 10) {
  Scenario sc = fixtures::basic_scenario(fixtures::mesh16_topology(), 100.0, 100.0, sigma, h);
  for (int i = 0; i < 3; ++i) sc.params[i].jam_density = 4000.0;
  sc.x0 = {100, 100, 100, 90, 120, 120, 90, 90, 120, 100, 100, 100, 100, 100, 100, 30};
  return sc;
}

Eigen::VectorXd values_of(const RoutingMatrix& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.values().data(), m.nnz());
}

}  // namespace

TEST_CASE("assemble_problem: constraint counts and pinned entries") {
  SUBCASE("merge network, one step") {
    Scenario sc = merge_toy(0.5, 1);
    OptimizationProblem p = assemble_problem(sc, TrustVector::constant(4, 0.5));
    CHECK(p.decision_dim == 4);
    CHECK(p.num_eq == 1 * 4 + 4);
    CHECK(p.num_ineq == 2 * 4 + 1 * 4);
    // Columns 2 and 3 have a single successor each.
    CHECK(p.pinned == std::vector<std::int8_t>{0, 0, 1, 1});
  }
  SUBCASE("mesh, ten steps") {
    Scenario sc = mesh_bundled(0.3);
    OptimizationProblem p = assemble_problem(sc, TrustVector::constant(16, 0.3));
    CHECK(p.decision_dim == 27);
    CHECK(p.num_eq == 10 * 16 + 16);
    CHECK(p.num_ineq == 2 * 27 + 10 * 16);
    std::int32_t pinned = 0;
    for (auto v : p.pinned) pinned += v;
    CHECK(pinned == 3);  // the three exit feeders
  }
  SUBCASE("CFL violation is rejected") {
    Scenario sc = merge_toy(0.5);
    sc.step_hours = 0.2;
    CHECK_THROWS_AS(assemble_problem(sc, TrustVector::constant(4, 0.5)), std::invalid_argument);
  }
}

TEST_CASE("objective gradient vanishes when no driver listens") {
  Scenario sc = mesh_bundled(0.0);
  OptimizationProblem p = assemble_problem(sc, TrustVector::constant(16, 0.0));
  std::mt19937 rng(3);
  const RoutingMatrix rc = fixtures::random_routing(sc.topology, rng);
  const ObjectiveValue v = objective_and_gradient(values_of(rc), p);
  CHECK(v.gradient.cwiseAbs().maxCoeff() == 0.0);
  const ObjectiveValue s = selfish_objective(p);
  CHECK(v.value == doctest::Approx(s.value).epsilon(1e-12));
}

TEST_CASE("objective gradient matches central finite differences at smooth points") {
  std::mt19937 rng(11);
  for (const bool mesh : {true, false}) {
    Scenario sc = mesh ? mesh_bundled(0.45) : merge_toy(0.7);
    const std::int32_t n = sc.num_links();
    OptimizationProblem p = assemble_problem(sc, TrustVector::constant(n, mesh ? 0.45 : 0.7));
    for (int trial = 0; trial < 4; ++trial) {
      const Eigen::VectorXd rc = values_of(fixtures::random_routing(sc.topology, rng));
      const ObjectiveValue v = objective_and_gradient(rc, p);
      const double eps = 1e-6;
      double worst = 0.0, scale = 0.0;
      for (std::int32_t e = 0; e < p.decision_dim; ++e) {
        Eigen::VectorXd up = rc, dn = rc;
        up[e] += eps;
        dn[e] -= eps;
        const double fd =
            (objective_and_gradient(up, p).value - objective_and_gradient(dn, p).value) / (2 * eps);
        worst = std::max(worst, std::abs(fd - v.gradient[e]));
        scale = std::max(scale, std::abs(fd));
      }
      CHECK(worst / std::max(scale, 1.0) <= 1e-4);
    }
  }
}

TEST_CASE("objective evaluation is bitwise deterministic") {
  Scenario sc = mesh_bundled(0.3);
  OptimizationProblem p = assemble_problem(sc, TrustVector::constant(16, 0.3));
  std::mt19937 rng(5);
  const Eigen::VectorXd rc = values_of(fixtures::random_routing(sc.topology, rng));
  const ObjectiveValue a = objective_and_gradient(rc, p);
  const ObjectiveValue b = objective_and_gradient(rc, p);
  CHECK(a.value == b.value);
  for (std::int32_t e = 0; e < p.decision_dim; ++e) CHECK(a.gradient[e] == b.gradient[e]);
}

TEST_CASE("solve with zero trust returns the initial guess") {
  Scenario sc = mesh_bundled(0.0);
  OptimizationProblem p = assemble_problem(sc, TrustVector::constant(16, 0.0));
  OptimizationSolution sol = solve(p);
  const RoutingMatrix& rs = sc.selfish_routing();
  for (std::int32_t e = 0; e < rs.nnz(); ++e) CHECK(sol.rc_star.value(e) == rs.value(e));
  CHECK(sol.objective == doctest::Approx(selfish_objective(p).value).epsilon(1e-12));
  CHECK(sol.converged);
  // Zero gradient, zero multipliers: the stationarity system is exactly met.
  CHECK(sol.kkt_residual_norm == 0.0);
}

TEST_CASE("solve matches a fine grid search on the one-parameter merge") {
  Scenario sc = merge_toy(1.0);
  OptimizationProblem p = assemble_problem(sc, TrustVector::constant(4, 1.0));
  double best_f = std::numeric_limits<double>::infinity();
  double best_r = -1.0;
  for (int k = 0; k <= 1000; ++k) {
    const double r = k / 1000.0;
    Eigen::VectorXd rc(4);
    rc << r, 1.0 - r, 1.0, 1.0;
    const double f = objective_and_gradient(rc, p).value;
    if (f < best_f) {
      best_f = f;
      best_r = r;
    }
  }
  OptimizationSolution sol = solve(p);
  CHECK(sol.converged);
  CHECK(std::abs(sol.objective - best_f) / best_f <= 1e-3);
  CHECK(sol.objective <= best_f + 1e-9);  // the solver should not lose to the grid
  CHECK(std::abs(sol.rc_star.value(0) - best_r) <= 2e-3);
  // The optimizer favors the emptier branch.
  CHECK(sol.rc_star.value(1) > 0.5);
}

TEST_CASE("control never loses to the selfish baseline and improves with trust") {
  double prev_red = -1.0;
  for (double s : {0.25, 0.5, 0.75, 1.0}) {
    Scenario sc = mesh_bundled(s);
    OptimizationProblem p = assemble_problem(sc, TrustVector::constant(16, s));
    OptimizationSolution sol = solve(p);
    const double selfish = selfish_objective(p).value;
    CHECK(sol.converged);
    CHECK(sol.objective <= selfish + 1e-6);
    const double red = selfish - sol.objective;
    CHECK(red >= prev_red - 1e-9);
    prev_red = red;
  }
}

TEST_CASE("stored trajectory re-simulates from the optimal routing") {
  Scenario sc = merge_toy(0.6);
  OptimizationProblem p = assemble_problem(sc, TrustVector::constant(4, 0.6));
  OptimizationSolution sol = solve(p);
  const Trajectory re = simulate_mixed(p.scenario, sol.rc_star);
  REQUIRE(re.states.size() == sol.trajectory.states.size());
  for (std::size_t k = 0; k < re.states.size(); ++k)
    for (std::int32_t i = 0; i < 4; ++i)
      CHECK(std::abs(re.states[k][i] - sol.trajectory.states[k][i]) <= 1e-6);
}

TEST_CASE("kkt residual: converged solutions are stationary, perturbed ones are not") {
  Scenario sc = merge_toy(0.6);
  OptimizationProblem p = assemble_problem(sc, TrustVector::constant(4, 0.6));
  OptimizationSolution sol = solve(p);
  CHECK(sol.converged);
  CHECK(sol.kkt_residual_norm <= 1e-6);
  CHECK(kkt_residual(sol, p) == doctest::Approx(sol.kkt_residual_norm).epsilon(1e-9));

  OptimizationSolution bumped = sol;
  std::vector<double> v(sol.rc_star.values().begin(), sol.rc_star.values().end());
  v[0] += 1e-2;
  v[1] -= 1e-2;
  bumped.rc_star = RoutingMatrix(p.pattern, v, p.scenario.topology);
  bumped.trajectory = simulate_mixed(p.scenario, bumped.rc_star);
  CHECK(kkt_residual(bumped, p) > 10.0 * std::max(sol.kkt_residual_norm, 1e-12));
}

TEST_CASE("multipliers are sign-correct and sized to the frozen layout") {
  Scenario sc = mesh_bundled(0.3);
  OptimizationProblem p = assemble_problem(sc, TrustVector::constant(16, 0.3));
  OptimizationSolution sol = solve(p);
  CHECK(sol.multipliers_ineq.minCoeff() >= 0.0);
  CHECK(sol.multipliers_eq.size() == p.num_eq);
  CHECK(sol.multipliers_ineq.size() == p.num_ineq);
}

TEST_CASE("objective is invariant to the order links were declared in") {
  // Same mesh with the pair list assembled in reverse order; the frozen
  // column-major pattern must make results identical bit for bit.
  NetworkTopology a = fixtures::mesh16_topology();
  NetworkTopology b = a;
  std::reverse(b.pairs.begin(), b.pairs.end());
  b.finalize();
  Scenario sa = mesh_bundled(0.4);
  Scenario sb = sa;
  sb.topology = b;
  sb.selfish = build_uniform_selfish(b);
  OptimizationProblem pa = assemble_problem(sa, TrustVector::constant(16, 0.4));
  OptimizationProblem pb = assemble_problem(sb, TrustVector::constant(16, 0.4));
  std::mt19937 rng(9);
  const Eigen::VectorXd rc = values_of(fixtures::random_routing(sa.topology, rng));
  const ObjectiveValue va = objective_and_gradient(rc, pa);
  const ObjectiveValue vb = objective_and_gradient(rc, pb);
  CHECK(va.value == vb.value);
  for (std::int32_t e = 0; e < pa.decision_dim; ++e) CHECK(va.gradient[e] == vb.gradient[e]);
}

TEST_CASE("infeasible start triggers restoration and ends feasible") {
  // The on-ramp queue crosses its capacity under the uniform split but the
  // optimizer can route around the slow branch.
  Scenario sc = fixtures::basic_scenario(fixtures::merge_topology(), 7.5, 0.0, 0.6, 20);
  sc.params[0] = {207.0, 5.25, 35.0, 0.01};
  sc.params[1] = {40.0, 2.0, 10.0, 0.01};
  sc.params[2] = {200.0, 5.25, 35.0, 0.01};
  sc.params[3] = {400.0, 5.25, 35.0, 0.01};
  sc.x0 = {205.0, 39.0, 0.0, 10.0};
  OptimizationProblem p = assemble_problem(sc, TrustVector::constant(4, 0.6));
  OptimizationSolution sol = solve(p);
  CHECK(sol.notes.find("jam-density") != std::string::npos);
  CHECK(sol.jam_feasible);
  CHECK(sol.converged);
  for (std::int32_t k = 1; k <= 20; ++k) CHECK(sol.trajectory.states[k][0] <= 207.0 + 1e-7);
}

TEST_CASE("soft-min smoothing solves land near the hard-min optimum") {
  Scenario sc = merge_toy(0.6);
  OptimizationProblem p = assemble_problem(sc, TrustVector::constant(4, 0.6));
  OptimizationSolution hard = solve(p);
  SolverOptions opt;
  opt.soft_min_tau = 20.0;
  OptimizationSolution soft = solve(p, opt);
  // Reported objective is always the hard-min re-evaluation.
  CHECK(soft.objective <= selfish_objective(p).value + 1e-6);
  CHECK(std::abs(soft.objective - hard.objective) / hard.objective <= 1e-4);
}
