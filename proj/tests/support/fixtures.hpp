/*
  Shared test networks and scenario builders.
*/
#pragma once

#include <random>
#include <vector>

#include "i2v/ctm.hpp"
#include "i2v/network.hpp"

namespace fixtures {

using namespace i2v;

// On-ramp 1 splits at node 0 into internal links 2 and 3, which merge at
// node 1 into off-ramp 4. One free split ratio.
inline NetworkTopology merge_topology() {
  const std::vector<std::int32_t> from{-1, 0, 0, 1};
  const std::vector<std::int32_t> to{0, 1, 1, -1};
  const std::vector<LinkClass> cls{LinkClass::OnRamp, LinkClass::Internal, LinkClass::Internal,
                                   LinkClass::OffRamp};
  return make_topology(2, from, to, cls);
}

// On-ramp 1 -> internal 2 -> off-ramp 3.
inline NetworkTopology chain_topology() {
  const std::vector<std::int32_t> from{-1, 0, 1};
  const std::vector<std::int32_t> to{0, 1, -1};
  const std::vector<LinkClass> cls{LinkClass::OnRamp, LinkClass::Internal, LinkClass::OffRamp};
  return make_topology(2, from, to, cls);
}

// Sixteen links over seven junctions: three on-ramps (1..3) feed a twelve
// link internal mesh (4..15) draining into one off-ramp (16).
inline NetworkTopology mesh16_topology() {
  const std::vector<std::int32_t> from{-1, -1, -1, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6};
  const std::vector<std::int32_t> to{0, 1, 2, 3, 4, 3, 4, 4, 5, 5, 6, 5, 6, 6, 4, -1};
  std::vector<LinkClass> cls(16, LinkClass::Internal);
  cls[0] = cls[1] = cls[2] = LinkClass::OnRamp;
  cls[15] = LinkClass::OffRamp;
  return make_topology(7, from, to, cls);
}

inline LinkParams highway_params() { return {200.0, 5.25, 35.0, 0.01}; }

inline Scenario basic_scenario(NetworkTopology topo, double inflow_veh_h, double x0,
                               double sigma, std::int32_t horizon) {
  Scenario sc;
  sc.topology = std::move(topo);
  const std::int32_t n = sc.topology.num_links;
  sc.params.assign(n, highway_params());
  std::vector<double> lambda(n, 0.0);
  for (std::int32_t i = 0; i < n; ++i)
    if (sc.topology.is_on_ramp(i)) lambda[i] = inflow_veh_h;
  sc.inflow = {lambda};
  sc.x0.assign(n, x0);
  sc.sigma_schedule = {TrustVector::constant(n, sigma)};
  sc.selfish = build_uniform_selfish(sc.topology);
  sc.horizon = horizon;
  sc.step_hours = 0.15;
  return sc;
}

// Random CFL-valid scenario on a random connected topology. Demand shapes
// satisfy a*L <= 1 so states stay nonnegative under the CFL step.
inline Scenario random_scenario(std::mt19937& rng) {
  std::uniform_int_distribution<int> nodes_d(2, 5), extra_d(0, 8), ramps_d(1, 3), horizon_d(1, 30);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int m = nodes_d(rng);

  std::vector<std::int32_t> from, to;
  std::vector<LinkClass> cls;
  // Backbone: every node gets one outgoing link; the last one exits.
  for (int v = 0; v < m; ++v) {
    from.push_back(v);
    if (v + 1 < m) {
      to.push_back(v + 1);
      cls.push_back(LinkClass::Internal);
    } else {
      to.push_back(-1);
      cls.push_back(LinkClass::OffRamp);
    }
  }
  const int extras = extra_d(rng);
  std::uniform_int_distribution<int> node_d(0, m - 1);
  for (int k = 0; k < extras && static_cast<int>(from.size()) < 13; ++k) {
    const int a = node_d(rng);
    const int b = node_d(rng);
    if (unif(rng) < 0.2) {
      from.push_back(a);
      to.push_back(-1);
      cls.push_back(LinkClass::OffRamp);
    } else {
      from.push_back(a);
      to.push_back(b);
      cls.push_back(LinkClass::Internal);
    }
  }
  const int ramps = ramps_d(rng);
  for (int k = 0; k < ramps; ++k) {
    from.push_back(-1);
    to.push_back(node_d(rng));
    cls.push_back(LinkClass::OnRamp);
  }
  Scenario sc;
  sc.topology = make_topology(m, from, to, cls);
  const std::int32_t n = sc.topology.num_links;

  double min_l_over_v = std::numeric_limits<double>::infinity();
  for (std::int32_t i = 0; i < n; ++i) {
    LinkParams p;
    p.jam_density = 50.0 + 250.0 * unif(rng);
    p.length = 1.0 + 7.0 * unif(rng);
    p.free_speed = 20.0 + 50.0 * unif(rng);
    p.demand_shape = (0.05 + 0.9 * unif(rng)) / p.length;
    sc.params.push_back(p);
    min_l_over_v = std::min(min_l_over_v, p.length / p.free_speed);
  }
  sc.step_hours = 0.95 * min_l_over_v;
  sc.horizon = horizon_d(rng);
  std::vector<double> lambda(n, 0.0);
  std::vector<double> x0(n);
  std::vector<double> sigma(n);
  for (std::int32_t i = 0; i < n; ++i) {
    if (sc.topology.is_on_ramp(i)) lambda[i] = 120.0 * unif(rng);
    x0[i] = 0.8 * sc.params[i].jam_density * unif(rng);
    sigma[i] = unif(rng);
  }
  sc.inflow = {lambda};
  sc.x0 = x0;
  sc.sigma_schedule = {TrustVector{sigma}};
  sc.selfish = build_uniform_selfish(sc.topology);
  return sc;
}

// Random controlled routing on a topology: per column, Dirichlet-ish weights.
inline RoutingMatrix random_routing(const NetworkTopology& topo, std::mt19937& rng) {
  RoutingPattern pat(topo);
  std::uniform_real_distribution<double> unif(0.05, 1.0);
  std::vector<double> values(pat.nnz(), 0.0);
  for (LinkId j = 0; j < topo.num_links; ++j) {
    auto [b, e] = pat.col_range(j);
    if (b == e) continue;
    double sum = 0.0;
    for (std::int32_t k = b; k < e; ++k) {
      values[k] = unif(rng);
      sum += values[k];
    }
    for (std::int32_t k = b; k < e; ++k) values[k] /= sum;
  }
  return RoutingMatrix(std::move(pat), std::move(values), topo);
}

}  // namespace fixtures
