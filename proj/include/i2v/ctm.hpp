/*
  Cell Transmission Model dynamics in discrete time.

  Links carry vehicle counts; flows are vehicles/hour; the step map is the
  explicit Euler update
      x(k+1) = x(k) + T_s * ((R - I) f(x(k)) + lambda(k)),
  with outflows f_j = kappa_j * d_j(x_j) throttled by a proportional
  allocation rule so that every receiver's inflow stays below its supply.

  On-ramps have unbounded supply; their state may exceed the configured jam
  density (a queue overflow), which is exactly the failure event the
  resilience module detects. All other links are supply-capped and cannot
  cross jam density when the CFL condition holds.
*/
#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "i2v/network.hpp"

namespace i2v {

struct LinkParams {
  double jam_density = 0.0;   // B, vehicles
  double length = 0.0;        // L, miles
  double free_speed = 0.0;    // v, miles/hour
  double demand_shape = 0.0;  // a, 1/vehicles
};

/// Throws std::invalid_argument unless B, L, v, a are all positive.
void check_link_params(const LinkParams& p);

/// Link demand d(x) = v * (1 - exp(-a x)). Throws std::domain_error for x < 0.
double demand(double x, const LinkParams& p);
double demand_derivative(double x, const LinkParams& p);

constexpr double kInfiniteSupply = std::numeric_limits<double>::infinity();

/// Link supply: +inf for on-ramps, else max(0, (v/L) * (B - x)).
double supply(double x, const LinkParams& p, bool is_on_ramp);
/// One-sided derivative at the active branch (0 once clamped).
double supply_derivative(double x, const LinkParams& p, bool is_on_ramp);

/// Full problem instance. Immutable once built; validate() checks the
/// structural invariants and throws std::invalid_argument on violation.
struct Scenario {
  NetworkTopology topology;
  std::vector<LinkParams> params;           // per link
  std::vector<std::vector<double>> inflow;  // per step or single broadcast row; veh/hour
  std::vector<double> x0;                   // vehicles
  std::vector<TrustVector> sigma_schedule;  // per step or single broadcast entry
  std::optional<RoutingMatrix> selfish;     // defaults to uniform split
  std::int32_t horizon = 0;                 // h, steps
  double step_hours = 0.0;                  // T_s

  std::int32_t num_links() const { return topology.num_links; }
  const std::vector<double>& inflow_at(std::int32_t k) const;
  const TrustVector& sigma_at(std::int32_t k) const;
  const RoutingMatrix& selfish_routing() const;

  void validate() const;
};

struct CflReport {
  std::vector<double> ratio;  // v_i * T_s / L_i per link
  double max_ratio = 0.0;
  bool pass = false;
};

/// Courant-Friedrichs-Lewy check: max_i v_i*T_s/L_i <= 1.
CflReport check_cfl(const Scenario& scenario);

/// Saved branch choices of one allocation evaluation; needed to take
/// one-sided derivatives at the active branch and to detect smoothness.
struct AllocationBranches {
  std::vector<std::int8_t> supply_limited;  // per receiver: 1 if alpha = s/D
  std::vector<LinkId> argmin_receiver;      // per sender: binding receiver or -1
  bool operator==(const AllocationBranches& o) const {
    return supply_limited == o.supply_limited && argmin_receiver == o.argmin_receiver;
  }
};

struct FlowState {
  std::vector<double> demand_val, demand_slope;  // d_j, d'_j
  std::vector<double> supply_val, supply_slope;  // s_i, s'_i
  std::vector<double> routed_demand;             // D_i = sum_j r_ij d_j
  std::vector<double> alpha;                     // receiver scale factors
  std::vector<double> kappa;                     // sender throttles
  std::vector<double> outflow;                   // f_j = kappa_j d_j
  AllocationBranches branches;
};

/// Evaluate demands, supplies and the proportional allocation at state x
/// under routing R. When soft_min_tau > 0 the min operators are replaced by
/// their soft counterparts (solver smoothing only; reporting always uses the
/// hard rule).
FlowState evaluate_flows(std::span<const double> x, const RoutingMatrix& R,
                         const Scenario& scenario, double soft_min_tau = 0.0);

/// Sender throttles kappa in [0,1] for state x under routing R.
std::vector<double> allocation_kappa(std::span<const double> x, const RoutingMatrix& R,
                                     const Scenario& scenario);

/// One Euler step. Throws std::runtime_error (with the offending link in the
/// message) if the result is NaN or negative.
std::vector<double> step(std::span<const double> x, const RoutingMatrix& R,
                         std::span<const double> lambda, const Scenario& scenario,
                         double soft_min_tau = 0.0);

struct Trajectory {
  std::vector<std::vector<double>> states;    // h+1 rows, x0..xh, vehicles
  std::vector<std::vector<double>> outflows;  // h rows, veh/hour

  std::int32_t horizon() const { return static_cast<std::int32_t>(outflows.size()); }
};

/// Roll the dynamics for scenario.horizon steps. routing_per_step must hold
/// either one matrix (broadcast) or horizon matrices.
Trajectory simulate(const Scenario& scenario, std::span<const RoutingMatrix> routing_per_step,
                    double soft_min_tau = 0.0);

/// Convenience: simulate under trust-mixed routing R_k = mix(sigma_k; rc, rs).
Trajectory simulate_mixed(const Scenario& scenario, const RoutingMatrix& rc,
                          double soft_min_tau = 0.0);

/// T_s * sum_{k=1..h} sum_i x_i(k): left-endpoint quadrature of the TTT
/// integral. The optimizer's raw objective is this without the T_s factor.
double total_travel_time(const Trajectory& traj, double step_hours);

/// Dense Jacobians of one step map F(x, r, lambda) at the active branches.
///   dx: dF/dx, n x n.
///   dr: dF/dr over pattern entries, n x nnz (raw routing entries, before
///       any chain rule to controlled entries or to sigma).
struct StepDerivatives {
  std::vector<double> dx;  // row-major n x n
  std::vector<double> dr;  // row-major n x nnz
  FlowState flows;
};

StepDerivatives step_derivatives(std::span<const double> x, const RoutingMatrix& R,
                                 const Scenario& scenario, double soft_min_tau = 0.0);

}  // namespace i2v
