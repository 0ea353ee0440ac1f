/*
  Optimal controlled-routing problem: choose the suggested routing matrix
  minimizing the summed network occupancy over the horizon, subject to the
  discretized dynamics, trust mixing, per-column simplex constraints and
  jam-density path constraints.

  The solve strategy is reduced-space single shooting: states are eliminated
  by forward simulation, leaving the pattern entries of the controlled
  routing as decision variables. Jam-density constraints are handled by an
  augmented-Lagrangian outer loop around a spectral projected-gradient inner
  loop, followed by a reduced Newton polish on the identified active face.
  Full-space KKT multipliers (dynamics adjoints, column-sum and bound
  multipliers) are recovered from the reduced solution.
*/
#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "i2v/ctm.hpp"
#include "i2v/network.hpp"

namespace i2v {

struct SolverOptions {
  std::int32_t max_iter = 4000;       // inner iterations per outer round
  double kkt_tol = 1e-6;              // convergence tolerance on the KKT residual
  double inner_tol = 1e-11;           // projected-gradient stationarity
  std::int32_t max_outer = 8;         // augmented-Lagrangian rounds
  double penalty_init = 10.0;
  double penalty_growth = 10.0;
  double penalty_max = 1e8;
  std::int32_t polish_iters = 40;     // reduced Newton steps per round
  double soft_min_tau = 0.0;          // >0 smooths the allocation min operators
                                      // during the solve only
};

/// Discretized program over the routing pattern. Constraint layout is
/// frozen: equalities are the h*n dynamics rows (step-major, then link)
/// followed by the n column sums; inequalities are the n_r upper bounds,
/// the n_r lower bounds, then the h*n jam-density rows.
struct OptimizationProblem {
  Scenario scenario;
  TrustVector sigma0;              // nominal trust, fixed during the solve
  RoutingPattern pattern;
  std::vector<std::int8_t> pinned;  // entries forced to 1 by a single-successor column
  std::int32_t decision_dim = 0;    // n_r = pattern nnz
  std::int32_t num_eq = 0;          // p = h*n + n
  std::int32_t num_ineq = 0;        // q = 2*n_r + h*n

  std::int32_t num_links() const { return scenario.num_links(); }
  std::int32_t horizon() const { return scenario.horizon; }
};

/// Builds the problem; requires a valid scenario and a passing CFL check,
/// otherwise throws std::invalid_argument.
OptimizationProblem assemble_problem(const Scenario& scenario, const TrustVector& sigma0);

/// Objective (sum over steps of total vehicles) and its adjoint gradient at
/// a feasible decision vector, evaluated by forward simulation.
struct ObjectiveValue {
  double value = 0.0;
  Eigen::VectorXd gradient;
};
ObjectiveValue objective_and_gradient(const Eigen::VectorXd& rc, const OptimizationProblem& problem);

struct OptimizationSolution {
  RoutingMatrix rc_star;
  Trajectory trajectory;            // hard-min re-evaluation of rc_star
  Eigen::VectorXd multipliers_eq;   // length p: dynamics adjoints, then column sums
  Eigen::VectorXd multipliers_ineq; // length q: upper bounds, lower bounds, jam rows
  double objective = 0.0;           // sum_k 1'x_k (no T_s factor)
  double total_travel_time = 0.0;   // T_s * objective
  double kkt_residual_norm = 0.0;
  std::int32_t iterations = 0;
  bool converged = false;
  bool jam_feasible = true;
  std::string notes;                // warnings (e.g. infeasible start)
};

/// Solve from the selfish routing (always structurally feasible), or from
/// `init` when given.
OptimizationSolution solve(const OptimizationProblem& problem, const SolverOptions& options = {},
                           const RoutingMatrix* init = nullptr);

/// Max-norm of the stationarity, primal feasibility, complementarity and
/// dual-sign residuals of the full-space KKT system at a candidate.
double kkt_residual(const OptimizationSolution& candidate, const OptimizationProblem& problem);

/// Euclidean projection of each pattern column onto its simplex
/// (sum = 1, entries >= 0); pinned entries stay at 1. In-place.
void project_routing(Eigen::VectorXd& rc, const OptimizationProblem& problem);

/// Selfish baseline objective (rc = rs), raw and time-scaled.
ObjectiveValue selfish_objective(const OptimizationProblem& problem);

}  // namespace i2v
