/*
  Margins of resilience against trust perturbations.

  A link fails when its simulated (raw, unclamped) vehicle count reaches its
  jam density within the horizon. The analytic lower bound on the smallest
  L1 trust perturbation causing such a failure combines the per-step gap to
  jam density with the total sensitivity of the one-step map to sigma along
  the optimizer's response:

      Psi_i(k) = dF_i/dsigma + dF_i/drc * eta1,
      rho_i >= min_k (B_i - F_i(x_k, r_k, lambda_k)) / ||Psi_i(k)||_inf.

  Links whose Psi vanishes along the whole trajectory cannot be driven to
  failure by first-order trust changes; they carry an unbounded sentinel.
  A brute-force grid search over sparse perturbation directions provides the
  empirical margin used to validate the bound.
*/
#pragma once

#include <Eigen/Dense>
#include <optional>

#include "i2v/optimize.hpp"

namespace i2v {

constexpr double kUnboundedMargin = std::numeric_limits<double>::infinity();
constexpr double kPsiZeroTol = 1e-10;

struct ResilienceReport {
  std::vector<double> residual_capacity;              // per link, dimensionless
  std::vector<double> rho_lower_bound;                // per link, L1 units of sigma
  std::vector<std::vector<double>> psi_inf_norms;     // per step, per link
  std::optional<std::vector<double>> brute_force_margin;
};

/// RC_i = min_k (B_i - x_i(k)) / B_i over the reached states (k >= 1).
std::vector<double> residual_capacity(const Trajectory& traj, std::span<const LinkParams> params);

/// Total derivative of the one-step map for link `link` at trajectory step
/// `step_index` (states step_index -> step_index+1), as a length-n row.
Eigen::VectorXd psi_link_sensitivity(const OptimizationSolution& solution,
                                     const Eigen::MatrixXd& eta1, std::int32_t step_index,
                                     LinkId link, const OptimizationProblem& problem);

/// Per-link lower bounds; unbounded sentinel where Psi vanishes at every
/// step. Also returns the per-step Psi norms through `report`.
ResilienceReport resilience_lower_bound(const OptimizationSolution& solution,
                                        const Eigen::MatrixXd& eta1,
                                        const OptimizationProblem& problem);

struct BruteForceGrid {
  double magnitude_step = 0.01;  // L-infinity grid resolution per direction
  bool include_pairs = true;     // 2-sparse directions
  bool include_uniform = true;   // all-links direction
};

/// Smallest ||sigma~ - sigma0||_1 over the grid that drives each link to
/// jam density under the closed loop (linear-update routing response),
/// +inf where no failure is found inside the trust box.
std::vector<double> brute_force_margin(const OptimizationSolution& solution,
                                       const Eigen::MatrixXd& eta1,
                                       const OptimizationProblem& problem,
                                       const BruteForceGrid& grid = {});

/// Network-level margin: minimum over links.
double network_resilience(std::span<const double> per_link_margin);

}  // namespace i2v
