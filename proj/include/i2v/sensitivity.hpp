/*
  Sensitivity of the optimal routing to the trust parameters, by implicit
  differentiation of the KKT system.

  The stationary point is described by y = (z, u, w) with z the primal block
  (decision entries first, then the predicted states), u the inequality
  multipliers and w the equality multipliers. The equality-form KKT residual
  F(y, sigma) stacks the Lagrangian gradient, one row per inequality
  (g_i = 0 where the multiplier is positive, u_i = 0 elsewhere) and one row
  per equality (w_j = const for structurally vacuous rows). Differentiating
  F(y(sigma), sigma) = 0 gives M * dy/dsigma + N = 0; eta solves
  M eta = -N and its leading block eta1 drives the linear update rule

      rc*(sigma) ~ rc*(sigma0) + eta1 (sigma - sigma0).

  M and N are assembled by forward differences on the analytic residual;
  an analytic path for the dynamics rows exists for cross-checking.
*/
#pragma once

#include <Eigen/Dense>
#include <memory>

#include "i2v/optimize.hpp"

namespace i2v {

/// Problem-specific callbacks for the generic KKT machinery. Implementations
/// must be pure: repeated calls with equal arguments return equal values.
class KktFacets {
public:
  virtual ~KktFacets() = default;
  virtual std::int32_t num_primal() const = 0;    // dim z
  virtual std::int32_t num_decision() const = 0;  // leading z block reported in eta1
  virtual std::int32_t num_ineq() const = 0;
  virtual std::int32_t num_eq() const = 0;
  virtual std::int32_t num_params() const = 0;    // dim sigma

  virtual Eigen::VectorXd lagrangian_gradient(const Eigen::VectorXd& z,
                                              const Eigen::VectorXd& sigma,
                                              const Eigen::VectorXd& u,
                                              const Eigen::VectorXd& w) const = 0;
  virtual Eigen::VectorXd ineq(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma) const = 0;
  virtual Eigen::VectorXd eq(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma) const = 0;
};

/// A KKT point plus the row policies that keep the differentiated system
/// square and nonsingular under strict complementarity.
struct KktPoint {
  Eigen::VectorXd z, u, w, sigma;
  std::vector<std::int8_t> pinned_primal;  // z rows replaced by dz = 0
  std::vector<std::int8_t> active_ineq;    // rows with g_i = 0; others use du = 0
  std::vector<std::int8_t> vacuous_eq;     // rows replaced by dw = 0
};

/// The stacked residual F(y, sigma) with the point's row policies applied.
Eigen::VectorXd kkt_equality_residual(const KktFacets& facets, const KktPoint& point,
                                      const Eigen::VectorXd& z, const Eigen::VectorXd& u,
                                      const Eigen::VectorXd& w, const Eigen::VectorXd& sigma);

struct SensitivityData {
  Eigen::MatrixXd M;                  // dF/dy, square
  Eigen::MatrixXd N;                  // dF/dsigma
  Eigen::MatrixXd eta1;               // n_r x n: decision response
  Eigen::MatrixXd state_sensitivity;  // (dim z - n_r) x n
  Eigen::MatrixXd eta2;               // q x n: inequality multipliers
  Eigen::MatrixXd eta3;               // p x n: equality multipliers
  double solve_residual = 0.0;        // ||M eta + N|| / max(||N||, eps)
};

/// Assemble M, N by forward differences (step fd_step) and solve M eta = -N.
/// Throws std::runtime_error when M is numerically singular.
SensitivityData assemble_sensitivity_generic(const KktFacets& facets, const KktPoint& point,
                                             double fd_step = 1e-7);

struct AssumptionReport {
  bool second_order_ok = false;
  double reduced_hessian_min_eig = 0.0;
  bool licq_ok = false;
  double constraint_min_singular_value = 0.0;
  bool strict_complementarity_ok = false;
  double smallest_active_multiplier = 0.0;  // +inf if nothing is active
  std::int32_t active_inequalities = 0;

  bool all_pass() const { return second_order_ok && licq_ok && strict_complementarity_ok; }
};

/// Full-space KKT system of an assembled routing problem at a solution.
class CtmKktSystem : public KktFacets {
public:
  CtmKktSystem(const OptimizationProblem& problem);

  std::int32_t num_primal() const override;
  std::int32_t num_decision() const override { return problem_.decision_dim; }
  std::int32_t num_ineq() const override { return problem_.num_ineq; }
  std::int32_t num_eq() const override { return problem_.num_eq; }
  std::int32_t num_params() const override { return problem_.num_links(); }

  Eigen::VectorXd lagrangian_gradient(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma,
                                      const Eigen::VectorXd& u, const Eigen::VectorXd& w) const override;
  Eigen::VectorXd ineq(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma) const override;
  Eigen::VectorXd eq(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma) const override;

  /// Analytic Jacobian blocks of the dynamics rows w.r.t. z, for
  /// cross-checking the finite-difference assembly.
  Eigen::MatrixXd dynamics_jacobian(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma) const;

  /// Pack (rc values, trajectory states 1..h) into z.
  Eigen::VectorXd pack_primal(const RoutingMatrix& rc, const Trajectory& traj) const;
  KktPoint make_point(const OptimizationSolution& solution) const;

private:
  RoutingMatrix mixed_routing(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma) const;

  const OptimizationProblem& problem_;
};

/// Verify the regularity conditions needed for the sensitivity system:
/// constraint independence, strict complementary slackness and positive
/// definiteness of the Lagrangian Hessian on the null space of the active
/// constraints (a conservative proxy for the critical-cone condition; it may
/// reject valid points, never the reverse). Report-only, never throws.
AssumptionReport check_assumptions(const OptimizationSolution& solution,
                                   const OptimizationProblem& problem);

/// Sensitivity at a converged solution. Requires check_assumptions to pass;
/// throws std::runtime_error naming the failed certificate otherwise.
SensitivityData assemble_sensitivity(const OptimizationSolution& solution,
                                     const OptimizationProblem& problem);

struct LinearUpdate {
  Eigen::VectorXd raw;        // rc*(sigma0) + eta1 (sigma - sigma0)
  RoutingMatrix projected;    // raw projected onto the routing simplex
};

/// First-order update of the optimal routing for a new trust vector.
LinearUpdate linear_update(const RoutingMatrix& rc_star, const Eigen::MatrixXd& eta1,
                           const TrustVector& sigma, const TrustVector& sigma0,
                           const OptimizationProblem& problem);

}  // namespace i2v
