#include "i2v/resilience.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "i2v/sensitivity.hpp"

namespace i2v {

namespace {

// Psi rows for every link at one trajectory step: dF/dsigma + dF/drc * eta1,
// evaluated at (x_k, R(sigma0), lambda_k, sigma0) with x_k held fixed.
Eigen::MatrixXd psi_all_links(const std::vector<double>& x_k, const RoutingMatrix& rc_star,
                              const RoutingMatrix& R, const Eigen::MatrixXd& eta1,
                              const OptimizationProblem& problem) {
  const Scenario& sc = problem.scenario;
  const std::int32_t n = sc.num_links();
  const std::int32_t nnz = problem.pattern.nnz();
  const RoutingMatrix& rs = sc.selfish_routing();
  const StepDerivatives d = step_derivatives(x_k, R, sc);

  Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd dFdrc(n, nnz);
  for (std::int32_t e = 0; e < nnz; ++e) {
    const LinkId j = problem.pattern.col(e);
    const double dr_dsigma = rc_star.value(e) - rs.value(e);
    const double dr_drc = problem.sigma0[j];
    for (std::int32_t i = 0; i < n; ++i) {
      const double dFe = d.dr[i * nnz + e];
      psi(i, j) += dFe * dr_dsigma;
      dFdrc(i, e) = dFe * dr_drc;
    }
  }
  psi += dFdrc * eta1;
  return psi;
}

std::int32_t worker_count(std::size_t tasks) {
  if (const char* env = std::getenv("I2VROUTE_WORKERS")) {
    const long k = std::strtol(env, nullptr, 10);
    if (k >= 1) return static_cast<std::int32_t>(std::min<long>(k, static_cast<long>(tasks)));
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<std::int32_t>(std::min<std::size_t>(std::max(1u, hw), tasks));
}

}  // namespace

std::vector<double> residual_capacity(const Trajectory& traj, std::span<const LinkParams> params) {
  const std::size_t n = params.size();
  std::vector<double> rc(n, 1.0);
  const std::size_t first = traj.states.size() > 1 ? 1 : 0;
  for (std::size_t i = 0; i < n; ++i) {
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t k = first; k < traj.states.size(); ++k)
      worst = std::min(worst, (params[i].jam_density - traj.states[k][i]) / params[i].jam_density);
    rc[i] = worst;
  }
  return rc;
}

Eigen::VectorXd psi_link_sensitivity(const OptimizationSolution& solution,
                                     const Eigen::MatrixXd& eta1, std::int32_t step_index,
                                     LinkId link, const OptimizationProblem& problem) {
  const Scenario& sc = problem.scenario;
  if (eta1.rows() != problem.pattern.nnz() || eta1.cols() != sc.num_links())
    throw std::invalid_argument("eta1 shape does not match the problem");
  if (step_index < 0 || step_index >= solution.trajectory.horizon())
    throw std::invalid_argument("step index outside the stored trajectory");
  const RoutingMatrix R =
      compose_routing(problem.sigma0, solution.rc_star, sc.selfish_routing(), sc.topology);
  const Eigen::MatrixXd psi =
      psi_all_links(solution.trajectory.states[step_index], solution.rc_star, R, eta1, problem);
  return psi.row(link).transpose();
}

ResilienceReport resilience_lower_bound(const OptimizationSolution& solution,
                                        const Eigen::MatrixXd& eta1,
                                        const OptimizationProblem& problem) {
  const Scenario& sc = problem.scenario;
  const std::int32_t n = sc.num_links();
  const std::int32_t h = solution.trajectory.horizon();
  ResilienceReport report;
  report.residual_capacity = residual_capacity(solution.trajectory, sc.params);
  report.rho_lower_bound.assign(n, kUnboundedMargin);
  report.psi_inf_norms.assign(h, std::vector<double>(n, 0.0));

  const RoutingMatrix R =
      compose_routing(problem.sigma0, solution.rc_star, sc.selfish_routing(), sc.topology);
  for (std::int32_t k = 0; k < h; ++k) {
    const Eigen::MatrixXd psi =
        psi_all_links(solution.trajectory.states[k], solution.rc_star, R, eta1, problem);
    for (std::int32_t i = 0; i < n; ++i) {
      const double psi_norm = psi.row(i).cwiseAbs().maxCoeff();
      report.psi_inf_norms[k][i] = psi_norm;
      const double gap = sc.params[i].jam_density - solution.trajectory.states[k + 1][i];
      if (gap <= 0.0) {
        report.rho_lower_bound[i] = 0.0;  // already at or past jam density
      } else if (psi_norm > kPsiZeroTol) {
        report.rho_lower_bound[i] = std::min(report.rho_lower_bound[i], gap / psi_norm);
      }
    }
  }
  return report;
}

std::vector<double> brute_force_margin(const OptimizationSolution& solution,
                                       const Eigen::MatrixXd& eta1,
                                       const OptimizationProblem& problem,
                                       const BruteForceGrid& grid) {
  const Scenario& sc = problem.scenario;
  const std::int32_t n = sc.num_links();

  // Perturbation directions: 1-sparse, optionally 2-sparse and uniform.
  std::vector<Eigen::VectorXd> directions;
  for (std::int32_t j = 0; j < n; ++j)
    for (double s : {1.0, -1.0}) {
      Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
      d[j] = s;
      directions.push_back(d);
    }
  if (grid.include_pairs) {
    for (std::int32_t j = 0; j < n; ++j)
      for (std::int32_t l = j + 1; l < n; ++l)
        for (double sj : {1.0, -1.0})
          for (double sl : {1.0, -1.0}) {
            Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
            d[j] = sj;
            d[l] = sl;
            directions.push_back(d);
          }
  }
  if (grid.include_uniform) {
    directions.push_back(Eigen::VectorXd::Ones(n));
    directions.push_back(-Eigen::VectorXd::Ones(n));
  }

  const Eigen::VectorXd sigma0 =
      Eigen::Map<const Eigen::VectorXd>(problem.sigma0.sigma.data(), n);
  const std::int32_t max_steps = static_cast<std::int32_t>(std::floor(1.0 / grid.magnitude_step));

  // Each direction scans magnitudes independently; per-direction minima are
  // reduced deterministically afterwards.
  std::vector<std::vector<double>> per_direction(directions.size(),
                                                 std::vector<double>(n, kUnboundedMargin));
  std::atomic<std::size_t> cursor{0};
  auto work = [&]() {
    for (;;) {
      const std::size_t di = cursor.fetch_add(1);
      if (di >= directions.size()) return;
      const Eigen::VectorXd& dir = directions[di];
      std::vector<double>& margins = per_direction[di];
      for (std::int32_t m = 1; m <= max_steps; ++m) {
        const double mag = m * grid.magnitude_step;
        Eigen::VectorXd sig = sigma0 + mag * dir;
        if ((sig.array() < 0.0).any() || (sig.array() > 1.0).any()) break;
        const double l1 = mag * dir.cwiseAbs().sum();
        TrustVector sigma{std::vector<double>(sig.data(), sig.data() + n)};
        const LinearUpdate upd =
            linear_update(solution.rc_star, eta1, sigma, problem.sigma0, problem);
        Scenario perturbed = sc;
        perturbed.sigma_schedule = {sigma};
        try {
          const Trajectory traj = simulate_mixed(perturbed, upd.projected);
          for (std::int32_t i = 0; i < n; ++i) {
            if (margins[i] <= l1) continue;
            for (std::int32_t k = 1; k <= perturbed.horizon; ++k) {
              if (traj.states[k][i] >= sc.params[i].jam_density) {
                margins[i] = l1;
                break;
              }
            }
          }
        } catch (const std::runtime_error&) {
          // Simulation breakdown: skip this magnitude.
        }
      }
    }
  };
  const std::int32_t workers = worker_count(directions.size());
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::int32_t t = 0; t < workers; ++t) pool.emplace_back(work);
    for (std::thread& t : pool) t.join();
  }

  std::vector<double> margin(n, kUnboundedMargin);
  for (const std::vector<double>& m : per_direction)
    for (std::int32_t i = 0; i < n; ++i) margin[i] = std::min(margin[i], m[i]);
  return margin;
}

double network_resilience(std::span<const double> per_link_margin) {
  double m = kUnboundedMargin;
  for (double v : per_link_margin) m = std::min(m, v);
  return m;
}

}  // namespace i2v
