#include "i2v/sensitivity.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace i2v {

namespace {

constexpr double kActiveValueTol = 1e-9;
constexpr double kMultiplierTol = 1e-10;

Eigen::VectorXd raw_step(const std::vector<double>& x, const RoutingMatrix& R,
                         const std::vector<double>& lambda, const Scenario& sc) {
  const std::int32_t n = sc.num_links();
  const FlowState fs = evaluate_flows(x, R, sc);
  Eigen::VectorXd next(n);
  for (std::int32_t i = 0; i < n; ++i)
    next[i] = x[i] + sc.step_hours * (lambda[i] - fs.outflow[i]);
  const RoutingPattern& pat = R.pattern();
  for (std::int32_t e = 0; e < pat.nnz(); ++e)
    next[pat.row(e)] += sc.step_hours * R.value(e) * fs.outflow[pat.col(e)];
  return next;
}

}  // namespace

CtmKktSystem::CtmKktSystem(const OptimizationProblem& problem) : problem_(problem) {}

std::int32_t CtmKktSystem::num_primal() const {
  return problem_.decision_dim + problem_.horizon() * problem_.num_links();
}

RoutingMatrix CtmKktSystem::mixed_routing(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma) const {
  const RoutingPattern& pat = problem_.pattern;
  const RoutingMatrix& rs = problem_.scenario.selfish_routing();
  std::vector<double> mixed(pat.nnz());
  for (std::int32_t e = 0; e < pat.nnz(); ++e) {
    const double s = sigma[pat.col(e)];
    mixed[e] = s * z[e] + (1.0 - s) * rs.value(e);
  }
  return RoutingMatrix::unchecked(pat, std::move(mixed));
}

Eigen::VectorXd CtmKktSystem::eq(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma) const {
  const Scenario& sc = problem_.scenario;
  const std::int32_t n = sc.num_links();
  const std::int32_t h = sc.horizon;
  const std::int32_t nnz = problem_.pattern.nnz();
  const RoutingMatrix R = mixed_routing(z, sigma);
  Eigen::VectorXd out(problem_.num_eq);
  std::vector<double> xt = sc.x0;
  for (std::int32_t t = 0; t < h; ++t) {
    const Eigen::VectorXd pred = raw_step(xt, R, sc.inflow_at(t), sc);
    for (std::int32_t i = 0; i < n; ++i) out[t * n + i] = z[nnz + t * n + i] - pred[i];
    for (std::int32_t i = 0; i < n; ++i) xt[i] = z[nnz + t * n + i];
  }
  for (LinkId j = 0; j < n; ++j) {
    auto [b, e] = problem_.pattern.col_range(j);
    double sum = 0.0;
    for (std::int32_t k = b; k < e; ++k) sum += z[k];
    out[h * n + j] = sum - (b == e ? 0.0 : 1.0);
  }
  return out;
}

Eigen::VectorXd CtmKktSystem::ineq(const Eigen::VectorXd& z, const Eigen::VectorXd&) const {
  const Scenario& sc = problem_.scenario;
  const std::int32_t n = sc.num_links();
  const std::int32_t h = sc.horizon;
  const std::int32_t nnz = problem_.pattern.nnz();
  Eigen::VectorXd out(problem_.num_ineq);
  for (std::int32_t e = 0; e < nnz; ++e) {
    out[e] = z[e] - 1.0;
    out[nnz + e] = -z[e];
  }
  for (std::int32_t t = 0; t < h; ++t)
    for (std::int32_t i = 0; i < n; ++i)
      out[2 * nnz + t * n + i] = z[nnz + t * n + i] - sc.params[i].jam_density;
  return out;
}

Eigen::VectorXd CtmKktSystem::lagrangian_gradient(const Eigen::VectorXd& z, const Eigen::VectorXd& sigma,
                                                  const Eigen::VectorXd& u, const Eigen::VectorXd& w) const {
  const Scenario& sc = problem_.scenario;
  const std::int32_t n = sc.num_links();
  const std::int32_t h = sc.horizon;
  const std::int32_t nnz = problem_.pattern.nnz();
  const RoutingMatrix R = mixed_routing(z, sigma);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(num_primal());

  std::vector<double> xt = sc.x0;
  for (std::int32_t t = 0; t < h; ++t) {
    const StepDerivatives d = step_derivatives(xt, R, sc);
    // Decision block: -G_t' w_dyn[t], with the mixing chain to rc.
    for (std::int32_t e2 = 0; e2 < nnz; ++e2) {
      double acc = 0.0;
      for (std::int32_t i = 0; i < n; ++i) acc += d.dr[i * nnz + e2] * w[t * n + i];
      grad[e2] -= acc * sigma[problem_.pattern.col(e2)];
    }
    // State block x_t (t >= 1): -A_t' w_dyn[t].
    if (t >= 1) {
      for (std::int32_t m = 0; m < n; ++m) {
        double acc = 0.0;
        for (std::int32_t i = 0; i < n; ++i) acc += d.dx[i * n + m] * w[t * n + i];
        grad[nnz + (t - 1) * n + m] -= acc;
      }
    }
    for (std::int32_t i = 0; i < n; ++i) xt[i] = z[nnz + t * n + i];
  }
  for (std::int32_t t = 1; t <= h; ++t)
    for (std::int32_t i = 0; i < n; ++i) {
      double& gi = grad[nnz + (t - 1) * n + i];
      gi += 1.0;                              // objective
      gi += w[(t - 1) * n + i];               // own dynamics row
      gi += u[2 * nnz + (t - 1) * n + i];     // jam-density row
    }
  for (std::int32_t e = 0; e < nnz; ++e) {
    grad[e] += w[h * n + problem_.pattern.col(e)];  // column sum
    grad[e] += u[e] - u[nnz + e];                   // bounds
  }
  return grad;
}

Eigen::MatrixXd CtmKktSystem::dynamics_jacobian(const Eigen::VectorXd& z,
                                                const Eigen::VectorXd& sigma) const {
  const Scenario& sc = problem_.scenario;
  const std::int32_t n = sc.num_links();
  const std::int32_t h = sc.horizon;
  const std::int32_t nnz = problem_.pattern.nnz();
  const RoutingMatrix R = mixed_routing(z, sigma);
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(h * n, num_primal());
  std::vector<double> xt = sc.x0;
  for (std::int32_t t = 0; t < h; ++t) {
    const StepDerivatives d = step_derivatives(xt, R, sc);
    for (std::int32_t i = 0; i < n; ++i) {
      J(t * n + i, nnz + t * n + i) = 1.0;
      for (std::int32_t e = 0; e < nnz; ++e)
        J(t * n + i, e) -= d.dr[i * nnz + e] * sigma[problem_.pattern.col(e)];
      if (t >= 1)
        for (std::int32_t m = 0; m < n; ++m) J(t * n + i, nnz + (t - 1) * n + m) -= d.dx[i * n + m];
    }
    for (std::int32_t i = 0; i < n; ++i) xt[i] = z[nnz + t * n + i];
  }
  return J;
}

Eigen::VectorXd CtmKktSystem::pack_primal(const RoutingMatrix& rc, const Trajectory& traj) const {
  const std::int32_t n = problem_.num_links();
  const std::int32_t h = problem_.horizon();
  const std::int32_t nnz = problem_.pattern.nnz();
  Eigen::VectorXd z(num_primal());
  for (std::int32_t e = 0; e < nnz; ++e) z[e] = rc.value(e);
  for (std::int32_t t = 1; t <= h; ++t)
    for (std::int32_t i = 0; i < n; ++i) z[nnz + (t - 1) * n + i] = traj.states[t][i];
  return z;
}

KktPoint CtmKktSystem::make_point(const OptimizationSolution& solution) const {
  KktPoint pt;
  pt.z = pack_primal(solution.rc_star, solution.trajectory);
  pt.u = solution.multipliers_ineq;
  pt.w = solution.multipliers_eq;
  pt.sigma = Eigen::Map<const Eigen::VectorXd>(problem_.sigma0.sigma.data(), problem_.num_links());
  pt.pinned_primal.assign(num_primal(), 0);
  for (std::int32_t e = 0; e < problem_.decision_dim; ++e)
    pt.pinned_primal[e] = problem_.pinned[e];
  pt.active_ineq.assign(problem_.num_ineq, 0);
  for (std::int32_t i = 0; i < problem_.num_ineq; ++i)
    pt.active_ineq[i] = pt.u[i] > kMultiplierTol ? 1 : 0;
  pt.vacuous_eq.assign(problem_.num_eq, 0);
  const std::int32_t base = problem_.horizon() * problem_.num_links();
  for (LinkId j = 0; j < problem_.num_links(); ++j) {
    auto [b, e] = problem_.pattern.col_range(j);
    if (e - b <= 1) pt.vacuous_eq[base + j] = 1;  // off-ramp or pinned column
  }
  return pt;
}

Eigen::VectorXd kkt_equality_residual(const KktFacets& facets, const KktPoint& point,
                                      const Eigen::VectorXd& z, const Eigen::VectorXd& u,
                                      const Eigen::VectorXd& w, const Eigen::VectorXd& sigma) {
  const std::int32_t nz = facets.num_primal();
  const std::int32_t q = facets.num_ineq();
  const std::int32_t p = facets.num_eq();
  Eigen::VectorXd F(nz + q + p);
  F.segment(0, nz) = facets.lagrangian_gradient(z, sigma, u, w);
  for (std::int32_t k = 0; k < nz; ++k)
    if (point.pinned_primal[k]) F[k] = z[k] - point.z[k];
  const Eigen::VectorXd g = facets.ineq(z, sigma);
  for (std::int32_t i = 0; i < q; ++i)
    F[nz + i] = point.active_ineq[i] ? g[i] : u[i] - point.u[i];
  const Eigen::VectorXd h = facets.eq(z, sigma);
  for (std::int32_t j = 0; j < p; ++j)
    F[nz + q + j] = point.vacuous_eq[j] ? w[j] - point.w[j] : h[j];
  return F;
}

SensitivityData assemble_sensitivity_generic(const KktFacets& facets, const KktPoint& point,
                                             double fd_step) {
  const std::int32_t nz = facets.num_primal();
  const std::int32_t q = facets.num_ineq();
  const std::int32_t p = facets.num_eq();
  const std::int32_t nsig = facets.num_params();
  const std::int32_t dim = nz + q + p;

  const Eigen::VectorXd F0 = kkt_equality_residual(facets, point, point.z, point.u, point.w, point.sigma);

  SensitivityData data;
  data.M.resize(dim, dim);
  data.N.resize(dim, nsig);
  Eigen::VectorXd z = point.z, u = point.u, w = point.w, sigma = point.sigma;
  for (std::int32_t k = 0; k < dim; ++k) {
    double* slot = k < nz ? &z[k] : (k < nz + q ? &u[k - nz] : &w[k - nz - q]);
    const double saved = *slot;
    *slot = saved + fd_step;
    data.M.col(k) = (kkt_equality_residual(facets, point, z, u, w, sigma) - F0) / fd_step;
    *slot = saved;
  }
  for (std::int32_t k = 0; k < nsig; ++k) {
    const double saved = sigma[k];
    sigma[k] = saved + fd_step;
    data.N.col(k) = (kkt_equality_residual(facets, point, z, u, w, sigma) - F0) / fd_step;
    sigma[k] = saved;
  }

  Eigen::FullPivLU<Eigen::MatrixXd> lu(data.M);
  lu.setThreshold(1e-10);
  if (!lu.isInvertible())
    throw std::runtime_error("KKT sensitivity matrix is numerically singular "
                             "(rank " + std::to_string(lu.rank()) + " of " + std::to_string(dim) + ")");
  const Eigen::MatrixXd eta = lu.solve(-data.N);
  const double n_norm = data.N.norm();
  data.solve_residual = (data.M * eta + data.N).norm() / std::max(n_norm, 1e-300);
  if (n_norm == 0.0) data.solve_residual = 0.0;

  Eigen::MatrixXd eta_clean = eta;
  for (std::int32_t k = 0; k < nz; ++k)
    if (point.pinned_primal[k]) eta_clean.row(k).setZero();

  const std::int32_t n_dec = facets.num_decision();
  data.eta1 = eta_clean.topRows(n_dec);
  data.state_sensitivity = eta_clean.middleRows(n_dec, nz - n_dec);
  data.eta2 = eta.middleRows(nz, q);
  data.eta3 = eta.bottomRows(p);
  return data;
}

AssumptionReport check_assumptions(const OptimizationSolution& solution,
                                   const OptimizationProblem& problem) {
  const CtmKktSystem sys(problem);
  const KktPoint pt = sys.make_point(solution);
  const std::int32_t nz = sys.num_primal();
  const std::int32_t nnz = problem.decision_dim;
  AssumptionReport report;

  // Active sets by value. Pinned-entry bounds are presolved structure, and
  // active upper bounds are always implied by the column sum together with
  // the mates' lower bounds (entries are nonnegative and sum to one), so
  // only lower bounds and jam rows enter the constraint stack.
  const Eigen::VectorXd g0 = sys.ineq(pt.z, pt.sigma);
  std::vector<std::int32_t> active;
  for (std::int32_t i = nnz; i < problem.num_ineq; ++i) {
    const bool pinned_bound = i < 2 * nnz && problem.pinned[i % nnz];
    if (!pinned_bound && g0[i] >= -kActiveValueTol) active.push_back(i);
  }
  report.active_inequalities = static_cast<std::int32_t>(active.size());

  report.smallest_active_multiplier = std::numeric_limits<double>::infinity();
  for (std::int32_t i : active)
    report.smallest_active_multiplier = std::min(report.smallest_active_multiplier, pt.u[i]);
  report.strict_complementarity_ok =
      active.empty() || report.smallest_active_multiplier > kMultiplierTol;

  std::vector<std::int32_t> eq_rows;
  for (std::int32_t j = 0; j < problem.num_eq; ++j)
    if (!pt.vacuous_eq[j]) eq_rows.push_back(j);

  // Jacobian of the active constraint stack w.r.t. the free primal block.
  std::vector<std::int32_t> free_cols;
  for (std::int32_t k = 0; k < nz; ++k)
    if (!pt.pinned_primal[k]) free_cols.push_back(k);
  const std::int32_t rows = static_cast<std::int32_t>(eq_rows.size() + active.size());
  const std::int32_t cols = static_cast<std::int32_t>(free_cols.size());
  Eigen::MatrixXd J(rows, cols);
  {
    const Eigen::VectorXd h0 = sys.eq(pt.z, pt.sigma);
    Eigen::VectorXd z = pt.z;
    const double step = 1e-7;
    for (std::int32_t c = 0; c < cols; ++c) {
      const double saved = z[free_cols[c]];
      z[free_cols[c]] = saved + step;
      const Eigen::VectorXd h1 = sys.eq(z, pt.sigma);
      const Eigen::VectorXd g1 = sys.ineq(z, pt.sigma);
      for (std::size_t r = 0; r < eq_rows.size(); ++r)
        J(static_cast<std::int32_t>(r), c) = (h1[eq_rows[r]] - h0[eq_rows[r]]) / step;
      for (std::size_t r = 0; r < active.size(); ++r)
        J(static_cast<std::int32_t>(eq_rows.size() + r), c) = (g1[active[r]] - g0[active[r]]) / step;
      z[free_cols[c]] = saved;
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(J);
  const Eigen::VectorXd sv = svd.singularValues();
  const double sv_max = sv.size() > 0 ? sv[0] : 0.0;
  if (rows == 0) {
    report.licq_ok = true;
    report.constraint_min_singular_value = std::numeric_limits<double>::infinity();
  } else if (rows > cols) {
    report.licq_ok = false;
    report.constraint_min_singular_value = 0.0;
  } else {
    report.constraint_min_singular_value = sv[rows - 1];
    report.licq_ok = sv[rows - 1] > 1e-7 * std::max(1.0, sv_max);
  }

  // Lagrangian Hessian on the null space of the active constraints
  // (central differences of the analytic gradient).
  {
    Eigen::MatrixXd H(cols, cols);
    Eigen::VectorXd z = pt.z;
    const double step = 1e-5;
    for (std::int32_t c = 0; c < cols; ++c) {
      const double saved = z[free_cols[c]];
      z[free_cols[c]] = saved + step;
      const Eigen::VectorXd gp = sys.lagrangian_gradient(z, pt.sigma, pt.u, pt.w);
      z[free_cols[c]] = saved - step;
      const Eigen::VectorXd gm = sys.lagrangian_gradient(z, pt.sigma, pt.u, pt.w);
      z[free_cols[c]] = saved;
      for (std::int32_t r = 0; r < cols; ++r)
        H(r, c) = (gp[free_cols[r]] - gm[free_cols[r]]) / (2.0 * step);
    }
    H = 0.5 * (H + H.transpose()).eval();

    Eigen::MatrixXd Z;
    if (rows == 0) {
      Z = Eigen::MatrixXd::Identity(cols, cols);
    } else {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd_full(J, Eigen::ComputeFullV);
      const double cutoff = 1e-9 * std::max(1.0, sv_max);
      std::int32_t rank = 0;
      for (std::int32_t k = 0; k < sv.size(); ++k)
        if (sv[k] > cutoff) ++rank;
      Z = svd_full.matrixV().rightCols(cols - rank);
    }
    if (Z.cols() == 0) {
      // Fully constrained point: the condition holds vacuously.
      report.second_order_ok = true;
      report.reduced_hessian_min_eig = std::numeric_limits<double>::infinity();
    } else {
      const Eigen::MatrixXd Hred = Z.transpose() * H * Z;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (Hred + Hred.transpose()));
      report.reduced_hessian_min_eig = eig.eigenvalues().minCoeff();
      report.second_order_ok =
          report.reduced_hessian_min_eig > 1e-8 * std::max(1.0, Hred.cwiseAbs().maxCoeff());
    }
  }
  return report;
}

SensitivityData assemble_sensitivity(const OptimizationSolution& solution,
                                     const OptimizationProblem& problem) {
  const AssumptionReport report = check_assumptions(solution, problem);
  if (!report.all_pass()) {
    std::string what = "sensitivity assumptions violated:";
    if (!report.licq_ok)
      what += " constraint independence (min singular value " +
              std::to_string(report.constraint_min_singular_value) + ")";
    if (!report.strict_complementarity_ok)
      what += " strict complementarity (smallest active multiplier " +
              std::to_string(report.smallest_active_multiplier) + ")";
    if (!report.second_order_ok)
      what += " second-order condition (reduced Hessian min eigenvalue " +
              std::to_string(report.reduced_hessian_min_eig) + ")";
    throw std::runtime_error(what);
  }
  const CtmKktSystem sys(problem);
  return assemble_sensitivity_generic(sys, sys.make_point(solution));
}

LinearUpdate linear_update(const RoutingMatrix& rc_star, const Eigen::MatrixXd& eta1,
                           const TrustVector& sigma, const TrustVector& sigma0,
                           const OptimizationProblem& problem) {
  const std::int32_t nnz = rc_star.nnz();
  if (eta1.rows() != nnz || eta1.cols() != sigma.dim())
    throw std::invalid_argument("eta1 shape does not match routing pattern and trust dimension");
  if (sigma.dim() != sigma0.dim())
    throw std::invalid_argument("trust vectors have different dimensions");
  Eigen::VectorXd base = Eigen::Map<const Eigen::VectorXd>(rc_star.values().data(), nnz);
  Eigen::VectorXd delta(sigma.dim());
  for (std::int32_t i = 0; i < sigma.dim(); ++i) delta[i] = sigma[i] - sigma0[i];
  if (delta.isZero(0.0)) return {base, rc_star};
  Eigen::VectorXd raw = base + eta1 * delta;
  Eigen::VectorXd projected = raw;
  project_routing(projected, problem);
  return {std::move(raw),
          RoutingMatrix(problem.pattern, std::vector<double>(projected.data(), projected.data() + nnz),
                        problem.scenario.topology)};
}

}  // namespace i2v
