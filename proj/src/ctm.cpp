#include "i2v/ctm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace i2v {

namespace {

constexpr double kNegativeStateTol = 1e-9;

// Stable soft-min of two values: -(1/tau) ln(e^{-tau a} + e^{-tau b}).
// Returns the value and the weight on `a` (weight on b = 1 - wa).
std::pair<double, double> soft_min2(double a, double b, double tau) {
  const double m = std::min(a, b);
  const double ea = std::exp(-tau * (a - m));
  const double eb = std::exp(-tau * (b - m));
  return {m - std::log(ea + eb) / tau, ea / (ea + eb)};
}

}  // namespace

void check_link_params(const LinkParams& p) {
  if (!(p.jam_density > 0.0)) throw std::invalid_argument("jam density must be positive");
  if (!(p.length > 0.0)) throw std::invalid_argument("link length must be positive");
  if (!(p.free_speed > 0.0)) throw std::invalid_argument("free speed must be positive");
  if (!(p.demand_shape > 0.0)) throw std::invalid_argument("demand shape must be positive");
}

double demand(double x, const LinkParams& p) {
  if (x < 0.0) throw std::domain_error("demand evaluated at negative vehicle count");
  return -p.free_speed * std::expm1(-p.demand_shape * x);
}

double demand_derivative(double x, const LinkParams& p) {
  return p.free_speed * p.demand_shape * std::exp(-p.demand_shape * x);
}

double supply(double x, const LinkParams& p, bool is_on_ramp) {
  if (is_on_ramp) return kInfiniteSupply;
  return std::max(0.0, p.free_speed / p.length * (p.jam_density - x));
}

double supply_derivative(double x, const LinkParams& p, bool is_on_ramp) {
  if (is_on_ramp) return 0.0;
  return x < p.jam_density ? -p.free_speed / p.length : 0.0;
}

const std::vector<double>& Scenario::inflow_at(std::int32_t k) const {
  return inflow.size() == 1 ? inflow.front() : inflow.at(k);
}

const TrustVector& Scenario::sigma_at(std::int32_t k) const {
  return sigma_schedule.size() == 1 ? sigma_schedule.front() : sigma_schedule.at(k);
}

const RoutingMatrix& Scenario::selfish_routing() const {
  if (!selfish) throw std::logic_error("scenario has no selfish routing attached");
  return *selfish;
}

void Scenario::validate() const {
  const std::int32_t n = num_links();
  const ValidationReport topo_report = validate_topology(topology);
  if (!topo_report.ok())
    throw std::invalid_argument("topology invalid: " + topo_report.issues.front().message);
  if (static_cast<std::int32_t>(params.size()) != n)
    throw std::invalid_argument("params length does not match link count");
  for (const LinkParams& p : params) check_link_params(p);
  if (static_cast<std::int32_t>(x0.size()) != n)
    throw std::invalid_argument("x0 length does not match link count");
  for (std::int32_t i = 0; i < n; ++i) {
    if (!(x0[i] >= 0.0 && x0[i] <= params[i].jam_density))
      throw std::invalid_argument("x0 outside [0, B] at link " + std::to_string(i + 1));
  }
  if (inflow.empty() || (inflow.size() != 1 && static_cast<std::int32_t>(inflow.size()) != horizon))
    throw std::invalid_argument("inflow schedule must have 1 or horizon rows");
  for (const auto& row : inflow) {
    if (static_cast<std::int32_t>(row.size()) != n)
      throw std::invalid_argument("inflow row length does not match link count");
    for (std::int32_t i = 0; i < n; ++i) {
      if (row[i] < 0.0) throw std::invalid_argument("negative inflow at link " + std::to_string(i + 1));
      if (row[i] != 0.0 && !topology.is_on_ramp(i))
        throw std::invalid_argument("nonzero inflow at non-on-ramp link " + std::to_string(i + 1));
    }
  }
  if (sigma_schedule.empty() ||
      (sigma_schedule.size() != 1 && static_cast<std::int32_t>(sigma_schedule.size()) != horizon))
    throw std::invalid_argument("sigma schedule must have 1 or horizon entries");
  for (const TrustVector& s : sigma_schedule) {
    if (s.dim() != n) throw std::invalid_argument("sigma entry dimension does not match link count");
    check_trust(s);
  }
  if (horizon < 0) throw std::invalid_argument("horizon must be nonnegative");
  if (!(step_hours > 0.0)) throw std::invalid_argument("step length must be positive");
}

CflReport check_cfl(const Scenario& scenario) {
  CflReport report;
  report.ratio.resize(scenario.num_links());
  for (std::int32_t i = 0; i < scenario.num_links(); ++i) {
    report.ratio[i] = scenario.params[i].free_speed * scenario.step_hours / scenario.params[i].length;
    report.max_ratio = std::max(report.max_ratio, report.ratio[i]);
  }
  report.pass = report.max_ratio <= 1.0;
  return report;
}

FlowState evaluate_flows(std::span<const double> x, const RoutingMatrix& R,
                         const Scenario& scenario, double soft_min_tau) {
  const std::int32_t n = scenario.num_links();
  const RoutingPattern& pat = R.pattern();
  FlowState fs;
  fs.demand_val.resize(n);
  fs.demand_slope.resize(n);
  fs.supply_val.resize(n);
  fs.supply_slope.resize(n);
  fs.routed_demand.assign(n, 0.0);
  fs.alpha.assign(n, 1.0);
  fs.kappa.assign(n, 1.0);
  fs.outflow.resize(n);
  fs.branches.supply_limited.assign(n, 0);
  fs.branches.argmin_receiver.assign(n, -1);

  for (std::int32_t i = 0; i < n; ++i) {
    const double xi = std::max(0.0, x[i]);
    fs.demand_val[i] = demand(xi, scenario.params[i]);
    fs.demand_slope[i] = demand_derivative(xi, scenario.params[i]);
    const bool on = scenario.topology.is_on_ramp(i);
    fs.supply_val[i] = supply(x[i], scenario.params[i], on);
    fs.supply_slope[i] = supply_derivative(x[i], scenario.params[i], on);
  }
  for (std::int32_t e = 0; e < pat.nnz(); ++e)
    fs.routed_demand[pat.row(e)] += R.value(e) * fs.demand_val[pat.col(e)];

  // Receiver scale factors alpha_i = min(1, s_i / D_i); 1 when D_i = 0 or
  // supply is unbounded.
  for (std::int32_t i = 0; i < n; ++i) {
    const double D = fs.routed_demand[i];
    if (D <= 0.0 || fs.supply_val[i] == kInfiniteSupply) continue;
    const double ratio = fs.supply_val[i] / D;
    if (soft_min_tau > 0.0) {
      auto [val, w_one] = soft_min2(1.0, ratio, soft_min_tau);
      fs.alpha[i] = val;
      fs.branches.supply_limited[i] = ratio < 1.0;
      (void)w_one;
    } else if (ratio < 1.0) {
      fs.alpha[i] = ratio;
      fs.branches.supply_limited[i] = 1;
    }
  }

  // Sender throttles kappa_j = min over receivers with positive share.
  for (std::int32_t j = 0; j < n; ++j) {
    auto [b, e] = pat.col_range(j);
    double best = 1.0;
    LinkId best_i = -1;
    bool any_receiver = false;
    for (std::int32_t k = b; k < e; ++k) {
      if (R.value(k) <= 0.0) continue;
      any_receiver = true;
      const LinkId i = pat.row(k);
      if (fs.alpha[i] < best) {
        best = fs.alpha[i];
        best_i = i;
      }
    }
    if (soft_min_tau > 0.0 && any_receiver) {
      // Stable soft-min over {1} union receiver alphas.
      double acc = std::exp(-soft_min_tau * (1.0 - best));
      for (std::int32_t k = b; k < e; ++k) {
        if (R.value(k) <= 0.0) continue;
        acc += std::exp(-soft_min_tau * (fs.alpha[pat.row(k)] - best));
      }
      fs.kappa[j] = std::clamp(best - std::log(acc) / soft_min_tau, 0.0, 1.0);
    } else {
      fs.kappa[j] = best;
    }
    fs.branches.argmin_receiver[j] = best_i;
  }
  for (std::int32_t j = 0; j < n; ++j) fs.outflow[j] = fs.kappa[j] * fs.demand_val[j];
  return fs;
}

std::vector<double> allocation_kappa(std::span<const double> x, const RoutingMatrix& R,
                                     const Scenario& scenario) {
  return evaluate_flows(x, R, scenario).kappa;
}

std::vector<double> step(std::span<const double> x, const RoutingMatrix& R,
                         std::span<const double> lambda, const Scenario& scenario,
                         double soft_min_tau) {
  const std::int32_t n = scenario.num_links();
  const FlowState fs = evaluate_flows(x, R, scenario, soft_min_tau);
  std::vector<double> next(x.begin(), x.end());
  const double ts = scenario.step_hours;
  for (std::int32_t i = 0; i < n; ++i) next[i] += ts * (lambda[i] - fs.outflow[i]);
  const RoutingPattern& pat = R.pattern();
  for (std::int32_t e = 0; e < pat.nnz(); ++e)
    next[pat.row(e)] += ts * R.value(e) * fs.outflow[pat.col(e)];
  for (std::int32_t i = 0; i < n; ++i) {
    if (std::isnan(next[i]))
      throw std::runtime_error("state became NaN at link " + std::to_string(i + 1));
    if (next[i] < 0.0) {
      if (next[i] < -kNegativeStateTol)
        throw std::runtime_error("state became negative at link " + std::to_string(i + 1));
      next[i] = 0.0;
    }
  }
  return next;
}

Trajectory simulate(const Scenario& scenario, std::span<const RoutingMatrix> routing_per_step,
                    double soft_min_tau) {
  const std::int32_t h = scenario.horizon;
  if (routing_per_step.empty() ||
      (routing_per_step.size() != 1 && static_cast<std::int32_t>(routing_per_step.size()) != h))
    throw std::invalid_argument("routing_per_step must have 1 or horizon entries");
  Trajectory traj;
  traj.states.reserve(h + 1);
  traj.outflows.reserve(h);
  traj.states.push_back(scenario.x0);
  for (std::int32_t k = 0; k < h; ++k) {
    const RoutingMatrix& R = routing_per_step.size() == 1 ? routing_per_step.front() : routing_per_step[k];
    try {
      FlowState fs = evaluate_flows(traj.states.back(), R, scenario, soft_min_tau);
      traj.outflows.push_back(std::move(fs.outflow));
      traj.states.push_back(step(traj.states.back(), R, scenario.inflow_at(k), scenario, soft_min_tau));
    } catch (const std::runtime_error& err) {
      throw std::runtime_error("step " + std::to_string(k) + ": " + err.what());
    }
  }
  return traj;
}

Trajectory simulate_mixed(const Scenario& scenario, const RoutingMatrix& rc, double soft_min_tau) {
  const RoutingMatrix& rs = scenario.selfish_routing();
  if (scenario.sigma_schedule.size() == 1) {
    const RoutingMatrix R = compose_routing(scenario.sigma_at(0), rc, rs, scenario.topology);
    return simulate(scenario, std::span(&R, 1), soft_min_tau);
  }
  std::vector<RoutingMatrix> per_step;
  per_step.reserve(scenario.horizon);
  for (std::int32_t k = 0; k < scenario.horizon; ++k)
    per_step.push_back(compose_routing(scenario.sigma_at(k), rc, rs, scenario.topology));
  return simulate(scenario, per_step, soft_min_tau);
}

double total_travel_time(const Trajectory& traj, double step_hours) {
  if (traj.states.empty()) throw std::invalid_argument("empty trajectory");
  double total = 0.0;
  for (std::size_t k = 1; k < traj.states.size(); ++k)
    for (double xi : traj.states[k]) total += xi;
  return step_hours * total;
}

StepDerivatives step_derivatives(std::span<const double> x, const RoutingMatrix& R,
                                 const Scenario& scenario, double soft_min_tau) {
  const std::int32_t n = scenario.num_links();
  const RoutingPattern& pat = R.pattern();
  const std::int32_t nnz = pat.nnz();
  StepDerivatives out;
  out.flows = evaluate_flows(x, R, scenario, soft_min_tau);
  const FlowState& fs = out.flows;
  const double ts = scenario.step_hours;

  // Receiver-side pieces of d(alpha_i): alpha = min(1, s_i/D_i) at the active
  // branch. w_alpha is the weight on the ratio branch (0 or 1 hard; in (0,1)
  // under soft-min smoothing).
  std::vector<double> w_alpha(n, 0.0);
  if (soft_min_tau > 0.0) {
    for (std::int32_t i = 0; i < n; ++i) {
      const double D = fs.routed_demand[i];
      if (D <= 0.0 || fs.supply_val[i] == kInfiniteSupply) continue;
      auto [val, w_one] = soft_min2(1.0, fs.supply_val[i] / D, soft_min_tau);
      (void)val;
      w_alpha[i] = 1.0 - w_one;
    }
  } else {
    for (std::int32_t i = 0; i < n; ++i) w_alpha[i] = fs.branches.supply_limited[i] ? 1.0 : 0.0;
  }

  // Sender-side weights over receiver alphas, stored per pattern entry.
  std::vector<double> w_kappa(nnz, 0.0);
  if (soft_min_tau > 0.0) {
    for (std::int32_t j = 0; j < n; ++j) {
      auto [b, e] = pat.col_range(j);
      double m = 1.0;
      for (std::int32_t k = b; k < e; ++k)
        if (R.value(k) > 0.0) m = std::min(m, fs.alpha[pat.row(k)]);
      double acc = std::exp(-soft_min_tau * (1.0 - m));
      for (std::int32_t k = b; k < e; ++k)
        if (R.value(k) > 0.0) acc += std::exp(-soft_min_tau * (fs.alpha[pat.row(k)] - m));
      for (std::int32_t k = b; k < e; ++k)
        if (R.value(k) > 0.0)
          w_kappa[k] = std::exp(-soft_min_tau * (fs.alpha[pat.row(k)] - m)) / acc;
    }
  } else {
    for (std::int32_t j = 0; j < n; ++j) {
      const LinkId i_star = fs.branches.argmin_receiver[j];
      if (i_star < 0) continue;
      // Lowest-index binding receiver carries the one-sided derivative.
      auto [b, e] = pat.col_range(j);
      for (std::int32_t k = b; k < e; ++k) {
        if (pat.row(k) == i_star && R.value(k) > 0.0) {
          w_kappa[k] = 1.0;
          break;
        }
      }
    }
  }

  // d(alpha_i)/dx_m assembled lazily: dalpha_dx_self[i] = w*s'_i/D_i and the
  // routed-demand channel -w*s_i/D_i^2 * r_im d'_m handled in the loops below.
  std::vector<double> alpha_s_term(n, 0.0), alpha_D_term(n, 0.0);
  for (std::int32_t i = 0; i < n; ++i) {
    if (w_alpha[i] == 0.0) continue;
    const double D = fs.routed_demand[i];
    alpha_s_term[i] = w_alpha[i] * fs.supply_slope[i] / D;
    alpha_D_term[i] = -w_alpha[i] * fs.supply_val[i] / (D * D);
  }

  // df_j/dx_m = d_j * dkappa_j/dx_m + kappa_j d'_j delta_jm.
  std::vector<double> dfdx(static_cast<std::size_t>(n) * n, 0.0);
  for (std::int32_t j = 0; j < n; ++j) {
    auto [b, e] = pat.col_range(j);
    for (std::int32_t k = b; k < e; ++k) {
      if (w_kappa[k] == 0.0) continue;
      const LinkId i = pat.row(k);
      const double wk = w_kappa[k] * fs.demand_val[j];
      if (alpha_s_term[i] != 0.0) dfdx[j * n + i] += wk * alpha_s_term[i];
      if (alpha_D_term[i] != 0.0) {
        for (LinkId m : scenario.topology.predecessors(i))
          dfdx[j * n + m] += wk * alpha_D_term[i] * R.at(i, m) * fs.demand_slope[m];
      }
    }
    dfdx[j * n + j] += fs.kappa[j] * fs.demand_slope[j];
  }

  // df_j/dr_e = d_j * sum_k w_kappa[k] * dalpha_{row k}/dr_e, where r_e only
  // enters D_{row e}.
  std::vector<double> dfdr(static_cast<std::size_t>(n) * nnz, 0.0);
  for (std::int32_t j = 0; j < n; ++j) {
    auto [b, e] = pat.col_range(j);
    for (std::int32_t k = b; k < e; ++k) {
      if (w_kappa[k] == 0.0) continue;
      const LinkId i = pat.row(k);
      if (alpha_D_term[i] == 0.0) continue;
      const double wk = w_kappa[k] * fs.demand_val[j] * alpha_D_term[i];
      for (std::int32_t e2 = 0; e2 < nnz; ++e2) {
        if (pat.row(e2) != i) continue;
        dfdr[j * nnz + e2] += wk * fs.demand_val[pat.col(e2)];
      }
    }
  }

  // dF/dx = I + T_s (R - I) df/dx.
  out.dx.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (std::int32_t i = 0; i < n; ++i) out.dx[i * n + i] = 1.0;
  for (std::int32_t j = 0; j < n; ++j)
    for (std::int32_t m = 0; m < n; ++m) {
      const double g = dfdx[j * n + m];
      if (g == 0.0) continue;
      out.dx[j * n + m] -= ts * g;
    }
  for (std::int32_t e = 0; e < nnz; ++e) {
    const LinkId i = pat.row(e), j = pat.col(e);
    const double r = R.value(e);
    if (r == 0.0) continue;
    for (std::int32_t m = 0; m < n; ++m) {
      const double g = dfdx[j * n + m];
      if (g != 0.0) out.dx[i * n + m] += ts * r * g;
    }
  }

  // dF/dr = T_s [ E(f) + (R - I) df/dr ].
  out.dr.assign(static_cast<std::size_t>(n) * nnz, 0.0);
  for (std::int32_t e = 0; e < nnz; ++e)
    out.dr[pat.row(e) * nnz + e] += ts * fs.outflow[pat.col(e)];
  for (std::int32_t j = 0; j < n; ++j)
    for (std::int32_t e2 = 0; e2 < nnz; ++e2) {
      const double g = dfdr[j * nnz + e2];
      if (g == 0.0) continue;
      out.dr[j * nnz + e2] -= ts * g;
    }
  for (std::int32_t e = 0; e < nnz; ++e) {
    const LinkId i = pat.row(e), j = pat.col(e);
    const double r = R.value(e);
    if (r == 0.0) continue;
    for (std::int32_t e2 = 0; e2 < nnz; ++e2) {
      const double g = dfdr[j * nnz + e2];
      if (g != 0.0) out.dr[i * nnz + e2] += ts * r * g;
    }
  }
  return out;
}

}  // namespace i2v
