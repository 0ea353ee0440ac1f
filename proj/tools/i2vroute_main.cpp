/*
  Command-line front end: scenario simulation, routing optimization, trust
  sensitivity studies, resilience tables and the simulated real-time update
  loop. Every table carries the configuration hash; identical invocations
  produce bit-identical outputs.

  Exit codes: 0 success, 2 validation failure, 3 solver non-convergence,
  4 numerical failure.
*/
#include <CLI11.hpp>
#include <cmath>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "i2v/resilience.hpp"
#include "i2v/scenario_io.hpp"
#include "i2v/sensitivity.hpp"

using namespace i2v;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitSolver = 3;
constexpr int kExitNumerical = 4;

struct CommandContext {
  ScenarioFile file;
  std::string out_prefix;
  std::string run_hash;  // scenario hash + command spec
};

std::string make_run_hash(const ScenarioFile& file, const std::string& command_spec) {
  return fnv1a_hex(file.canonical_json + "|" + command_spec);
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << content;
}

std::vector<double> parse_sweep(const std::string& spec) {
  // "a:b:step" inclusive of both ends (within half a step).
  std::vector<double> values;
  double a = 0, b = 0, step = 0;
  char c1 = 0, c2 = 0;
  std::istringstream ss(spec);
  if (!(ss >> a >> c1 >> b >> c2 >> step) || c1 != ':' || c2 != ':' || step <= 0.0)
    throw std::invalid_argument("bad sweep spec '" + spec + "', expected a:b:step");
  for (double v = a; v <= b + 0.5 * step; v += step) values.push_back(std::min(v, b));
  return values;
}

std::vector<double> parse_list(const std::string& spec) {
  std::vector<double> values;
  std::istringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) values.push_back(std::stod(tok));
  }
  if (values.empty()) throw std::invalid_argument("empty list '" + spec + "'");
  return values;
}

std::string csv_header(const std::string& hash) {
  return "# config_hash=" + hash + " schema_version=1\n";
}

// --- simulate -------------------------------------------------------------

int cmd_simulate(const CommandContext& ctx) {
  const Scenario& sc = ctx.file.scenario;
  const CflReport cfl = check_cfl(sc);
  if (!cfl.pass) {
    std::cerr << "CFL check failed: max ratio " << format_double(cfl.max_ratio)
              << " exceeds 1; refusing to simulate\n";
    return kExitValidation;
  }
  Trajectory traj;
  try {
    traj = simulate_mixed(sc, sc.selfish_routing());
  } catch (const std::runtime_error& err) {
    std::cerr << "simulation failed: " << err.what() << "\n";
    return kExitNumerical;
  }
  std::ostringstream csv;
  write_trajectory_csv(csv, traj, sc.step_hours, ctx.run_hash);
  write_text(ctx.out_prefix + "_trajectory.csv", csv.str());

  json summary;
  summary["schema_version"] = 1;
  summary["config_hash"] = ctx.run_hash;
  summary["total_travel_time_veh_hours"] = total_travel_time(traj, sc.step_hours);
  summary["horizon"] = sc.horizon;
  summary["cfl_max_ratio"] = cfl.max_ratio;
  write_text(ctx.out_prefix + "_summary.json", summary.dump(2) + "\n");
  return 0;
}

// --- optimize ---------------------------------------------------------------

int cmd_optimize(const CommandContext& ctx, const std::string& sweep_sigma,
                 const std::string& sweep_horizon) {
  const Scenario& base = ctx.file.scenario;
  std::vector<double> sigmas{ctx.file.sigma0.sigma.front()};
  std::vector<std::int32_t> horizons{base.horizon};
  const bool sweeping = !sweep_sigma.empty() || !sweep_horizon.empty();
  if (!sweep_sigma.empty()) sigmas = parse_sweep(sweep_sigma);
  if (!sweep_horizon.empty()) {
    horizons.clear();
    for (double h : parse_list(sweep_horizon)) horizons.push_back(static_cast<std::int32_t>(h));
  }

  std::ostringstream csv;
  csv << csv_header(ctx.run_hash)
      << "sigma0,horizon,selfish_objective,optimized_objective,selfish_ttt_veh_hours,"
         "optimized_ttt_veh_hours,reduction_pct,converged,iterations,kkt_residual\n";
  bool all_converged = true;
  std::string solution_json;
  for (const std::int32_t h : horizons) {
    std::optional<RoutingMatrix> warm;
    double warm_sigma = 0.0;
    for (const double s : sigmas) {
      Scenario sc = base;
      sc.horizon = h;
      if (sc.inflow.size() > 1) sc.inflow.resize(1);  // sweeps use the constant row
      const TrustVector sigma0 = TrustVector::constant(sc.num_links(), s);
      sc.sigma_schedule = {sigma0};
      OptimizationProblem prob;
      try {
        prob = assemble_problem(sc, sigma0);
      } catch (const std::invalid_argument& err) {
        std::cerr << "assembly failed: " << err.what() << "\n";
        return kExitValidation;
      }
      // Warm start: a lower-trust optimum maps into the feasible set of a
      // higher-trust problem without changing the realized mixed routing.
      std::optional<RoutingMatrix> init;
      if (warm && s > warm_sigma && warm_sigma > 0.0) {
        std::vector<double> mixed(prob.decision_dim);
        const RoutingMatrix& rs = prob.scenario.selfish_routing();
        for (std::int32_t e = 0; e < prob.decision_dim; ++e)
          mixed[e] = warm_sigma / s * warm->value(e) + (1.0 - warm_sigma / s) * rs.value(e);
        init = RoutingMatrix(prob.pattern, std::move(mixed), prob.scenario.topology);
      }
      OptimizationSolution sol;
      try {
        sol = solve(prob, ctx.file.solver, init ? &*init : nullptr);
      } catch (const std::runtime_error& err) {
        std::cerr << "solve failed: " << err.what() << "\n";
        return kExitNumerical;
      }
      const double selfish = selfish_objective(prob).value;
      all_converged = all_converged && sol.converged;
      csv << format_double(s) << ',' << h << ',' << format_double(selfish) << ','
          << format_double(sol.objective) << ',' << format_double(sc.step_hours * selfish) << ','
          << format_double(sol.total_travel_time) << ','
          << format_double(selfish > 0 ? 100.0 * (selfish - sol.objective) / selfish : 0.0) << ','
          << (sol.converged ? 1 : 0) << ',' << sol.iterations << ','
          << format_double(sol.kkt_residual_norm) << '\n';
      warm = sol.rc_star;
      warm_sigma = s;
      if (!sweeping) solution_json = solution_to_json(sol, prob, ctx.run_hash);
    }
  }
  write_text(ctx.out_prefix + "_comparison.csv", csv.str());
  if (!solution_json.empty()) write_text(ctx.out_prefix + "_solution.json", solution_json + "\n");
  if (!all_converged) {
    std::cerr << "at least one solve did not converge\n";
    return kExitSolver;
  }
  return 0;
}

// --- sensitivity ------------------------------------------------------------

int cmd_sensitivity(const CommandContext& ctx, const std::string& epsilons_spec) {
  const Scenario& sc = ctx.file.scenario;
  std::vector<double> epsilons{0.04, 0.02, 0.01, 0.005};
  if (!epsilons_spec.empty()) epsilons = parse_list(epsilons_spec);

  OptimizationProblem prob;
  OptimizationSolution sol;
  SensitivityData sd;
  try {
    prob = assemble_problem(sc, ctx.file.sigma0);
    sol = solve(prob, ctx.file.solver);
    if (!sol.converged) {
      std::cerr << "base solve did not converge (residual "
                << format_double(sol.kkt_residual_norm) << ")\n";
      return kExitSolver;
    }
    sd = assemble_sensitivity(sol, prob);
  } catch (const std::invalid_argument& err) {
    std::cerr << "validation failed: " << err.what() << "\n";
    return kExitValidation;
  } catch (const std::runtime_error& err) {
    std::cerr << "sensitivity failed: " << err.what() << "\n";
    return kExitSolver;
  }

  std::ostringstream csv;
  csv << csv_header(ctx.run_hash)
      << "epsilon,update_error_l2,update_error_linf,resolve_objective,update_objective\n";
  std::vector<std::pair<double, double>> loglog;
  for (const double eps : epsilons) {
    TrustVector sigma = ctx.file.sigma0;
    for (double& v : sigma.sigma) v = std::clamp(v + eps, 0.0, 1.0);
    const LinearUpdate upd = linear_update(sol.rc_star, sd.eta1, sigma, ctx.file.sigma0, prob);
    Scenario pert = sc;
    pert.sigma_schedule = {sigma};
    OptimizationSolution re = solve(assemble_problem(pert, sigma), ctx.file.solver);
    double l2 = 0.0, linf = 0.0;
    for (std::int32_t e = 0; e < prob.decision_dim; ++e) {
      const double d = upd.projected.value(e) - re.rc_star.value(e);
      l2 += d * d;
      linf = std::max(linf, std::abs(d));
    }
    l2 = std::sqrt(l2);
    if (eps > 0.0 && l2 > 0.0) loglog.emplace_back(std::log(eps), std::log(l2));
    Scenario eval = sc;
    eval.sigma_schedule = {sigma};
    const Trajectory traj = simulate_mixed(eval, upd.projected);
    csv << format_double(eps) << ',' << format_double(l2) << ',' << format_double(linf) << ','
        << format_double(re.objective) << ','
        << format_double(total_travel_time(traj, sc.step_hours) / sc.step_hours) << '\n';
  }
  write_text(ctx.out_prefix + "_decay.csv", csv.str());

  double slope = 0.0;
  if (loglog.size() >= 2) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (auto [x, y] : loglog) {
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    const double m = static_cast<double>(loglog.size());
    slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  }
  json summary;
  summary["schema_version"] = 1;
  summary["config_hash"] = ctx.run_hash;
  summary["loglog_slope"] = slope;
  summary["kkt_solve_residual"] = sd.solve_residual;
  write_text(ctx.out_prefix + "_summary.json", summary.dump(2) + "\n");
  write_text(ctx.out_prefix + "_sensitivity.json", sensitivity_to_json(sd, ctx.run_hash) + "\n");
  return 0;
}

// --- resilience -------------------------------------------------------------

int cmd_resilience(const CommandContext& ctx, const std::string& sweep_sigma, bool with_brute) {
  const Scenario& base = ctx.file.scenario;
  std::vector<double> sigmas{ctx.file.sigma0.sigma.front()};
  if (!sweep_sigma.empty()) sigmas = parse_sweep(sweep_sigma);

  json summary;
  summary["schema_version"] = 1;
  summary["config_hash"] = ctx.run_hash;
  json per_sigma = json::array();
  for (const double s : sigmas) {
    Scenario sc = base;
    const TrustVector sigma0 = TrustVector::constant(sc.num_links(), s);
    sc.sigma_schedule = {sigma0};
    OptimizationProblem prob;
    OptimizationSolution sol;
    try {
      prob = assemble_problem(sc, sigma0);
      sol = solve(prob, ctx.file.solver);
    } catch (const std::invalid_argument& err) {
      std::cerr << "validation failed: " << err.what() << "\n";
      return kExitValidation;
    } catch (const std::runtime_error& err) {
      std::cerr << "solve failed: " << err.what() << "\n";
      return kExitNumerical;
    }
    if (!sol.converged) {
      std::cerr << "solve did not converge at sigma0=" << format_double(s) << "\n";
      return kExitSolver;
    }
    Eigen::MatrixXd eta1 = Eigen::MatrixXd::Zero(prob.decision_dim, sc.num_links());
    bool eta1_fallback = false;
    try {
      eta1 = assemble_sensitivity(sol, prob).eta1;
    } catch (const std::runtime_error& err) {
      eta1_fallback = true;
      std::cerr << "sigma0=" << format_double(s)
                << ": sensitivity assumptions failed, using a zero response (" << err.what()
                << ")\n";
    }
    ResilienceReport report = resilience_lower_bound(sol, eta1, prob);
    if (with_brute) report.brute_force_margin = brute_force_margin(sol, eta1, prob);

    std::ostringstream csv;
    write_resilience_csv(csv, report, ctx.run_hash);
    write_text(ctx.out_prefix + "_resilience_sigma" + format_double(s) + ".csv", csv.str());

    json entry;
    entry["sigma0"] = s;
    entry["eta1_fallback"] = eta1_fallback;
    entry["network_resilience_bound"] =
        format_double(network_resilience(report.rho_lower_bound));
    if (report.brute_force_margin)
      entry["network_resilience_empirical"] =
          format_double(network_resilience(*report.brute_force_margin));
    per_sigma.push_back(entry);
  }
  summary["runs"] = per_sigma;
  write_text(ctx.out_prefix + "_summary.json", summary.dump(2) + "\n");
  return 0;
}

// --- realtime ---------------------------------------------------------------

std::vector<TrustVector> load_sigma_trace(const std::string& path, std::int32_t n,
                                          std::int32_t steps) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open sigma trace '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("empty sigma trace");
  std::vector<TrustVector> trace;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tok;
    std::vector<double> fields;
    while (std::getline(ss, tok, ',')) fields.push_back(std::stod(tok));
    if (fields.size() == 2) {
      trace.push_back(TrustVector::constant(n, fields[1]));
    } else if (static_cast<std::int32_t>(fields.size()) == n + 1) {
      trace.push_back(TrustVector{std::vector<double>(fields.begin() + 1, fields.end())});
    } else {
      throw std::invalid_argument("sigma trace rows need 'step,sigma' or 'step,sigma_1..sigma_n'");
    }
    check_trust(trace.back());
  }
  if (static_cast<std::int32_t>(trace.size()) < steps)
    throw std::invalid_argument("sigma trace shorter than the horizon");
  return trace;
}

int cmd_realtime(const CommandContext& ctx, const std::string& trace_path, double tc_hours) {
  const Scenario& sc = ctx.file.scenario;
  const std::int32_t n = sc.num_links();
  const std::int32_t h = sc.horizon;
  std::vector<TrustVector> trace;
  try {
    trace = load_sigma_trace(trace_path, n, h);
  } catch (const std::invalid_argument& err) {
    std::cerr << "trace error: " << err.what() << "\n";
    return kExitValidation;
  }
  if (tc_hours <= 0.0) {
    std::cerr << "update period must be positive\n";
    return kExitValidation;
  }
  const std::int32_t resolve_every =
      std::max<std::int32_t>(1, static_cast<std::int32_t>(std::llround(tc_hours / sc.step_hours)));

  auto solve_at = [&](const TrustVector& sigma) {
    Scenario s = sc;
    s.sigma_schedule = {sigma};
    OptimizationProblem prob = assemble_problem(s, sigma);
    OptimizationSolution sol = solve(prob, ctx.file.solver);
    return std::make_pair(std::move(prob), std::move(sol));
  };

  // Three closed loops over the same trust trace: intermittent re-solves
  // with first-order updates in between, an always-re-solve oracle, and a
  // hold-the-first-solution baseline.
  std::vector<std::string> modes(h);
  std::vector<RoutingMatrix> rc_loop, rc_oracle, rc_hold;
  rc_loop.reserve(h);
  rc_oracle.reserve(h);
  rc_hold.reserve(h);
  std::int32_t fallbacks = 0;
  try {
    auto [prob0, sol0] = solve_at(trace[0]);
    Eigen::MatrixXd eta1 = Eigen::MatrixXd::Zero(prob0.decision_dim, n);
    bool have_eta = false;
    try {
      eta1 = assemble_sensitivity(sol0, prob0).eta1;
      have_eta = true;
    } catch (const std::runtime_error&) {
      ++fallbacks;
    }
    RoutingMatrix snapshot_rc = sol0.rc_star;
    TrustVector snapshot_sigma = trace[0];
    OptimizationProblem snapshot_prob = prob0;

    for (std::int32_t k = 0; k < h; ++k) {
      if (k > 0 && k % resolve_every == 0) {
        try {
          auto [probk, solk] = solve_at(trace[k]);
          if (!solk.converged) throw std::runtime_error("re-solve did not converge");
          eta1 = assemble_sensitivity(solk, probk).eta1;
          have_eta = true;
          snapshot_rc = solk.rc_star;
          snapshot_sigma = trace[k];
          snapshot_prob = std::move(probk);
          modes[k] = "resolve";
        } catch (const std::runtime_error& err) {
          ++fallbacks;
          modes[k] = "hold";
          std::cerr << "step " << k << ": re-solve fell back to the last routing (" << err.what()
                    << ")\n";
        }
      }
      if (modes[k].empty()) modes[k] = k == 0 ? "resolve" : "linear";
      if (modes[k] == "linear" && have_eta) {
        rc_loop.push_back(
            linear_update(snapshot_rc, eta1, trace[k], snapshot_sigma, snapshot_prob).projected);
      } else {
        rc_loop.push_back(snapshot_rc);
      }
      // Oracle and hold arms.
      auto [probo, solo] = solve_at(trace[k]);
      rc_oracle.push_back(solo.rc_star);
      rc_hold.push_back(sol0.rc_star);
    }
  } catch (const std::invalid_argument& err) {
    std::cerr << "validation failed: " << err.what() << "\n";
    return kExitValidation;
  } catch (const std::runtime_error& err) {
    std::cerr << "realtime loop failed: " << err.what() << "\n";
    return kExitSolver;
  }

  auto rollout = [&](const std::vector<RoutingMatrix>& rc_seq) {
    std::vector<double> x = sc.x0;
    double total = 0.0;
    for (std::int32_t k = 0; k < h; ++k) {
      const RoutingMatrix R =
          compose_routing(trace[k], rc_seq[k], sc.selfish_routing(), sc.topology);
      x = step(x, R, sc.inflow_at(k), sc);
      for (double xi : x) total += xi;
    }
    return sc.step_hours * total;
  };

  double ttt_loop = 0.0, ttt_oracle = 0.0, ttt_hold = 0.0;
  try {
    ttt_loop = rollout(rc_loop);
    ttt_oracle = rollout(rc_oracle);
    ttt_hold = rollout(rc_hold);
  } catch (const std::runtime_error& err) {
    std::cerr << "rollout failed: " << err.what() << "\n";
    return kExitNumerical;
  }

  std::ostringstream csv;
  csv << csv_header(ctx.run_hash) << "step,time_hours,mode,sigma_mean\n";
  for (std::int32_t k = 0; k < h; ++k) {
    double mean = 0.0;
    for (double v : trace[k].sigma) mean += v;
    mean /= n;
    csv << k << ',' << format_double(k * sc.step_hours) << ',' << modes[k] << ','
        << format_double(mean) << '\n';
  }
  write_text(ctx.out_prefix + "_realtime.csv", csv.str());

  json summary;
  summary["schema_version"] = 1;
  summary["config_hash"] = ctx.run_hash;
  summary["update_period_hours"] = tc_hours;
  summary["resolve_every_steps"] = resolve_every;
  summary["ttt_loop_veh_hours"] = ttt_loop;
  summary["ttt_always_resolve_veh_hours"] = ttt_oracle;
  summary["ttt_hold_last_veh_hours"] = ttt_hold;
  summary["gap_vs_oracle_veh_hours"] = ttt_loop - ttt_oracle;
  summary["fallbacks"] = fallbacks;
  write_text(ctx.out_prefix + "_summary.json", summary.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trust-aware traffic routing toolkit"};
  app.require_subcommand(1);

  std::string scenario_path, out_prefix, sweep_sigma, sweep_horizon, epsilons, trace_path;
  bool with_brute = false;
  double tc_hours = 0.0;
  long seed = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--scenario", scenario_path, "scenario JSON file")->required();
    cmd->add_option("--out", out_prefix, "output path prefix")->required();
    cmd->add_option("--seed", seed, "seed recorded in the run hash");
  };

  CLI::App* sim = app.add_subcommand("simulate", "roll the dynamics under the selfish routing");
  add_common(sim);
  CLI::App* opt = app.add_subcommand("optimize", "solve for the optimal routing suggestions");
  add_common(opt);
  opt->add_option("--sweep-sigma", sweep_sigma, "trust sweep a:b:step");
  opt->add_option("--sweep-horizon", sweep_horizon, "comma-separated horizons");
  CLI::App* sen = app.add_subcommand("sensitivity", "validate the first-order update rule");
  add_common(sen);
  sen->add_option("--epsilons", epsilons, "comma-separated perturbation sizes");
  CLI::App* res = app.add_subcommand("resilience", "per-link margins of resilience");
  add_common(res);
  res->add_option("--sweep-sigma", sweep_sigma, "trust levels a:b:step");
  res->add_flag("--brute-force", with_brute, "also search the perturbation grid");
  CLI::App* rt = app.add_subcommand("realtime", "simulated re-solve plus linear-update loop");
  add_common(rt);
  rt->add_option("--trace", trace_path, "sigma trace CSV sampled at the step length")->required();
  rt->add_option("--tc", tc_hours, "re-solve period in hours")->required();

  CLI11_PARSE(app, argc, argv);

  ScenarioFile file;
  try {
    file = load_scenario(scenario_path);
  } catch (const ScenarioParseError& err) {
    std::cerr << "scenario error at " << err.field_path << ": " << err.what() << "\n";
    return kExitValidation;
  }

  std::string spec = app.get_subcommands().front()->get_name();
  spec += "|sweep_sigma=" + sweep_sigma + "|sweep_horizon=" + sweep_horizon +
          "|epsilons=" + epsilons + "|brute=" + std::to_string(with_brute) +
          "|tc=" + format_double(tc_hours) + "|seed=" + std::to_string(seed);
  CommandContext ctx{std::move(file), out_prefix, ""};
  ctx.run_hash = make_run_hash(ctx.file, spec);

  try {
    if (sim->parsed()) return cmd_simulate(ctx);
    if (opt->parsed()) return cmd_optimize(ctx, sweep_sigma, sweep_horizon);
    if (sen->parsed()) return cmd_sensitivity(ctx, epsilons);
    if (res->parsed()) return cmd_resilience(ctx, sweep_sigma, with_brute);
    if (rt->parsed()) return cmd_realtime(ctx, trace_path, tc_hours);
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitNumerical;
  }
  return 0;
}
