#include "i2v/scenario_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <ostream>
#include <set>
#include <sstream>

namespace i2v {

using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.contains(it.key()))
      throw ScenarioParseError(where.empty() ? it.key() : where + "." + it.key(), "unknown field");
}

double get_number(const json& j, const std::string& where) {
  if (!j.is_number()) throw ScenarioParseError(where, "expected a number");
  return j.get<double>();
}

std::vector<double> broadcast_or_array(const json& j, std::int32_t n, const std::string& where) {
  if (j.is_number()) return std::vector<double>(n, j.get<double>());
  if (j.is_array()) {
    if (static_cast<std::int32_t>(j.size()) != n)
      throw ScenarioParseError(where, "expected " + std::to_string(n) + " entries, got " +
                                          std::to_string(j.size()));
    std::vector<double> out;
    out.reserve(n);
    for (const auto& v : j) out.push_back(get_number(v, where));
    return out;
  }
  throw ScenarioParseError(where, "expected a number or an array");
}

LinkClass parse_class(const std::string& s, const std::string& where) {
  if (s == "on_ramp") return LinkClass::OnRamp;
  if (s == "internal") return LinkClass::Internal;
  if (s == "off_ramp") return LinkClass::OffRamp;
  throw ScenarioParseError(where, "unknown link class '" + s + "'");
}

std::string class_name(LinkClass c) {
  switch (c) {
    case LinkClass::OnRamp: return "on_ramp";
    case LinkClass::Internal: return "internal";
    default: return "off_ramp";
  }
}

}  // namespace

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = digits[h & 0xF];
    h >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf);
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

ScenarioFile parse_scenario(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& err) {
    throw ScenarioParseError("(document)", err.what());
  }
  if (!root.is_object()) throw ScenarioParseError("(document)", "expected a JSON object");
  reject_unknown(root, {"schema_version", "name", "topology", "link_params", "inflow", "x0",
                        "sigma0", "sigma_schedule", "selfish", "horizon", "step_hours", "solver"},
                 "");
  if (!root.contains("schema_version") || root["schema_version"] != kSchemaVersion)
    throw ScenarioParseError("schema_version", "missing or unsupported (expected 1)");

  ScenarioFile file;
  file.name = root.value("name", "");

  // --- topology ---
  if (!root.contains("topology")) throw ScenarioParseError("topology", "missing");
  const json& topo_j = root["topology"];
  reject_unknown(topo_j, {"num_nodes", "links"}, "topology");
  if (!topo_j.contains("num_nodes") || !topo_j.contains("links"))
    throw ScenarioParseError("topology", "needs num_nodes and links");
  const std::int32_t num_nodes = topo_j["num_nodes"].get<std::int32_t>();
  const json& links_j = topo_j["links"];
  if (!links_j.is_array() || links_j.empty())
    throw ScenarioParseError("topology.links", "expected a nonempty array");
  const std::int32_t n = static_cast<std::int32_t>(links_j.size());
  std::vector<std::int32_t> from(n), to(n);
  std::vector<LinkClass> cls(n);
  std::vector<bool> seen(n, false);
  for (const auto& lj : links_j) {
    const std::string where = "topology.links[" + lj.value("id", json(0)).dump() + "]";
    reject_unknown(lj, {"id", "from", "to", "class"}, where);
    for (const char* key : {"id", "from", "to", "class"})
      if (!lj.contains(key)) throw ScenarioParseError(where, std::string("missing field ") + key);
    const std::int32_t id = lj["id"].get<std::int32_t>();
    if (id < 1 || id > n) throw ScenarioParseError(where, "link id out of range 1.." + std::to_string(n));
    if (seen[id - 1]) throw ScenarioParseError(where, "duplicate link id");
    seen[id - 1] = true;
    from[id - 1] = lj["from"].get<std::int32_t>();
    to[id - 1] = lj["to"].get<std::int32_t>();
    cls[id - 1] = parse_class(lj["class"].get<std::string>(), where + ".class");
  }
  Scenario& sc = file.scenario;
  try {
    sc.topology = make_topology(num_nodes, from, to, cls);
  } catch (const std::invalid_argument& err) {
    throw ScenarioParseError("topology", err.what());
  }

  // --- link params ---
  if (!root.contains("link_params")) throw ScenarioParseError("link_params", "missing");
  auto parse_params = [](const json& pj, const std::string& where) {
    reject_unknown(pj, {"jam_density", "length", "free_speed", "demand_shape"}, where);
    LinkParams p;
    p.jam_density = get_number(pj.at("jam_density"), where + ".jam_density");
    p.length = get_number(pj.at("length"), where + ".length");
    p.free_speed = get_number(pj.at("free_speed"), where + ".free_speed");
    p.demand_shape = get_number(pj.at("demand_shape"), where + ".demand_shape");
    return p;
  };
  const json& params_j = root["link_params"];
  if (params_j.is_object()) {
    sc.params.assign(n, parse_params(params_j, "link_params"));
  } else if (params_j.is_array() && static_cast<std::int32_t>(params_j.size()) == n) {
    for (std::int32_t i = 0; i < n; ++i)
      sc.params.push_back(parse_params(params_j[i], "link_params[" + std::to_string(i + 1) + "]"));
  } else {
    throw ScenarioParseError("link_params", "expected an object or an array of length n");
  }

  // --- horizon / step (needed before schedules) ---
  if (!root.contains("horizon")) throw ScenarioParseError("horizon", "missing");
  sc.horizon = root["horizon"].get<std::int32_t>();
  if (!root.contains("step_hours")) throw ScenarioParseError("step_hours", "missing");
  sc.step_hours = get_number(root["step_hours"], "step_hours");

  // --- inflow ---
  if (!root.contains("inflow")) throw ScenarioParseError("inflow", "missing");
  const json& inflow_j = root["inflow"];
  reject_unknown(inflow_j, {"units", "constant", "schedule"}, "inflow");
  double unit_scale = 1.0;
  if (inflow_j.contains("units")) {
    const std::string units = inflow_j["units"].get<std::string>();
    if (units == "veh_per_hour")
      unit_scale = 1.0;
    else if (units == "veh_per_min")
      unit_scale = 60.0;
    else
      throw ScenarioParseError("inflow.units", "unknown units '" + units + "'");
  }
  auto parse_row = [&](const json& row_j, const std::string& where) {
    std::vector<double> row(n, 0.0);
    if (!row_j.is_object()) throw ScenarioParseError(where, "expected an object of link-id keys");
    for (auto it = row_j.begin(); it != row_j.end(); ++it) {
      std::int32_t id = 0;
      const auto res = std::from_chars(it.key().data(), it.key().data() + it.key().size(), id);
      if (res.ec != std::errc() || id < 1 || id > n)
        throw ScenarioParseError(where, "bad link id key '" + it.key() + "'");
      row[id - 1] = unit_scale * get_number(it.value(), where + "." + it.key());
    }
    return row;
  };
  if (inflow_j.contains("constant") == inflow_j.contains("schedule"))
    throw ScenarioParseError("inflow", "needs exactly one of constant or schedule");
  if (inflow_j.contains("constant")) {
    sc.inflow = {parse_row(inflow_j["constant"], "inflow.constant")};
  } else {
    const json& sched = inflow_j["schedule"];
    if (!sched.is_array() || static_cast<std::int32_t>(sched.size()) != sc.horizon)
      throw ScenarioParseError("inflow.schedule", "expected horizon rows");
    for (std::size_t k = 0; k < sched.size(); ++k)
      sc.inflow.push_back(parse_row(sched[k], "inflow.schedule[" + std::to_string(k) + "]"));
  }

  // --- x0, sigma0 ---
  if (!root.contains("x0")) throw ScenarioParseError("x0", "missing");
  sc.x0 = broadcast_or_array(root["x0"], n, "x0");
  if (!root.contains("sigma0")) throw ScenarioParseError("sigma0", "missing");
  file.sigma0 = TrustVector{broadcast_or_array(root["sigma0"], n, "sigma0")};
  if (root.contains("sigma_schedule")) {
    const json& ss = root["sigma_schedule"];
    if (!ss.is_array() || static_cast<std::int32_t>(ss.size()) != sc.horizon)
      throw ScenarioParseError("sigma_schedule", "expected horizon entries");
    for (std::size_t k = 0; k < ss.size(); ++k)
      sc.sigma_schedule.push_back(
          TrustVector{broadcast_or_array(ss[k], n, "sigma_schedule[" + std::to_string(k) + "]")});
  } else {
    sc.sigma_schedule = {file.sigma0};
  }

  // --- selfish routing ---
  if (!root.contains("selfish")) throw ScenarioParseError("selfish", "missing");
  const json& selfish_j = root["selfish"];
  if (selfish_j.is_string() && selfish_j.get<std::string>() == "uniform") {
    try {
      sc.selfish = build_uniform_selfish(sc.topology);
    } catch (const std::invalid_argument& err) {
      throw ScenarioParseError("selfish", err.what());
    }
  } else if (selfish_j.is_object()) {
    reject_unknown(selfish_j, {"entries"}, "selfish");
    if (!selfish_j.contains("entries") || !selfish_j["entries"].is_array())
      throw ScenarioParseError("selfish.entries", "expected an array of [into, from, value]");
    RoutingPattern pat(sc.topology);
    std::vector<double> values(pat.nnz(), 0.0);
    for (const auto& ej : selfish_j["entries"]) {
      if (!ej.is_array() || ej.size() != 3)
        throw ScenarioParseError("selfish.entries", "each entry must be [into, from, value]");
      const std::int32_t i = ej[0].get<std::int32_t>() - 1;
      const std::int32_t j = ej[1].get<std::int32_t>() - 1;
      const std::int32_t e = pat.find(i, j);
      if (e < 0)
        throw ScenarioParseError("selfish.entries",
                                 "(" + std::to_string(i + 1) + "," + std::to_string(j + 1) +
                                     ") is not on the sparsity pattern");
      values[e] = get_number(ej[2], "selfish.entries");
    }
    try {
      sc.selfish = RoutingMatrix(std::move(pat), std::move(values), sc.topology);
    } catch (const std::invalid_argument& err) {
      throw ScenarioParseError("selfish.entries", err.what());
    }
  } else {
    throw ScenarioParseError("selfish", "expected \"uniform\" or an entries object");
  }

  // --- solver options ---
  if (root.contains("solver")) {
    const json& so = root["solver"];
    reject_unknown(so, {"max_iter", "kkt_tol", "max_outer", "penalty_init", "penalty_growth",
                        "penalty_max", "polish_iters", "soft_min_tau", "inner_tol"},
                   "solver");
    if (so.contains("max_iter")) file.solver.max_iter = so["max_iter"].get<std::int32_t>();
    if (so.contains("kkt_tol")) file.solver.kkt_tol = get_number(so["kkt_tol"], "solver.kkt_tol");
    if (so.contains("max_outer")) file.solver.max_outer = so["max_outer"].get<std::int32_t>();
    if (so.contains("penalty_init")) file.solver.penalty_init = get_number(so["penalty_init"], "solver.penalty_init");
    if (so.contains("penalty_growth")) file.solver.penalty_growth = get_number(so["penalty_growth"], "solver.penalty_growth");
    if (so.contains("penalty_max")) file.solver.penalty_max = get_number(so["penalty_max"], "solver.penalty_max");
    if (so.contains("polish_iters")) file.solver.polish_iters = so["polish_iters"].get<std::int32_t>();
    if (so.contains("soft_min_tau")) file.solver.soft_min_tau = get_number(so["soft_min_tau"], "solver.soft_min_tau");
    if (so.contains("inner_tol")) file.solver.inner_tol = get_number(so["inner_tol"], "solver.inner_tol");
  }

  try {
    sc.validate();
    check_trust(file.sigma0);
  } catch (const std::invalid_argument& err) {
    throw ScenarioParseError("(scenario)", err.what());
  }

  file.canonical_json = scenario_to_json(file);
  file.config_hash = fnv1a_hex(file.canonical_json);
  return file;
}

ScenarioFile load_scenario(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ScenarioParseError("(file)", "cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_scenario(buf.str());
}

std::string scenario_to_json(const ScenarioFile& file) {
  const Scenario& sc = file.scenario;
  const std::int32_t n = sc.num_links();
  json root;
  root["schema_version"] = kSchemaVersion;
  root["name"] = file.name;
  json links = json::array();
  // Endpoints are not stored on the topology; emit pairs instead, which is
  // what the dynamics consume. Loading this form is supported via classes
  // plus pairs being recoverable from the dump (hash input only).
  json topo;
  topo["num_nodes"] = sc.topology.num_nodes;
  json cls = json::array();
  for (std::int32_t i = 0; i < n; ++i) cls.push_back(class_name(sc.topology.link_class[i]));
  topo["classes"] = cls;
  json pairs = json::array();
  for (auto [i, j] : sc.topology.pairs) pairs.push_back(json::array({i + 1, j + 1}));
  topo["pairs"] = pairs;
  root["topology"] = topo;
  json params = json::array();
  for (const LinkParams& p : sc.params)
    params.push_back({{"jam_density", p.jam_density},
                      {"length", p.length},
                      {"free_speed", p.free_speed},
                      {"demand_shape", p.demand_shape}});
  root["link_params"] = params;
  json inflow = json::array();
  for (const auto& row : sc.inflow) inflow.push_back(row);
  root["inflow"] = inflow;
  root["x0"] = sc.x0;
  root["sigma0"] = file.sigma0.sigma;
  json sigmas = json::array();
  for (const TrustVector& s : sc.sigma_schedule) sigmas.push_back(s.sigma);
  root["sigma_schedule"] = sigmas;
  if (sc.selfish) {
    json entries = json::array();
    const RoutingMatrix& rs = *sc.selfish;
    for (std::int32_t e = 0; e < rs.nnz(); ++e)
      entries.push_back(json::array(
          {rs.pattern().row(e) + 1, rs.pattern().col(e) + 1, rs.value(e)}));
    root["selfish"] = {{"entries", entries}};
  }
  root["horizon"] = sc.horizon;
  root["step_hours"] = sc.step_hours;
  root["solver"] = {{"max_iter", file.solver.max_iter},
                    {"kkt_tol", file.solver.kkt_tol},
                    {"soft_min_tau", file.solver.soft_min_tau}};
  return root.dump();
}

void write_trajectory_csv(std::ostream& os, const Trajectory& traj, double step_hours,
                          const std::string& config_hash) {
  os << "# config_hash=" << config_hash << " schema_version=" << kSchemaVersion << "\n";
  os << "step,time_hours,link_id,density_veh,outflow_veh_per_hour\n";
  const std::int32_t h = traj.horizon();
  for (std::int32_t k = 0; k < static_cast<std::int32_t>(traj.states.size()); ++k) {
    const auto& x = traj.states[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      os << k << ',' << format_double(k * step_hours) << ',' << (i + 1) << ','
         << format_double(x[i]) << ',';
      if (k < h) os << format_double(traj.outflows[k][i]);
      os << '\n';
    }
  }
}

void write_resilience_csv(std::ostream& os, const ResilienceReport& report,
                          const std::string& config_hash) {
  os << "# config_hash=" << config_hash << " schema_version=" << kSchemaVersion << "\n";
  os << "link_id,residual_capacity,rho_lower_bound,brute_force_margin\n";
  for (std::size_t i = 0; i < report.residual_capacity.size(); ++i) {
    os << (i + 1) << ',' << format_double(report.residual_capacity[i]) << ','
       << format_double(report.rho_lower_bound[i]) << ',';
    if (report.brute_force_margin) os << format_double((*report.brute_force_margin)[i]);
    os << '\n';
  }
}

std::string solution_to_json(const OptimizationSolution& solution, const OptimizationProblem& problem,
                             const std::string& config_hash) {
  json root;
  root["schema_version"] = kSchemaVersion;
  root["config_hash"] = config_hash;
  json entries = json::array();
  const RoutingMatrix& rc = solution.rc_star;
  for (std::int32_t e = 0; e < rc.nnz(); ++e)
    entries.push_back(json::array({rc.pattern().row(e) + 1, rc.pattern().col(e) + 1, rc.value(e)}));
  root["rc_entries"] = entries;
  root["objective"] = solution.objective;
  root["total_travel_time_veh_hours"] = solution.total_travel_time;
  root["kkt_residual_norm"] = solution.kkt_residual_norm;
  root["iterations"] = solution.iterations;
  root["converged"] = solution.converged;
  root["jam_feasible"] = solution.jam_feasible;
  if (!solution.notes.empty()) root["notes"] = solution.notes;
  root["multipliers_eq"] =
      std::vector<double>(solution.multipliers_eq.data(),
                          solution.multipliers_eq.data() + solution.multipliers_eq.size());
  root["multipliers_ineq"] =
      std::vector<double>(solution.multipliers_ineq.data(),
                          solution.multipliers_ineq.data() + solution.multipliers_ineq.size());
  root["decision_dim"] = problem.decision_dim;
  root["num_eq"] = problem.num_eq;
  root["num_ineq"] = problem.num_ineq;
  return root.dump(2);
}

std::string sensitivity_to_json(const SensitivityData& data, const std::string& config_hash) {
  auto dense = [](const Eigen::MatrixXd& m) {
    json out;
    out["rows"] = m.rows();
    out["cols"] = m.cols();
    std::vector<double> v;
    v.reserve(m.size());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
    out["data_row_major"] = v;
    return out;
  };
  json root;
  root["schema_version"] = kSchemaVersion;
  root["config_hash"] = config_hash;
  root["M"] = dense(data.M);
  root["N"] = dense(data.N);
  root["eta1"] = dense(data.eta1);
  root["eta2"] = dense(data.eta2);
  root["eta3"] = dense(data.eta3);
  root["solve_residual"] = data.solve_residual;
  return root.dump(2);
}

}  // namespace i2v
