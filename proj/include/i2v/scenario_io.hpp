/*
  Scenario file ingestion and result emission.

  Scenarios are JSON (strict: unknown fields are rejected, diagnostics carry
  the offending field path). Result tables are CSV with a leading metadata
  comment line (# config_hash=... schema_version=...), a header row, '.'
  decimals and LF line endings; structured results are JSON. All emission is
  deterministic: identical inputs produce bit-identical bytes.
*/
#pragma once

#include <iosfwd>
#include <string>

#include "i2v/optimize.hpp"
#include "i2v/resilience.hpp"
#include "i2v/sensitivity.hpp"

namespace i2v {

struct ScenarioParseError : std::runtime_error {
  explicit ScenarioParseError(const std::string& field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_path(field) {}
  std::string field_path;
};

struct ScenarioFile {
  std::string name;
  Scenario scenario;
  TrustVector sigma0;
  SolverOptions solver;
  std::string canonical_json;  // normalized dump used for hashing
  std::string config_hash;     // FNV-1a 64 of canonical_json, hex
};

ScenarioFile load_scenario(const std::string& path);
ScenarioFile parse_scenario(const std::string& json_text);

/// Serialize back to the scenario schema (canonical field order).
std::string scenario_to_json(const ScenarioFile& file);

/// FNV-1a 64-bit, lowercase hex.
std::string fnv1a_hex(std::string_view bytes);

/// Shortest round-trip decimal formatting (std::to_chars).
std::string format_double(double v);

void write_trajectory_csv(std::ostream& os, const Trajectory& traj, double step_hours,
                          const std::string& config_hash);

void write_resilience_csv(std::ostream& os, const ResilienceReport& report,
                          const std::string& config_hash);

std::string solution_to_json(const OptimizationSolution& solution, const OptimizationProblem& problem,
                             const std::string& config_hash);

std::string sensitivity_to_json(const SensitivityData& data, const std::string& config_hash);

}  // namespace i2v
