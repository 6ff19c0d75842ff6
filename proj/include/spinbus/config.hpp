#pragma once

#include "spinbus/dynamics.hpp"
#include "spinbus/effective.hpp"
#include "spinbus/protocol.hpp"
#include "spinbus/spin_core.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace spinbus {

using Json = nlohmann::json;

const char* engine_version();

// Parses the TOML subset used by run configs into a JSON tree: tables,
// arrays of tables, strings, numbers (inf/nan included), booleans and
// arrays. Throws ParseError with the offending line.
Json parse_toml(std::string_view text, const std::string& source = "<config>");

// 64-bit FNV-1a, rendered as 16 hex digits.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

enum class Command { kSimulate, kEffective, kSweep, kFidelity, kMolecule };
std::string command_name(Command c);

enum class InitialState { kUp, kDown, kMixed };

// Overrides applied on top of the base sweep, one output file each.
struct SweepVariant {
  std::string name;
  std::optional<double> t1_rho;     // s
  std::optional<double> t_re;       // s
  std::optional<double> rabi;       // rad/s
  std::optional<double> target_t2;  // s, applied to the matched target nucleus
};

struct SweepConfig {
  SweepSpec spec;
  // Retune the target's a_par so that it sits on resonance with the sensor
  // (nucleus 0) before the sweep, separately for every variant.
  bool match_resonance = false;
  int target = 1;
  std::vector<SweepVariant> variants;
};

// Base sweep with the variant's overrides applied and, when requested, the
// target retuned onto resonance. `matched_a_par` receives the new a_par (rad/s).
SweepSpec resolve_variant(const SweepConfig& sweep, const SweepVariant& variant, double* matched_a_par = nullptr);

struct FidelityConfig {
  GateOptions options;
  bool depolarizing = false;  // score the fully depolarizing map instead of the simulated process
};

struct RunConfig {
  std::string source;
  Json document;
  std::string parameter_hash;

  std::optional<SpinRegister> reg;
  std::vector<InitialState> initial;  // per nucleus
  double t_re = 1e-3;
  double duration = 0.0;
  double output_interval = 0.0;
  std::optional<double> wahuha_tau;
  ExactModelOptions model;
  PropagationOptions propagation;
  EffectiveOptions effective;

  std::optional<SweepConfig> sweep;
  std::optional<FidelityConfig> fidelity;
  std::optional<MoleculeSpec> molecule;

  std::string output_prefix;
  std::optional<int> workers;

  // Throws SchemaError naming the first field the command needs but lacks.
  void require(Command command) const;
  SensingOptions sensing_options() const;
};

// Full schema check and unit conversion (Hz -> rad/s, degrees -> rad).
// Relative geometry paths resolve against `base_dir`.
RunConfig build_config(const Json& document, const std::string& base_dir = ".", const std::string& source = "<config>");
RunConfig load_config(const std::string& path);

Matrix initial_density(InitialState s);

}  // namespace spinbus
