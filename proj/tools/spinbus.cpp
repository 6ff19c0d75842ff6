#include "spinbus/config.hpp"
#include "spinbus/constants.hpp"
#include "spinbus/dynamics.hpp"
#include "spinbus/effective.hpp"
#include "spinbus/error.hpp"
#include "spinbus/protocol.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <new>
#include <sstream>
#include <thread>

using namespace spinbus;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kSchema = 2, kPhysics = 3, kResource = 4 };

double to_hz(double w) { return w / constants::kTwoPi + 0.0; }  // no "-0" in reports

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// NaN and infinities are not representable in JSON; they become null.
Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

struct Run {
  RunConfig cfg;
  Command command = Command::kSimulate;
  std::string prefix;
  int workers = 1;
  bool verbose = false;
  Json results = Json::object();
  std::vector<std::string> outputs;
  std::vector<std::string> warnings;
  bool partial_failure = false;

  void log(const std::string& msg) const {
    if (verbose) std::cerr << "[spinbus] " << msg << '\n';
  }

  void write(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ResourceError("cannot write '" + path + "'");
    out << content;
    if (!out) throw ResourceError("write to '" + path + "' failed");
    outputs.push_back(path);
    log("wrote " + path);
  }

  void warn(const std::string& w) {
    warnings.push_back(w);
    std::cerr << "warning: " << w << '\n';
  }
};

std::vector<std::pair<std::string, std::string>> csv_metadata(const Run& run) {
  return {{"engine", std::string("spinbus ") + engine_version()},
          {"command", command_name(run.command)},
          {"parameter_hash", run.cfg.parameter_hash}};
}

std::string grid_description(const std::vector<double>& grid, const std::string& unit) {
  std::ostringstream os;
  os << std::setprecision(17) << grid.size() << " points from " << grid.front() << " to " << grid.back() << ' ' << unit;
  return os.str();
}

Matrix initial_state(const RunConfig& cfg, std::size_t nuclei, bool with_nv) {
  Matrix rho = with_nv ? Matrix(nv_reset_state()) : Matrix::Identity(1, 1);
  for (std::size_t k = 0; k < nuclei; ++k) rho = kron(rho, initial_density(cfg.initial[k]));
  return rho;
}

std::vector<Observable> population_observables(const SpinRegister& reg, const SystemLayout& layout) {
  std::vector<Observable> obs;
  for (std::size_t k = 0; k < reg.nuclei.size(); ++k) {
    obs.push_back({"p_up_" + reg.nuclei[k].label, nuclear_operator(layout, static_cast<int>(k), spin_up_state())});
  }
  if (reg.nuclei.size() >= 2) {
    const Matrix up = spin_up_state(), down = spin_down_state();
    obs.push_back({"p_du", Matrix(nuclear_operator(layout, 0, down) * nuclear_operator(layout, 1, up))});
    obs.push_back({"p_ud", Matrix(nuclear_operator(layout, 0, up) * nuclear_operator(layout, 1, down))});
  }
  return obs;
}

void add_validity(Run& run, const SpinRegister& reg, double t_re) {
  for (const auto& w : validity_warnings(reg, relaxation_rate(t_re, reg.t1_rho))) run.warn(w);
}

// ---- subcommands ----------------------------------------------------------------

void cmd_simulate(Run& run) {
  const auto& cfg = run.cfg;
  const SpinRegister& reg = *cfg.reg;
  add_validity(run, reg, cfg.t_re);
  const LindbladModel model = build_exact_model(reg, cfg.model);
  ControlSchedule schedule;
  schedule.duration = cfg.duration;
  schedule.reset_period = cfg.t_re;
  if (cfg.wahuha_tau) {
    std::vector<int> all(reg.nuclei.size());
    for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
    schedule.pulses = to_lab_frame(wahuha_schedule(cfg.duration, *cfg.wahuha_tau, all), reg.nuclei[0].larmor);
  }
  PropagationOptions popts = cfg.propagation;
  popts.output_interval = cfg.output_interval;
  Propagator prop(model, popts);
  run.log("propagating " + std::to_string(model.layout.dimension()) + "-dimensional model");
  const auto traj =
      prop.run(initial_state(cfg, reg.nuclei.size(), true), schedule, population_observables(reg, model.layout));
  std::ostringstream csv;
  traj.write_csv(csv);
  run.write(run.prefix + ".csv", csv.str());
  run.results = {{"samples", traj.times.size()},
                 {"total_steps", traj.total_steps},
                 {"max_trace_error", traj.max_trace_error},
                 {"max_hermiticity_error", traj.max_hermiticity_error},
                 {"min_eigenvalue", traj.min_eigenvalue}};
}

void cmd_effective(Run& run) {
  const auto& cfg = run.cfg;
  SpinRegister pair = *cfg.reg;
  if (pair.nuclei.size() > 2) {
    run.warn("effective model uses the first two nuclei; the others are ignored");
    pair.nuclei.resize(2);
  }
  EffectiveParams params;
  const LindbladModel model = build_effective_liouvillian(pair, cfg.t_re, &params, cfg.effective);
  for (const auto& w : params.warnings) run.warn(w);
  add_validity(run, pair, cfg.t_re);

  std::ostringstream report;
  report << format_report(params, pair);
  report << std::setprecision(10) << "p_a_wo_hz = " << to_hz(params.p_a_wo()) << '\n'
         << "predicted_transfer_time_s = " << params.transfer_time() << '\n';
  std::cout << report.str();
  run.write(run.prefix + "_report.txt", report.str());

  ControlSchedule schedule;
  schedule.duration = cfg.duration;
  PropagationOptions popts = cfg.propagation;
  popts.output_interval = cfg.output_interval;
  const auto traj = propagate(initial_state(cfg, 2, false), model, schedule,
                              population_observables(pair, model.layout), popts);
  std::ostringstream csv;
  traj.write_csv(csv);
  run.write(run.prefix + "_effective.csv", csv.str());
  run.results = {{"p", params.polarization.p},
                 {"gamma_n", params.gamma_n},
                 {"a_wo_hz", to_hz(params.a_wo)},
                 {"p_a_wo_hz", to_hz(params.p_a_wo())},
                 {"transfer_time_s", number(params.transfer_time())}};
}

void cmd_sweep(Run& run) {
  const auto& cfg = run.cfg;
  const SweepConfig& sweep = *cfg.sweep;
  std::vector<SweepVariant> variants = sweep.variants;
  if (variants.empty()) variants.push_back({});
  Json summary = Json::array();
  for (const auto& v : variants) {
    double a = 0.0;
    const SweepSpec spec = resolve_variant(sweep, v, &a);
    auto metadata = csv_metadata(run);
    if (!v.name.empty()) metadata.emplace_back("variant", v.name);
    if (sweep.match_resonance) {
      std::ostringstream os;
      os << std::setprecision(17) << to_hz(a);
      metadata.emplace_back("matched_a_par_hz", os.str());
    }
    metadata.emplace_back("grid", grid_description(spec.grid, display_unit(spec.parameter)));
    add_validity(run, spec.base, spec.sensing.t_re);

    run.log("sweep " + (v.name.empty() ? std::string("(base)") : v.name) + ": " + std::to_string(spec.grid.size()) +
            " points on " + std::to_string(run.workers) + " worker(s)");
    SweepResult r = spectrum_sweep(spec, run.workers);
    r.metadata = metadata;
    std::ostringstream csv;
    r.write_csv(csv);
    const std::string path = run.prefix + (v.name.empty() ? "" : "_" + v.name) + ".csv";
    run.write(path, csv.str());

    Json entry = {{"variant", v.name}, {"file", path}, {"failed_points", Json::array()}};
    for (std::size_t k = 0; k < r.signal.size(); ++k) {
      if (std::isnan(r.signal[k])) {
        entry["failed_points"].push_back({{"index", k}, {"diagnostic", r.diagnostics[k]}});
        run.partial_failure = true;
      }
    }
    if (r.ok() && r.grid.size() >= 3) {
      const auto dip = analyze_dip(r.grid, r.signal);
      entry["dip"] = {{"center", dip.center}, {"depth", dip.depth}, {"fwhm", number(dip.fwhm)}};
    }
    summary.push_back(entry);
  }
  run.results = {{"sweeps", summary}};
}

void cmd_fidelity(Run& run) {
  const auto& cfg = run.cfg;
  const SpinRegister& reg = *cfg.reg;
  const FidelityConfig& fc = *cfg.fidelity;
  add_validity(run, reg, cfg.t_re);
  std::ostringstream report;
  report << std::setprecision(10);
  if (fc.depolarizing) {
    const auto params = effective_params(reg, cfg.t_re);
    const double t = fc.options.gate_time.value_or(params.transfer_time());
    const Matrix target = std::isfinite(t) ? flip_flop_unitary(params.flip_flop, t) : Matrix(Matrix::Identity(4, 4));
    Matrix trace_row = Matrix::Zero(1, 16);
    for (int k = 0; k < 4; ++k) trace_row(0, k * 4 + k) = 1.0;
    const Matrix rho = Matrix::Identity(4, 4) / 4.0;
    const Matrix channel = Eigen::Map<const Matrix>(rho.data(), 16, 1) * trace_row;
    const double f = average_gate_fidelity(channel, target);
    report << "channel = depolarizing\naverage_fidelity = " << f << '\n';
    run.results = {{"channel", "depolarizing"}, {"average_fidelity", f}};
  } else {
    run.log("extracting the two-nucleus process map");
    const auto r = run_gate_experiment(reg, fc.options);
    for (const auto& w : r.params.warnings) run.warn(w);
    std::ostringstream csv;
    r.trajectory.write_csv(csv);
    run.write(run.prefix + ".csv", csv.str());
    report << "channel = simulated\n"
           << "gate_time_s = " << r.gate_time << '\n'
           << "flip_flop_hz = " << to_hz(r.params.flip_flop) << '\n'
           << "average_fidelity = " << r.fidelity << '\n'
           << "effective_model_fidelity = " << r.effective_fidelity << '\n'
           << "trace_preservation_error = " << r.trace_preservation_error << '\n';
    run.results = {{"channel", "simulated"},
                   {"gate_time_s", r.gate_time},
                   {"average_fidelity", r.fidelity},
                   {"effective_model_fidelity", r.effective_fidelity},
                   {"trace_preservation_error", r.trace_preservation_error}};
  }
  std::cout << report.str();
  run.write(run.prefix + "_fidelity.txt", report.str());
}

void cmd_molecule(Run& run) {
  const MoleculeSpec& spec = *run.cfg.molecule;
  run.log("molecule sweep: " + std::to_string(spec.rabi_grid_hz.size()) + " Rabi points");
  MoleculeResult r = molecule_experiment(spec, run.workers);
  const std::string grid = grid_description(spec.rabi_grid_hz, "Hz");

  auto emit = [&](SweepResult& s, const std::string& path, const std::string& target) {
    s.metadata = csv_metadata(run);
    s.metadata.emplace_back("spectrum", target);
    s.metadata.emplace_back("grid", grid);
    std::ostringstream csv;
    s.write_csv(csv);
    run.write(path, csv.str());
    for (std::size_t k = 0; k < s.signal.size(); ++k) {
      if (std::isnan(s.signal[k])) run.partial_failure = true;
    }
  };
  emit(r.total, run.prefix + ".csv", "total");
  Json targets = Json::array();
  for (std::size_t t = 0; t < r.per_target.size(); ++t) {
    const std::string path = run.prefix + "_target" + std::to_string(t + 1) + ".csv";
    emit(r.per_target[t], path, r.target_labels[t]);
    Json dips = Json::array();
    for (auto i : find_dips(r.per_target[t].signal, 0.01)) dips.push_back(spec.rabi_grid_hz[i]);
    targets.push_back({{"label", r.target_labels[t]},
                       {"file", path},
                       {"predicted_rabi_hz", number(to_hz(r.predicted_rabi[t]))},
                       {"p_a_wo_hz", to_hz(r.p_a_wo[t])},
                       {"dips_hz", dips}});
  }
  Json dips = Json::array();
  for (auto i : find_dips(r.total.signal, 0.01)) dips.push_back(spec.rabi_grid_hz[i]);
  run.results = {{"total_dips_hz", dips}, {"targets", targets}};
}

int resolve_workers(std::optional<int> flag, const RunConfig& cfg) {
  if (flag) {
    if (*flag < 1) throw SchemaError("--workers", "must be at least 1");
    return *flag;
  }
  if (const char* env = std::getenv("SPINBUS_WORKERS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1 || v > 4096) throw SchemaError("SPINBUS_WORKERS", "must be a positive integer");
    return static_cast<int>(v);
  }
  if (cfg.workers) return *cfg.workers;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spinbus: NV-mediated nuclear spin coupling simulator"};
  app.set_version_flag("--version", std::string("spinbus ") + engine_version());
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out_prefix;
  std::optional<int> workers;
  bool verbose = false;
  app.add_option("--config", config_path, "Run configuration (TOML)")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out_prefix, "Output path prefix (default: [output].prefix or the config name)");
  app.add_option("--workers", workers, "Worker threads for sweeps (fallback: SPINBUS_WORKERS)");
  app.add_flag("--verbose,-v", verbose, "Progress on stderr");

  const std::pair<const char*, Command> commands[] = {
      {"simulate", Command::kSimulate}, {"effective", Command::kEffective}, {"sweep", Command::kSweep},
      {"fidelity", Command::kFidelity}, {"molecule", Command::kMolecule}};
  const char* help[] = {"Exact dissipative dynamics with NV resets; writes populations",
                        "Effective two-nucleus parameters and trajectory",
                        "Sensing spectrum over one parameter grid",
                        "Average gate fidelity of the mediated flip-flop",
                        "Total and per-target spectra of a molecule"};
  for (std::size_t k = 0; k < 5; ++k) app.add_subcommand(commands[k].first, help[k]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kOther;
  }

  Run run;
  run.verbose = verbose;
  for (const auto& [name, cmd] : commands) {
    if (app.got_subcommand(name)) run.command = cmd;
  }
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    run.cfg = load_config(config_path);
    run.cfg.require(run.command);
    run.workers = resolve_workers(workers, run.cfg);
    run.prefix = !out_prefix.empty()          ? out_prefix
                 : !run.cfg.output_prefix.empty() ? run.cfg.output_prefix
                                                   : fs::path(config_path).stem().string();
    if (const auto dir = fs::path(run.prefix).parent_path(); !dir.empty()) {
      std::error_code ec;
      fs::create_directories(dir, ec);
      if (ec) throw ResourceError("cannot create output directory '" + dir.string() + "': " + ec.message());
    }
    run.log("config " + config_path + " (hash " + run.cfg.parameter_hash + ")");

    switch (run.command) {
      case Command::kSimulate: cmd_simulate(run); break;
      case Command::kEffective: cmd_effective(run); break;
      case Command::kSweep: cmd_sweep(run); break;
      case Command::kFidelity: cmd_fidelity(run); break;
      case Command::kMolecule: cmd_molecule(run); break;
    }

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const Json sidecar = {{"engine", "spinbus"},
                          {"version", engine_version()},
                          {"command", command_name(run.command)},
                          {"config", config_path},
                          {"parameter_hash", run.cfg.parameter_hash},
                          {"workers", run.workers},
                          {"started_utc", started},
                          {"finished_utc", utc_now()},
                          {"wall_seconds", wall},
                          {"outputs", run.outputs},
                          {"warnings", run.warnings},
                          {"results", run.results}};
    std::ofstream side(run.prefix + ".json");
    if (!side) throw ResourceError("cannot write '" + run.prefix + ".json'");
    side << sidecar.dump(2) << '\n';
    if (run.partial_failure) {
      std::cerr << "error: some grid points failed; see the CSV comments and " << run.prefix << ".json\n";
      return kPhysics;
    }
    return kOk;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << '\n';
    return kSchema;
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kSchema;
  } catch (const ResourceError& e) {
    std::cerr << "resource error: " << e.what() << '\n';
    return kResource;
  } catch (const std::bad_alloc&) {
    std::cerr << "resource error: out of memory\n";
    return kResource;
  } catch (const Error& e) {
    std::cerr << "physics error: " << e.what() << '\n';
    return kPhysics;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}
