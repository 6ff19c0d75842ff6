#pragma once

#include "spinbus/dynamics.hpp"
#include "spinbus/effective.hpp"
#include "spinbus/spin_core.hpp"

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace spinbus {

// ---- gate experiments -------------------------------------------------------

// Column-stacked superoperator of U . U^dagger.
Matrix unitary_channel(const Matrix& u);

// F_avg = (d F_e + 1) / (d + 1), F_e = Tr(S_U^dagger S) / d^2.
// Throws ValidationError when the channel is not trace preserving to 1e-6.
double average_gate_fidelity(const Matrix& channel, const Matrix& target);

// exp(-i J t (I+_1 I-_2 + I-_1 I+_2)) on two nuclei.
Matrix flip_flop_unitary(double coupling, double t);

struct GateOptions {
  double t_re = 1e-3;
  std::optional<double> duration;  // trajectory length; defaults to the gate time
  std::optional<double> gate_time;  // defaults to pi / (2 |flip_flop|)
  double output_interval = 0.5e-3;
  ExactModelOptions model;
  PropagationOptions propagation;
};

struct GateResult {
  EffectiveParams params;
  double gate_time = 0.0;
  Trajectory trajectory;  // populations of nuclei 0 and 1, later nuclei traced out
  Matrix process;         // 16 x 16 map on nuclei 0 and 1, local Z frame removed
  Matrix target;          // flip-flop unitary at the gate time
  double fidelity = 0.0;
  double trace_preservation_error = 0.0;
  // Same construction on the two-nucleus effective Liouvillian, for comparison.
  double effective_fidelity = 0.0;
};

// Nuclei 0 and 1 form the gate; nucleus 2 (if present) starts in |up>.
// The trajectory starts from |down, up>.
GateResult run_gate_experiment(const SpinRegister& reg, const GateOptions& options = {});

// ---- WAHUHA -----------------------------------------------------------------

// (tau, X, tau, -Y, 2 tau, Y, tau, -X, tau) repeated; pulse axes in the frame
// rotating at the nuclear reference frequency. Throws InputError unless
// total / (6 tau) is an integer.
std::vector<PulseEvent> wahuha_schedule(double total, double tau, const std::vector<int>& targets);

// Toggling-frame average of Iz over [0, total] for a pulse list on one spin:
// sum_k tau_k R_k^T z / total. Length 1/sqrt(3) for whole WAHUHA cycles.
Vec3 average_zeeman_axis(const std::vector<PulseEvent>& pulses, double total);

// Lab-frame copy of rotating-frame pulses: each axis is turned about z by
// reference * time.
std::vector<PulseEvent> to_lab_frame(std::vector<PulseEvent> pulses, double reference);

// ---- sensing ----------------------------------------------------------------

enum class SensingObservable {
  kSensorSurvival,  // sensor prepared down, targets mixed, P(sensor down) at T
  kPairPopulation,  // nuclei 0,1 prepared |down, up>, rest up, P(|down, up>) at T
};

struct SensingOptions {
  double duration = 0.0;  // T, s
  double t_re = 1e-3;
  std::optional<double> wahuha_tau;
  SensingObservable observable = SensingObservable::kSensorSurvival;
  ExactModelOptions model;
  PropagationOptions propagation;
};

struct SensingOutcome {
  double signal = 0.0;
  Vec3 axis = Vec3::UnitZ();  // rotating-frame quantisation axis of the readout
  std::vector<std::string> warnings;
};

// Ideal preparation, exact dissipative evolution with resets (and WAHUHA when
// requested), ideal readout. The sensor is nucleus 0.
SensingOutcome sensing_protocol(const SpinRegister& reg, const SensingOptions& options);

// ---- sweeps -----------------------------------------------------------------

enum class SweepParameter { kRabiFrequency, kDeltaDetuning, kFieldTheta, kFieldPhi, kTRe, kEvolutionTime };

std::string parameter_name(SweepParameter p);
SweepParameter parse_parameter(const std::string& name);
// Internal value -> value written to CSV (Hz, degrees or seconds).
double display_value(SweepParameter p, double v);
double internal_value(SweepParameter p, double display);
std::string display_unit(SweepParameter p);

struct SweepSpec {
  SweepParameter parameter = SweepParameter::kRabiFrequency;
  std::vector<double> grid;  // display units (Hz, deg, s), written to the CSV as given
  SpinRegister base;
  SensingOptions sensing;
  // Nuclei whose a_par is shifted by -2 delta for kDeltaDetuning.
  std::vector<int> detuned = {1};

  void validate() const;
};

struct SweepResult {
  SweepParameter parameter = SweepParameter::kRabiFrequency;
  std::vector<double> grid;    // display units
  std::vector<double> signal;  // NaN where the point failed
  std::vector<std::string> diagnostics;
  std::vector<std::pair<std::string, std::string>> metadata;

  bool ok() const;
  void write_csv(std::ostream& out) const;
};

// Register and options for one grid point given in display units.
std::pair<SpinRegister, SensingOptions> sweep_point(const SweepSpec& spec, double value);

SweepResult spectrum_sweep(const SweepSpec& spec, int workers = 1);

// Pair-population scan over delta = delta_0 - delta_1 (Hz) at fixed T.
SweepResult selectivity_scan(const SpinRegister& reg, const std::vector<double>& detuning_grid_hz, double duration,
                             double t_re = 1e-3, int workers = 1);

// Runs f(0..n-1) on up to `workers` threads; exceptions propagate after all
// threads have joined.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& f);

// ---- dips -------------------------------------------------------------------

struct DipShape {
  double center = 0.0;    // grid value of the minimum
  double minimum = 0.0;
  double baseline = 0.0;  // mean of the two end points
  double depth = 0.0;
  double fwhm = 0.0;      // NaN when a half-depth crossing falls off the grid
  std::size_t index = 0;
};

// Half-depth width by linear interpolation around the global minimum.
DipShape analyze_dip(const std::vector<double>& grid, const std::vector<double>& signal);

// Indices of strict local minima whose depth below the neighbouring maxima
// exceeds `prominence`.
std::vector<std::size_t> find_dips(const std::vector<double>& signal, double prominence);

// ---- molecules --------------------------------------------------------------

enum class Decoupling {
  kIdeal,   // WAHUHA average Hamiltonian: homonuclear dipolar terms removed, no pulses
  kPulsed,  // explicit instantaneous WAHUHA pulses on top of the dipolar couplings
  kNone,    // dipolar couplings left on, no pulses
};

struct MoleculeSpec {
  std::vector<GeometryEntry> geometry;
  std::string sensor;  // label of the sensor entry
  double theta = 0.0;  // field direction, rad
  double phi = 0.0;
  Vec3 nv_axis = Vec3::UnitZ();
  double larmor = 0.0;
  double t1_rho = 1e-3;
  std::vector<double> rabi_grid_hz;
  Decoupling decoupling = Decoupling::kIdeal;
  SensingOptions sensing;  // wahuha_tau is required for kPulsed and ignored otherwise
};

struct MoleculeResult {
  SweepResult total;
  std::vector<SweepResult> per_target;
  std::vector<std::string> target_labels;
  std::vector<double> p_a_wo;            // per target at the predicted resonance (or grid centre)
  std::vector<double> predicted_rabi;    // effective-model resonance per target (rad/s), NaN when none
};

SpinRegister molecule_register(const MoleculeSpec& spec, const std::vector<std::size_t>& targets, double rabi);
MoleculeResult molecule_experiment(const MoleculeSpec& spec, int workers = 1);

// ---- measurement budget -----------------------------------------------------

// 1/2 sin^2(pA T / 2): contrast of one dip.
double dip_contrast(double p_a_wo, double duration);

struct MeasurementBudget {
  double shots_exact = 0.0;  // (snr sigma / (C dS))^2, sigma the Bernoulli width at the dip
  double shots = 0.0;        // ceil(shots_exact), at least 1
  double seconds = 0.0;      // n_steps shots T
};

// Readout success probability q = C S + (1 - C) / 2 per shot.
MeasurementBudget measurement_time_estimate(double contrast, double dip_depth, int n_steps, double duration,
                                            double target_snr = 3.0);

}  // namespace spinbus
