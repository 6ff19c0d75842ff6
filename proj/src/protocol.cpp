#include "spinbus/protocol.hpp"

#include "spinbus/constants.hpp"
#include "spinbus/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace spinbus {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Matrix vec(const Matrix& m) { return Eigen::Map<const Matrix>(m.data(), m.size(), 1); }

// Density matrix of a spin pointing along +n (sign = +1) or -n (sign = -1).
Matrix oriented_state(const Vec3& n, double sign) {
  return Matrix(0.5 * spin::identity() + sign * spin::along(n));
}

Matrix tensor(const std::vector<Matrix>& factors) {
  Matrix out = Matrix::Identity(1, 1);
  for (const auto& f : factors) out = kron(out, f);
  return out;
}

std::vector<int> all_nuclei(int n) {
  std::vector<int> out(static_cast<std::size_t>(n));
  std::iota(out.begin(), out.end(), 0);
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

// ---- gate experiments -------------------------------------------------------

Matrix unitary_channel(const Matrix& u) { return kron(u.conjugate(), u); }

double average_gate_fidelity(const Matrix& channel, const Matrix& target) {
  const Eigen::Index d = target.rows();
  if (target.cols() != d || channel.rows() != d * d || channel.cols() != d * d) {
    throw InputError("channel and target dimensions do not match");
  }
  Matrix trace_row = Matrix::Zero(1, d * d);
  for (Eigen::Index k = 0; k < d; ++k) trace_row(0, k * d + k) = 1.0;
  const double tp_error = (trace_row * channel - trace_row).cwiseAbs().maxCoeff();
  if (tp_error > 1e-6) {
    std::ostringstream os;
    os << "channel is not trace preserving (deviation " << tp_error << ")";
    throw ValidationError(os.str());
  }
  const double dd = static_cast<double>(d);
  const double f_e = (unitary_channel(target).adjoint() * channel).trace().real() / (dd * dd);
  return (dd * f_e + 1.0) / (dd + 1.0);
}

Matrix flip_flop_unitary(double coupling, double t) {
  // basis |uu>, |ud>, |du>, |dd>; the flip-flop swaps |ud> and |du>
  Matrix u = Matrix::Identity(4, 4);
  const double c = std::cos(coupling * t), s = std::sin(coupling * t);
  u(1, 1) = c;
  u(2, 2) = c;
  u(1, 2) = Complex(0.0, -s);
  u(2, 1) = Complex(0.0, -s);
  return u;
}

GateResult run_gate_experiment(const SpinRegister& reg, const GateOptions& options) {
  reg.validate();
  if (reg.nuclei.size() < 2) throw InputError("gate experiment needs at least two nuclei");
  GateResult out;
  out.params = effective_params(reg, options.t_re);
  out.gate_time = options.gate_time.value_or(out.params.transfer_time());
  if (!std::isfinite(out.gate_time) || !(out.gate_time > 0.0)) {
    throw InputError("gate time undefined: the effective coupling vanishes and no gate_time was given");
  }

  const LindbladModel model = build_exact_model(reg, options.model);
  const SystemLayout& layout = model.layout;
  const int sites = layout.sites();
  const int spectators = layout.nuclei - 2;
  const Matrix up = spin_up_state(), down = spin_down_state();
  Matrix rest = Matrix::Identity(1, 1);
  for (int k = 0; k < spectators; ++k) rest = kron(rest, up);

  // populations of the gate pair
  std::vector<Observable> observables;
  const char* names[4] = {"p_uu", "p_ud", "p_du", "p_dd"};
  for (int k = 0; k < 4; ++k) {
    const Matrix& a = (k & 2) ? down : up;
    const Matrix& b = (k & 1) ? down : up;
    observables.push_back(
        {names[k], Matrix(nuclear_operator(layout, 0, a) * nuclear_operator(layout, 1, b))});
  }

  PropagationOptions popts = options.propagation;
  popts.output_times.clear();
  popts.output_interval = options.output_interval;
  ControlSchedule trajectory_schedule;
  trajectory_schedule.duration = options.duration.value_or(out.gate_time);
  trajectory_schedule.reset_period = options.t_re;
  Propagator traj_prop(model, popts);
  const Matrix rho0 = tensor({Matrix(nv_reset_state()), kron(down, up), rest});
  out.trajectory = traj_prop.run(rho0, trajectory_schedule, observables);

  // process map on the pair from the 16 matrix units |i><j|
  PropagationOptions map_opts = options.propagation;
  map_opts.output_times.clear();
  map_opts.output_interval = 0.0;
  Propagator prop(model, map_opts);
  ControlSchedule gate_schedule;
  gate_schedule.duration = out.gate_time;
  gate_schedule.reset_period = options.t_re;
  Matrix process(16, 16);
  for (Eigen::Index j = 0; j < 4; ++j) {
    for (Eigen::Index i = 0; i < 4; ++i) {
      Matrix unit = Matrix::Zero(4, 4);
      unit(i, j) = 1.0;
      const Matrix x = prop.apply(tensor({Matrix(nv_reset_state()), unit, rest}), gate_schedule);
      process.col(j * 4 + i) = vec(partial_trace(x, sites, {1, 2}));
    }
  }

  // remove the local precession exp(-i t sum nu_k Iz_k)
  const SystemLayout pair{false, 2};
  const Matrix hz = out.params.frequency[0] * nuclear_operator(pair, 0, spin::z()) +
                    out.params.frequency[1] * nuclear_operator(pair, 1, spin::z());
  Matrix z = Matrix::Zero(4, 4);
  for (Eigen::Index k = 0; k < 4; ++k) z(k, k) = std::exp(Complex(0.0, -out.gate_time * hz(k, k).real()));
  out.process = unitary_channel(z).adjoint() * process;
  out.target = flip_flop_unitary(out.params.flip_flop, out.gate_time);

  Matrix trace_row = Matrix::Zero(1, 16);
  for (Eigen::Index k = 0; k < 4; ++k) trace_row(0, k * 4 + k) = 1.0;
  out.trace_preservation_error = (trace_row * out.process - trace_row).cwiseAbs().maxCoeff();
  out.fidelity = average_gate_fidelity(out.process, out.target);

  SpinRegister pair_reg = reg;
  pair_reg.nuclei.resize(2);
  Propagator eff(build_effective_liouvillian(pair_reg, options.t_re), map_opts);
  ControlSchedule eff_schedule;
  eff_schedule.duration = out.gate_time;
  Matrix eff_process(16, 16);
  for (Eigen::Index j = 0; j < 4; ++j) {
    for (Eigen::Index i = 0; i < 4; ++i) {
      Matrix unit = Matrix::Zero(4, 4);
      unit(i, j) = 1.0;
      eff_process.col(j * 4 + i) = vec(eff.apply(unit, eff_schedule));
    }
  }
  out.effective_fidelity = average_gate_fidelity(unitary_channel(z).adjoint() * eff_process, out.target);
  return out;
}

// ---- WAHUHA -----------------------------------------------------------------

std::vector<PulseEvent> wahuha_schedule(double total, double tau, const std::vector<int>& targets) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InputError("WAHUHA tau must be positive");
  if (!(total >= 0.0)) throw InputError("WAHUHA duration must be non-negative");
  const double cycle = 6.0 * tau;
  const double ratio = total / cycle;
  const double cycles = std::round(ratio);
  if (std::abs(ratio - cycles) > 1e-9 * std::max(1.0, ratio)) {
    std::ostringstream os;
    os << "WAHUHA duration " << total << " s is not a whole number of " << cycle << " s cycles";
    throw InputError(os.str());
  }
  const double half_pi = 0.5 * constants::kPi;
  const struct {
    double offset;
    Vec3 axis;
  } slots[4] = {{1.0, Vec3::UnitX()}, {2.0, -Vec3::UnitY()}, {4.0, Vec3::UnitY()}, {5.0, -Vec3::UnitX()}};
  std::vector<PulseEvent> out;
  const auto n = static_cast<std::int64_t>(cycles);
  out.reserve(static_cast<std::size_t>(4 * n));
  for (std::int64_t c = 0; c < n; ++c) {
    for (const auto& s : slots) {
      out.push_back({(static_cast<double>(c) * 6.0 + s.offset) * tau, s.axis, half_pi, targets});
    }
  }
  return out;
}

Vec3 average_zeeman_axis(const std::vector<PulseEvent>& pulses, double total) {
  if (!(total > 0.0)) throw InputError("averaging window must be positive");
  const SystemLayout one{false, 1};
  Matrix u = Matrix::Identity(2, 2);  // pulses applied so far
  Vec3 sum = Vec3::Zero();
  double prev = 0.0;
  auto accumulate = [&](double dt) {
    const Matrix toggled = u.adjoint() * Matrix(spin::z()) * u;
    const Vec3 c{2.0 * (toggled * Matrix(spin::x())).trace().real(), 2.0 * (toggled * Matrix(spin::y())).trace().real(),
                 2.0 * (toggled * Matrix(spin::z())).trace().real()};
    sum += dt * c;
  };
  for (const auto& p : pulses) {
    const double t = std::clamp(p.time, 0.0, total);
    accumulate(t - prev);
    prev = t;
    u = pulse_unitary(one, p.axis, p.angle, {0}) * u;
  }
  accumulate(total - prev);
  return sum / total;
}

std::vector<PulseEvent> to_lab_frame(std::vector<PulseEvent> pulses, double reference) {
  for (auto& p : pulses) {
    const double phase = reference * p.time;
    const double c = std::cos(phase), s = std::sin(phase);
    p.axis = Vec3{c * p.axis.x() - s * p.axis.y(), s * p.axis.x() + c * p.axis.y(), p.axis.z()};
  }
  return pulses;
}

// ---- sensing ----------------------------------------------------------------

SensingOutcome sensing_protocol(const SpinRegister& reg, const SensingOptions& options) {
  reg.validate();
  if (reg.nuclei.empty()) throw InputError("sensing needs a sensor nucleus");
  if (!(options.duration > 0.0)) throw InputError("evolution time must be positive");
  if (!(options.t_re > 0.0)) throw InputError("t_re must be positive");
  const bool pair = options.observable == SensingObservable::kPairPopulation;
  if (pair && reg.nuclei.size() < 2) throw InputError("pair population needs two nuclei");

  SensingOutcome out;
  const LindbladModel model = build_exact_model(reg, options.model);
  const SystemLayout& layout = model.layout;
  const int n = layout.nuclei;
  const double reference = reg.nuclei[0].larmor;

  ControlSchedule schedule;
  schedule.duration = options.duration;
  schedule.reset_period = options.t_re;
  if (options.wahuha_tau) {
    const auto rotating = wahuha_schedule(options.duration, *options.wahuha_tau, all_nuclei(n));
    if (!rotating.empty()) out.axis = average_zeeman_axis(rotating, options.duration).normalized();
    schedule.pulses = to_lab_frame(rotating, reference);
    for (const auto& nuc : reg.nuclei) {
      if (nuc.larmor != reference) {
        out.warnings.push_back("nucleus " + nuc.label + " has a different Larmor frequency from the pulse reference");
      }
    }
  }

  // preparation along -axis (sensor) and +axis (pair partner and spectators)
  std::vector<Matrix> factors{Matrix(nv_reset_state()), oriented_state(out.axis, -1.0)};
  for (int k = 1; k < n; ++k) factors.push_back(pair ? oriented_state(out.axis, +1.0) : Matrix(mixed_state()));
  const Matrix rho0 = tensor(factors);

  // readout projectors carried to the lab frame at t = T
  const Matrix free = pulse_unitary({false, 1}, Vec3::UnitZ(), reference * options.duration, {0});
  auto lab = [&](const Matrix& p) { return Matrix(free * p * free.adjoint()); };
  Matrix projector = nuclear_operator(layout, 0, lab(oriented_state(out.axis, -1.0)));
  if (pair) projector = projector * nuclear_operator(layout, 1, lab(oriented_state(out.axis, +1.0)));

  PropagationOptions popts = options.propagation;
  popts.output_times = {options.duration};
  popts.store_states = false;
  Propagator prop(model, popts);
  const auto traj = prop.run(rho0, schedule, {{"signal", projector}});
  out.signal = traj.values.back()[0];

  for (auto& w : validity_warnings(reg, relaxation_rate(options.t_re, reg.t1_rho))) out.warnings.push_back(std::move(w));
  return out;
}

// ---- sweeps -----------------------------------------------------------------

std::string parameter_name(SweepParameter p) {
  switch (p) {
    case SweepParameter::kRabiFrequency: return "rabi_frequency";
    case SweepParameter::kDeltaDetuning: return "delta_detuning";
    case SweepParameter::kFieldTheta: return "field_theta";
    case SweepParameter::kFieldPhi: return "field_phi";
    case SweepParameter::kTRe: return "t_re";
    case SweepParameter::kEvolutionTime: return "evolution_time";
  }
  return "unknown";
}

SweepParameter parse_parameter(const std::string& name) {
  for (auto p : {SweepParameter::kRabiFrequency, SweepParameter::kDeltaDetuning, SweepParameter::kFieldTheta,
                 SweepParameter::kFieldPhi, SweepParameter::kTRe, SweepParameter::kEvolutionTime}) {
    if (parameter_name(p) == name) return p;
  }
  throw InputError("unknown sweep parameter '" + name + "'");
}

double display_value(SweepParameter p, double v) {
  switch (p) {
    case SweepParameter::kRabiFrequency:
    case SweepParameter::kDeltaDetuning: return v / constants::kTwoPi;
    case SweepParameter::kFieldTheta:
    case SweepParameter::kFieldPhi: return v * 180.0 / constants::kPi;
    default: return v;
  }
}

double internal_value(SweepParameter p, double display) {
  switch (p) {
    case SweepParameter::kRabiFrequency:
    case SweepParameter::kDeltaDetuning: return display * constants::kTwoPi;
    case SweepParameter::kFieldTheta:
    case SweepParameter::kFieldPhi: return display * constants::kPi / 180.0;
    default: return display;
  }
}

std::string display_unit(SweepParameter p) {
  switch (p) {
    case SweepParameter::kRabiFrequency:
    case SweepParameter::kDeltaDetuning: return "Hz";
    case SweepParameter::kFieldTheta:
    case SweepParameter::kFieldPhi: return "deg";
    default: return "s";
  }
}

void SweepSpec::validate() const {
  if (grid.empty()) throw InputError("sweep grid is empty");
  const bool up = grid.size() < 2 || grid[1] > grid[0];
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (!std::isfinite(grid[k])) throw InputError("sweep grid contains a non-finite value");
    if (k > 0 && (up ? !(grid[k] > grid[k - 1]) : !(grid[k] < grid[k - 1]))) {
      throw InputError("sweep grid must be strictly monotonic");
    }
  }
  base.validate();
  if (parameter == SweepParameter::kDeltaDetuning) {
    for (int k : detuned) {
      if (k <= 0 || k >= static_cast<int>(base.nuclei.size())) throw InputError("detuned nucleus index out of range");
    }
  }
}

bool SweepResult::ok() const {
  return std::none_of(signal.begin(), signal.end(), [](double s) { return std::isnan(s); });
}

void SweepResult::write_csv(std::ostream& out) const {
  for (const auto& [key, value] : metadata) out << "# " << key << ": " << value << '\n';
  out << "# unit: " << display_unit(parameter) << '\n';
  for (std::size_t k = 0; k < diagnostics.size(); ++k) {
    if (!diagnostics[k].empty()) out << "# point " << k << ": " << diagnostics[k] << '\n';
  }
  out << "param," << parameter_name(parameter) << ",S\n";
  for (std::size_t k = 0; k < grid.size(); ++k) {
    out << k << ',' << format_double(grid[k]) << ',' << format_double(signal[k]) << '\n';
  }
}

std::pair<SpinRegister, SensingOptions> sweep_point(const SweepSpec& spec, double display) {
  const double value = internal_value(spec.parameter, display);
  SpinRegister reg = spec.base;
  SensingOptions opt = spec.sensing;
  switch (spec.parameter) {
    case SweepParameter::kRabiFrequency:
      reg.rabi = value;
      break;
    case SweepParameter::kDeltaDetuning: {
      const auto frame = reg.frame();
      for (int k : spec.detuned) {
        auto& n = reg.nuclei[static_cast<std::size_t>(k)];
        n = n.with_a_par(n.a_par - 2.0 * value, frame);
      }
      break;
    }
    case SweepParameter::kFieldTheta:
    case SweepParameter::kFieldPhi: {
      const Vec3& b = reg.field_direction;
      double theta = std::acos(std::clamp(b.z(), -1.0, 1.0));
      double phi = std::atan2(b.y(), b.x());
      (spec.parameter == SweepParameter::kFieldTheta ? theta : phi) = value;
      reg.field_direction = direction_from_angles(theta, phi);
      const auto frame = reg.frame();
      for (auto& n : reg.nuclei) {
        if (!n.position_nm) throw InputError("field-angle sweeps need nuclear positions (nucleus " + n.label + ")");
        n = NuclearSpin::from_position(n.label, *n.position_nm, n.larmor, frame, reg.nv_axis, n.t2);
      }
      break;
    }
    case SweepParameter::kTRe:
      opt.t_re = value;
      break;
    case SweepParameter::kEvolutionTime:
      opt.duration = value;
      break;
  }
  return {std::move(reg), std::move(opt)};
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& f) {
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  if (threads == 1 || n < 2) {
    for (std::size_t k = 0; k < n; ++k) f(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < n; k = next++) {
      try {
        f(k);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

SweepResult spectrum_sweep(const SweepSpec& spec, int workers) {
  spec.validate();
  SweepResult out;
  out.parameter = spec.parameter;
  out.grid = spec.grid;
  out.signal.assign(spec.grid.size(), kNaN);
  out.diagnostics.assign(spec.grid.size(), std::string());
  parallel_for(spec.grid.size(), workers, [&](std::size_t k) {
    try {
      const auto [reg, opt] = sweep_point(spec, spec.grid[k]);
      out.signal[k] = sensing_protocol(reg, opt).signal;
    } catch (const std::exception& e) {
      out.diagnostics[k] = e.what();
    }
  });
  return out;
}

SweepResult selectivity_scan(const SpinRegister& reg, const std::vector<double>& detuning_grid_hz, double duration,
                             double t_re, int workers) {
  if (reg.nuclei.size() < 2) throw InputError("selectivity scan needs two nuclei");
  SweepSpec spec;
  spec.parameter = SweepParameter::kDeltaDetuning;
  spec.grid = detuning_grid_hz;
  spec.base = reg;
  spec.sensing.duration = duration;
  spec.sensing.t_re = t_re;
  spec.sensing.observable = SensingObservable::kPairPopulation;
  spec.detuned = {1};
  return spectrum_sweep(spec, workers);
}

// ---- dips -------------------------------------------------------------------

DipShape analyze_dip(const std::vector<double>& grid, const std::vector<double>& signal) {
  if (grid.size() != signal.size() || grid.size() < 3) throw InputError("dip analysis needs at least three points");
  for (double s : signal) {
    if (std::isnan(s)) throw InputError("dip analysis on a sweep with missing points");
  }
  DipShape out;
  out.index = static_cast<std::size_t>(std::min_element(signal.begin(), signal.end()) - signal.begin());
  out.center = grid[out.index];
  out.minimum = signal[out.index];
  out.baseline = 0.5 * (signal.front() + signal.back());
  out.depth = out.baseline - out.minimum;
  out.fwhm = kNaN;
  if (!(out.depth > 0.0)) return out;
  const double half = out.baseline - 0.5 * out.depth;
  auto cross = [&](std::size_t a, std::size_t b) {
    return grid[a] + (half - signal[a]) * (grid[b] - grid[a]) / (signal[b] - signal[a]);
  };
  std::optional<double> left, right;
  for (std::size_t k = out.index; k-- > 0;) {
    if (signal[k] >= half) {
      left = cross(k, k + 1);
      break;
    }
  }
  for (std::size_t k = out.index + 1; k < signal.size(); ++k) {
    if (signal[k] >= half) {
      right = cross(k - 1, k);
      break;
    }
  }
  if (left && right) out.fwhm = std::abs(*right - *left);
  return out;
}

std::vector<std::size_t> find_dips(const std::vector<double>& signal, double prominence) {
  std::vector<std::size_t> out;
  const std::size_t n = signal.size();
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (!(signal[i] < signal[i - 1] && signal[i] <= signal[i + 1])) continue;
    double left = signal[i];
    for (std::size_t k = i; k-- > 0;) {
      if (signal[k] < signal[i]) break;
      left = std::max(left, signal[k]);
    }
    double right = signal[i];
    for (std::size_t k = i + 1; k < n; ++k) {
      if (signal[k] < signal[i]) break;
      right = std::max(right, signal[k]);
    }
    if (std::min(left, right) - signal[i] > prominence) out.push_back(i);
  }
  return out;
}

// ---- molecules --------------------------------------------------------------

SpinRegister molecule_register(const MoleculeSpec& spec, const std::vector<std::size_t>& targets, double rabi) {
  const auto sensor = std::find_if(spec.geometry.begin(), spec.geometry.end(),
                                   [&](const GeometryEntry& e) { return e.label == spec.sensor; });
  if (sensor == spec.geometry.end()) throw InputError("sensor '" + spec.sensor + "' not found in the geometry");
  SpinRegister reg;
  reg.rabi = rabi;
  reg.t1_rho = spec.t1_rho;
  reg.nv_axis = spec.nv_axis;
  reg.field_direction = direction_from_angles(spec.theta, spec.phi);
  const auto frame = reg.frame();
  auto add = [&](const GeometryEntry& e) {
    reg.nuclei.push_back(
        NuclearSpin::from_position(e.label, e.position_nm, spec.larmor, frame, spec.nv_axis, e.t2.value_or(kInfinity)));
  };
  add(*sensor);
  for (std::size_t t : targets) {
    if (t >= spec.geometry.size()) throw InputError("target index out of range");
    if (spec.geometry[t].label == spec.sensor) throw InputError("the sensor cannot also be a target");
    add(spec.geometry[t]);
  }
  return reg;
}

MoleculeResult molecule_experiment(const MoleculeSpec& spec, int workers) {
  if (spec.rabi_grid_hz.empty()) throw InputError("molecule experiment needs a Rabi grid");
  std::vector<std::size_t> targets;
  for (std::size_t k = 0; k < spec.geometry.size(); ++k) {
    if (spec.geometry[k].label != spec.sensor) targets.push_back(k);
  }
  if (targets.size() + 1 > SpinRegister::kMaxNuclei) throw InputError("too many nuclei in the geometry");
  const double first = constants::hz(spec.rabi_grid_hz.front());
  const double last = constants::hz(spec.rabi_grid_hz.back());
  const double centre = 0.5 * (first + last);

  SensingOptions sensing = spec.sensing;
  switch (spec.decoupling) {
    case Decoupling::kIdeal:
      sensing.model.internuclear_dipolar = false;
      sensing.wahuha_tau.reset();
      break;
    case Decoupling::kPulsed:
      if (!sensing.wahuha_tau) throw InputError("pulsed decoupling needs a WAHUHA tau");
      sensing.model.internuclear_dipolar = true;
      break;
    case Decoupling::kNone:
      sensing.model.internuclear_dipolar = true;
      sensing.wahuha_tau.reset();
      break;
  }

  MoleculeResult out;
  SweepSpec total;
  total.parameter = SweepParameter::kRabiFrequency;
  total.grid = spec.rabi_grid_hz;
  total.base = molecule_register(spec, targets, centre);
  total.sensing = sensing;
  out.total = spectrum_sweep(total, workers);

  for (std::size_t t : targets) {
    SweepSpec one = total;
    one.base = molecule_register(spec, {t}, centre);
    out.per_target.push_back(spectrum_sweep(one, workers));
    out.target_labels.push_back(spec.geometry[t].label);

    const auto& s = one.base.nuclei[0];
    const auto& n = one.base.nuclei[1];
    const double lo = std::min(first, last);
    const double hi = std::max(first, last);
    double rabi = kNaN;
    if (hi > lo) {
      try {
        rabi = resonance_solve(s, n, lo, hi, sensing.t_re, spec.t1_rho).rabi;
      } catch (const NoRootError&) {
      }
    }
    out.predicted_rabi.push_back(rabi);
    SpinRegister at = one.base;
    at.rabi = std::isnan(rabi) ? centre : rabi;
    out.p_a_wo.push_back(effective_params(at, sensing.t_re).p_a_wo());
  }
  return out;
}

// ---- measurement budget -----------------------------------------------------

double dip_contrast(double p_a_wo, double duration) {
  const double s = std::sin(0.5 * p_a_wo * duration);
  return 0.5 * s * s;
}

MeasurementBudget measurement_time_estimate(double contrast, double dip_depth, int n_steps, double duration,
                                            double target_snr) {
  if (!(contrast > 0.0) || contrast > 1.0) throw InputError("contrast must lie in (0, 1]");
  if (!(dip_depth > 0.0) || dip_depth > 0.5) throw InputError("dip depth must lie in (0, 1/2]");
  if (n_steps < 1) throw InputError("at least one frequency step is needed");
  if (!(duration > 0.0)) throw InputError("evolution time must be positive");
  if (!(target_snr > 0.0)) throw InputError("target SNR must be positive");
  const double q = contrast * (1.0 - dip_depth) + 0.5 * (1.0 - contrast);
  const double sigma = std::sqrt(q * (1.0 - q));
  MeasurementBudget out;
  const double r = target_snr * sigma / (contrast * dip_depth);
  out.shots_exact = r * r;
  out.shots = std::max(1.0, std::ceil(out.shots_exact));
  out.seconds = static_cast<double>(n_steps) * out.shots * duration;
  return out;
}

}  // namespace spinbus
