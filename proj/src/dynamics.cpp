#include "spinbus/dynamics.hpp"

#include "spinbus/constants.hpp"
#include "spinbus/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace spinbus {

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

namespace {

double relative_hermiticity(const Matrix& h) {
  const double scale = h.cwiseAbs().maxCoeff();
  if (scale == 0.0) return 0.0;
  return (h - h.adjoint()).cwiseAbs().maxCoeff() / scale;
}

// Largest Bohr frequency lambda_max - lambda_min (rad/s).
double spectral_span(const Matrix& h) {
  const Matrix sym = 0.5 * (h + h.adjoint());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff() - es.eigenvalues().minCoeff();
}

void require_unit_axis(const Vec3& axis) {
  if (!axis.allFinite() || std::abs(axis.norm() - 1.0) > 1e-12) {
    throw InputError("pulse axis must be a unit vector");
  }
}

enum EventKind : int { kReset = 0, kPulse = 1, kRecord = 2 };

struct TimedEvent {
  double time;
  int kind;
  std::size_t index;
};

std::string format_time(double t) {
  std::ostringstream os;
  os << std::setprecision(17) << t;
  return os.str();
}

}  // namespace

void LindbladModel::validate() const {
  const Eigen::Index d = layout.dimension();
  if (hamiltonian.matrix.rows() != d || hamiltonian.matrix.cols() != d) {
    throw InputError("Hamiltonian dimension does not match the layout");
  }
  if (relative_hermiticity(hamiltonian.matrix) > 1e-12) {
    throw ValidationError("Hamiltonian is not Hermitian (" + hamiltonian.label + ")");
  }
  for (const auto& c : collapse) {
    if (c.op.matrix.rows() != d || c.op.matrix.cols() != d) {
      throw InputError("collapse operator " + c.op.label + " has the wrong dimension");
    }
    if (!std::isfinite(c.rate) || c.rate < 0.0) {
      throw InputError("collapse rate for " + c.op.label + " must be finite and non-negative");
    }
  }
}

void ControlSchedule::validate(const SystemLayout& layout) const {
  if (!(duration > 0.0) || !std::isfinite(duration)) throw InputError("schedule duration must be positive");
  if (reset_period) {
    if (!(*reset_period > 0.0) || *reset_period > duration * (1.0 + 1e-12)) {
      throw InputError("reset period must satisfy 0 < t_re <= T");
    }
  }
  const double eps = 1e-12 * duration;
  for (std::size_t k = 0; k < pulses.size(); ++k) {
    const auto& p = pulses[k];
    if (p.time < -eps || p.time > duration + eps) {
      throw InputError("pulse at t = " + format_time(p.time) + " s lies outside [0, T]");
    }
    if (k > 0 && !(p.time > pulses[k - 1].time)) throw InputError("pulse times must be strictly increasing");
    require_unit_axis(p.axis);
    if (p.targets.empty()) throw InputError("pulse has no target nuclei");
    for (int t : p.targets) {
      if (t < 0 || t >= layout.nuclei) throw InputError("pulse target " + std::to_string(t) + " out of range");
    }
  }
}

std::vector<double> ControlSchedule::reset_times() const {
  std::vector<double> out;
  if (!reset_period) return out;
  const auto count = static_cast<std::int64_t>(std::floor(duration / *reset_period * (1.0 + 1e-12)));
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t k = 1; k <= count; ++k) out.push_back(static_cast<double>(k) * *reset_period);
  return out;
}

std::vector<double> Trajectory::column(const std::string& label) const {
  const auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw InputError("no observable labelled " + label);
  const auto j = static_cast<std::size_t>(it - labels.begin());
  std::vector<double> out;
  out.reserve(values.size());
  for (const auto& row : values) out.push_back(row[j]);
  return out;
}

void Trajectory::write_csv(std::ostream& out) const {
  out << "t_s";
  for (const auto& l : labels) out << ',' << l;
  out << '\n' << std::setprecision(17);
  for (std::size_t k = 0; k < times.size(); ++k) {
    out << times[k];
    for (double v : values[k]) out << ',' << v;
    out << '\n';
  }
}

Matrix lindblad_rhs(const Matrix& rho, const LindbladModel& model) {
  const Matrix& h = model.hamiltonian.matrix;
  if (rho.rows() != h.rows() || rho.cols() != h.cols()) throw InputError("density matrix dimension mismatch");
  const Complex minus_i(0.0, -1.0);
  Matrix out = minus_i * (h * rho - rho * h);
  for (const auto& c : model.collapse) {
    if (c.rate == 0.0) continue;
    const Matrix& l = c.op.matrix;
    const Matrix ldl = l.adjoint() * l;
    out += c.rate * (l * rho * l.adjoint() - 0.5 * (ldl * rho + rho * ldl));
  }
  return out;
}

Matrix liouvillian(const LindbladModel& model) {
  const Matrix& h = model.hamiltonian.matrix;
  const Eigen::Index d = h.rows();
  const Matrix id = Matrix::Identity(d, d);
  const Complex minus_i(0.0, -1.0);
  Matrix gen = minus_i * (kron(id, h) - kron(h.transpose(), id));
  for (const auto& c : model.collapse) {
    if (c.rate == 0.0) continue;
    const Matrix& l = c.op.matrix;
    const Matrix ldl = l.adjoint() * l;
    gen += c.rate * (kron(l.conjugate(), l) - 0.5 * kron(id, ldl) - 0.5 * kron(ldl.transpose(), id));
  }
  return gen;
}

Eigen::Matrix2cd nv_reset_state() {
  Eigen::Matrix2cd m = Eigen::Matrix2cd::Zero();
  m(1, 1) = 1.0;
  return m;
}

Eigen::Matrix2cd spin_up_state() {
  Eigen::Matrix2cd m = Eigen::Matrix2cd::Zero();
  m(0, 0) = 1.0;
  return m;
}

Eigen::Matrix2cd spin_down_state() {
  Eigen::Matrix2cd m = Eigen::Matrix2cd::Zero();
  m(1, 1) = 1.0;
  return m;
}

Eigen::Matrix2cd mixed_state() { return 0.5 * Eigen::Matrix2cd::Identity(); }

Matrix product_state(const std::vector<Eigen::Matrix2cd>& factors) {
  Matrix out = Matrix::Identity(1, 1);
  for (const auto& f : factors) out = kron(out, f);
  return out;
}

Matrix partial_trace(const Matrix& rho, int sites, const std::vector<int>& keep) {
  const Eigen::Index d = Eigen::Index{1} << sites;
  if (rho.rows() != d || rho.cols() != d) throw InputError("partial trace: dimension mismatch");
  std::vector<int> kept = keep;
  std::sort(kept.begin(), kept.end());
  if (std::adjacent_find(kept.begin(), kept.end()) != kept.end()) throw InputError("partial trace: repeated site");
  std::uint64_t keep_mask = 0;
  for (int s : kept) {
    if (s < 0 || s >= sites) throw InputError("partial trace: site out of range");
    keep_mask |= std::uint64_t{1} << (sites - 1 - s);
  }
  auto reduced_index = [&](std::uint64_t full) {
    std::uint64_t r = 0;
    for (int s : kept) r = (r << 1) | ((full >> (sites - 1 - s)) & 1u);
    return static_cast<Eigen::Index>(r);
  };
  const Eigen::Index dr = Eigen::Index{1} << kept.size();
  Matrix out = Matrix::Zero(dr, dr);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto ui = static_cast<std::uint64_t>(i);
      const auto uj = static_cast<std::uint64_t>(j);
      if ((ui & ~keep_mask) != (uj & ~keep_mask)) continue;
      out(reduced_index(ui), reduced_index(uj)) += rho(i, j);
    }
  }
  return out;
}

Matrix reset_channel(const Matrix& rho, const SystemLayout& layout) {
  if (!layout.has_nv) throw InputError("reset channel needs an NV factor");
  std::vector<int> nuclear(static_cast<std::size_t>(layout.nuclei));
  for (int k = 0; k < layout.nuclei; ++k) nuclear[static_cast<std::size_t>(k)] = layout.nuclear_site(k);
  const Matrix marginal = partial_trace(rho, layout.sites(), nuclear);
  return kron(nv_reset_state(), marginal);
}

Matrix pulse_unitary(const SystemLayout& layout, const Vec3& axis, double angle,
                     const std::vector<int>& targets) {
  require_unit_axis(axis);
  if (targets.empty()) throw InputError("pulse has no target nuclei");
  const Complex minus_i(0.0, -1.0);
  const Eigen::Matrix2cd local = std::cos(angle / 2.0) * spin::identity() +
                                 minus_i * (2.0 * std::sin(angle / 2.0)) * spin::along(axis);
  Matrix u = Matrix::Identity(layout.dimension(), layout.dimension());
  for (int t : targets) u = nuclear_operator(layout, t, local) * u;
  return u;
}

Matrix apply_pulse(const Matrix& rho, const SystemLayout& layout, const Vec3& axis, double angle,
                   const std::vector<int>& targets) {
  const Matrix u = pulse_unitary(layout, axis, angle, targets);
  return u * rho * u.adjoint();
}

StateDiagnostics diagnose_state(const Matrix& rho) {
  StateDiagnostics d{};
  d.trace_error = std::abs(rho.trace() - Complex(1.0, 0.0));
  d.hermiticity_error = (rho - rho.adjoint()).cwiseAbs().maxCoeff();
  const Matrix sym = 0.5 * (rho + rho.adjoint());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
  d.min_eigenvalue = es.eigenvalues().minCoeff();
  return d;
}

Propagator::Propagator(LindbladModel model, PropagationOptions options)
    : model_(std::move(model)), options_(std::move(options)) {
  model_.validate();
  if (!(options_.steps_per_period >= 1.0)) throw InputError("steps_per_period must be at least 1");
  if (!(options_.max_step > 0.0)) throw InputError("max_step must be positive");
  const double span = spectral_span(model_.hamiltonian.matrix);
  h_max_ = span > 0.0 ? constants::kTwoPi / (options_.steps_per_period * span) : kInfinity;
  h_max_ = std::min(h_max_, options_.max_step);
  generator_ = liouvillian(model_);
}

std::int64_t Propagator::steps_for(double dt) const {
  if (dt <= 0.0) return 0;
  if (!std::isfinite(h_max_)) return 1;
  const double n = std::ceil(dt / h_max_ * (1.0 - 1e-12));
  if (n > static_cast<double>(std::numeric_limits<std::int64_t>::max() / 2)) {
    throw ResourceError("segment of " + format_time(dt) + " s needs too many steps");
  }
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(n));
}

// Returns E with M^steps = I + E. Keeping the identity implicit avoids losing
// the small increment to rounding; (I + A)(I + B) = I + A + B + AB.
const Matrix& Propagator::segment_map(double dt, std::int64_t steps) {
  const auto key = std::make_pair(static_cast<std::int64_t>(std::llround(dt * 1e15)), steps);
  if (auto it = maps_.find(key); it != maps_.end()) return it->second;
  if (maps_.size() >= 16) maps_.clear();

  const Eigen::Index n = generator_.rows();
  const Matrix id = Matrix::Identity(n, n);
  const double h = dt / static_cast<double>(steps);
  const Matrix hl = h * generator_;
  // hL + (hL)^2/2 + (hL)^3/6 + (hL)^4/24 by Horner
  Matrix tmp(n, n);
  Matrix inc = id + 0.25 * hl;
  tmp.noalias() = hl * inc;
  inc = id + tmp / 3.0;
  tmp.noalias() = hl * inc;
  inc = id + 0.5 * tmp;
  Matrix base(n, n);
  base.noalias() = hl * inc;

  Matrix result;
  bool have = false;
  std::int64_t k = steps;
  while (k > 0) {
    if (k & 1) {
      if (have) {
        tmp.noalias() = result * base;
        tmp += result;
        tmp += base;
        result.swap(tmp);
      } else {
        result = base;
        have = true;
      }
    }
    k >>= 1;
    if (k > 0) {
      tmp.noalias() = base * base;
      tmp += 2.0 * base;
      base.swap(tmp);
    }
  }
  return maps_.emplace(key, std::move(result)).first->second;
}

Vector Propagator::evolve(const Vector& v, double dt, std::int64_t steps) {
  if (steps == 0) return v;
  if (options_.method == Stepping::kPoweredMap) {
    const Matrix& inc = segment_map(dt, steps);
    Vector out = v;
    out.noalias() += inc * v;
    return out;
  }
  const Eigen::Index d = model_.layout.dimension();
  const double h = dt / static_cast<double>(steps);
  Matrix rho = Eigen::Map<const Matrix>(v.data(), d, d);
  for (std::int64_t s = 0; s < steps; ++s) {
    const Matrix k1 = lindblad_rhs(rho, model_);
    const Matrix k2 = lindblad_rhs(rho + 0.5 * h * k1, model_);
    const Matrix k3 = lindblad_rhs(rho + 0.5 * h * k2, model_);
    const Matrix k4 = lindblad_rhs(rho + h * k3, model_);
    rho += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return Eigen::Map<const Vector>(rho.data(), d * d);
}

Trajectory Propagator::run(const Matrix& rho0, const ControlSchedule& schedule,
                           const std::vector<Observable>& observables) {
  const Eigen::Index d = model_.layout.dimension();
  if (rho0.rows() != d || rho0.cols() != d) throw InputError("initial state dimension mismatch");
  const auto diag = diagnose_state(rho0);
  if (diag.trace_error > 1e-9 || diag.hermiticity_error > 1e-9 || diag.min_eigenvalue < -1e-8) {
    throw InputError("initial state is not a valid density matrix");
  }
  return run_impl(rho0, schedule, observables, true);
}

Matrix Propagator::apply(const Matrix& x0, const ControlSchedule& schedule) {
  const Eigen::Index d = model_.layout.dimension();
  if (x0.rows() != d || x0.cols() != d) throw InputError("operator dimension mismatch");
  return run_impl(x0, schedule, {}, false).final_state;
}

Trajectory Propagator::run_impl(const Matrix& rho0, const ControlSchedule& schedule,
                                const std::vector<Observable>& observables, bool record) {
  const SystemLayout& layout = model_.layout;
  const Eigen::Index d = layout.dimension();
  schedule.validate(layout);
  for (const auto& o : observables) {
    if (o.op.rows() != d || o.op.cols() != d) throw InputError("observable " + o.label + " has the wrong dimension");
  }

  const double total = schedule.duration;
  const double eps = 1e-12 * total;

  std::vector<double> outputs = options_.output_times;
  if (!record) {
    outputs.clear();
  } else if (outputs.empty()) {
    if (options_.output_interval > 0.0) {
      const auto count = static_cast<std::int64_t>(std::floor(total / options_.output_interval * (1.0 + 1e-12)));
      for (std::int64_t k = 0; k <= count; ++k) outputs.push_back(static_cast<double>(k) * options_.output_interval);
      if (outputs.back() < total - eps) outputs.push_back(total);
    } else {
      outputs = {0.0, total};
    }
  }
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    if (outputs[k] < -eps || outputs[k] > total + eps) throw InputError("output time outside [0, T]");
    if (k > 0 && !(outputs[k] > outputs[k - 1])) throw InputError("output times must be strictly increasing");
  }

  std::vector<TimedEvent> events;
  const auto resets = schedule.reset_times();
  for (std::size_t k = 0; k < resets.size(); ++k) events.push_back({resets[k], kReset, k});
  for (std::size_t k = 0; k < schedule.pulses.size(); ++k) events.push_back({schedule.pulses[k].time, kPulse, k});
  for (std::size_t k = 0; k < outputs.size(); ++k) events.push_back({outputs[k], kRecord, k});
  std::stable_sort(events.begin(), events.end(),
                   [](const TimedEvent& a, const TimedEvent& b) { return a.time < b.time; });

  // Group events closer than eps onto one instant, then order reset < pulse < record.
  std::vector<std::vector<TimedEvent>> instants;
  std::vector<double> instant_times;
  for (const auto& e : events) {
    const double t = std::clamp(e.time, 0.0, total);
    if (instant_times.empty() || t - instant_times.back() > eps) {
      instant_times.push_back(t);
      instants.emplace_back();
    }
    instants.back().push_back(e);
  }
  for (auto& group : instants) {
    std::stable_sort(group.begin(), group.end(),
                     [](const TimedEvent& a, const TimedEvent& b) { return a.kind < b.kind; });
  }

  std::int64_t planned = 0;
  double prev = 0.0;
  for (double t : instant_times) {
    planned += steps_for(t - prev);
    prev = t;
    if (planned > options_.max_total_steps) {
      throw ResourceError("integration needs more than " + std::to_string(options_.max_total_steps) +
                          " steps (h = " + format_time(h_max_) + " s)");
    }
  }

  Trajectory traj;
  traj.total_steps = planned;
  for (const auto& o : observables) traj.labels.push_back(o.label);

  Vector v = Eigen::Map<const Vector>(rho0.data(), d * d);
  prev = 0.0;
  for (std::size_t g = 0; g < instants.size(); ++g) {
    const double t = instant_times[g];
    const double dt = t - prev;
    if (dt > 0.0) v = evolve(v, dt, steps_for(dt));
    prev = t;
    for (const auto& e : instants[g]) {
      Eigen::Map<Matrix> rho(v.data(), d, d);
      if (e.kind == kReset) {
        const Matrix next = reset_channel(rho, layout);
        rho = next;
      } else if (e.kind == kPulse) {
        const auto& p = schedule.pulses[e.index];
        const Matrix next = apply_pulse(rho, layout, p.axis, p.angle, p.targets);
        rho = next;
      } else {
        traj.times.push_back(outputs[e.index]);
        std::vector<double> row;
        row.reserve(observables.size());
        for (const auto& o : observables) row.push_back((o.op.transpose().cwiseProduct(rho)).sum().real());
        traj.values.push_back(std::move(row));
        if (options_.check_states) {
          const auto diag = diagnose_state(rho);
          traj.max_trace_error = std::max(traj.max_trace_error, diag.trace_error);
          traj.max_hermiticity_error = std::max(traj.max_hermiticity_error, diag.hermiticity_error);
          traj.min_eigenvalue = std::min(traj.min_eigenvalue, diag.min_eigenvalue);
        }
        if (options_.store_states) traj.states.emplace_back(rho);
      }
    }
  }
  if (total - prev > 0.0) v = evolve(v, total - prev, steps_for(total - prev));
  traj.final_state = Eigen::Map<const Matrix>(v.data(), d, d);
  return traj;
}

Trajectory propagate(const Matrix& rho0, const LindbladModel& model, const ControlSchedule& schedule,
                     const std::vector<Observable>& observables, const PropagationOptions& options) {
  Propagator prop(model, options);
  return prop.run(rho0, schedule, observables);
}

LindbladModel build_exact_model(const SpinRegister& reg, const ExactModelOptions& options) {
  HamiltonianOptions hopt;
  hopt.internuclear_dipolar = options.internuclear_dipolar;
  LindbladModel model;
  model.layout = reg.layout();
  model.hamiltonian = build_full_hamiltonian(reg, hopt);

  const double flip_rate = 1.0 / (2.0 * reg.t1_rho);
  model.collapse.push_back({{nv_operator(model.layout, spin::raise()), "NV |+x><-x|"}, flip_rate});
  model.collapse.push_back({{nv_operator(model.layout, spin::lower()), "NV |-x><+x|"}, flip_rate});
  if (options.nv_dephasing_rate < 0.0) throw InputError("NV dephasing rate must be non-negative");
  if (options.nv_dephasing_rate > 0.0) {
    model.collapse.push_back({{nv_operator(model.layout, spin::z()), "NV sz"}, 2.0 * options.nv_dephasing_rate});
  }
  for (int k = 0; k < model.layout.nuclei; ++k) {
    const auto& n = reg.nuclei[static_cast<std::size_t>(k)];
    if (std::isfinite(n.t2)) {
      model.collapse.push_back({{nuclear_operator(model.layout, k, spin::z()), n.label + " Iz"}, 2.0 / n.t2});
    }
  }
  return model;
}

Matrix nuclear_projector(const SystemLayout& layout, const std::vector<bool>& up) {
  if (static_cast<int>(up.size()) != layout.nuclei) throw InputError("projector needs one entry per nucleus");
  std::vector<Eigen::Matrix2cd> factors;
  if (layout.has_nv) factors.push_back(Eigen::Matrix2cd::Identity());
  for (bool u : up) factors.push_back(u ? spin_up_state() : spin_down_state());
  return product_state(factors);
}

}  // namespace spinbus
