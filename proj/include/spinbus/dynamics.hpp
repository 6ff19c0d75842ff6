#pragma once

#include "spinbus/spin_core.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace spinbus {

struct CollapseOperator {
  Operator op;
  double rate = 0.0;  // 1/s
};

struct LindbladModel {
  SystemLayout layout;
  Operator hamiltonian;
  std::vector<CollapseOperator> collapse;

  // Dimensions agree with the layout, rates are finite and non-negative,
  // H is Hermitian to 1e-12 relative.
  void validate() const;
};

// Instantaneous rotation exp(-i angle axis.I) on each listed nucleus.
struct PulseEvent {
  double time = 0.0;
  Vec3 axis = Vec3::UnitX();
  double angle = 0.0;
  std::vector<int> targets;
};

struct ControlSchedule {
  double duration = 0.0;
  std::optional<double> reset_period;  // no resets when empty
  std::vector<PulseEvent> pulses;

  void validate(const SystemLayout& layout) const;
  std::vector<double> reset_times() const;
};

// Re Tr(op rho) recorded on the output grid.
struct Observable {
  std::string label;
  Matrix op;
};

enum class Stepping {
  kPoweredMap,      // RK4 step map raised to the segment's step count
  kDirectStepping,  // one RK4 update per step on the state vector
};

struct PropagationOptions {
  double steps_per_period = 128.0;  // h <= 2 pi / (steps_per_period (lambda_max - lambda_min))
  double max_step = kInfinity;     // s, extra upper bound on h
  std::vector<double> output_times;
  double output_interval = 0.0;  // used when output_times is empty; 0 records only 0 and T
  bool store_states = false;
  bool check_states = true;  // trace / Hermiticity / eigenvalue diagnostics at every output
  std::int64_t max_total_steps = 4'000'000'000;
  Stepping method = Stepping::kPoweredMap;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<std::string> labels;
  std::vector<std::vector<double>> values;  // values[k][j]: observable j at times[k]
  std::vector<Matrix> states;
  Matrix final_state;
  double max_trace_error = 0.0;
  double max_hermiticity_error = 0.0;
  double min_eigenvalue = 1.0;
  std::int64_t total_steps = 0;

  std::vector<double> column(const std::string& label) const;
  void write_csv(std::ostream& out) const;
};

// Kronecker product with `a` as the more significant factor.
Matrix kron(const Matrix& a, const Matrix& b);

// -i[H, rho] + sum_k r_k (L rho L^dag - {L^dag L, rho}/2)
Matrix lindblad_rhs(const Matrix& rho, const LindbladModel& model);

// Column-stacked superoperator of lindblad_rhs: vec(drho/dt) = L vec(rho).
Matrix liouvillian(const LindbladModel& model);

// |-x><-x| for the dressed NV (basis state 1).
Eigen::Matrix2cd nv_reset_state();

// Tensor product of single-site density matrices, site 0 first.
Matrix product_state(const std::vector<Eigen::Matrix2cd>& factors);
Eigen::Matrix2cd spin_up_state();
Eigen::Matrix2cd spin_down_state();
Eigen::Matrix2cd mixed_state();

// Trace over every site not in `keep`; the kept sites stay in ascending order.
Matrix partial_trace(const Matrix& rho, int sites, const std::vector<int>& keep);

// Tr_NV rho, then |-x><-x| (x) that marginal.
Matrix reset_channel(const Matrix& rho, const SystemLayout& layout);

Matrix apply_pulse(const Matrix& rho, const SystemLayout& layout, const Vec3& axis, double angle,
                   const std::vector<int>& targets);
Matrix pulse_unitary(const SystemLayout& layout, const Vec3& axis, double angle,
                     const std::vector<int>& targets);

struct StateDiagnostics {
  double trace_error;
  double hermiticity_error;
  double min_eigenvalue;
};
StateDiagnostics diagnose_state(const Matrix& rho);

// Fixed-step RK4 integrator with scheduled resets and pulses. Each instance
// keeps its own cache of segment maps; instances are not shared across threads.
class Propagator {
 public:
  explicit Propagator(LindbladModel model, PropagationOptions options = {});

  Trajectory run(const Matrix& rho0, const ControlSchedule& schedule,
                 const std::vector<Observable>& observables = {});

  // Image of an arbitrary operator under the scheduled map (linear, no state checks).
  Matrix apply(const Matrix& x0, const ControlSchedule& schedule);

  double step_bound() const { return h_max_; }
  const Matrix& generator() const { return generator_; }
  const LindbladModel& model() const { return model_; }

 private:
  Vector evolve(const Vector& v, double dt, std::int64_t steps);
  const Matrix& segment_map(double dt, std::int64_t steps);
  std::int64_t steps_for(double dt) const;
  Trajectory run_impl(const Matrix& x0, const ControlSchedule& schedule, const std::vector<Observable>& observables,
                      bool record);

  LindbladModel model_;
  PropagationOptions options_;
  Matrix generator_;
  double h_max_ = 0.0;
  std::map<std::pair<std::int64_t, std::int64_t>, Matrix> maps_;
};

Trajectory propagate(const Matrix& rho0, const LindbladModel& model, const ControlSchedule& schedule,
                     const std::vector<Observable>& observables = {}, const PropagationOptions& options = {});

struct ExactModelOptions {
  bool internuclear_dipolar = false;
  double nv_dephasing_rate = 0.0;  // 1/s, decay rate of dressed-state coherence
};

// Full Hamiltonian plus D_e (|+x><-x|, |-x><+x| at 1/(2 T1rho) each) and
// D_n (Iz at 2/T2 per nucleus with finite T2).
LindbladModel build_exact_model(const SpinRegister& reg, const ExactModelOptions& options = {});

// Projector onto a nuclear computational state (true = up) padded over the NV.
Matrix nuclear_projector(const SystemLayout& layout, const std::vector<bool>& up);

}  // namespace spinbus
