#pragma once

#include "spinbus/dynamics.hpp"
#include "spinbus/spin_core.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace spinbus {

enum class PolarizationModel {
  kPrinted,       // two-branch closed form, exact average below its range of validity
  kTimeAveraged,  // exact time average of the reset-state population
};

struct Polarization {
  double p_plus = 0.0;   // majority (reset state) population
  double p_minus = 0.0;  // minority population
  double p = 0.0;        // p_plus - p_minus
  double time_averaged = 0.0;
  bool substituted = false;
  std::string diagnostic;
};

// x = t_re / T1rho. Branch x <= 1: 1 - e^-x / (2x); branch x > 1: 1/2 - (1 - e^-1) / (2x).
Polarization steady_state_polarization(double t_re, double t1_rho,
                                       PolarizationModel model = PolarizationModel::kPrinted);
// 1/2 + (1 - e^-x) / (2x)
double time_averaged_reset_population(double t_re, double t1_rho);

double relaxation_rate(double t_re, double t1_rho);  // Gamma_N = 1/T1rho + 1/t_re

struct Detunings {
  double plus;
  double minus;
};
// Delta_pm = Omega +- (w_L + a_par/2)
Detunings detunings(double rabi, double larmor, double a_par);

// Delta / (Delta^2 + (Gamma_N/2)^2)
double lorentz_dispersive(double delta, double gamma_n);
// Gamma_N / (Delta^2 + (Gamma_N/2)^2)
double lorentz_absorptive(double delta, double gamma_n);

// Second-order nuclear frequency shift from virtual NV flips:
// a_par/2 - (a_perp^2/16) [D(Delta-) - D(Delta+)], D the dispersive Lorentzian.
double effective_shift(double a_par, double a_perp, const Detunings& d, double gamma_n);
// Same bracket with a plus sign between the two Lorentzians.
double effective_shift_printed(double a_par, double a_perp, const Detunings& d, double gamma_n);
// Static shift from the transverse hyperfine field: |(w_L + a_par/2, a_perp/2)| - (w_L + a_par/2).
double hyperfine_tilt_shift(double larmor, double a_par, double a_perp);

// Precession frequency of a nucleus with the NV in its quasi-steady state.
double effective_nuclear_frequency(const NuclearSpin& n, double rabi, double gamma_n);

// A_wo = sum_i (a_perp1 a_perp2 / 32) [D(Delta-_i) + D(Delta+_i)]
double effective_coupling(const NuclearSpin& n1, const NuclearSpin& n2, double rabi, double gamma_n);

// Symmetrized Gamma_eff from (a_perp_i a_perp_j / 32) [A(Delta+_j) + A(Delta-_i)].
Eigen::Matrix2d effective_dissipator(const NuclearSpin& n1, const NuclearSpin& n2, double rabi, double gamma_n);

struct EffectiveParams {
  Polarization polarization;
  double gamma_n = 0.0;
  std::vector<Detunings> detuning;
  std::vector<double> delta;      // effective_shift per nucleus
  std::vector<double> tilt;       // hyperfine_tilt_shift per nucleus
  std::vector<double> frequency;  // w_L + tilt + delta
  double a_wo = 0.0;
  // Coefficient of the flip-flop (I+I- + I-I+) in H_eff. With the NV reset
  // to the lower dressed state it equals -p A_wo.
  double flip_flop = 0.0;
  Eigen::Matrix2d gamma_eff = Eigen::Matrix2d::Zero();
  std::vector<std::string> warnings;

  double p_a_wo() const { return polarization.p * a_wo; }
  // First full transfer |du> -> |ud| on resonance, pi / (2 |p A_wo|).
  double transfer_time() const;
};

struct EffectiveOptions {
  PolarizationModel polarization = PolarizationModel::kPrinted;
};

EffectiveParams effective_params(const SpinRegister& reg, double t_re, const EffectiveOptions& options = {});

// Validity rule: max a_perp / min |Delta| > 0.1 or Gamma_N > min |Delta| / 10.
std::vector<std::string> validity_warnings(const SpinRegister& reg, double gamma_n);

// Nuclei-only model: H_eff plus nuclear dephasing plus Gamma_eff collapse
// operators built from I- combinations. Negative eigenvalues of Gamma_eff are
// dropped and reported in params.warnings.
LindbladModel build_effective_liouvillian(const SpinRegister& reg, double t_re, EffectiveParams* params = nullptr,
                                          const EffectiveOptions& options = {});

// 1 - (pA)^2 sin^2(t W / 2) / (2 W^2), W^2 = (pA)^2 + (d1 - d2)^2
double closed_form_signal(double t, double p_a_wo, double delta1, double delta2);

struct ResonanceResult {
  double rabi = 0.0;
  double residual = 0.0;  // nu_1 - nu_2 at the root, rad/s
  bool degenerate = false;
  std::vector<std::string> warnings;
};

// Bisection on nu_sensor(Omega) - nu_target(Omega) over [rabi_lo, rabi_hi].
ResonanceResult resonance_solve(const NuclearSpin& sensor, const NuclearSpin& target, double rabi_lo,
                                double rabi_hi, double t_re, double t1_rho, double rel_tol = 1e-9);

// Target a_par (rad/s) that puts the target on resonance with the sensor at
// fixed Omega; the transverse component is held. Throws NoRootError when no
// a_par within +-2 pi 10 MHz of the sensor's value works.
double match_a_par(const NuclearSpin& sensor, const NuclearSpin& target, double rabi, double t_re, double t1_rho);

struct SensitivityEstimate {
  double exact = 0.0;        // |p A_wo| sqrt(1 / Gamma_eff_11), s^-1/2
  double approximate = 0.0;  // (a_perp_target / 4) sqrt(T1rho)
  double ratio = 0.0;
};
// Sensor is nucleus 0, target nucleus 1, with t_re = T1rho.
SensitivityEstimate sensitivity_estimate(const SpinRegister& reg);

std::string format_report(const EffectiveParams& params, const SpinRegister& reg);

}  // namespace spinbus
