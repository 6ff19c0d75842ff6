#include "spinbus/effective.hpp"

#include "spinbus/constants.hpp"
#include "spinbus/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace spinbus {

namespace {

void require_pair(const SpinRegister& reg, const char* what) {
  if (reg.nuclei.size() < 2) throw InputError(std::string(what) + " needs at least two nuclei");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

double hz(double w) { return w / constants::kTwoPi; }

}  // namespace

double time_averaged_reset_population(double t_re, double t1_rho) {
  if (!(t_re > 0.0) || !(t1_rho > 0.0)) throw InputError("t_re and T1rho must be positive");
  const double x = t_re / t1_rho;
  return 0.5 + (-std::expm1(-x)) / (2.0 * x);
}

Polarization steady_state_polarization(double t_re, double t1_rho, PolarizationModel model) {
  Polarization out;
  out.time_averaged = time_averaged_reset_population(t_re, t1_rho);
  const double x = t_re / t1_rho;

  double majority = out.time_averaged;
  if (model == PolarizationModel::kPrinted) {
    if (x <= 1.0) {
      const double v = 1.0 - std::exp(-x) / (2.0 * x);
      if (x < 0.1 || v < 0.0 || v > 1.0) {
        out.substituted = true;
        std::ostringstream os;
        os << "t_re/T1rho = " << x << ": closed-form population " << v
           << " replaced by the exact time average " << out.time_averaged;
        out.diagnostic = os.str();
      } else {
        majority = std::max(v, 1.0 - v);
      }
    } else {
      const double v = 0.5 - (1.0 - std::exp(-1.0)) / (2.0 * x);
      majority = std::max(v, 1.0 - v);
    }
  }
  out.p_plus = majority;
  out.p_minus = 1.0 - majority;
  out.p = out.p_plus - out.p_minus;
  return out;
}

double relaxation_rate(double t_re, double t1_rho) {
  if (!(t_re > 0.0) || !(t1_rho > 0.0)) throw InputError("t_re and T1rho must be positive");
  return 1.0 / t1_rho + 1.0 / t_re;
}

Detunings detunings(double rabi, double larmor, double a_par) {
  const double w = larmor + 0.5 * a_par;
  return {rabi + w, rabi - w};
}

double lorentz_dispersive(double delta, double gamma_n) {
  const double g = 0.5 * gamma_n;
  return delta / (delta * delta + g * g);
}

double lorentz_absorptive(double delta, double gamma_n) {
  const double g = 0.5 * gamma_n;
  return gamma_n / (delta * delta + g * g);
}

double effective_shift(double a_par, double a_perp, const Detunings& d, double gamma_n) {
  return 0.5 * a_par -
         (a_perp * a_perp / 16.0) * (lorentz_dispersive(d.minus, gamma_n) - lorentz_dispersive(d.plus, gamma_n));
}

double effective_shift_printed(double a_par, double a_perp, const Detunings& d, double gamma_n) {
  return 0.5 * a_par -
         (a_perp * a_perp / 16.0) * (lorentz_dispersive(d.minus, gamma_n) + lorentz_dispersive(d.plus, gamma_n));
}

double hyperfine_tilt_shift(double larmor, double a_par, double a_perp) {
  const double w = larmor + 0.5 * a_par;
  const double t = 0.5 * a_perp;
  // hypot(w, t) - |w| without cancellation
  return t * t / (std::hypot(w, t) + std::abs(w));
}

double effective_nuclear_frequency(const NuclearSpin& n, double rabi, double gamma_n) {
  const auto d = detunings(rabi, n.larmor, n.a_par);
  return n.larmor + hyperfine_tilt_shift(n.larmor, n.a_par, n.a_perp) + effective_shift(n.a_par, n.a_perp, d, gamma_n);
}

double effective_coupling(const NuclearSpin& n1, const NuclearSpin& n2, double rabi, double gamma_n) {
  const double pref = n1.a_perp * n2.a_perp / 32.0;
  double sum = 0.0;
  for (const auto* n : {&n1, &n2}) {
    const auto d = detunings(rabi, n->larmor, n->a_par);
    sum += lorentz_dispersive(d.minus, gamma_n) + lorentz_dispersive(d.plus, gamma_n);
  }
  return pref * sum;
}

Eigen::Matrix2d effective_dissipator(const NuclearSpin& n1, const NuclearSpin& n2, double rabi, double gamma_n) {
  const NuclearSpin* n[2] = {&n1, &n2};
  Detunings d[2];
  for (int i = 0; i < 2; ++i) d[i] = detunings(rabi, n[i]->larmor, n[i]->a_par);
  Eigen::Matrix2d g;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      g(i, j) = (n[i]->a_perp * n[j]->a_perp / 32.0) *
                (lorentz_absorptive(d[j].plus, gamma_n) + lorentz_absorptive(d[i].minus, gamma_n));
    }
  }
  return 0.5 * (g + g.transpose());
}

double EffectiveParams::transfer_time() const {
  if (flip_flop == 0.0) return kInfinity;
  return constants::kPi / (2.0 * std::abs(flip_flop));
}

std::vector<std::string> validity_warnings(const SpinRegister& reg, double gamma_n) {
  std::vector<std::string> out;
  double max_perp = 0.0;
  double min_delta = kInfinity;
  for (const auto& n : reg.nuclei) {
    const auto d = detunings(reg.rabi, n.larmor, n.a_par);
    max_perp = std::max(max_perp, n.a_perp);
    min_delta = std::min({min_delta, std::abs(d.plus), std::abs(d.minus)});
  }
  if (min_delta == 0.0 || max_perp / min_delta > 0.1) {
    out.push_back("effective model outside its range: max a_perp / min |Delta| = " +
                  (min_delta == 0.0 ? std::string("inf") : fmt(max_perp / min_delta)) + " > 0.1");
  }
  if (gamma_n > min_delta / 10.0) {
    out.push_back("effective model outside its range: Gamma_N = " + fmt(gamma_n) + " /s exceeds min |Delta| / 10 = " +
                  fmt(min_delta / 10.0) + " rad/s");
  }
  return out;
}

EffectiveParams effective_params(const SpinRegister& reg, double t_re, const EffectiveOptions& options) {
  reg.validate();
  require_pair(reg, "effective model");
  EffectiveParams out;
  out.polarization = steady_state_polarization(t_re, reg.t1_rho, options.polarization);
  out.gamma_n = relaxation_rate(t_re, reg.t1_rho);
  for (const auto& n : reg.nuclei) {
    const auto d = detunings(reg.rabi, n.larmor, n.a_par);
    out.detuning.push_back(d);
    out.delta.push_back(effective_shift(n.a_par, n.a_perp, d, out.gamma_n));
    out.tilt.push_back(hyperfine_tilt_shift(n.larmor, n.a_par, n.a_perp));
    out.frequency.push_back(n.larmor + out.tilt.back() + out.delta.back());
  }
  out.a_wo = effective_coupling(reg.nuclei[0], reg.nuclei[1], reg.rabi, out.gamma_n);
  out.flip_flop = -out.polarization.p * out.a_wo;
  out.gamma_eff = effective_dissipator(reg.nuclei[0], reg.nuclei[1], reg.rabi, out.gamma_n);
  if (out.polarization.substituted) out.warnings.push_back(out.polarization.diagnostic);
  for (auto& w : validity_warnings(reg, out.gamma_n)) out.warnings.push_back(std::move(w));
  if (reg.nuclei.size() > 2) {
    out.warnings.push_back("pair quantities use nuclei 0 and 1; the remaining nuclei are not coupled");
  }
  return out;
}

LindbladModel build_effective_liouvillian(const SpinRegister& reg, double t_re, EffectiveParams* params,
                                          const EffectiveOptions& options) {
  if (reg.nuclei.size() != 2) throw InputError("effective Liouvillian needs exactly two nuclei");
  EffectiveParams p = effective_params(reg, t_re, options);
  LindbladModel model;
  model.layout = {false, 2};
  const auto& L = model.layout;
  Matrix h = p.frequency[0] * nuclear_operator(L, 0, spin::z()) + p.frequency[1] * nuclear_operator(L, 1, spin::z());
  const Matrix ff = nuclear_operator(L, 0, spin::raise()) * nuclear_operator(L, 1, spin::lower());
  h += p.flip_flop * (ff + ff.adjoint());
  model.hamiltonian = {std::move(h), "H_eff"};

  for (int k = 0; k < 2; ++k) {
    const auto& n = reg.nuclei[static_cast<std::size_t>(k)];
    if (std::isfinite(n.t2)) model.collapse.push_back({{nuclear_operator(L, k, spin::z()), n.label + " Iz"}, 2.0 / n.t2});
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(p.gamma_eff);
  for (int k = 0; k < 2; ++k) {
    const double rate = es.eigenvalues()[k];
    if (rate < 0.0) {
      if (rate < -1e-12 * p.gamma_eff.cwiseAbs().maxCoeff()) {
        p.warnings.push_back("Gamma_eff eigenvalue " + fmt(rate) + " /s dropped (matrix not positive semidefinite)");
      }
      continue;
    }
    const auto u = es.eigenvectors().col(k);
    Matrix c = u[0] * nuclear_operator(L, 0, spin::lower()) + u[1] * nuclear_operator(L, 1, spin::lower());
    model.collapse.push_back({{std::move(c), "Gamma_eff mode " + std::to_string(k)}, rate});
  }
  if (params) *params = std::move(p);
  return model;
}

double closed_form_signal(double t, double p_a_wo, double delta1, double delta2) {
  const double a2 = p_a_wo * p_a_wo;
  const double dd = delta1 - delta2;
  const double w2 = a2 + dd * dd;
  if (w2 == 0.0) return 1.0;
  const double s = std::sin(0.5 * t * std::sqrt(w2));
  return 1.0 - a2 * s * s / (2.0 * w2);
}

ResonanceResult resonance_solve(const NuclearSpin& sensor, const NuclearSpin& target, double rabi_lo,
                                double rabi_hi, double t_re, double t1_rho, double rel_tol) {
  if (!(rabi_lo > 0.0) || !(rabi_hi > rabi_lo)) throw InputError("Rabi bracket must satisfy 0 < lo < hi");
  const double gamma_n = relaxation_rate(t_re, t1_rho);
  auto f = [&](double rabi) {
    return effective_nuclear_frequency(sensor, rabi, gamma_n) - effective_nuclear_frequency(target, rabi, gamma_n);
  };
  ResonanceResult out;
  out.warnings.push_back(
      "the resonance depends on Omega only at second order in a_perp / Delta; small Rabi fluctuations barely move it");

  double lo = rabi_lo, hi = rabi_hi;
  double flo = f(lo), fhi = f(hi);
  const double mid0 = 0.5 * (lo + hi);
  if (flo == 0.0 && fhi == 0.0 && f(mid0) == 0.0) {
    out.rabi = mid0;
    out.degenerate = true;
    out.warnings.push_back("resonance holds for every Omega in the bracket; returning the midpoint");
    return out;
  }
  if (flo == 0.0) {
    out.rabi = lo;
    return out;
  }
  if (fhi == 0.0) {
    out.rabi = hi;
    return out;
  }
  if ((flo > 0.0) == (fhi > 0.0)) {
    std::ostringstream os;
    os << "no sign change of nu_sensor - nu_target on [" << hz(lo) << ", " << hz(hi)
       << "] Hz: endpoint values " << hz(flo) << " Hz and " << hz(fhi) << " Hz";
    throw NoRootError(os.str());
  }
  while (hi - lo > rel_tol * 0.5 * (hi + lo)) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if (fm == 0.0) {
      lo = hi = mid;
      break;
    }
    if ((fm > 0.0) == (flo > 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  out.rabi = 0.5 * (lo + hi);
  out.residual = f(out.rabi);
  return out;
}

double match_a_par(const NuclearSpin& sensor, const NuclearSpin& target, double rabi, double t_re, double t1_rho) {
  const double gamma_n = relaxation_rate(t_re, t1_rho);
  const double goal = effective_nuclear_frequency(sensor, rabi, gamma_n);
  NuclearSpin probe = target;
  auto f = [&](double a_par) {
    probe.a_par = a_par;
    return effective_nuclear_frequency(probe, rabi, gamma_n) - goal;
  };
  double lo = sensor.a_par, hi = sensor.a_par;
  double step = constants::khz(1.0);
  while (f(lo) > 0.0) {
    lo -= step;
    step *= 2.0;
    if (step > constants::khz(1e4)) throw NoRootError("no target a_par below the sensor's matches the resonance");
  }
  step = constants::khz(1.0);
  while (f(hi) < 0.0) {
    hi += step;
    step *= 2.0;
    if (step > constants::khz(1e4)) throw NoRootError("no target a_par above the sensor's matches the resonance");
  }
  for (int it = 0; it < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

SensitivityEstimate sensitivity_estimate(const SpinRegister& reg) {
  if (reg.nuclei.size() != 2) throw InputError("sensitivity estimate needs a sensor and one target");
  const auto p = effective_params(reg, reg.t1_rho);
  SensitivityEstimate out;
  const double g11 = p.gamma_eff(0, 0);
  out.exact = g11 > 0.0 ? std::abs(p.p_a_wo()) * std::sqrt(1.0 / g11) : kInfinity;
  out.approximate = 0.25 * reg.nuclei[1].a_perp * std::sqrt(reg.t1_rho);
  out.ratio = out.exact / out.approximate;
  return out;
}

std::string format_report(const EffectiveParams& p, const SpinRegister& reg) {
  std::ostringstream os;
  os << "# frequencies in Hz (divided by 2 pi), rates in 1/s\n";
  os << "p_plus = " << fmt(p.polarization.p_plus) << '\n';
  os << "p_minus = " << fmt(p.polarization.p_minus) << '\n';
  os << "p = " << fmt(p.polarization.p) << '\n';
  os << "p_time_averaged = " << fmt(2.0 * p.polarization.time_averaged - 1.0) << '\n';
  os << "gamma_N = " << fmt(p.gamma_n) << '\n';
  for (std::size_t i = 0; i < p.detuning.size(); ++i) {
    const std::string k = reg.nuclei[i].label;
    os << "delta_plus[" << k << "] = " << fmt(hz(p.detuning[i].plus)) << '\n';
    os << "delta_minus[" << k << "] = " << fmt(hz(p.detuning[i].minus)) << '\n';
    os << "delta[" << k << "] = " << fmt(hz(p.delta[i])) << '\n';
    os << "delta_printed[" << k << "] = "
       << fmt(hz(effective_shift_printed(reg.nuclei[i].a_par, reg.nuclei[i].a_perp, p.detuning[i], p.gamma_n)))
       << '\n';
    os << "tilt[" << k << "] = " << fmt(hz(p.tilt[i])) << '\n';
    os << "frequency_offset[" << k << "] = " << fmt(hz(p.frequency[i] - reg.nuclei[i].larmor)) << '\n';
  }
  os << "detuning_01 = " << fmt(hz(p.frequency[0] - p.frequency[1])) << '\n';
  os << "a_wo = " << fmt(hz(p.a_wo)) << '\n';
  os << "p_a_wo = " << fmt(hz(p.p_a_wo())) << '\n';
  os << "flip_flop = " << fmt(hz(p.flip_flop)) << '\n';
  os << "gamma_eff_00 = " << fmt(p.gamma_eff(0, 0)) << '\n';
  os << "gamma_eff_01 = " << fmt(p.gamma_eff(0, 1)) << '\n';
  os << "gamma_eff_11 = " << fmt(p.gamma_eff(1, 1)) << '\n';
  os << "transfer_time_s = " << fmt(p.transfer_time()) << '\n';
  for (const auto& w : p.warnings) os << "warning = " << w << '\n';
  return os.str();
}

}  // namespace spinbus
