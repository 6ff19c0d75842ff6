#include <doctest.h>

#include "spinbus/constants.hpp"
#include "spinbus/dynamics.hpp"
#include "spinbus/effective.hpp"
#include "spinbus/error.hpp"
#include "spinbus/protocol.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>
#include <sstream>

using namespace spinbus;
using constants::hz;
using constants::khz;

namespace {

Matrix random_unitary(std::mt19937& rng, Eigen::Index d) {
  std::normal_distribution<double> g;
  Matrix a(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) a(i, j) = Complex(g(rng), g(rng));
  Eigen::HouseholderQR<Matrix> qr(a);
  return qr.householderQ();
}

Matrix expm_hermitian(const Matrix& h, double t) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(h);
  Vector phases(h.rows());
  for (Eigen::Index k = 0; k < h.rows(); ++k) phases(k) = std::exp(Complex(0.0, -t * es.eigenvalues()(k)));
  return es.eigenvectors() * phases.asDiagonal() * es.eigenvectors().adjoint();
}

Matrix vec(const Matrix& m) { return Eigen::Map<const Matrix>(m.data(), m.size(), 1); }

// Two-nucleus register of the fig2a gate pair.
SpinRegister gate_pair(double rabi) {
  SpinRegister reg;
  reg.rabi = rabi;
  reg.t1_rho = 1e-3;
  const auto f = reg.frame();
  reg.nuclei.push_back(NuclearSpin::from_components("n1", khz(1.99), khz(2.01), khz(200), f));
  reg.nuclei.push_back(NuclearSpin::from_components("n2", khz(2.00), khz(5.01), khz(200), f));
  return reg;
}

}  // namespace

TEST_SUITE("protocol") {
  TEST_CASE("fully depolarizing channel has fidelity 1/4 against any unitary") {
    // vec(rho) -> Tr(rho) I/4
    Matrix trace_row = Matrix::Zero(1, 16);
    for (int k = 0; k < 4; ++k) trace_row(0, k * 4 + k) = 1.0;
    const Matrix channel = vec(Matrix(Matrix::Identity(4, 4) / 4.0)) * trace_row;
    std::mt19937 rng(7);
    for (int trial = 0; trial < 3; ++trial) {
      CHECK(average_gate_fidelity(channel, random_unitary(rng, 4)) == doctest::Approx(0.25).epsilon(1e-12));
    }
    CHECK(average_gate_fidelity(channel, flip_flop_unitary(1.0, 0.3)) == doctest::Approx(0.25).epsilon(1e-12));
  }

  TEST_CASE("identity against the full flip-flop gives 0.4") {
    const Matrix u = flip_flop_unitary(1.0, constants::kPi / 2.0);
    // oracle: F_e = |Tr U / d|^2
    const double f_e = std::norm(u.trace() / 4.0);
    CHECK(f_e == doctest::Approx(0.25).epsilon(1e-12));
    const double f = average_gate_fidelity(Matrix::Identity(16, 16), u);
    CHECK(f == doctest::Approx((4.0 * f_e + 1.0) / 5.0).epsilon(1e-12));
    CHECK(f == doctest::Approx(0.4).epsilon(1e-12));
  }

  TEST_CASE("non trace preserving channels are rejected") {
    CHECK_THROWS_AS(average_gate_fidelity(0.9 * Matrix::Identity(16, 16), Matrix::Identity(4, 4)), ValidationError);
    CHECK_THROWS_AS(average_gate_fidelity(Matrix::Identity(9, 9), Matrix::Identity(4, 4)), InputError);
  }

  TEST_CASE("fidelity is one exactly at the target and below one elsewhere") {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 5; ++trial) {
      const Matrix u = random_unitary(rng, 4);
      CHECK(std::abs(average_gate_fidelity(unitary_channel(u), u) - 1.0) < 1e-9);
      const Matrix v = random_unitary(rng, 4);
      const double f = average_gate_fidelity(unitary_channel(v), u);
      CHECK(f >= 0.0);
      CHECK(f < 1.0 - 1e-6);
    }
  }

  TEST_CASE("fidelity is flat to second order around the target") {
    std::mt19937 rng(3);
    const Matrix u = random_unitary(rng, 4);
    Matrix h = random_unitary(rng, 4);
    h = (h + h.adjoint()).eval();
    auto loss = [&](double eps) {
      return 1.0 - average_gate_fidelity(unitary_channel(Matrix(u * expm_hermitian(h, eps))), u);
    };
    const double e = 1e-3;
    CHECK(loss(e) > 0.0);
    CHECK(loss(2.0 * e) / loss(e) == doctest::Approx(4.0).epsilon(1e-3));
    CHECK(loss(e) / (e * e) == doctest::Approx(loss(e / 4.0) / (e * e / 16.0)).epsilon(1e-3));
  }

  TEST_CASE("uncoupled nuclei realise the identity gate") {
    SpinRegister reg;
    reg.rabi = khz(300);
    reg.t1_rho = 1e-3;
    const auto f = reg.frame();
    reg.nuclei.push_back(NuclearSpin::from_components("a", 0.0, 0.0, khz(200), f));
    reg.nuclei.push_back(NuclearSpin::from_components("b", 0.0, 0.0, khz(200), f));
    GateOptions opt;
    opt.gate_time = 3.3e-3;
    const auto r = run_gate_experiment(reg, opt);
    CHECK(r.params.a_wo == 0.0);
    CHECK((r.target - Matrix::Identity(4, 4)).norm() < 1e-15);
    CHECK(r.fidelity >= 1.0 - 1e-6);
    CHECK(r.trace_preservation_error < 1e-9);
    // the populations stay in |down, up>
    const auto p_du = r.trajectory.column("p_du");
    for (double v : p_du) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  }

  TEST_CASE("gate needs a defined gate time") {
    SpinRegister reg;
    reg.rabi = khz(300);
    reg.t1_rho = 1e-3;
    const auto f = reg.frame();
    reg.nuclei.push_back(NuclearSpin::from_components("a", 0.0, 0.0, khz(200), f));
    reg.nuclei.push_back(NuclearSpin::from_components("b", 0.0, 0.0, khz(200), f));
    CHECK_THROWS_AS(run_gate_experiment(reg), InputError);
    reg.nuclei.pop_back();
    GateOptions opt;
    opt.gate_time = 1e-3;
    CHECK_THROWS_AS(run_gate_experiment(reg, opt), InputError);
  }

  TEST_CASE("WAHUHA schedule layout") {
    CHECK(wahuha_schedule(0.0, 5e-6, {0}).empty());
    CHECK_THROWS_AS(wahuha_schedule(1e-3, 1.1e-4, {0}), InputError);
    CHECK_THROWS_AS(wahuha_schedule(1e-3, 0.0, {0}), InputError);

    const double tau = 1e-5;
    const auto s = wahuha_schedule(3 * 6 * tau, tau, {0, 1});
    REQUIRE(s.size() == 12);
    CHECK(s[0].time == doctest::Approx(tau));
    CHECK(s[1].time == doctest::Approx(2 * tau));
    CHECK(s[2].time == doctest::Approx(4 * tau));
    CHECK(s[3].time == doctest::Approx(5 * tau));
    CHECK(s[4].time == doctest::Approx(7 * tau));
    CHECK((s[1].axis + Vec3::UnitY()).norm() < 1e-15);
    for (const auto& p : s) {
      CHECK(p.angle == doctest::Approx(constants::kPi / 2));
      CHECK(p.targets == std::vector<int>{0, 1});
    }
  }

  TEST_CASE("WAHUHA scales the Zeeman term by 1/sqrt(3)") {
    const double tau = 2e-6;
    const double total = 4 * 6 * tau;
    const Vec3 n = average_zeeman_axis(wahuha_schedule(total, tau, {0}), total);
    CHECK(n.norm() == doctest::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-12));
    // each toggled direction is spent in equally: x, y and z weights 1/3
    for (int k = 0; k < 3; ++k) CHECK(std::abs(n(k)) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(average_zeeman_axis({}, total).isApprox(Vec3::UnitZ()));

    // simulated: a rotating-frame offset w Iz under the sequence precesses about n at w |n|
    const double w = hz(2000.0);
    LindbladModel m;
    m.layout = {false, 1};
    m.hamiltonian = {Matrix(w * Matrix(spin::z())), "offset"};
    const int cycles = 40;
    ControlSchedule sched;
    sched.duration = cycles * 6 * tau;
    sched.pulses = wahuha_schedule(sched.duration, tau, {0});
    const Vec3 axis = n.normalized();
    // a state perpendicular to n precesses; its overlap after time t is cos^2(w |n| t / 2)
    const Vec3 perp = axis.cross(Vec3::UnitZ()).normalized();
    const Matrix rho0 = 0.5 * Matrix::Identity(2, 2) + Matrix(spin::along(perp));
    const auto traj = propagate(rho0, m, sched, {{"overlap", rho0}});
    const double expected = std::pow(std::cos(0.5 * w * n.norm() * sched.duration), 2);
    CHECK(traj.values.back()[0] == doctest::Approx(expected).epsilon(2e-3));
  }

  TEST_CASE("WAHUHA returns uncoupled nuclei to their initial state every cycle") {
    const double larmor = khz(200);
    const double tau = 5e-6;
    const int cycles = 20;
    LindbladModel m;
    m.layout = {false, 2};
    m.hamiltonian = {Matrix(larmor * (nuclear_operator(m.layout, 0, spin::z()) + nuclear_operator(m.layout, 1, spin::z()))),
                     "zeeman"};
    ControlSchedule sched;
    sched.duration = cycles * 6 * tau;
    sched.pulses = to_lab_frame(wahuha_schedule(sched.duration, tau, {0, 1}), larmor);
    PropagationOptions opt;
    for (int c = 1; c <= cycles; ++c) opt.output_times.push_back(c * 6 * tau);
    opt.store_states = true;
    // RK4 phase error over ~1200 Larmor periods would otherwise dominate the 1e-9 budget
    opt.steps_per_period = 512;
    const Vec3 a = Vec3(0.3, -0.5, 0.8).normalized(), b = Vec3(-0.7, 0.1, 0.2).normalized();
    const Matrix rho0 = product_state({0.5 * spin::identity() + spin::along(a), 0.5 * spin::identity() + spin::along(b)});
    const auto traj = propagate(rho0, m, sched, {}, opt);
    REQUIRE(traj.states.size() == static_cast<std::size_t>(cycles));
    for (int c = 0; c < cycles; ++c) {
      // compare in the frame rotating at the Larmor frequency
      const Matrix free = expm_hermitian(m.hamiltonian.matrix, traj.times[static_cast<std::size_t>(c)]);
      const Matrix expected = free * rho0 * free.adjoint();
      const double fid = (expected * traj.states[static_cast<std::size_t>(c)]).trace().real();
      CHECK(1.0 - fid < 1e-9);
    }
  }

  TEST_CASE("WAHUHA suppresses homonuclear flip-flops") {
    const double d = hz(100.0);
    LindbladModel m;
    m.layout = {false, 2};
    const auto op = [&](int k, const Eigen::Matrix2cd& s) { return nuclear_operator(m.layout, k, s); };
    const Matrix dot = op(0, spin::x()) * op(1, spin::x()) + op(0, spin::y()) * op(1, spin::y()) +
                       op(0, spin::z()) * op(1, spin::z());
    m.hamiltonian = {Matrix(d * (3.0 * op(0, spin::z()) * op(1, spin::z()) - dot)), "dipolar"};
    const double tau = 1e-5;
    const int cycles = 100;
    const Matrix rho0 = product_state({spin_up_state(), spin_down_state()});
    const Matrix target = nuclear_projector(m.layout, {false, true});

    PropagationOptions opt;
    for (int c = 1; c <= cycles; ++c) opt.output_times.push_back(c * 6 * tau);
    ControlSchedule bare;
    bare.duration = cycles * 6 * tau;
    ControlSchedule decoupled = bare;
    decoupled.pulses = wahuha_schedule(bare.duration, tau, {0, 1});

    auto max_transfer = [&](const ControlSchedule& s) {
      const auto traj = propagate(rho0, m, s, {{"p", target}}, opt);
      double out = 0.0;
      for (const auto& row : traj.values) out = std::max(out, row[0]);
      return out;
    };
    const double without = max_transfer(bare);
    const double with = max_transfer(decoupled);
    CHECK(without > 0.9);
    CHECK(with * 10.0 <= without);
  }

  TEST_CASE("sensing without transverse couplings keeps the sensor") {
    SpinRegister reg = gate_pair(khz(300));
    const auto f = reg.frame();
    for (auto& n : reg.nuclei) n = NuclearSpin::from_components(n.label, n.a_par, 0.0, n.larmor, f);
    SensingOptions opt;
    opt.duration = 20e-3;
    for (auto obs : {SensingObservable::kSensorSurvival, SensingObservable::kPairPopulation}) {
      opt.observable = obs;
      const double s = sensing_protocol(reg, opt).signal;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    reg.nuclei.pop_back();
    opt.observable = SensingObservable::kSensorSurvival;
    CHECK(sensing_protocol(reg, opt).signal == doctest::Approx(1.0).epsilon(1e-6));
  }

  TEST_CASE("sensor alone decays only through the NV-induced dissipation") {
    SpinRegister reg = gate_pair(khz(300));
    reg.nuclei.pop_back();
    SensingOptions opt;
    opt.duration = 20e-3;
    const auto out = sensing_protocol(reg, opt);
    CHECK(out.signal <= 1.0);
    CHECK(out.signal > 0.97);
  }

  TEST_CASE("resonant sensing reaches the half contrast of the closed form") {
    SpinRegister reg = gate_pair(khz(300));
    const auto root = resonance_solve(reg.nuclei[0], reg.nuclei[1], khz(250), khz(290), 1e-3, reg.t1_rho);
    reg.rabi = root.rabi;
    const auto params = effective_params(reg, 1e-3);
    const double p_a = 2.0 * std::abs(params.flip_flop);
    SensingOptions opt;
    opt.duration = constants::kPi / p_a;
    const double s = sensing_protocol(reg, opt).signal;
    const double oracle = closed_form_signal(opt.duration, p_a, params.frequency[0], params.frequency[1]);
    CHECK(oracle == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(std::abs(s - oracle) < 0.07);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }

  TEST_CASE("sweeps agree with direct calls and do not depend on the worker count") {
    SweepSpec spec;
    spec.parameter = SweepParameter::kDeltaDetuning;
    spec.base = gate_pair(khz(300));
    spec.sensing.duration = 6e-3;
    spec.sensing.observable = SensingObservable::kPairPopulation;
    spec.grid = {-200.0};
    const auto single = spectrum_sweep(spec);
    REQUIRE(single.signal.size() == 1);
    const auto [reg, opt] = sweep_point(spec, spec.grid[0]);
    CHECK(single.signal[0] == sensing_protocol(reg, opt).signal);
    CHECK(reg.nuclei[1].a_par == doctest::Approx(spec.base.nuclei[1].a_par + hz(400.0)));
    CHECK(reg.nuclei[1].a_perp == doctest::Approx(spec.base.nuclei[1].a_perp));

    spec.grid = {-300.0, -100.0, 0.0, 100.0, 300.0};
    std::ostringstream one, four;
    spectrum_sweep(spec, 1).write_csv(one);
    spectrum_sweep(spec, 4).write_csv(four);
    CHECK(one.str() == four.str());
  }

  TEST_CASE("sweep failures become missing points") {
    SweepSpec spec;
    spec.parameter = SweepParameter::kEvolutionTime;
    spec.base = gate_pair(khz(300));
    spec.sensing.duration = 1e-3;
    spec.grid = {-1e-3, 1e-3};
    const auto r = spectrum_sweep(spec);
    CHECK(std::isnan(r.signal[0]));
    CHECK(!r.diagnostics[0].empty());
    CHECK(r.signal[1] == doctest::Approx(1.0).epsilon(1e-2));
    CHECK(!r.ok());

    spec.grid = {1e-3, 1e-3};
    CHECK_THROWS_AS(spec.validate(), InputError);
    spec.grid.clear();
    CHECK_THROWS_AS(spec.validate(), InputError);
    spec.grid = {2e-3, 1e-3};
    CHECK_NOTHROW(spec.validate());
    spec.parameter = SweepParameter::kFieldTheta;
    spec.grid = {10.0};
    CHECK(std::isnan(spectrum_sweep(spec).signal[0]));
  }

  TEST_CASE("sweep CSV layout") {
    SweepResult r;
    r.parameter = SweepParameter::kRabiFrequency;
    r.grid = {1000.0, 2000.0};
    r.signal = {0.5, 1.0 / 3.0};
    r.diagnostics = {"", "warn"};
    r.metadata = {{"engine", "x"}};
    std::ostringstream os;
    r.write_csv(os);
    CHECK(os.str() ==
          "# engine: x\n# unit: Hz\n# point 1: warn\nparam,rabi_frequency,S\n0,1000,0.5\n1,2000,0.33333333333333331\n");
  }

  TEST_CASE("parameter names and units round-trip") {
    for (auto p : {SweepParameter::kRabiFrequency, SweepParameter::kDeltaDetuning, SweepParameter::kFieldTheta,
                   SweepParameter::kFieldPhi, SweepParameter::kTRe, SweepParameter::kEvolutionTime}) {
      CHECK(parse_parameter(parameter_name(p)) == p);
      CHECK(internal_value(p, display_value(p, 1.25)) == doctest::Approx(1.25));
    }
    CHECK_THROWS_AS(parse_parameter("omega"), InputError);
    CHECK(display_value(SweepParameter::kFieldTheta, constants::kPi) == doctest::Approx(180.0));
  }

  TEST_CASE("dip analysis") {
    // triangle dip: baseline 1, minimum 0.2 at x = 5, half depth 0.6 crossed at 2.5 and 7.5
    std::vector<double> x, y;
    for (int k = 0; k <= 10; ++k) {
      x.push_back(k);
      y.push_back(k <= 5 ? 1.0 - 0.16 * k : 0.2 + 0.16 * (k - 5));
    }
    const auto d = analyze_dip(x, y);
    CHECK(d.index == 5);
    CHECK(d.center == 5.0);
    CHECK(d.depth == doctest::Approx(0.8));
    CHECK(d.fwhm == doctest::Approx(5.0));

    // right half-depth crossing lies beyond the grid
    y = {1.0, 0.4, 0.2, 0.3, 0.45};
    CHECK(std::isnan(analyze_dip({0, 1, 2, 3, 4}, y).fwhm));
    CHECK_THROWS_AS(analyze_dip({0, 1}, {1, 1}), InputError);

    const std::vector<double> s = {1.0, 0.7, 1.0, 0.98, 0.99, 0.5, 0.9, 0.85, 1.0};
    CHECK(find_dips(s, 0.05) == std::vector<std::size_t>{1, 5, 7});
    CHECK(find_dips(s, 0.2) == std::vector<std::size_t>{1, 5});
  }

  TEST_CASE("molecule with no targets gives a flat spectrum") {
    MoleculeSpec m;
    m.geometry = parse_geometry("S -0.601 0.676 -0.692\n");
    m.sensor = "S";
    m.theta = 44.7 * constants::kPi / 180.0;
    m.phi = 52.0 * constants::kPi / 180.0;
    m.larmor = khz(200);
    m.sensing.duration = 6e-3;
    m.rabi_grid_hz = {120e3, 130e3, 140e3};
    const auto r = molecule_experiment(m);
    CHECK(r.per_target.empty());
    for (double s : r.total.signal) CHECK(s == doctest::Approx(1.0).epsilon(0.02));

    m.sensor = "X";
    CHECK_THROWS_AS(molecule_experiment(m), InputError);
    m.sensor = "S";
    m.decoupling = Decoupling::kPulsed;
    CHECK_THROWS_AS(molecule_experiment(m), InputError);
  }

  TEST_CASE("molecule targets are simulated one at a time") {
    MoleculeSpec m;
    m.geometry = parse_geometry("S -0.601 0.676 -0.692\nC1 -1.260 -1.451 2.904\nC3 -1.260 -1.317 2.673\n");
    m.sensor = "S";
    m.theta = 44.7 * constants::kPi / 180.0;
    m.phi = 52.0 * constants::kPi / 180.0;
    m.larmor = khz(200);
    m.sensing.duration = 3e-3;
    m.rabi_grid_hz = {120e3, 140e3};
    const auto r = molecule_experiment(m);
    REQUIRE(r.per_target.size() == 2);
    CHECK(r.target_labels == std::vector<std::string>{"C1", "C3"});
    const auto one = molecule_register(m, {1}, khz(130));
    CHECK(one.nuclei.size() == 2);
    CHECK(one.nuclei[1].label == "C1");
    // the two carbons resonate at different Rabi frequencies
    REQUIRE(!std::isnan(r.predicted_rabi[0]));
    REQUIRE(!std::isnan(r.predicted_rabi[1]));
    CHECK(std::abs(r.predicted_rabi[0] - r.predicted_rabi[1]) > khz(1));
  }

  TEST_CASE("measurement budget") {
    const auto unit = measurement_time_estimate(1.0, 0.5, 1, 0.06, 1.0);
    CHECK(unit.shots == 1.0);
    CHECK(unit.seconds == 0.06);

    const auto a = measurement_time_estimate(0.2, 0.01, 15, 0.06);
    const auto b = measurement_time_estimate(0.1, 0.01, 15, 0.06);
    // shots ~ sigma^2 / C^2; sigma moves slightly with q = C (1 - dS) + (1 - C) / 2
    auto var = [](double c) {
      const double q = c * 0.99 + 0.5 * (1.0 - c);
      return q * (1.0 - q);
    };
    CHECK(b.shots_exact / a.shots_exact == doctest::Approx(4.0 * var(0.1) / var(0.2)).epsilon(1e-12));
    CHECK(b.shots_exact / a.shots_exact == doctest::Approx(4.0).epsilon(0.05));
    CHECK(a.seconds == doctest::Approx(15 * a.shots * 0.06));

    CHECK(dip_contrast(constants::kPi / 0.06, 0.06) == doctest::Approx(0.5));
    CHECK(dip_contrast(0.0, 0.06) == 0.0);
    CHECK_THROWS_AS(measurement_time_estimate(0.0, 0.1, 1, 1.0), InputError);
    CHECK_THROWS_AS(measurement_time_estimate(1.5, 0.1, 1, 1.0), InputError);
    CHECK_THROWS_AS(measurement_time_estimate(0.5, 0.1, 0, 1.0), InputError);
  }
}
