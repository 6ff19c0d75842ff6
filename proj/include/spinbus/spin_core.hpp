#pragma once

#include <Eigen/Dense>

#include <complex>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace spinbus {

using Complex = std::complex<double>;
using Matrix = Eigen::MatrixXcd;
using Vector = Eigen::VectorXcd;
using Vec3 = Eigen::Vector3d;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

// Square complex matrix over a composite Hilbert space, with a human-readable label.
struct Operator {
  Matrix matrix;
  std::string label;

  Eigen::Index dimension() const { return matrix.rows(); }
  // max |H - H^dagger| elementwise
  double hermiticity_error() const;
};

// Ordering of the tensor factors: the NV (if present) is site 0, nucleus k is
// site k (+1 when the NV is present). Basis state 0 of every factor is the
// +1/2 eigenstate (|+x> for the dressed NV, spin-up for a nucleus).
struct SystemLayout {
  bool has_nv = true;
  int nuclei = 0;

  int sites() const { return nuclei + (has_nv ? 1 : 0); }
  Eigen::Index dimension() const { return Eigen::Index{1} << sites(); }
  int nuclear_site(int k) const { return k + (has_nv ? 1 : 0); }
};

// Half-Pauli spin-1/2 operators (eigenvalues +-1/2), and the ladder operators
// I+ = Ix + iIy, I- = Ix - iIy.
namespace spin {
Eigen::Matrix2cd x();
Eigen::Matrix2cd y();
Eigen::Matrix2cd z();
Eigen::Matrix2cd raise();
Eigen::Matrix2cd lower();
Eigen::Matrix2cd identity();
// n . I for a 3-vector n
Eigen::Matrix2cd along(const Vec3& n);
}  // namespace spin

// Places a single-site operator at `site` of a `sites`-fold tensor product.
Matrix embed(const Eigen::Matrix2cd& local, int site, int sites);
Matrix nuclear_operator(const SystemLayout& layout, int nucleus, const Eigen::Matrix2cd& local);
Matrix nv_operator(const SystemLayout& layout, const Eigen::Matrix2cd& local);

// Unit vector from polar angle theta (from the NV axis) and azimuth phi, radians.
Vec3 direction_from_angles(double theta, double phi);

// Orthonormal frame with b along the field; e1 lies in the (nv_axis, b) plane
// when the two are not parallel.
struct FieldFrame {
  Vec3 e1;
  Vec3 e2;
  Vec3 b;

  static FieldFrame from(const Vec3& field_direction, const Vec3& nv_axis);
  // Components of a lab-frame vector in (e1, e2, b).
  Vec3 components(const Vec3& v) const { return {v.dot(e1), v.dot(e2), v.dot(b)}; }
};

struct HyperfineComponents {
  double a_par;
  double a_perp;
};

// a_par = A.b, a_perp = sqrt(|A|^2 - a_par^2). Throws InputError if |b| != 1.
HyperfineComponents hyperfine_components(const Vec3& hyperfine, const Vec3& field_direction);

// Secular point-dipole hyperfine vector (rad/s) of a 13C nucleus at `position_nm`
// relative to an NV at the origin with quantisation axis `nv_axis`.
Vec3 dipolar_hyperfine(const Vec3& position_nm, const Vec3& nv_axis);

// Secular homonuclear 13C-13C coefficient d_ij (rad/s) of d(3 Iz Iz - I.I).
double internuclear_dipolar(const Vec3& pos_i_nm, const Vec3& pos_j_nm, const Vec3& field_direction);

struct NuclearSpin {
  std::string label;
  std::optional<Vec3> position_nm;
  Vec3 hyperfine = Vec3::Zero();  // lab (NV) frame, rad/s
  double a_par = 0.0;             // rad/s
  double a_perp = 0.0;            // rad/s
  double larmor = 0.0;            // gamma_n B0, rad/s
  double t2 = kInfinity;          // s; infinity disables nuclear dephasing

  // Hyperfine vector a_par b + a_perp e1 of the given frame.
  static NuclearSpin from_components(std::string label, double a_par, double a_perp, double larmor,
                                     const FieldFrame& frame, double t2 = kInfinity);
  static NuclearSpin from_position(std::string label, const Vec3& position_nm, double larmor,
                                   const FieldFrame& frame, const Vec3& nv_axis,
                                   double t2 = kInfinity);

  // Copy with the parallel component replaced; the transverse part is kept.
  NuclearSpin with_a_par(double a_par_new, const FieldFrame& frame) const;
};

struct SpinRegister {
  std::vector<NuclearSpin> nuclei;
  double rabi = 0.0;                    // Omega, rad/s
  Vec3 nv_axis = Vec3::UnitZ();
  Vec3 field_direction = Vec3::UnitZ();
  double t1_rho = 0.0;                  // s

  // Up to four nuclei: a sensor plus the three-target molecule case.
  static constexpr std::size_t kMaxNuclei = 4;

  FieldFrame frame() const { return FieldFrame::from(field_direction, nv_axis); }
  SystemLayout layout() const { return {true, static_cast<int>(nuclei.size())}; }
  // Throws InputError on any violated invariant.
  void validate() const;
};

struct HamiltonianOptions {
  // Adds sum_{i<j} d_ij (3 Iz_i Iz_j - I_i.I_j); needs nuclear positions.
  bool internuclear_dipolar = false;
};

// H = Omega sz + sum_i (w_Li Iz_i + A_i.I_i/2) + sx sum_i A_i.I_i in the field frame.
Operator build_full_hamiltonian(const SpinRegister& reg, const HamiltonianOptions& options = {});

// One line per nucleus: `label x_nm y_nm z_nm [t2_s]`, '#' comments.
struct GeometryEntry {
  std::string label;
  Vec3 position_nm;
  std::optional<double> t2;
};
std::vector<GeometryEntry> parse_geometry(std::string_view text, std::string_view source = "<geometry>");
std::vector<GeometryEntry> load_geometry(const std::string& path);

}  // namespace spinbus
