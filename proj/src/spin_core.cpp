#include "spinbus/spin_core.hpp"

#include "spinbus/constants.hpp"
#include "spinbus/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace spinbus {

namespace {

constexpr double kUnitTolerance = 1e-12;

void require_unit(const Vec3& v, const char* what) {
  if (!v.allFinite() || std::abs(v.norm() - 1.0) > kUnitTolerance) {
    std::ostringstream os;
    os << what << " must be a unit vector (|v| = " << v.norm() << ")";
    throw InputError(os.str());
  }
}

// n.I for a vector already expressed in the field frame.
Eigen::Matrix2cd frame_dot(const Vec3& c) { return spin::along(c); }

bool parse_double(std::string_view token, double& out) {
  const char* first = token.data();
  const char* last = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

}  // namespace

double Operator::hermiticity_error() const {
  return (matrix - matrix.adjoint()).cwiseAbs().maxCoeff();
}

namespace spin {

Eigen::Matrix2cd x() {
  Eigen::Matrix2cd m;
  m << 0.0, 0.5, 0.5, 0.0;
  return m;
}

Eigen::Matrix2cd y() {
  Eigen::Matrix2cd m;
  m << 0.0, Complex(0.0, -0.5), Complex(0.0, 0.5), 0.0;
  return m;
}

Eigen::Matrix2cd z() {
  Eigen::Matrix2cd m;
  m << 0.5, 0.0, 0.0, -0.5;
  return m;
}

Eigen::Matrix2cd raise() {
  Eigen::Matrix2cd m;
  m << 0.0, 1.0, 0.0, 0.0;
  return m;
}

Eigen::Matrix2cd lower() {
  Eigen::Matrix2cd m;
  m << 0.0, 0.0, 1.0, 0.0;
  return m;
}

Eigen::Matrix2cd identity() { return Eigen::Matrix2cd::Identity(); }

Eigen::Matrix2cd along(const Vec3& n) { return n.x() * x() + n.y() * y() + n.z() * z(); }

}  // namespace spin

Matrix embed(const Eigen::Matrix2cd& local, int site, int sites) {
  Matrix result = Matrix::Identity(1, 1);
  for (int s = 0; s < sites; ++s) {
    const Eigen::Matrix2cd factor = (s == site) ? local : spin::identity();
    Matrix next(result.rows() * 2, result.cols() * 2);
    for (Eigen::Index r = 0; r < result.rows(); ++r) {
      for (Eigen::Index c = 0; c < result.cols(); ++c) {
        next.block<2, 2>(2 * r, 2 * c) = result(r, c) * factor;
      }
    }
    result = std::move(next);
  }
  return result;
}

Matrix nuclear_operator(const SystemLayout& layout, int nucleus, const Eigen::Matrix2cd& local) {
  if (nucleus < 0 || nucleus >= layout.nuclei) {
    throw InputError("nuclear index " + std::to_string(nucleus) + " out of range");
  }
  return embed(local, layout.nuclear_site(nucleus), layout.sites());
}

Matrix nv_operator(const SystemLayout& layout, const Eigen::Matrix2cd& local) {
  if (!layout.has_nv) throw InputError("layout has no NV factor");
  return embed(local, 0, layout.sites());
}

Vec3 direction_from_angles(double theta, double phi) {
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

FieldFrame FieldFrame::from(const Vec3& field_direction, const Vec3& nv_axis) {
  require_unit(field_direction, "field direction");
  require_unit(nv_axis, "NV axis");
  FieldFrame f;
  f.b = field_direction;
  Vec3 t = nv_axis - nv_axis.dot(f.b) * f.b;
  if (t.norm() < 1e-9) {
    // Field along the NV axis: any transverse direction will do.
    const Vec3 seed = std::abs(f.b.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    t = seed - seed.dot(f.b) * f.b;
  }
  f.e1 = t.normalized();
  f.e2 = f.b.cross(f.e1);
  return f;
}

HyperfineComponents hyperfine_components(const Vec3& hyperfine, const Vec3& field_direction) {
  require_unit(field_direction, "field direction");
  const double a_par = hyperfine.dot(field_direction);
  const double rest = hyperfine.squaredNorm() - a_par * a_par;
  return {a_par, std::sqrt(std::max(0.0, rest))};
}

Vec3 dipolar_hyperfine(const Vec3& position_nm, const Vec3& nv_axis) {
  require_unit(nv_axis, "NV axis");
  const double r_nm = position_nm.norm();
  if (!(r_nm > constants::kContactRadiusNm)) {
    std::ostringstream os;
    os << "nucleus at " << r_nm << " nm is inside the contact radius ("
       << constants::kContactRadiusNm << " nm)";
    throw GeometryError(os.str());
  }
  const double r = r_nm * constants::kNanometre;
  const double k = constants::kMu0Over4Pi * constants::kGammaElectron * constants::kGamma13C *
                   constants::kHbar / (r * r * r);
  const Vec3 rhat = position_nm / r_nm;
  return k * (3.0 * nv_axis.dot(rhat) * rhat - nv_axis);
}

double internuclear_dipolar(const Vec3& pos_i_nm, const Vec3& pos_j_nm, const Vec3& field_direction) {
  require_unit(field_direction, "field direction");
  const Vec3 d = pos_j_nm - pos_i_nm;
  const double r_nm = d.norm();
  if (!(r_nm > 0.0)) throw GeometryError("coincident nuclear positions");
  const double r = r_nm * constants::kNanometre;
  const double k = constants::kMu0Over4Pi * constants::kGamma13C * constants::kGamma13C *
                   constants::kHbar / (r * r * r);
  const double c = d.dot(field_direction) / r_nm;
  return k * (1.0 - 3.0 * c * c) / 2.0;
}

NuclearSpin NuclearSpin::from_components(std::string label, double a_par, double a_perp, double larmor,
                                         const FieldFrame& frame, double t2) {
  if (a_perp < 0.0) throw InputError("a_perp must be non-negative");
  NuclearSpin n;
  n.label = std::move(label);
  n.a_par = a_par;
  n.a_perp = a_perp;
  n.hyperfine = a_par * frame.b + a_perp * frame.e1;
  n.larmor = larmor;
  n.t2 = t2;
  return n;
}

NuclearSpin NuclearSpin::from_position(std::string label, const Vec3& position_nm, double larmor,
                                       const FieldFrame& frame, const Vec3& nv_axis, double t2) {
  NuclearSpin n;
  n.label = std::move(label);
  n.position_nm = position_nm;
  n.hyperfine = dipolar_hyperfine(position_nm, nv_axis);
  const auto c = hyperfine_components(n.hyperfine, frame.b);
  n.a_par = c.a_par;
  n.a_perp = c.a_perp;
  n.larmor = larmor;
  n.t2 = t2;
  return n;
}

NuclearSpin NuclearSpin::with_a_par(double a_par_new, const FieldFrame& frame) const {
  NuclearSpin n = *this;
  n.hyperfine += (a_par_new - a_par) * frame.b;
  n.a_par = a_par_new;
  return n;
}

void SpinRegister::validate() const {
  if (nuclei.empty() || nuclei.size() > kMaxNuclei) {
    throw InputError("register must hold between 1 and " + std::to_string(kMaxNuclei) + " nuclei");
  }
  if (!(rabi > 0.0)) throw InputError("Rabi frequency must be positive");
  if (!(t1_rho > 0.0)) throw InputError("T1rho must be positive");
  require_unit(nv_axis, "NV axis");
  require_unit(field_direction, "field direction");
  for (const auto& n : nuclei) {
    if (n.a_perp < 0.0) throw InputError(n.label + ": a_perp must be non-negative");
    if (!(n.t2 > 0.0)) throw InputError(n.label + ": T2 must be positive");
    const double a2 = n.hyperfine.squaredNorm();
    const double parts = n.a_par * n.a_par + n.a_perp * n.a_perp;
    if (std::abs(parts - a2) > 1e-10 * std::max(a2, 1e-300) && a2 > 0.0) {
      throw InputError(n.label + ": a_par^2 + a_perp^2 differs from |A|^2");
    }
    if (a2 == 0.0 && parts != 0.0) throw InputError(n.label + ": components given for a zero hyperfine vector");
    if (std::abs(n.hyperfine.dot(field_direction) - n.a_par) > 1e-9 * std::sqrt(a2) + 1e-300) {
      throw InputError(n.label + ": a_par is not the projection of A on the field");
    }
  }
}

Operator build_full_hamiltonian(const SpinRegister& reg, const HamiltonianOptions& options) {
  reg.validate();
  const SystemLayout layout = reg.layout();
  const FieldFrame frame = reg.frame();
  const Eigen::Index dim = layout.dimension();

  Matrix h = reg.rabi * nv_operator(layout, spin::z());
  const Matrix sx = nv_operator(layout, spin::x());
  Matrix coupling = Matrix::Zero(dim, dim);
  for (int k = 0; k < layout.nuclei; ++k) {
    const auto& n = reg.nuclei[static_cast<std::size_t>(k)];
    const Matrix a_dot_i = nuclear_operator(layout, k, frame_dot(frame.components(n.hyperfine)));
    h += n.larmor * nuclear_operator(layout, k, spin::z());
    h += 0.5 * a_dot_i;
    coupling += a_dot_i;
  }
  h += sx * coupling;

  if (options.internuclear_dipolar) {
    for (int i = 0; i < layout.nuclei; ++i) {
      for (int j = i + 1; j < layout.nuclei; ++j) {
        const auto& ni = reg.nuclei[static_cast<std::size_t>(i)];
        const auto& nj = reg.nuclei[static_cast<std::size_t>(j)];
        if (!ni.position_nm || !nj.position_nm) {
          throw InputError("internuclear dipolar coupling needs positions for " + ni.label + " and " +
                           nj.label);
        }
        const double d = internuclear_dipolar(*ni.position_nm, *nj.position_nm, frame.b);
        const Matrix zz = nuclear_operator(layout, i, spin::z()) * nuclear_operator(layout, j, spin::z());
        const Matrix xx = nuclear_operator(layout, i, spin::x()) * nuclear_operator(layout, j, spin::x());
        const Matrix yy = nuclear_operator(layout, i, spin::y()) * nuclear_operator(layout, j, spin::y());
        h += d * (2.0 * zz - xx - yy);
      }
    }
  }
  return {std::move(h), "H_full"};
}

std::vector<GeometryEntry> parse_geometry(std::string_view text, std::string_view source) {
  std::vector<GeometryEntry> entries;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  const std::string src(source);
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    std::vector<std::string> tokens;
    for (std::string tok; fields >> tok;) {
      if (tok.front() == '#') break;
      tokens.push_back(tok);
    }
    if (tokens.size() != 4 && tokens.size() != 5) {
      throw ParseError(src, lineno, "expected `label x_nm y_nm z_nm [t2_s]`, got " +
                                        std::to_string(tokens.size()) + " fields");
    }
    GeometryEntry e;
    e.label = tokens[0];
    for (int c = 0; c < 3; ++c) {
      double v = 0.0;
      if (!parse_double(tokens[static_cast<std::size_t>(c + 1)], v) || !std::isfinite(v)) {
        throw ParseError(src, lineno, "invalid coordinate `" + tokens[static_cast<std::size_t>(c + 1)] + "`");
      }
      e.position_nm[c] = v;
    }
    if (tokens.size() == 5) {
      double t2 = 0.0;
      if (!parse_double(tokens[4], t2) || !(t2 > 0.0)) {
        throw ParseError(src, lineno, "T2 must be a positive number, got `" + tokens[4] + "`");
      }
      e.t2 = t2;
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<GeometryEntry> load_geometry(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open geometry file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_geometry(buf.str(), path);
}

}  // namespace spinbus
