#include "spinbus/config.hpp"

#include "spinbus/constants.hpp"
#include "spinbus/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#ifndef SPINBUS_VERSION
#define SPINBUS_VERSION "unknown"
#endif

namespace spinbus {

const char* engine_version() { return SPINBUS_VERSION; }

// ---- TOML subset --------------------------------------------------------------

namespace {

bool is_bare_key_char(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
}

class TomlParser {
 public:
  TomlParser(std::string_view text, std::string source) : text_(text), source_(std::move(source)) {}

  Json parse() {
    Json root = Json::object();
    Json* current = &root;
    while (true) {
      skip_blank();
      if (eof()) break;
      const char c = peek();
      if (c == '\n' || c == '\r') {
        newline();
        continue;
      }
      if (c == '#') {
        skip_comment();
        continue;
      }
      if (c == '[') {
        ++pos_;
        const bool array = !eof() && peek() == '[';
        if (array) ++pos_;
        skip_blank();
        const auto path = parse_key_path();
        skip_blank();
        expect(']');
        if (array) expect(']');
        current = &open_table(root, path, array);
        end_of_line();
        continue;
      }
      const std::string key = parse_key();
      skip_blank();
      expect('=');
      skip_blank();
      Json value = parse_value();
      if (current->contains(key)) fail("duplicate key '" + key + "'");
      (*current)[key] = std::move(value);
      end_of_line();
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(source_, line_, what); }
  bool eof() const { return pos_ >= text_.size(); }
  char peek() const { return text_[pos_]; }

  void expect(char c) {
    if (eof() || peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void newline() {
    if (peek() == '\r') {
      ++pos_;
      if (eof() || peek() != '\n') fail("stray carriage return");
    }
    ++pos_;
    ++line_;
  }

  void skip_blank() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }

  void skip_comment() {
    while (!eof() && peek() != '\n' && peek() != '\r') ++pos_;
  }

  // Blanks, newlines and comments, as allowed between array elements.
  void skip_space() {
    while (!eof()) {
      skip_blank();
      if (eof()) return;
      if (peek() == '#') {
        skip_comment();
      } else if (peek() == '\n' || peek() == '\r') {
        newline();
      } else {
        return;
      }
    }
  }

  void end_of_line() {
    skip_blank();
    if (eof()) return;
    if (peek() == '#') skip_comment();
    if (eof()) return;
    if (peek() != '\n' && peek() != '\r') fail("unexpected text after value");
    newline();
  }

  std::string parse_key() {
    if (eof()) fail("expected a key");
    if (peek() == '"') return parse_basic_string();
    if (peek() == '\'') return parse_literal_string();
    const std::size_t start = pos_;
    while (!eof() && is_bare_key_char(peek())) ++pos_;
    if (pos_ == start) fail("expected a key");
    std::string key(text_.substr(start, pos_ - start));
    skip_blank();
    if (!eof() && peek() == '.') fail("dotted keys are not supported; use a [table] header");
    return key;
  }

  std::vector<std::string> parse_key_path() {
    std::vector<std::string> out;
    while (true) {
      if (eof()) fail("unterminated table header");
      if (peek() == '"') {
        out.push_back(parse_basic_string());
      } else {
        const std::size_t start = pos_;
        while (!eof() && is_bare_key_char(peek())) ++pos_;
        if (pos_ == start) fail("empty table name");
        out.emplace_back(text_.substr(start, pos_ - start));
      }
      skip_blank();
      if (eof() || peek() != '.') return out;
      ++pos_;
      skip_blank();
    }
  }

  Json& open_table(Json& root, const std::vector<std::string>& path, bool array) {
    Json* node = &root;
    std::string name;
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
      name += (k ? "." : "") + path[k];
      Json& next = (*node)[path[k]];
      if (next.is_null()) next = Json::object();
      if (next.is_array() && !next.empty() && next.back().is_object()) {
        node = &next.back();
      } else if (next.is_object()) {
        node = &next;
      } else {
        fail("'" + name + "' is not a table");
      }
    }
    name += (path.size() > 1 ? "." : "") + path.back();
    Json& leaf = (*node)[path.back()];
    if (array) {
      if (leaf.is_null()) leaf = Json::array();
      if (!leaf.is_array()) fail("'" + name + "' is not an array of tables");
      leaf.push_back(Json::object());
      return leaf.back();
    }
    if (!defined_.insert(name).second) fail("table [" + name + "] defined twice");
    if (leaf.is_null()) leaf = Json::object();
    if (!leaf.is_object()) fail("'" + name + "' is not a table");
    return leaf;
  }

  Json parse_value() {
    if (eof()) fail("missing value");
    const char c = peek();
    if (c == '"') return parse_basic_string();
    if (c == '\'') return parse_literal_string();
    if (c == '[') return parse_array();
    if (c == '{') fail("inline tables are not supported");
    return parse_scalar();
  }

  std::string parse_basic_string() {
    ++pos_;
    if (text_.substr(pos_, 2) == "\"\"") fail("multi-line strings are not supported");
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      const char c = text_[pos_++];
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (eof()) fail("unterminated escape");
      switch (text_[pos_++]) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        case 'b': out += '\b'; break;
        case 'f': out += '\f'; break;
        default: fail("unsupported escape sequence");
      }
    }
  }

  std::string parse_literal_string() {
    ++pos_;
    const std::size_t start = pos_;
    while (!eof() && peek() != '\'' && peek() != '\n') ++pos_;
    if (eof() || peek() != '\'') fail("unterminated string");
    std::string out(text_.substr(start, pos_ - start));
    ++pos_;
    return out;
  }

  Json parse_array() {
    ++pos_;
    Json out = Json::array();
    while (true) {
      skip_space();
      if (eof()) fail("unterminated array");
      if (peek() == ']') {
        ++pos_;
        return out;
      }
      out.push_back(parse_value());
      skip_space();
      if (eof()) fail("unterminated array");
      if (peek() == ',') {
        ++pos_;
      } else if (peek() != ']') {
        fail("expected ',' or ']' in array");
      }
    }
  }

  Json parse_scalar() {
    const std::size_t start = pos_;
    while (!eof() && (is_bare_key_char(peek()) || peek() == '+' || peek() == '.')) ++pos_;
    const std::string token(text_.substr(start, pos_ - start));
    if (token.empty()) fail("expected a value");
    if (token == "true") return true;
    if (token == "false") return false;
    const bool negative = token[0] == '-';
    const std::string body = (token[0] == '+' || token[0] == '-') ? token.substr(1) : token;
    if (body == "inf") return negative ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    if (body == "nan") return std::numeric_limits<double>::quiet_NaN();

    std::string digits;
    for (std::size_t k = 0; k < token.size(); ++k) {
      if (token[k] == '_') {
        const bool ok = k > 0 && k + 1 < token.size() && std::isdigit(static_cast<unsigned char>(token[k - 1])) &&
                        std::isdigit(static_cast<unsigned char>(token[k + 1]));
        if (!ok) fail("misplaced underscore in number '" + token + "'");
        continue;
      }
      digits += token[k];
    }
    if (digits[0] == '+') digits.erase(0, 1);
    const char* first = digits.data();
    const char* last = digits.data() + digits.size();
    if (digits.find_first_of(".eE") == std::string::npos) {
      std::int64_t v = 0;
      const auto r = std::from_chars(first, last, v);
      if (r.ec == std::errc() && r.ptr == last) return v;
    } else {
      double v = 0.0;
      const auto r = std::from_chars(first, last, v);
      if (r.ec == std::errc() && r.ptr == last) return v;
    }
    fail("invalid value '" + token + "'");
  }

  std::string_view text_;
  std::string source_;
  std::size_t pos_ = 0;
  int line_ = 1;
  std::set<std::string> defined_;
};

}  // namespace

Json parse_toml(std::string_view text, const std::string& source) { return TomlParser(text, source).parse(); }

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

std::string command_name(Command c) {
  switch (c) {
    case Command::kSimulate: return "simulate";
    case Command::kEffective: return "effective";
    case Command::kSweep: return "sweep";
    case Command::kFidelity: return "fidelity";
    case Command::kMolecule: return "molecule";
  }
  return "unknown";
}

Matrix initial_density(InitialState s) {
  switch (s) {
    case InitialState::kUp: return spin_up_state();
    case InitialState::kDown: return spin_down_state();
    case InitialState::kMixed: return mixed_state();
  }
  return mixed_state();
}

// ---- schema -------------------------------------------------------------------

namespace {

// Typed, path-aware view of one table; finish() rejects keys nobody read.
class Table {
 public:
  Table(const Json* node, std::string path) : node_(node), path_(std::move(path)) {}

  const std::string& path() const { return path_; }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return node_->contains(key); }

  std::optional<double> number(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_number()) throw SchemaError(at(key), "expected a number");
    return v->get<double>();
  }

  double number(const std::string& key, double fallback) { return number(key).value_or(fallback); }

  double required_number(const std::string& key) {
    const auto v = number(key);
    if (!v) throw SchemaError(at(key), "required field is missing");
    return *v;
  }

  std::optional<double> positive(const std::string& key) {
    const auto v = number(key);
    if (v && !(*v > 0.0 && std::isfinite(*v))) throw SchemaError(at(key), "must be a positive finite number");
    return v;
  }

  double required_positive(const std::string& key) {
    const auto v = positive(key);
    if (!v) throw SchemaError(at(key), "required field is missing");
    return *v;
  }

  std::optional<double> finite(const std::string& key) {
    const auto v = number(key);
    if (v && !std::isfinite(*v)) throw SchemaError(at(key), "must be finite");
    return v;
  }

  std::optional<std::int64_t> integer(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_number_integer()) throw SchemaError(at(key), "expected an integer");
    return v->get<std::int64_t>();
  }

  std::optional<bool> boolean(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_boolean()) throw SchemaError(at(key), "expected true or false");
    return v->get<bool>();
  }

  std::optional<std::string> string(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_string()) throw SchemaError(at(key), "expected a string");
    return v->get<std::string>();
  }

  std::string required_string(const std::string& key) {
    const auto v = string(key);
    if (!v) throw SchemaError(at(key), "required field is missing");
    return *v;
  }

  template <typename E>
  std::optional<E> choice(const std::string& key, std::initializer_list<std::pair<const char*, E>> options) {
    const auto v = string(key);
    if (!v) return std::nullopt;
    std::string names;
    for (const auto& [name, value] : options) {
      if (*v == name) return value;
      names += (names.empty() ? "" : ", ") + std::string(name);
    }
    throw SchemaError(at(key), "unknown value '" + *v + "' (expected one of " + names + ")");
  }

  std::optional<std::vector<double>> numbers(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_array()) throw SchemaError(at(key), "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t k = 0; k < v->size(); ++k) {
      if (!(*v)[k].is_number()) throw SchemaError(at(key) + "[" + std::to_string(k) + "]", "expected a number");
      const double x = (*v)[k].get<double>();
      if (!std::isfinite(x)) throw SchemaError(at(key) + "[" + std::to_string(k) + "]", "must be finite");
      out.push_back(x);
    }
    return out;
  }

  std::optional<std::vector<int>> integers(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_array()) throw SchemaError(at(key), "expected an array of integers");
    std::vector<int> out;
    for (std::size_t k = 0; k < v->size(); ++k) {
      if (!(*v)[k].is_number_integer()) throw SchemaError(at(key) + "[" + std::to_string(k) + "]", "expected an integer");
      out.push_back((*v)[k].get<int>());
    }
    return out;
  }

  std::optional<Vec3> vec3(const std::string& key) {
    const auto v = numbers(key);
    if (!v) return std::nullopt;
    if (v->size() != 3) throw SchemaError(at(key), "expected three components");
    return Vec3((*v)[0], (*v)[1], (*v)[2]);
  }

  std::optional<Table> table(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_object()) throw SchemaError(at(key), "expected a table");
    return Table(v, at(key));
  }

  std::vector<Table> tables(const std::string& key) {
    std::vector<Table> out;
    const Json* v = get(key);
    if (!v) return out;
    if (!v->is_array()) throw SchemaError(at(key), "expected an array of tables ([[" + at(key) + "]])");
    for (std::size_t k = 0; k < v->size(); ++k) {
      const std::string p = at(key) + "[" + std::to_string(k) + "]";
      if (!(*v)[k].is_object()) throw SchemaError(p, "expected a table");
      out.emplace_back(&(*v)[k], p);
    }
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : node_->items()) {
      if (!used_.count(key)) throw SchemaError(at(key), "unknown field");
    }
  }

 private:
  const Json* get(const std::string& key) {
    used_.insert(key);
    const auto it = node_->find(key);
    return it == node_->end() ? nullptr : &*it;
  }

  const Json* node_;
  std::string path_;
  std::set<std::string> used_;
};

double deg(double d) { return d * constants::kPi / 180.0; }

// `grid` as an explicit list, or `start`, `stop`, `step` with a whole number of steps.
std::optional<std::vector<double>> read_grid(Table& t, const std::string& list, const std::string& start,
                                             const std::string& stop, const std::string& step) {
  const auto explicit_grid = t.numbers(list);
  const auto a = t.finite(start), b = t.finite(stop), h = t.finite(step);
  if (explicit_grid) {
    if (a || b || h) throw SchemaError(t.at(list), "give either " + list + " or " + start + "/" + stop + "/" + step);
    if (explicit_grid->empty()) throw SchemaError(t.at(list), "grid is empty");
    return explicit_grid;
  }
  if (!a && !b && !h) return std::nullopt;
  if (!a) throw SchemaError(t.at(start), "required field is missing");
  if (!b) throw SchemaError(t.at(stop), "required field is missing");
  if (!h) throw SchemaError(t.at(step), "required field is missing");
  if (*h == 0.0 || ((*b - *a) / *h) < 0.0) throw SchemaError(t.at(step), "step does not lead from start to stop");
  const double n = (*b - *a) / *h;
  const double whole = std::round(n);
  if (std::abs(n - whole) > 1e-9 * std::max(1.0, n)) {
    throw SchemaError(t.at(step), "start to stop is not a whole number of steps");
  }
  if (whole > 1e6) throw SchemaError(t.at(step), "grid has more than a million points");
  std::vector<double> out;
  for (std::int64_t k = 0; k <= static_cast<std::int64_t>(whole); ++k) out.push_back(*a + static_cast<double>(k) * *h);
  return out;
}

SpinRegister read_register(Table& t, std::vector<InitialState>& initial) {
  SpinRegister reg;
  reg.rabi = constants::hz(t.required_positive("rabi_hz"));
  reg.t1_rho = t.required_positive("t1_rho");
  const auto larmor = t.finite("larmor_hz");
  reg.field_direction = direction_from_angles(deg(t.finite("field_theta_deg").value_or(0.0)),
                                              deg(t.finite("field_phi_deg").value_or(0.0)));
  if (const auto axis = t.vec3("nv_axis")) {
    if (!(axis->norm() > 0.0)) throw SchemaError(t.at("nv_axis"), "must be a non-zero vector");
    reg.nv_axis = axis->normalized();
  }
  const auto frame = reg.frame();

  auto nuclei = t.tables("nucleus");
  if (nuclei.empty()) throw SchemaError(t.at("nucleus"), "at least one nucleus is required");
  for (std::size_t k = 0; k < nuclei.size(); ++k) {
    Table& n = nuclei[k];
    const std::string label = n.string("label").value_or("n" + std::to_string(k + 1));
    const auto own_larmor = n.finite("larmor_hz");
    if (!own_larmor && !larmor) throw SchemaError(n.at("larmor_hz"), "required field is missing (or set register.larmor_hz)");
    const double w = constants::hz(own_larmor.value_or(larmor.value_or(0.0)));
    const double t2 = n.number("t2", kInfinity);
    if (!(t2 > 0.0)) throw SchemaError(n.at("t2"), "must be positive (inf disables dephasing)");
    const auto position = n.vec3("position_nm");
    const auto a_par = n.finite("a_par_hz");
    const auto a_perp = n.finite("a_perp_hz");
    if (position && (a_par || a_perp)) throw SchemaError(n.path(), "give either position_nm or a_par_hz/a_perp_hz");
    try {
      if (position) {
        reg.nuclei.push_back(NuclearSpin::from_position(label, *position, w, frame, reg.nv_axis, t2));
      } else {
        if (!a_par) throw SchemaError(n.at("a_par_hz"), "required field is missing");
        if (!a_perp) throw SchemaError(n.at("a_perp_hz"), "required field is missing");
        if (*a_perp < 0.0) throw SchemaError(n.at("a_perp_hz"), "must be non-negative");
        reg.nuclei.push_back(
            NuclearSpin::from_components(label, constants::hz(*a_par), constants::hz(*a_perp), w, frame, t2));
      }
    } catch (const GeometryError& e) {
      throw SchemaError(n.path(), e.what());
    }
    const InitialState fallback = k == 0 ? InitialState::kDown : InitialState::kUp;
    initial.push_back(n.choice<InitialState>("initial", {{"up", InitialState::kUp},
                                                         {"down", InitialState::kDown},
                                                         {"mixed", InitialState::kMixed}})
                          .value_or(fallback));
    n.finish();
  }
  try {
    reg.validate();
  } catch (const InputError& e) {
    throw SchemaError(t.path(), e.what());
  }
  t.finish();
  return reg;
}

void read_propagation(Table& t, PropagationOptions& p) {
  if (auto v = t.positive("steps_per_period")) p.steps_per_period = *v;
  if (auto v = t.positive("max_step")) p.max_step = *v;
  if (auto v = t.integer("max_total_steps")) {
    if (*v <= 0) throw SchemaError(t.at("max_total_steps"), "must be positive");
    p.max_total_steps = *v;
  }
  if (auto m = t.choice<Stepping>("method", {{"powered_map", Stepping::kPoweredMap},
                                             {"direct", Stepping::kDirectStepping}})) {
    p.method = *m;
  }
  if (auto v = t.boolean("check_states")) p.check_states = *v;
  t.finish();
}

}  // namespace

SweepSpec resolve_variant(const SweepConfig& sweep, const SweepVariant& variant, double* matched_a_par) {
  SweepSpec spec = sweep.spec;
  if (variant.t1_rho) spec.base.t1_rho = *variant.t1_rho;
  if (variant.t_re) spec.sensing.t_re = *variant.t_re;
  if (variant.rabi) spec.base.rabi = *variant.rabi;
  if (spec.base.nuclei.size() < 2) return spec;
  const auto index = static_cast<std::size_t>(std::clamp<int>(sweep.target, 1, static_cast<int>(spec.base.nuclei.size()) - 1));
  NuclearSpin& target = spec.base.nuclei[index];
  if (variant.target_t2) target.t2 = *variant.target_t2;
  if (sweep.match_resonance) {
    const double a = match_a_par(spec.base.nuclei[0], target, spec.base.rabi, spec.sensing.t_re, spec.base.t1_rho);
    target = target.with_a_par(a, spec.base.frame());
    if (matched_a_par) *matched_a_par = a;
  }
  return spec;
}

SensingOptions RunConfig::sensing_options() const {
  SensingOptions s;
  s.duration = duration;
  s.t_re = t_re;
  s.wahuha_tau = wahuha_tau;
  s.model = model;
  s.propagation = propagation;
  return s;
}

void RunConfig::require(Command command) const {
  auto need_register = [&](std::size_t min_nuclei, const char* why) {
    if (!reg) throw SchemaError("register", "required section is missing");
    if (reg->nuclei.size() < min_nuclei) throw SchemaError("register.nucleus", why);
  };
  switch (command) {
    case Command::kSimulate:
      need_register(1, "at least one nucleus is required");
      if (!(duration > 0.0)) throw SchemaError("schedule.duration", "required field is missing");
      break;
    case Command::kEffective:
      need_register(2, "the effective model needs at least two nuclei");
      if (!(duration > 0.0)) throw SchemaError("schedule.duration", "required field is missing");
      break;
    case Command::kSweep:
      if (!sweep) throw SchemaError("sweep", "required section is missing");
      need_register(1, "at least one nucleus is required");
      if (!(duration > 0.0) && sweep->spec.parameter != SweepParameter::kEvolutionTime) {
        throw SchemaError("schedule.duration", "required field is missing");
      }
      break;
    case Command::kFidelity:
      need_register(2, "the gate needs at least two nuclei");
      break;
    case Command::kMolecule:
      if (!molecule) throw SchemaError("molecule", "required section is missing");
      break;
  }
}

RunConfig build_config(const Json& document, const std::string& base_dir, const std::string& source) {
  if (!document.is_object()) throw SchemaError("<root>", "expected a table");
  RunConfig cfg;
  cfg.source = source;
  cfg.document = document;
  cfg.parameter_hash = hex64(fnv1a(document.dump()));
  Table root(&cfg.document, "");
  root.string("title");

  if (auto t = root.table("register")) cfg.reg = read_register(*t, cfg.initial);

  cfg.t_re = cfg.reg ? cfg.reg->t1_rho : 1e-3;
  if (auto t = root.table("schedule")) {
    if (auto v = t->positive("t_re")) cfg.t_re = *v;
    if (auto v = t->positive("duration")) cfg.duration = *v;
    if (auto v = t->number("output_interval")) {
      if (!(*v >= 0.0) || !std::isfinite(*v)) throw SchemaError(t->at("output_interval"), "must be non-negative");
      cfg.output_interval = *v;
    }
    cfg.wahuha_tau = t->positive("wahuha_tau");
    t->finish();
  }
  if (auto t = root.table("model")) {
    if (auto v = t->boolean("internuclear_dipolar")) cfg.model.internuclear_dipolar = *v;
    if (auto v = t->number("nv_dephasing_rate")) {
      if (!(*v >= 0.0) || !std::isfinite(*v)) throw SchemaError(t->at("nv_dephasing_rate"), "must be non-negative");
      cfg.model.nv_dephasing_rate = *v;
    }
    t->finish();
  }
  if (cfg.model.internuclear_dipolar && cfg.reg) {
    for (std::size_t k = 0; k < cfg.reg->nuclei.size(); ++k) {
      if (!cfg.reg->nuclei[k].position_nm) {
        throw SchemaError("register.nucleus[" + std::to_string(k) + "].position_nm",
                          "internuclear dipolar coupling needs nuclear positions");
      }
    }
  }
  if (auto t = root.table("propagation")) read_propagation(*t, cfg.propagation);
  if (auto t = root.table("effective")) {
    if (auto m = t->choice<PolarizationModel>("polarization", {{"printed", PolarizationModel::kPrinted},
                                                                {"time_averaged", PolarizationModel::kTimeAveraged}})) {
      cfg.effective.polarization = *m;
    }
    t->finish();
  }

  if (auto t = root.table("sweep")) {
    if (!cfg.reg) throw SchemaError("register", "required by [sweep]");
    SweepConfig sw;
    const std::string name = t->required_string("parameter");
    try {
      sw.spec.parameter = parse_parameter(name);
    } catch (const InputError& e) {
      throw SchemaError(t->at("parameter"), e.what());
    }
    auto grid = read_grid(*t, "grid", "start", "stop", "step");
    if (!grid) throw SchemaError(t->at("grid"), "required field is missing (or start/stop/step)");
    sw.spec.grid = *grid;
    sw.spec.base = *cfg.reg;
    sw.spec.sensing = cfg.sensing_options();
    if (auto o = t->choice<SensingObservable>("observable", {{"sensor_survival", SensingObservable::kSensorSurvival},
                                                            {"pair_population", SensingObservable::kPairPopulation}})) {
      sw.spec.sensing.observable = *o;
    }
    if (auto d = t->integers("detuned")) sw.spec.detuned = *d;
    sw.match_resonance = t->boolean("match_resonance").value_or(false);
    if (auto k = t->integer("target")) {
      if (*k < 1 || *k >= static_cast<std::int64_t>(cfg.reg->nuclei.size())) {
        throw SchemaError(t->at("target"), "must index a nucleus other than the sensor");
      }
      sw.target = static_cast<int>(*k);
    }
    if (cfg.reg->nuclei.size() < 2 && (sw.match_resonance || sw.spec.parameter == SweepParameter::kDeltaDetuning)) {
      throw SchemaError("register.nucleus", "this sweep needs a target nucleus");
    }
    std::set<std::string> names;
    for (auto& v : t->tables("variant")) {
      SweepVariant var;
      var.name = v.required_string("name");
      if (var.name.empty() || !std::all_of(var.name.begin(), var.name.end(), is_bare_key_char)) {
        throw SchemaError(v.at("name"), "names may only use letters, digits, '_' and '-'");
      }
      if (!names.insert(var.name).second) throw SchemaError(v.at("name"), "duplicate variant name");
      var.t1_rho = v.positive("t1_rho");
      var.t_re = v.positive("t_re");
      if (auto r = v.positive("rabi_hz")) var.rabi = constants::hz(*r);
      var.target_t2 = v.number("target_t2");
      if (var.target_t2 && !(*var.target_t2 > 0.0)) throw SchemaError(v.at("target_t2"), "must be positive");
      v.finish();
      sw.variants.push_back(std::move(var));
    }
    try {
      sw.spec.validate();
    } catch (const InputError& e) {
      throw SchemaError(t->path(), e.what());
    }
    t->finish();
    cfg.sweep = std::move(sw);
  }

  if (auto t = root.table("fidelity")) {
    FidelityConfig f;
    f.options.gate_time = t->positive("gate_time");
    f.options.duration = t->positive("duration");
    if (auto v = t->positive("output_interval")) f.options.output_interval = *v;
    if (auto c = t->choice<bool>("channel", {{"simulated", false}, {"depolarizing", true}})) f.depolarizing = *c;
    t->finish();
    cfg.fidelity = std::move(f);
  }
  if (cfg.fidelity || cfg.reg) {
    if (!cfg.fidelity) cfg.fidelity.emplace();
    cfg.fidelity->options.t_re = cfg.t_re;
    cfg.fidelity->options.model = cfg.model;
    cfg.fidelity->options.propagation = cfg.propagation;
  }

  if (auto t = root.table("molecule")) {
    MoleculeSpec m;
    const std::string geometry = t->required_string("geometry");
    const std::filesystem::path path = std::filesystem::path(geometry).is_absolute()
                                           ? std::filesystem::path(geometry)
                                           : std::filesystem::path(base_dir) / geometry;
    try {
      m.geometry = load_geometry(path.string());
    } catch (const GeometryError& e) {
      throw SchemaError(t->at("geometry"), e.what());
    } catch (const InputError& e) {
      throw SchemaError(t->at("geometry"), e.what());
    }
    m.sensor = t->required_string("sensor");
    m.theta = deg(t->finite("field_theta_deg").value_or(0.0));
    m.phi = deg(t->finite("field_phi_deg").value_or(0.0));
    if (auto axis = t->vec3("nv_axis")) {
      if (!(axis->norm() > 0.0)) throw SchemaError(t->at("nv_axis"), "must be a non-zero vector");
      m.nv_axis = axis->normalized();
    }
    const auto larmor = t->finite("larmor_hz");
    if (!larmor) throw SchemaError(t->at("larmor_hz"), "required field is missing");
    m.larmor = constants::hz(*larmor);
    m.t1_rho = t->required_positive("t1_rho");
    auto grid = read_grid(*t, "rabi_grid_hz", "rabi_start_hz", "rabi_stop_hz", "rabi_step_hz");
    if (!grid) throw SchemaError(t->at("rabi_grid_hz"), "required field is missing (or rabi_start_hz/rabi_stop_hz/rabi_step_hz)");
    for (double g : *grid) {
      if (!(g > 0.0)) throw SchemaError(t->at("rabi_grid_hz"), "Rabi frequencies must be positive");
    }
    m.rabi_grid_hz = *grid;
    m.sensing.duration = t->required_positive("duration");
    m.sensing.t_re = t->positive("t_re").value_or(m.t1_rho);
    m.sensing.wahuha_tau = t->positive("wahuha_tau");
    m.sensing.model = cfg.model;
    m.sensing.propagation = cfg.propagation;
    if (auto d = t->choice<Decoupling>("decoupling", {{"ideal", Decoupling::kIdeal},
                                                     {"pulsed", Decoupling::kPulsed},
                                                     {"none", Decoupling::kNone}})) {
      m.decoupling = *d;
    }
    if (m.decoupling == Decoupling::kPulsed && !m.sensing.wahuha_tau) {
      throw SchemaError(t->at("wahuha_tau"), "pulsed decoupling needs a WAHUHA tau");
    }
    if (std::none_of(m.geometry.begin(), m.geometry.end(), [&](const GeometryEntry& e) { return e.label == m.sensor; })) {
      throw SchemaError(t->at("sensor"), "label '" + m.sensor + "' is not in the geometry");
    }
    try {
      std::vector<std::size_t> targets;
      for (std::size_t k = 0; k < m.geometry.size(); ++k) {
        if (m.geometry[k].label != m.sensor) targets.push_back(k);
      }
      SweepSpec check;
      check.grid = m.rabi_grid_hz;
      check.base = molecule_register(m, targets, constants::hz(m.rabi_grid_hz.front()));
      check.validate();
    } catch (const Error& e) {
      throw SchemaError(t->path(), e.what());
    }
    t->finish();
    cfg.molecule = std::move(m);
  }

  if (auto t = root.table("output")) {
    if (auto p = t->string("prefix")) {
      if (p->empty()) throw SchemaError(t->at("prefix"), "must not be empty");
      cfg.output_prefix = *p;
    }
    if (auto w = t->integer("workers")) {
      if (*w < 1) throw SchemaError(t->at("workers"), "must be at least 1");
      cfg.workers = static_cast<int>(*w);
    }
    t->finish();
  }
  root.finish();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ResourceError("cannot open config '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  const Json doc = parse_toml(text.str(), path);
  const auto dir = std::filesystem::path(path).parent_path();
  return build_config(doc, dir.empty() ? "." : dir.string(), path);
}

}  // namespace spinbus
