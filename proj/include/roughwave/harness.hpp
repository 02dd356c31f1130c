#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "roughwave/bichar.hpp"
#include "roughwave/core/error.hpp"
#include "roughwave/core/io.hpp"
#include "roughwave/core/rng.hpp"
#include "roughwave/lp.hpp"
#include "roughwave/metric.hpp"
#include "roughwave/microlocal.hpp"
#include "roughwave/spectral.hpp"
#include "roughwave/state.hpp"
#include "roughwave/symbolcalc.hpp"

namespace roughwave::harness {

using io::json;

// ---------------------------------------------------------------------------------------------
// Configuration.

struct ExperimentConfig {
  std::size_t dim = 1;
  std::size_t grid = 256;
  double tau = 2.5;
  double amplitude = 0.3;
  std::uint64_t seed = 7;
  double mass2 = 1.0;
  std::size_t modes = 128;
  double mollifier = 3.0;
  std::vector<double> s_grid{0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0};
  double cone_angle = 0.0; // 0: the resolution of the direction set
  int direction_radius = 3;
  std::size_t patch_points = 64;
  std::size_t patch_stride = 2;
  double gamma = 0.8;
  std::size_t state_grid = 32;
  std::size_t weyl_grid_2d = 32;
  std::size_t weyl_modes_2d = 200;
  double synthesis_amplitude = 0.3;

  double tol_partition = 1e-12;
  double tol_regularity = 0.15;
  double tol_exponent = 0.3;
  double tol_flat_spectrum = 1e-10;
  double tol_weyl_flat = 0.05;
  double tol_weyl_rough = 0.07;
  double tol_identity = 1e-10;
  double tol_pointwise = 1e-12;
  double tol_positive_ratio = 1e-3;
  double tol_causal = 0.05;
  double angle_cells = 2.0;
  double propagation_fraction = 0.8;
  double adiabatic_slack = 0.2;

  std::string output_dir = "roughwave-out";

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::string to_text() const;
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig from_file(const std::filesystem::path& p);
  void save(const std::filesystem::path& p) const;
  void validate() const;
  std::string hash() const;

  /// Probe order for the two-point function: tau - 3/2 - 0.1 in three dimensions, shifted by (3 - d)/2.
  double probe_order() const { return tau - 1.5 - 0.1 + (3.0 - static_cast<double>(dim)) / 2.0; }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline std::uint64_t to_unsigned(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " is out of range");
  }
}

inline std::string list_text(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + io::num(v[i]);
  return out;
}

struct Field {
  const char* key;
  const char* help;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class T>
Field number(const char* key, const char* help, T ExperimentConfig::*member) {
  return Field{key, help,
               [member](const ExperimentConfig& c) {
                 if constexpr (std::is_floating_point_v<T>) return io::num(c.*member);
                 else return std::to_string(c.*member);
               },
               [member, key](ExperimentConfig& c, const std::string& v) {
                 if constexpr (std::is_floating_point_v<T>) c.*member = to_double(key, v);
                 else if constexpr (std::is_signed_v<T>) c.*member = static_cast<T>(std::llround(to_double(key, v)));
                 else c.*member = static_cast<T>(to_unsigned(key, v));
               }};
}

inline const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> all{
      number("dim", "spatial dimension of the experiment (kernel stages run in d = 1)", &C::dim),
      number("grid", "grid points per axis", &C::grid),
      number("tau", "Hoelder-Zygmund regularity of the metric, must exceed 1", &C::tau),
      number("amplitude", "metric perturbation amplitude, 0 gives the flat metric", &C::amplitude),
      number("seed", "root seed for every random stream", &C::seed),
      number("mass2", "Klein-Gordon mass squared", &C::mass2),
      number("modes", "mode count J of the kernels", &C::modes),
      number("mollifier", "mollifier width sigma_J of the causal kernels", &C::mollifier),
      Field{"s_grid", "Sobolev orders scanned for the adiabatic estimate (comma list)",
            [](const C& c) { return list_text(c.s_grid); },
            [](C& c, const std::string& v) {
              c.s_grid.clear();
              for (const auto& part : io::detail::split(v, ',')) c.s_grid.push_back(to_double("s_grid", trim(part)));
            }},
      number("cone_angle", "cone half-angle of a scan direction in radians, 0 picks the set resolution", &C::cone_angle),
      number("direction_radius", "radius of the integer cube whose surface defines scan directions", &C::direction_radius),
      number("patch_points", "points per axis of a probe patch", &C::patch_points),
      number("patch_stride", "grid steps between neighbouring patch samples", &C::patch_stride),
      number("gamma", "symbol smoothing exponent", &C::gamma),
      number("state_grid", "grid of the one-particle checks (full mode basis)", &C::state_grid),
      number("weyl_grid_2d", "grid per axis of the d = 2 Weyl check", &C::weyl_grid_2d),
      number("weyl_modes_2d", "mode count of the d = 2 Weyl check", &C::weyl_modes_2d),
      number("synthesis_amplitude", "amplitude of the generator-level checks (regularity, smoothing, Weyl)", &C::synthesis_amplitude),
      number("tol_partition", "partition of unity deviation", &C::tol_partition),
      number("tol_regularity", "regularity estimate deviation |tau_hat - tau|", &C::tol_regularity),
      number("tol_exponent", "smoothing exponent deviation", &C::tol_exponent),
      number("tol_flat_spectrum", "flat eigenvalue deviation", &C::tol_flat_spectrum),
      number("tol_weyl_flat", "relative Weyl exponent deviation, flat", &C::tol_weyl_flat),
      number("tol_weyl_rough", "relative Weyl exponent deviation, rough", &C::tol_weyl_rough),
      number("tol_identity", "one-particle and residual identities", &C::tol_identity),
      number("tol_pointwise", "pointwise kernel identities", &C::tol_pointwise),
      number("tol_positive_ratio", "negative to positive time-frequency mass ratio", &C::tol_positive_ratio),
      number("tol_causal", "mollified commutator over separated pairs", &C::tol_causal),
      number("angle_cells", "angular tolerance of the classification in direction cells", &C::angle_cells),
      number("propagation_fraction", "share of curve points that must stay flagged", &C::propagation_fraction),
      number("adiabatic_slack", "allowed shortfall of the adiabatic order below tau - 3", &C::adiabatic_slack),
      Field{"output_dir", "directory for reports and artifacts", [](const C& c) { return c.output_dir; },
            [](C& c, const std::string& v) { c.output_dir = v; }},
  };
  return all;
}

inline const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return f;
  throw ConfigError("config: unknown key '" + key + "'");
}

inline bool power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

} // namespace detail

inline void ExperimentConfig::set(const std::string& key, const std::string& value) { detail::field(key).set(*this, detail::trim(value)); }

inline std::string ExperimentConfig::get(const std::string& key) const { return detail::field(key).get(*this); }

inline std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& f : detail::fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

inline ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig c;
  std::istringstream is(text);
  std::string line;
  int number = 0;
  while (std::getline(is, line)) {
    ++number;
    const std::string t = detail::trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config: line " + std::to_string(number) + " is not key = value");
    c.set(detail::trim(t.substr(0, eq)), t.substr(eq + 1));
  }
  return c;
}

inline ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& p) {
  auto is = io::open_in(p);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

inline void ExperimentConfig::save(const std::filesystem::path& p) const {
  auto os = io::open_out(p);
  os << to_text();
}

inline void ExperimentConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  require(tau > 1.0 && std::isfinite(tau), "tau must satisfy tau > 1 (elliptic regime), got " + io::num(tau));
  require(dim == 1, "the pipeline runs d = 1 kernels; d = 2 enters through the Weyl check only");
  require(detail::power_of_two(grid) && grid >= 32 && grid <= 1024, "grid must be a power of two in [32, 1024]");
  require(amplitude >= 0.0 && amplitude <= 0.4, "amplitude must lie in [0, 0.4]");
  require(synthesis_amplitude > 0.0 && synthesis_amplitude <= 0.4, "synthesis_amplitude must lie in (0, 0.4]");
  require(mass2 > 0.0, "mass2 must be positive");
  require(modes >= 32 && modes % 2 == 0 && modes + 8 <= grid, "modes must be even, at least 32 and at most grid - 8");
  require(mollifier >= 0.0, "mollifier must be non-negative");
  require(!s_grid.empty(), "s_grid must not be empty");
  for (std::size_t i = 0; i < s_grid.size(); ++i) {
    require(std::isfinite(s_grid[i]), "s_grid entries must be finite");
    if (i > 0) require(s_grid[i] > s_grid[i - 1], "s_grid must be strictly increasing");
  }
  require(cone_angle >= 0.0 && cone_angle < 1.5, "cone_angle must lie in [0, 1.5)");
  require(direction_radius >= 1 && direction_radius <= 8, "direction_radius must lie in [1, 8]");
  // the shell fit stops below the closure band and needs three bands above the first resolved one
  require(detail::power_of_two(patch_points) && patch_points >= 64 && patch_points <= grid, "patch_points must be a power of two in [64, grid]");
  require(patch_stride >= 1 && patch_stride <= 4 && patch_points * patch_stride <= grid, "patch_stride must lie in [1, 4] with patch_points * patch_stride <= grid");
  require(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
  require(detail::power_of_two(state_grid) && state_grid >= 8 && state_grid <= 128, "state_grid must be a power of two in [8, 128]");
  require(detail::power_of_two(weyl_grid_2d) && weyl_grid_2d >= 16 && weyl_grid_2d <= 128, "weyl_grid_2d must be a power of two in [16, 128]");
  require(weyl_modes_2d >= 30 && weyl_modes_2d < weyl_grid_2d * weyl_grid_2d, "weyl_modes_2d must lie in [30, weyl_grid_2d^2)");
  for (double t : {tol_partition, tol_regularity, tol_exponent, tol_flat_spectrum, tol_weyl_flat, tol_weyl_rough, tol_identity, tol_pointwise,
                   tol_positive_ratio, tol_causal, angle_cells, adiabatic_slack})
    require(t > 0.0, "tolerances must be positive");
  require(propagation_fraction > 0.0 && propagation_fraction <= 1.0, "propagation_fraction must lie in (0, 1]");
  require(!output_dir.empty(), "output_dir must not be empty");
}

/// Hash of every setting that can change a result; the output directory is left out.
inline std::string ExperimentConfig::hash() const {
  std::string canon;
  for (const auto& f : detail::fields())
    if (std::string(f.key) != "output_dir") canon += std::string(f.key) + "=" + f.get(*this) + "\n";
  return detail::fnv1a_hex(canon);
}

inline std::string help_text() {
  std::ostringstream os;
  for (const auto& f : detail::fields()) os << "  " << std::left << std::setw(22) << f.key << f.help << " [" << f.get(ExperimentConfig{}) << "]\n";
  return os.str();
}

// ---------------------------------------------------------------------------------------------
// Report.

struct Measurement {
  std::string label;
  double value = 0.0;
  double threshold = 0.0;
  std::string relation; // "<=" or ">="
  bool pass = false;
};

inline Measurement at_most(std::string label, double v, double threshold) { return {std::move(label), v, threshold, "<=", v <= threshold}; }
inline Measurement at_least(std::string label, double v, double threshold) { return {std::move(label), v, threshold, ">=", v >= threshold}; }

struct CheckRecord {
  std::string id;
  std::string name;
  std::string anchor;
  double measured = 0.0;
  double threshold = 0.0;
  std::string relation;
  bool pass = false;
  std::vector<Measurement> parts;
  std::string note;
};

/// A numerical result next to its closed form.
struct Comparison {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct VerificationReport {
  std::string config_hash;
  json environment;
  json config;
  std::vector<CheckRecord> checks;
  std::vector<Comparison> comparisons;
  std::map<std::string, double> timing; // seconds per stage, excluded from reproducibility

  bool all_pass() const {
    if (checks.empty()) return false;
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }

  const CheckRecord& check(const std::string& id) const {
    for (const auto& c : checks)
      if (c.id == id) return c;
    throw IndexError("report: no check '" + id + "'");
  }

  json to_json(bool with_timing = true) const;
  static VerificationReport from_json(const json& j);
};

/// The acceptance suite: every record appears exactly once, in this order.
inline const std::vector<std::pair<std::string, std::string>>& check_catalogue() {
  static const std::vector<std::pair<std::string, std::string>> all{
      {"1", "partition of unity"},
      {"2", "regularity dial"},
      {"3", "symbol smoothing"},
      {"4", "flat spectrum"},
      {"5", "Weyl growth"},
      {"6", "one-particle structure"},
      {"7", "time-translation invariance"},
      {"8", "kernel identities"},
      {"9", "Sobolev membership"},
      {"10", "positive frequency"},
      {"11", "characteristic containment and diagonal condition"},
      {"12", "causal support"},
      {"13", "C+ containment"},
      {"14", "propagation and covariance"},
      {"adiabatic", "adiabatic order"},
  };
  return all;
}

inline const std::map<std::string, std::string>& anchors() {
  static const std::map<std::string, std::string> all{
      {"1", "Σ_j ψ_j(ξ) = 1"},
      {"2", "h_ij − δ_ij ∈ C^τ"},
      {"3", "p = p^# + p^b, p^b ∈ S^{2−τγ}"},
      {"4", "λ_k² = m² + (4/Δx²) sin²(kΔx/2)"},
      {"5", "l^{2/3} ≤ C λ_j²"},
      {"6", "λ_G(F₁,F₂) = μ(F₁,F₂) + (i/2) σ(F₁,F₂)"},
      {"7", "invariant under this symmetry"},
      {"8", "ω_G = ω⁺ + i K_G"},
      {"9", "ω_G ∈ H^{−1/2−ε}_loc"},
      {"10", "ξ̃⁰ > 0"},
      {"11", "η̃ = −ξ̃"},
      {"12", "K_G(x,y) = 0 for spacelike separated x, y"},
      {"13", "WF′(ω_G) ⊂ C⁺ for every ε > 0"},
      {"14", "WF is invariant under the bicharacteristic flow"},
      {"adiabatic", "WF^s(ω) ⊂ C⁺ for all s ≤ N + 3/2"},
  };
  return all;
}

namespace detail {

inline json number_json(double v) { return std::isfinite(v) ? json(v) : json(std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf")); }

inline double json_number(const json& j) {
  if (j.is_number()) return j.get<double>();
  const std::string s = j.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  return std::numeric_limits<double>::quiet_NaN();
}

inline CheckRecord finish(std::string id, std::vector<Measurement> parts, std::string note = {}) {
  CheckRecord r;
  r.id = id;
  for (const auto& [cid, name] : check_catalogue())
    if (cid == id) r.name = name;
  r.anchor = anchors().at(id);
  r.parts = std::move(parts);
  r.note = std::move(note);
  r.pass = !r.parts.empty();
  const Measurement* primary = r.parts.empty() ? nullptr : &r.parts.front();
  for (const auto& m : r.parts)
    if (!m.pass) {
      if (r.pass) primary = &m;
      r.pass = false;
    }
  if (primary) {
    r.measured = primary->value;
    r.threshold = primary->threshold;
    r.relation = primary->relation;
  }
  return r;
}

} // namespace detail

inline json VerificationReport::to_json(bool with_timing) const {
  json j;
  j["config_hash"] = config_hash;
  j["environment"] = environment;
  j["config"] = config;
  j["all_pass"] = all_pass();
  json cs = json::array();
  for (const auto& c : checks) {
    json parts = json::array();
    for (const auto& m : c.parts)
      parts.push_back({{"label", m.label}, {"value", detail::number_json(m.value)}, {"threshold", detail::number_json(m.threshold)},
                       {"relation", m.relation}, {"pass", m.pass}});
    cs.push_back({{"id", c.id}, {"name", c.name}, {"anchor", c.anchor}, {"measured", detail::number_json(c.measured)},
                  {"threshold", detail::number_json(c.threshold)}, {"relation", c.relation}, {"pass", c.pass}, {"parts", parts}, {"note", c.note}});
  }
  j["checks"] = cs;
  json cmp = json::array();
  for (const auto& c : comparisons)
    cmp.push_back({{"name", c.name}, {"error", detail::number_json(c.error)}, {"tolerance", c.tolerance}, {"pass", c.pass}});
  j["comparisons"] = cmp;
  if (with_timing) j["timing"] = timing;
  return j;
}

inline VerificationReport VerificationReport::from_json(const json& j) {
  VerificationReport r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.environment = j.at("environment");
  r.config = j.at("config");
  for (const auto& c : j.at("checks")) {
    CheckRecord rec;
    rec.id = c.at("id").get<std::string>();
    rec.name = c.at("name").get<std::string>();
    rec.anchor = c.at("anchor").get<std::string>();
    rec.measured = detail::json_number(c.at("measured"));
    rec.threshold = detail::json_number(c.at("threshold"));
    rec.relation = c.at("relation").get<std::string>();
    rec.pass = c.at("pass").get<bool>();
    rec.note = c.at("note").get<std::string>();
    for (const auto& m : c.at("parts"))
      rec.parts.push_back({m.at("label").get<std::string>(), detail::json_number(m.at("value")), detail::json_number(m.at("threshold")),
                           m.at("relation").get<std::string>(), m.at("pass").get<bool>()});
    r.checks.push_back(std::move(rec));
  }
  for (const auto& c : j.at("comparisons"))
    r.comparisons.push_back({c.at("name").get<std::string>(), detail::json_number(c.at("error")), c.at("tolerance").get<double>(), c.at("pass").get<bool>()});
  if (j.contains("timing")) r.timing = j.at("timing").get<std::map<std::string, double>>();
  return r;
}

inline json environment_fingerprint() {
  json e;
#if defined(__clang__)
  e["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  e["compiler"] = std::string("gcc ") + __VERSION__;
#else
  e["compiler"] = "unknown";
#endif
  e["cxx_standard"] = static_cast<long>(__cplusplus);
  e["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION);
  e["fftw"] = std::string(fftw_version);
  e["rng"] = std::string(Rng::generator_name);
  e["threads"] = 1;
#ifdef NDEBUG
  e["assertions"] = false;
#else
  e["assertions"] = true;
#endif
  return e;
}

inline std::string format_value(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

inline std::string text_line(const CheckRecord& c) {
  std::ostringstream os;
  os << (c.pass ? "PASS " : "FAIL ") << std::left << std::setw(10) << c.id << c.name << ": measured " << format_value(c.measured) << ' '
     << c.relation << ' ' << format_value(c.threshold) << "  [" << c.anchor << "]";
  return os.str();
}

inline void write_text(std::ostream& os, const VerificationReport& r) {
  os << "roughwave verification report\nconfig hash " << r.config_hash << "\n\n";
  for (const auto& c : r.checks) {
    os << text_line(c) << '\n';
    for (const auto& m : c.parts)
      os << "      " << (m.pass ? "ok   " : "fail ") << m.label << ": " << format_value(m.value) << ' ' << m.relation << ' ' << format_value(m.threshold) << '\n';
    if (!c.note.empty()) os << "      note: " << c.note << '\n';
  }
  if (!r.comparisons.empty()) {
    os << "\nclosed-form comparisons\n";
    for (const auto& c : r.comparisons)
      os << "  " << (c.pass ? "ok   " : "fail ") << c.name << ": error " << format_value(c.error) << " (tolerance " << format_value(c.tolerance) << ")\n";
  }
  os << "\noverall: " << (r.all_pass() ? "PASS" : "FAIL") << '\n';
}

inline void write_csv(std::ostream& os, const VerificationReport& r) {
  auto quote = [](const std::string& s) {
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  };
  os << "id,name,anchor,measured,relation,threshold,pass\n";
  for (const auto& c : r.checks)
    os << c.id << ',' << quote(c.name) << ',' << quote(c.anchor) << ',' << io::num(c.measured) << ',' << c.relation << ',' << io::num(c.threshold) << ','
       << (c.pass ? "true" : "false") << '\n';
}

/// Writes the report in one format ("json", "csv" or "text") and returns the file written.
inline std::filesystem::path emit_report(const VerificationReport& r, const std::string& format, const std::filesystem::path& dir) {
  std::filesystem::path file;
  if (format == "json") file = dir / "report.json";
  else if (format == "csv") file = dir / "report.csv";
  else if (format == "text") file = dir / "report.txt";
  else throw ConfigError("report: format must be json, csv or text");
  auto os = io::open_out(file);
  if (format == "json") os << r.to_json().dump(2) << '\n';
  else if (format == "csv") write_csv(os, r);
  else write_text(os, r);
  if (!os) throw IoError("report: write failed for " + file.string());
  return file;
}

inline VerificationReport load_report(const std::filesystem::path& file) { return VerificationReport::from_json(io::read_json(file)); }

// ---------------------------------------------------------------------------------------------
// Shared experiment pieces.

inline metric::RoughMetric synthesize(std::size_t dim, std::size_t n, double tau, double amplitude, std::uint64_t seed) {
  metric::GenerateOptions o;
  o.dim = dim;
  o.grid = n;
  o.tau = tau;
  o.amplitude = amplitude;
  o.seed = seed;
  return metric::generate_rough_metric(o);
}

/// Band-split smoothed principal symbol that drives the flow.
inline symbolcalc::Symbol flow_symbol(const metric::RoughMetric& m, double mass2, double gamma) {
  const Lattice st = Lattice::torus(m.dim + 1, m.grid.shape[0]);
  return symbolcalc::smooth_symbol(symbolcalc::kg_symbol(m, mass2), gamma, lp::build_partition(st, lp::DyadicPartition::max_bands(st))).sharp;
}

/// Mode basis with a few spare modes, so the kernel cut can move down to a complete cluster.
struct KernelSet {
  std::shared_ptr<const spectral::ModeBasis> basis;
  std::size_t complete = 0;

  state::TwoPointKernel kernel(state::KernelKind kind, double sigma = 0.0) const { return state::TwoPointKernel(kind, basis, complete, sigma); }
};

inline KernelSet kernel_set(std::shared_ptr<const spectral::ModeBasis> b, std::size_t modes) {
  KernelSet k{std::move(b), 0};
  k.complete = spectral::complete_cluster_count(*k.basis, modes);
  return k;
}

/// Scan of one kernel patch plus its classification at one order.
struct ProbeSummary {
  std::string name;
  microlocal::PairPoint base;
  bool diagonal = true;
  microlocal::ScanResult scan;
  std::vector<microlocal::Classification> classes;
  std::size_t failing = 0;
};

inline double grid_point(const Lattice& g, std::size_t i) {
  std::vector<double> x(1);
  g.point(i, x);
  return x[0];
}

inline ProbeSummary classify_scan(std::string name, const microlocal::SpectralPatch& patch, const metric::RoughMetric& m,
                                  const microlocal::PairPoint& base, bool diagonal, double s, double angle_cells) {
  ProbeSummary out{std::move(name), base, diagonal, microlocal::wavefront_scan(patch, s), {}, 0};
  const double tol = angle_cells * out.scan.resolution;
  for (const auto& c : out.scan.flagged) {
    out.classes.push_back(microlocal::classify(c.direction, m.h_inv[0][base.x], m.h_inv[0][base.y], diagonal, tol));
    out.failing += !out.classes.back().passes();
  }
  return out;
}

inline void write_flags(const std::filesystem::path& file, const ProbeSummary& p) {
  auto os = io::open_out(file);
  os << "# base t=" << io::num(p.base.t) << " x=" << p.base.x << " s=" << io::num(p.base.s) << " y=" << p.base.y << " order=" << io::num(p.scan.s) << '\n';
  os << "z0,z1,z2,z3,slope,inconclusive,char_angle,sum_angle,sign_angle,diagonal_angle,passes\n";
  for (std::size_t i = 0; i < p.scan.flagged.size(); ++i) {
    const auto& c = p.scan.flagged[i];
    const auto& k = p.classes[i];
    for (double v : c.direction) os << io::num(v) << ',';
    os << io::num(c.fit.slope) << ',' << c.fit.inconclusive << ',' << io::num(k.char_angle) << ',' << io::num(k.sum_angle) << ','
       << io::num(k.sign_angle) << ',' << io::num(k.diagonal_angle) << ',' << k.passes() << '\n';
  }
}

// ---------------------------------------------------------------------------------------------
// Acceptance checks that need no pipeline state.

inline CheckRecord check_partition(const ExperimentConfig& cfg) {
  std::vector<Measurement> parts;
  for (const Lattice& l : {Lattice::torus(1, cfg.grid), Lattice::torus(2, cfg.grid), Lattice::torus(2, cfg.weyl_grid_2d)}) {
    const auto p = lp::build_partition(l, lp::DyadicPartition::max_bands(l));
    double worst = 0.0;
    for (std::size_t f = 0; f < l.size(); ++f) {
      double s = 0.0;
      for (std::size_t j = 0; j < p.n_bands(); ++j) s += p.band(j)[f];
      worst = std::max(worst, std::abs(s - 1.0));
    }
    parts.push_back(at_most("max |Σψ_j − 1|, d=" + std::to_string(l.dim()) + " N=" + std::to_string(l.shape[0]), worst, cfg.tol_partition));
  }
  return detail::finish("1", parts);
}

inline double perturbation_regularity(const metric::RoughMetric& m) {
  RealField w = m.lower(0, 0);
  for (auto& v : w.values) v -= 1.0;
  return lp::regularity_estimate(w, lp::build_partition(m.grid, m.n_bands));
}

inline CheckRecord check_regularity_dial(const ExperimentConfig& cfg) {
  Rng rng = Rng::substream(cfg.seed, "harness-regularity-dial");
  int ok = 0, total = 0;
  double worst = 0.0;
  std::ostringstream note;
  for (double tau : {1.5, 2.5, 3.0})
    for (int k = 0; k < 5; ++k, ++total) {
      const std::uint64_t seed = rng.next();
      const double est = perturbation_regularity(synthesize(1, cfg.grid, tau, cfg.synthesis_amplitude, seed));
      const double dev = std::abs(est - tau);
      worst = std::max(worst, dev);
      ok += dev <= cfg.tol_regularity;
      note << (k == 0 ? (tau == 1.5 ? "" : "; ") + std::string("tau ") + format_value(tau) + ":" : "") << ' ' << format_value(est);
    }
  note << "; largest deviation " << format_value(worst);
  return detail::finish("2", {at_least("runs out of 15 with |τ̂ − τ| ≤ " + format_value(cfg.tol_regularity), ok, 13.0)}, note.str());
}

inline CheckRecord check_smoothing(const ExperimentConfig& cfg) {
  const double tau = 2.5, gamma = 0.8;
  const auto m = synthesize(1, cfg.grid, tau, cfg.synthesis_amplitude, cfg.seed);
  const auto p = symbolcalc::kg_symbol(m, cfg.mass2);
  const Lattice st = Lattice::torus(2, cfg.grid);
  const auto part = lp::build_partition(st, lp::DyadicPartition::max_bands(st));
  const auto split = symbolcalc::smooth_symbol(p, gamma, part);
  Rng rng = Rng::substream(cfg.seed, "harness-smoothing-points");
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const double scale = std::exp2(rng.uniform(-1.0, std::log2(static_cast<double>(cfg.grid) / 2.0)));
    std::vector<double> xi{scale * rng.normal(), scale * rng.normal()};
    const std::size_t x = rng.below(m.grid.size());
    const cplx a = split.sharp.evaluate(x, xi) + split.flat.evaluate(x, xi), b = p.evaluate(x, xi);
    worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(b)));
  }
  const std::size_t last = part.n_bands() - 2;
  const double remainder = symbolcalc::profile_slope(symbolcalc::band_profile(split.flat, 0), 1, last);
  const double third = symbolcalc::profile_slope(symbolcalc::band_profile(split.sharp, 3), 1, last);
  return detail::finish("3", {at_most("reconstruction |p^# + p^b − p|", worst, 1e-12),
                              at_most("|remainder exponent − (2 − τγ)|", std::abs(remainder - (2.0 - tau * gamma)), cfg.tol_exponent),
                              at_most("|third-derivative exponent − (2 + γ(3 − τ))|", std::abs(third - (2.0 + gamma * (3.0 - tau))), cfg.tol_exponent)},
                        "remainder slope " + format_value(remainder) + ", |β|=3 slope " + format_value(third));
}

inline CheckRecord check_flat_spectrum(const ExperimentConfig& cfg) {
  const std::size_t n = 64;
  const auto b = spectral::eigenpairs(metric::flat(1, n), cfg.mass2, n);
  const auto oracle = spectral::flat_discrete_spectrum(Lattice::torus(1, n), cfg.mass2);
  double worst = 0.0;
  for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(b.eigenvalues[j] - oracle[j]) / std::max(1.0, oracle[j]));
  return detail::finish("4", {at_most("max relative eigenvalue error, d=1 N=64", worst, cfg.tol_flat_spectrum)});
}

inline CheckRecord check_weyl(const ExperimentConfig& cfg, const spectral::ModeBasis& flat1, const spectral::ModeBasis& rough1) {
  auto dev = [](const spectral::WeylFit& w) { return std::abs(w.exponent / w.target - 1.0); };
  const auto f1 = spectral::weyl_check(flat1.truncated(cfg.modes), 1), r1 = spectral::weyl_check(rough1.truncated(cfg.modes), 1);
  const std::size_t n2 = cfg.weyl_grid_2d;
  const auto f2 = spectral::weyl_check(spectral::eigenpairs(metric::flat(2, n2), cfg.mass2, cfg.weyl_modes_2d), 2);
  const auto r2 = spectral::weyl_check(
      spectral::eigenpairs(synthesize(2, n2, cfg.tau, cfg.synthesis_amplitude, cfg.seed), cfg.mass2, cfg.weyl_modes_2d), 2);
  const std::string s2 = " N=" + std::to_string(n2) + " J=" + std::to_string(cfg.weyl_modes_2d);
  return detail::finish("5",
                        {at_most("flat d=1 relative exponent error", dev(f1), cfg.tol_weyl_flat),
                         at_most("rough d=1 relative exponent error", dev(r1), cfg.tol_weyl_rough),
                         at_most("flat d=2" + s2 + " relative exponent error", dev(f2), cfg.tol_weyl_flat),
                         at_most("rough d=2" + s2 + " relative exponent error", dev(r2), cfg.tol_weyl_rough)},
                        "exponents " + format_value(f1.exponent) + ", " + format_value(r1.exponent) + " (target 2); " + format_value(f2.exponent) +
                            ", " + format_value(r2.exponent) + " (target 1)");
}

inline state::CauchyData random_data(const Lattice& l, Rng& rng) {
  state::CauchyData f{RealField(l), RealField(l)};
  for (auto& v : f.q.values) v = rng.uniform(-1.0, 1.0);
  for (auto& v : f.p.values) v = rng.uniform(-1.0, 1.0);
  return f;
}

inline std::pair<CheckRecord, CheckRecord> check_one_particle(const ExperimentConfig& cfg) {
  const auto m = synthesize(1, cfg.state_grid, cfg.tau, cfg.amplitude, cfg.seed);
  const auto basis = spectral::eigenpairs(m, cfg.mass2, cfg.state_grid);
  Rng rng = Rng::substream(cfg.seed, "harness-cauchy-data");
  double identity = 0.0, cs = 0.0, negative_mu = 0.0;
  for (int k = 0; k < 200; ++k) {
    const auto a = random_data(m.grid, rng), b = random_data(m.grid, rng);
    const cplx lg = state::lambda_G(a, b, basis);
    const double sigma = state::symplectic_form(a, b, m.sqrt_det);
    identity = std::max(identity, std::abs(2.0 * lg.imag() - sigma) / std::max(1.0, std::abs(sigma)));
    identity = std::max(identity, std::abs(lg.real() - state::mu(a, b, basis)) / std::max(1.0, std::abs(lg)));
    const double maa = state::mu(a, a, basis), mbb = state::mu(b, b, basis);
    negative_mu = std::max(negative_mu, -std::min(maa, mbb));
    cs = std::max(cs, sigma * sigma / (4.0 * maa * mbb) - 1.0);
  }
  std::vector<state::CauchyData> fam;
  for (int k = 0; k < 12; ++k) fam.push_back(random_data(m.grid, rng));
  fam.push_back(fam[0]);
  const long nf = static_cast<long>(fam.size());
  Eigen::MatrixXcd g(nf, nf);
  for (long a = 0; a < nf; ++a)
    for (long b = 0; b < nf; ++b) g(a, b) = state::lambda_G(fam[static_cast<std::size_t>(a)], fam[static_cast<std::size_t>(b)], basis);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(g);
  CheckRecord six = detail::finish("6", {at_most("identity error 2 Im λ_G − σ, Re λ_G − μ", identity, cfg.tol_identity),
                                         at_most("Cauchy–Schwarz σ² / (4 μ₁₁ μ₂₂) − 1", cs, cfg.tol_identity),
                                         at_most("negative μ(F,F)", negative_mu, 0.0),
                                         at_least("Gram minimum eigenvalue", es.eigenvalues().minCoeff(), -cfg.tol_identity)},
                                   "factor 4 in the Cauchy–Schwarz bound follows from λ_G = μ + (i/2)σ");

  Rng trng = Rng::substream(cfg.seed, "harness-time-translation");
  const auto f1 = random_data(m.grid, trng), f2 = random_data(m.grid, trng);
  const double mu0 = state::mu(f1, f2, basis), s0 = state::symplectic_form(f1, f2, m.sqrt_det);
  std::vector<Measurement> parts;
  for (double t : {0.1, 1.0, 7.0}) {
    const auto g1 = state::evolve_data(f1, t, basis), g2 = state::evolve_data(f2, t, basis);
    const double dmu = std::abs(state::mu(g1, g2, basis) - mu0) / std::max(1.0, std::abs(mu0));
    const double ds = std::abs(state::symplectic_form(g1, g2, m.sqrt_det) - s0) / std::max(1.0, std::abs(s0));
    parts.push_back(at_most("t=" + format_value(t) + " relative change of μ and σ", std::max(dmu, ds), cfg.tol_identity));
  }
  return {six, detail::finish("7", parts)};
}

/// Covariance of probe flags under an axis swap and a half-period translation.
inline void covariance_parts(std::vector<Measurement>& parts) {
  // A line singularity on a 64^2 torus, band-limited below the Nyquist corners.
  const Lattice g = Lattice::torus(2, 64);
  const RealField u = RealField::sample(g, [](auto x) {
    double s = 1.0;
    for (int k = 1; k <= 24; ++k) s += 2.0 * std::cos(k * x[0]);
    return s;
  });
  const auto swap = microlocal::diffeo_covariance_check(u, {{{0, 1}, {1, 0}}, {0, 0}}, g.flat(std::vector<std::size_t>{20, 0}), 0.5);
  const auto shift = microlocal::diffeo_covariance_check(u, {{{1, 0}, {0, 1}}, {32, 32}}, g.flat(std::vector<std::size_t>{32, 5}), 0.5);
  for (const auto& [label, r] : {std::pair{std::string("axis swap"), swap}, std::pair{std::string("translation"), shift}}) {
    parts.push_back(at_least(label + ": flags present", static_cast<double>(std::min(r.flags_original, r.flags_pulled)), 1.0));
    parts.push_back(at_most(label + ": worst flag displacement in cells", r.worst_angle / r.resolution, 1.0));
  }
}

// ---------------------------------------------------------------------------------------------
// Pipeline.

struct PipelineOptions {
  bool resume = false;          // reuse serialized metric and spectrum when the config hash matches
  bool write_artifacts = true;
  std::function<void(const std::string&)> log;
};

class Pipeline {
public:
  static constexpr const char* stages[] = {"gen-metric", "spectrum", "kernels", "sobolev", "probes", "traces", "checks"};

  Pipeline(ExperimentConfig cfg, PipelineOptions opt) : cfg_(std::move(cfg)), opt_(std::move(opt)), out_(cfg_.output_dir) {
    cfg_.validate();
    report_.config_hash = cfg_.hash();
    report_.environment = environment_fingerprint();
    for (const auto& f : detail::fields()) report_.config[f.key] = f.get(cfg_);
    // decided before any stage rewrites the manifest
    const auto manifest = out_ / "manifest.json";
    if (opt_.resume && std::filesystem::exists(manifest)) {
      const auto m = io::read_json(manifest);
      if (m.value("config_hash", "") == report_.config_hash && m.contains("completed"))
        prior_ = m["completed"].get<std::vector<std::string>>();
    }
  }

  VerificationReport run() {
    stage("gen-metric", [&] { gen_metric(); });
    stage("spectrum", [&] { spectrum(); });
    stage("kernels", [&] { kernels(); });
    stage("sobolev", [&] { sobolev(); });
    stage("probes", [&] { probes(); });
    stage("traces", [&] { traces(); });
    stage("checks", [&] { checks(); });
    if (opt_.write_artifacts)
      for (const char* f : {"json", "csv", "text"}) emit_report(report_, f, out_);
    return report_;
  }

  // Individual stages are public so the CLI can run a prefix of the chain.
  void gen_metric() {
    const auto dir = out_ / "metric";
    if (resumable("gen-metric", dir / "metric.json")) {
      metric_ = metric::load(dir);
      note("metric loaded from " + dir.string());
    } else {
      prior_.clear();
      metric_ = synthesize(1, cfg_.grid, cfg_.tau, cfg_.amplitude, cfg_.seed);
      if (opt_.write_artifacts) metric::save(metric_, dir);
    }
    flat_ = metric::flat(1, cfg_.grid);
  }

  void spectrum() {
    const auto dir = out_ / "spectrum";
    std::shared_ptr<spectral::ModeBasis> b;
    if (resumable("spectrum", dir / "spectrum.json")) {
      b = std::make_shared<spectral::ModeBasis>(spectral::load(dir));
      if (b->size() != cfg_.modes + 8) throw IoError("spectrum: stored basis has " + std::to_string(b->size()) + " modes");
      note("spectrum loaded from " + dir.string());
    } else {
      prior_.clear();
      b = std::make_shared<spectral::ModeBasis>(spectral::eigenpairs(metric_, cfg_.mass2, cfg_.modes + 8));
      if (opt_.write_artifacts) spectral::save(*b, dir, true);
    }
    rough_ = kernel_set(b, cfg_.modes);
    flat_set_ = metric_.is_flat() ? rough_ : kernel_set(std::make_shared<spectral::ModeBasis>(spectral::eigenpairs(flat_, cfg_.mass2, cfg_.modes + 8)), cfg_.modes);
  }

  void kernels() {
    omega_g_.emplace(rough_.kernel(state::KernelKind::omega_G));
    omega_a_.emplace(rough_.kernel(state::KernelKind::omega_A));
    if (opt_.write_artifacts) {
      auto os = io::open_out(out_ / "kernels" / "omega_G_row.csv");
      os << "# t=0.3 x=0 s=0\ny,re,im\n";
      for (std::size_t y = 0; y < cfg_.grid; ++y) {
        const cplx v = (*omega_g_)(0.3, 0, 0.0, y);
        os << y << ',' << io::num(v.real()) << ',' << io::num(v.imag()) << '\n';
      }
    }
  }

  void sobolev() {
    const microlocal::TimeWindow tw;
    sobolev_g_ = microlocal::mixed_sobolev_norm(*omega_g_, tw, -0.6);
    sobolev_g_high_ = microlocal::mixed_sobolev_norm(*omega_g_, tw, 1.0);
    sobolev_a_ = microlocal::mixed_sobolev_norm(*omega_a_, tw, 0.4);
    if (!opt_.write_artifacts) return;
    for (const auto& [name, r] : {std::pair{"omega_G_s-0.6", &sobolev_g_}, std::pair{"omega_G_s1", &sobolev_g_high_}, std::pair{"omega_A_s0.4", &sobolev_a_}}) {
      auto os = io::open_out(out_ / "sobolev" / (std::string(name) + ".csv"));
      microlocal::write_modes_csv(os, *r);
    }
  }

  void probes() {
    const double s = cfg_.probe_order();
    const microlocal::PairPoint diag{0.0, 0, 0.0, 0};
    const auto g_flat = flat_set_.kernel(state::KernelKind::omega_G);
    {
      const microlocal::SpectralPatch p(microlocal::sample_kernel_patch(g_flat, diag, spec()), spec(), probe_config());
      flat_diag_ = classify_scan("flat-diagonal", p, flat_, diag, true, s, cfg_.angle_cells);
    }
    {
      const microlocal::SpectralPatch p(microlocal::sample_kernel_patch(*omega_g_, diag, spec()), spec(), probe_config());
      rough_diag_ = classify_scan("rough-diagonal", p, metric_, diag, true, s, cfg_.angle_cells);
      half_space_ = microlocal::half_space_masses(p, p.top() - 2);
      adiabatic_rows(cfg_.tau, p, metric_);
    }
    // Second point at the origin, first point carried along a null bicharacteristic from it. The
    // other branch of the light cone lies about |t| from the patch centre, so the run has to
    // outlast the window radius.
    symbol_.emplace(flow_symbol(metric_, cfg_.mass2, cfg_.gamma));
    flow_.emplace(*symbol_);
    const auto start = bichar::null_covector(*flow_, {0.0, 0.0}, {1.0});
    const double reach = 0.5 * static_cast<double>(cfg_.patch_points * cfg_.patch_stride) * metric_.grid.spacing(0);
    pair_curve_ = bichar::hamiltonian_flow(*flow_, start, 0.5 * (reach + 0.1));
    const auto& end = pair_curve_.back();
    const double dx = metric_.grid.spacing(0);
    const long n = static_cast<long>(cfg_.grid), ix = std::lround(end.x[1] / dx);
    const microlocal::PairPoint pair{end.x[0], static_cast<std::size_t>((ix % n + n) % n), 0.0, 0};
    {
      const microlocal::SpectralPatch p(microlocal::sample_kernel_patch(*omega_g_, pair, spec()), spec(), probe_config());
      rough_pair_ = classify_scan("rough-null-pair", p, metric_, pair, false, s, cfg_.angle_cells);
    }
    {
      // timelike control: half a period apart in time, both branches are as far away as the torus allows
      const microlocal::PairPoint control{-std::numbers::pi, 0, 0.0, 0};
      const microlocal::SpectralPatch p(microlocal::sample_kernel_patch(*omega_g_, control, spec()), spec(), probe_config());
      rough_control_ = classify_scan("rough-timelike", p, metric_, control, false, s, cfg_.angle_cells);
    }
    for (double tau : {2.5, 3.0}) {
      if (tau == cfg_.tau) continue;
      const auto m = synthesize(1, cfg_.grid, tau, cfg_.amplitude, cfg_.seed);
      const auto ks = m.is_flat() ? flat_set_ : kernel_set(std::make_shared<spectral::ModeBasis>(spectral::eigenpairs(m, cfg_.mass2, cfg_.modes + 8)), cfg_.modes);
      const auto k = ks.kernel(state::KernelKind::omega_G);
      const microlocal::SpectralPatch p(microlocal::sample_kernel_patch(k, diag, spec()), spec(), probe_config());
      adiabatic_rows(tau, p, m);
    }
    if (!opt_.write_artifacts) return;
    for (const auto* ps : {&flat_diag_, &rough_diag_, &rough_pair_, &rough_control_}) write_flags(out_ / "probes" / ("flags_" + ps->name + ".csv"), *ps);
    auto os = io::open_out(out_ / "probes" / "adiabatic.csv");
    os << "tau,s,flags,failing\n";
    for (const auto& r : adiabatic_) os << io::num(r.tau) << ',' << io::num(r.s) << ',' << r.flags << ',' << r.failing << '\n';
  }

  void traces() {
    const auto start = bichar::null_covector(*flow_, {0.0, 0.0}, {-4.0});
    trace_ = bichar::hamiltonian_flow(*flow_, start, 0.1);
    const std::vector<double> partner{-start.xi[0], -start.xi[1]};
    propagation_ = bichar::propagation_check(bichar::kernel_sampler(*omega_g_, 0.0, 0, spec()), trace_, partner, cfg_.probe_order(), spec(), probe_config());
    if (!opt_.write_artifacts) return;
    bichar::write_csv(out_ / "traces" / "propagation_curve.csv", trace_);
    bichar::write_csv(out_ / "traces" / "null_pair_curve.csv", pair_curve_);
    auto os = io::open_out(out_ / "traces" / "propagation.csv");
    os << "index,tau,slope,singular\n";
    for (std::size_t i = 0; i < propagation_.sample_index.size(); ++i)
      os << propagation_.sample_index[i] << ',' << io::num(trace_.times[propagation_.sample_index[i]]) << ',' << io::num(propagation_.slopes[i]) << ','
         << propagation_.singular[i] << '\n';
  }

  void checks() {
    auto& out = report_.checks;
    out.clear();
    out.push_back(check_partition(cfg_));
    out.push_back(check_regularity_dial(cfg_));
    out.push_back(check_smoothing(cfg_));
    out.push_back(check_flat_spectrum(cfg_));
    out.push_back(check_weyl(cfg_, *flat_set_.basis, *rough_.basis));
    auto [six, seven] = check_one_particle(cfg_);
    out.push_back(six);
    out.push_back(seven);
    out.push_back(check_kernels());
    out.push_back(check_sobolev());
    out.push_back(detail::finish("10", {at_most("ξ₀<0 : ξ₀>0 mass ratio at shell top−2", half_space_.first / half_space_.second, cfg_.tol_positive_ratio)}));
    out.push_back(check_containment());
    out.push_back(check_causal());
    out.push_back(check_c_plus());
    out.push_back(check_propagation());
    out.push_back(check_adiabatic());
    comparisons();
  }

  const VerificationReport& report() const { return report_; }
  const metric::RoughMetric& metric() const { return metric_; }

private:
  struct AdiabaticRow {
    double tau, s;
    std::size_t flags, failing;
  };

  template <class F>
  void stage(const std::string& name, F&& f) {
    note("stage " + name);
    const auto t0 = std::chrono::steady_clock::now();
    const std::string pre = "stage " + name + ": ";
    try {
      f();
    } catch (const ConfigError& e) {
      throw ConfigError(pre + e.what());
    } catch (const IndexError& e) {
      throw IndexError(pre + e.what());
    } catch (const EstimationError& e) {
      throw EstimationError(pre + e.what());
    } catch (const DomainError& e) {
      throw DomainError(pre + e.what());
    } catch (const NumericError& e) {
      throw NumericError(pre + e.what());
    } catch (const SynthesisError& e) {
      throw SynthesisError(pre + e.what());
    } catch (const IoError& e) {
      throw IoError(pre + e.what());
    } catch (const Error& e) {
      throw Error(pre + e.what());
    }
    report_.timing[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    done_.push_back(name);
    if (opt_.write_artifacts) {
      json m;
      m["config_hash"] = report_.config_hash;
      m["completed"] = done_;
      io::write_json(out_ / "manifest.json", m);
      cfg_.save(out_ / "config.txt");
    }
  }

  // A stage is reused only if the previous run finished it under the same hash and nothing
  // upstream was recomputed in this run.
  bool resumable(const std::string& stage_name, const std::filesystem::path& artifact) const {
    return std::find(prior_.begin(), prior_.end(), stage_name) != prior_.end() && std::filesystem::exists(artifact);
  }

  void note(const std::string& s) const {
    if (opt_.log) opt_.log(s);
  }

  microlocal::PatchSpec spec() const { return {cfg_.patch_points, cfg_.patch_stride, 4.0}; }

  microlocal::ProbeConfig probe_config() const {
    microlocal::ProbeConfig c;
    c.direction_radius = cfg_.direction_radius;
    c.scan_angle = cfg_.cone_angle;
    // the closure band holds the truncation edge of the mode sum, so the fit stops one band short
    c.skip_closure = true;
    return c;
  }

  void adiabatic_rows(double tau, const microlocal::SpectralPatch& p, const metric::RoughMetric& m) {
    if (tau != 2.5 && tau != 3.0) return;
    for (double s : cfg_.s_grid) {
      const auto r = classify_scan("adiabatic", p, m, {0.0, 0, 0.0, 0}, true, s, cfg_.angle_cells);
      adiabatic_.push_back({tau, s, r.scan.flagged.size(), r.failing});
    }
  }

  CheckRecord check_kernels() {
    const double sigma = cfg_.mollifier;
    const auto g = rough_.kernel(state::KernelKind::omega_G, sigma), a = rough_.kernel(state::KernelKind::omega_A, sigma);
    const auto plus = rough_.kernel(state::KernelKind::omega_plus, sigma), kg = rough_.kernel(state::KernelKind::K_G, sigma);
    double modewise = 0.0;
    for (std::size_t j = 0; j < g.modes(); ++j)
      for (double t : {0.0, 0.4, -2.1, 7.3}) modewise = std::max(modewise, std::abs(cplx(0, 1) * a.mode_factor_dt(j, t) - g.mode_factor(j, t)));
    Rng rng = Rng::substream(cfg_.seed, "harness-kernel-points");
    double pointwise = 0.0;
    for (int k = 0; k < 200; ++k) {
      const double t = rng.uniform(-3, 3), s = rng.uniform(-3, 3);
      const std::size_t x = rng.below(cfg_.grid), y = rng.below(cfg_.grid);
      pointwise = std::max(pointwise, std::abs(g(t, x, s, y) - (plus(t, x, s, y) + cplx(0, 1) * kg(t, x, s, y))));
    }
    const auto op = spectral::assemble_operator(metric_, cfg_.mass2);
    double residual = 0.0;
    for (const auto* k : {&g, &a, &plus, &kg})
      for (const char* slot : {"tx", "sy"}) residual = std::max(residual, state::kg_residual(*k, slot, op).relative());
    return detail::finish("8", {at_most("max |i ∂_t ω_A − ω_G| per mode", modewise, cfg_.tol_pointwise),
                                at_most("max |ω_G − ω⁺ − i K_G|", pointwise, cfg_.tol_pointwise),
                                at_most("Klein-Gordon residual per slot", residual, cfg_.tol_identity)});
  }

  CheckRecord check_sobolev() {
    return detail::finish("9", {at_most("ω_G tail exponent at s = −0.6", sobolev_g_.tail_exponent, -3.0),
                                at_most("ω_A last dyadic block share at s = 0.4", sobolev_a_.last_block_fraction, 0.01)},
                          "ω_G verdicts: " + sobolev_g_.verdict + " at s = −0.6, " + sobolev_g_high_.verdict + " at s = 1");
  }

  CheckRecord check_containment() {
    std::vector<Measurement> parts;
    for (const auto* p : {&flat_diag_, &rough_diag_}) {
      parts.push_back(at_least(p->name + ": flags at s = " + format_value(p->scan.s), static_cast<double>(p->scan.flagged.size()), 1.0));
      parts.push_back(at_most(p->name + ": flags failing (a)-(d)", static_cast<double>(p->failing), 0.0));
    }
    return detail::finish("11", parts);
  }

  CheckRecord check_causal() {
    const std::size_t n = cfg_.grid;
    auto pair_set = [&](const metric::RoughMetric& m) {
      const auto cone = state::cone_bounds(m);
      std::vector<state::SpacetimePair> out;
      for (double tau : {0.3, 0.785, 1.2})
        for (std::size_t y = 0; y < n; y += 2) {
          state::SpacetimePair p{tau, 0, 0.0, y, state::Causal::ambiguous};
          p.kind = state::cone_classify(cone, m.grid, p, 0.25);
          out.push_back(p);
        }
      return out;
    };
    std::vector<Measurement> parts;
    for (const auto& [label, m, b] : {std::tuple{std::string("flat"), &flat_, flat_set_.basis}, std::tuple{std::string("metric"), &metric_, rough_.basis}}) {
      const state::TwoPointKernel half(state::KernelKind::K_G, b, cfg_.modes / 2, cfg_.mollifier), full(state::KernelKind::K_G, b, cfg_.modes, cfg_.mollifier);
      const auto pairs = pair_set(*m);
      const auto sh = state::causal_support_scan(half, pairs), sf = state::causal_support_scan(full, pairs);
      parts.push_back(at_most(label + ": max |K_G| separated, J=" + std::to_string(cfg_.modes / 2), sh.max_separated, cfg_.tol_causal));
      parts.push_back(at_most(label + ": ratio J=" + std::to_string(cfg_.modes) + " to J=" + std::to_string(cfg_.modes / 2), sf.max_separated / sh.max_separated, 0.5));
    }
    return detail::finish("12", parts);
  }

  CheckRecord check_c_plus() {
    std::vector<Measurement> parts;
    std::size_t total = 0;
    const bichar::FlowSymbol flat_flow(symbolcalc::kg_symbol(flat_, cfg_.mass2));
    using Case = std::pair<const ProbeSummary*, const bichar::FlowSymbol*>;
    for (const auto& [p, flow] : std::vector<Case>{{&flat_diag_, &flat_flow}, {&rough_diag_, &*flow_}, {&rough_pair_, &*flow_}, {&rough_control_, &*flow_}}) {
      const double tol = cfg_.angle_cells * p->scan.resolution;
      const Lattice& g = flow->space();
      std::size_t outside = 0, failing = 0;
      for (std::size_t i = 0; i < p->scan.flagged.size(); ++i) {
        const auto& z = p->scan.flagged[i].direction;
        outside += p->classes[i].char_angle > tol;
        const bichar::PhasePoint a{{p->base.t, grid_point(g, p->base.x)}, {z[0], z[1]}}, b{{p->base.s, grid_point(g, p->base.y)}, {-z[2], -z[3]}};
        failing += !bichar::c_plus_member(*flow, bichar::project_null(*flow, a), bichar::project_null(*flow, b), tol);
      }
      total += p->scan.flagged.size();
      parts.push_back(at_most(p->name + ": flagged pairs outside C+", static_cast<double>(failing), 0.0));
      parts.push_back(at_most(p->name + ": flags more than " + format_value(cfg_.angle_cells) + " cells off the null cone", static_cast<double>(outside), 0.0));
    }
    parts.push_back(at_least("flagged pairs examined", static_cast<double>(total), 1.0));
    parts.push_back(at_least("rough-null-pair: flags present", static_cast<double>(rough_pair_.scan.flagged.size()), 1.0));
    return detail::finish("13", parts, "rough-timelike is a control pair far from both light-cone branches");
  }

  CheckRecord check_propagation() {
    std::vector<Measurement> parts{at_least("flagged share of sampled curve points", propagation_.singular_fraction, cfg_.propagation_fraction)};
    covariance_parts(parts);
    return detail::finish("14", parts);
  }

  CheckRecord check_adiabatic() {
    std::vector<Measurement> parts;
    std::ostringstream note;
    const double shift = 1.5 + (3.0 - static_cast<double>(cfg_.dim)) / 2.0;
    for (double tau : {2.5, 3.0}) {
      double s_max = -std::numeric_limits<double>::infinity();
      for (const auto& r : adiabatic_) {
        if (r.tau != tau) continue;
        if (r.failing > 0) break;
        s_max = r.s;
      }
      const double order = s_max - shift;
      parts.push_back(at_least("τ=" + format_value(tau) + ": N̂ = s_max − " + format_value(shift), order, tau - 3.0 - cfg_.adiabatic_slack));
      note << (tau == 2.5 ? "" : "; ") << "tau " << format_value(tau) << ": clean up to s = " << format_value(s_max) << " (grid ends at "
           << format_value(cfg_.s_grid.back()) << ", so N̂ is a lower bound)";
    }
    return detail::finish("adiabatic", parts, note.str());
  }

  void comparisons() {
    auto& c = report_.comparisons;
    c.clear();
    const auto oracle = spectral::flat_discrete_spectrum(flat_.grid, cfg_.mass2);
    double spec_err = 0.0;
    for (std::size_t j = 0; j < flat_set_.basis->size(); ++j)
      spec_err = std::max(spec_err, std::abs(flat_set_.basis->eigenvalues[j] - oracle[j]) / std::max(1.0, oracle[j]));
    c.push_back({"flat eigenvalues against the discrete symbol (d=1, N=" + std::to_string(cfg_.grid) + ")", spec_err, cfg_.tol_flat_spectrum, spec_err <= cfg_.tol_flat_spectrum});

    // Timelike pairs against (1/2) J_0(m sqrt(tau^2 - r^2)), the 1+1 Klein-Gordon commutator.
    const state::TwoPointKernel kg(state::KernelKind::K_G, flat_set_.basis, cfg_.modes, cfg_.mollifier);
    const auto cone = state::cone_bounds(flat_);
    const double m = std::sqrt(cfg_.mass2), dx = flat_.grid.spacing(0);
    double bessel = 0.0;
    for (double tau : {0.3, 0.785, 1.2})
      for (std::size_t y = 0; y < cfg_.grid; y += 2) {
        const state::SpacetimePair p{tau, 0, 0.0, y, state::Causal::ambiguous};
        if (state::cone_classify(cone, flat_.grid, p, 0.25) != state::Causal::timelike) continue;
        const double r = static_cast<double>(std::min(y, cfg_.grid - y)) * dx;
        bessel = std::max(bessel, std::abs(kg(tau, 0, 0.0, y).real() - 0.5 * std::cyl_bessel_j(0.0, m * std::sqrt(tau * tau - r * r))));
      }
    c.push_back({"flat K_G inside the cone against J_0/2", bessel, 0.02, bessel <= 0.02});

    const bichar::FlowSymbol flat_flow(symbolcalc::kg_symbol(flat_, cfg_.mass2));
    const bichar::PhasePoint z0{{0.0, 0.0}, {1.0, 1.0}};
    const auto line = bichar::hamiltonian_flow(flat_flow, z0, 0.5);
    double ray = 0.0;
    for (std::size_t i = 0; i < line.points.size(); ++i) {
      const double tau = line.times[i];
      const auto& z = line.points[i];
      ray = std::max({ray, std::abs(z.x[0] + 2.0 * tau), std::abs(z.x[1] - 2.0 * tau), std::abs(z.xi[0] - 1.0), std::abs(z.xi[1] - 1.0)});
    }
    c.push_back({"flat bicharacteristic against the straight null line", ray, 1e-10, ray <= 1e-10});

    const auto gflat = flat_set_.kernel(state::KernelKind::omega_G);
    const auto closed = microlocal::mixed_sobolev_norm(gflat, microlocal::TimeWindow{}, 0.0);
    const auto direct = microlocal::mixed_sobolev_norm_direct(gflat, microlocal::TimeWindow{}, 0.0);
    double norm_err = 0.0;
    for (std::size_t j = 0; j < closed.contributions.size(); ++j)
      norm_err = std::max(norm_err, std::abs(closed.contributions[j] - direct.contributions[j]) / std::max(1e-300, direct.contributions[j]));
    c.push_back({"flat mixed norm at s = 0, closed form against quadrature", norm_err, 1e-9, norm_err <= 1e-9});
  }

  ExperimentConfig cfg_;
  PipelineOptions opt_;
  std::filesystem::path out_;
  VerificationReport report_;
  std::vector<std::string> done_;
  std::vector<std::string> prior_; // stages a matching earlier run completed

  metric::RoughMetric metric_, flat_;
  KernelSet rough_, flat_set_;
  std::optional<state::TwoPointKernel> omega_g_, omega_a_;
  microlocal::MixedSobolevReport sobolev_g_, sobolev_g_high_, sobolev_a_;
  ProbeSummary flat_diag_, rough_diag_, rough_pair_, rough_control_;
  std::pair<double, double> half_space_{0.0, 0.0};
  std::vector<AdiabaticRow> adiabatic_;
  std::optional<symbolcalc::Symbol> symbol_;
  std::optional<bichar::FlowSymbol> flow_;
  bichar::Bicharacteristic pair_curve_, trace_;
  bichar::PropagationReport propagation_;
};

inline VerificationReport run_pipeline(const ExperimentConfig& cfg, const PipelineOptions& opt = {}) { return Pipeline(cfg, opt).run(); }

} // namespace roughwave::harness
