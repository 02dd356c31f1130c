#pragma once

// Klein-Gordon symbols as finite sums of separable terms a(x) b(xi~), symbol smoothing,
// and quantization p(x, D) by Fourier quadrature.
//
// Frequencies xi~ = (xi_0, xi_1, ..., xi_d) when the symbol carries a time slot; the
// coefficient fields live on the spatial lattice and are broadcast along time.

#include <Eigen/Dense>

#include <memory>
#include <optional>

#include "roughwave/lp.hpp"
#include "roughwave/metric.hpp"

namespace roughwave::symbolcalc {

/// c * prod_k xi_k^{powers[k]}
struct Monomial {
  cplx coefficient{1.0, 0.0};
  std::vector<int> powers;

  int degree() const {
    int s = 0;
    for (int p : powers) s += p;
    return s;
  }
  cplx operator()(std::span<const double> xi) const {
    cplx v = coefficient;
    for (std::size_t k = 0; k < powers.size(); ++k)
      for (int e = 0; e < powers[k]; ++e) v *= xi[k];
    return v;
  }
};

struct Term {
  int degree = 0;                   // homogeneous component this term belongs to
  Monomial multiplier;
  std::optional<RealField> field;   // spatial coefficient; absent means 1
  int band = -1;                    // psi_band(|xi~|) factor when non-negative
};

struct Symbol {
  double order = 2.0;
  double tau = std::numeric_limits<double>::infinity();
  double delta = 0.0;
  bool time_slot = true;
  std::array<std::string, 2> variables{"t", "x"};
  Lattice space;
  std::vector<Term> terms;
  std::shared_ptr<const lp::DyadicPartition> partition; // needed by band-filtered terms

  std::size_t spatial_dim() const { return space.dim(); }
  std::size_t freq_dim() const { return space.dim() + (time_slot ? 1 : 0); }

  double band_weight(const Term& t, std::span<const double> xi) const {
    if (t.band < 0) return 1.0;
    double r2 = 0.0;
    for (double v : xi) r2 += v * v;
    return partition->weight(static_cast<std::size_t>(t.band), std::sqrt(r2));
  }

  cplx term_value(const Term& t, std::size_t x, std::span<const double> xi) const {
    const double a = t.field ? (*t.field)[x] : 1.0;
    if (a == 0.0) return 0.0;
    return a * t.multiplier(xi) * band_weight(t, xi);
  }

  /// p(x, xi~) at spatial grid index x.
  cplx evaluate(std::size_t x, std::span<const double> xi) const {
    check_freq(xi);
    cplx s = 0.0;
    for (const auto& t : terms) s += term_value(t, x, xi);
    return s;
  }

  /// The degree-k homogeneous component p_k(x, xi~).
  cplx evaluate_component(int degree, std::size_t x, std::span<const double> xi) const {
    check_freq(xi);
    cplx s = 0.0;
    for (const auto& t : terms)
      if (t.degree == degree) s += term_value(t, x, xi);
    return s;
  }

  Symbol component(int degree) const {
    Symbol out = *this;
    out.terms.clear();
    for (const auto& t : terms)
      if (t.degree == degree) out.terms.push_back(t);
    return out;
  }

private:
  void check_freq(std::span<const double> xi) const {
    if (xi.size() != freq_dim()) throw ConfigError("symbol: covector has " + std::to_string(xi.size()) + " entries, expected " + std::to_string(freq_dim()));
  }
};

namespace detail {

inline std::vector<int> unit_powers(std::size_t n, std::initializer_list<std::size_t> slots) {
  std::vector<int> p(n, 0);
  for (auto s : slots) ++p[s];
  return p;
}

inline bool is_constant(const RealField& f) {
  return std::all_of(f.values.begin(), f.values.end(), [&](double v) { return v == f.values.front(); });
}

} // namespace detail

/// Full symbol of d_tt - Delta_h + m^2 under p(x, D) = F^{-1} p F with D = -i d:
/// p_2 = -xi_0^2 + h^{ij} xi_i xi_j, p_1 = -i h^{-1/2} d_i(h^{ij} sqrt h) xi_j, p_0 = m^2.
/// slot "y" renames (t, x) to (s, y) and changes nothing else.
inline Symbol kg_symbol(const metric::RoughMetric& m, double mass2, const std::string& slot = "x") {
  if (!(mass2 > 0.0)) throw ConfigError("kg symbol: m^2 must be positive");
  if (slot != "x" && slot != "y") throw ConfigError("kg symbol: slot must be x or y");
  const std::size_t d = m.dim, n = d + 1;
  Symbol s;
  s.order = 2.0;
  s.tau = m.tau;
  s.space = m.grid;
  s.variables = slot == "x" ? std::array<std::string, 2>{"t", "x"} : std::array<std::string, 2>{"s", "y"};

  s.terms.push_back({2, {-1.0, detail::unit_powers(n, {0, 0})}, std::nullopt, -1});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      const RealField& hij = m.upper(i, j);
      const double c = i == j ? 1.0 : 2.0;
      if (detail::is_constant(hij))
        s.terms.push_back({2, {c * hij[0], detail::unit_powers(n, {i + 1, j + 1})}, std::nullopt, -1});
      else
        s.terms.push_back({2, {c, detail::unit_powers(n, {i + 1, j + 1})}, hij, -1});
    }
  if (!m.is_flat()) {
    const auto f = metric::metric_fields(m);
    for (std::size_t j = 0; j < d; ++j) {
      RealField c = f.flux_divergence[j];
      for (std::size_t p = 0; p < c.size(); ++p) c[p] /= m.sqrt_det[p];
      s.terms.push_back({1, {cplx(0.0, -1.0), detail::unit_powers(n, {j + 1})}, std::move(c), -1});
    }
  }
  s.terms.push_back({0, {mass2, std::vector<int>(n, 0)}, std::nullopt, -1});
  return s;
}

/// True iff |p_2(x, xi~/|xi~|)| < c.
inline bool is_characteristic(const Symbol& p, std::size_t x, std::span<const double> xi, double c = 1e-8) {
  double r2 = 0.0;
  for (double v : xi) r2 += v * v;
  if (!(r2 > 0.0)) throw DomainError("characteristic test: zero covector");
  const double r = std::sqrt(r2);
  std::vector<double> unit(xi.begin(), xi.end());
  for (auto& v : unit) v /= r;
  return std::abs(p.evaluate_component(2, x, unit)) < c;
}

struct SmoothingSplit {
  Symbol sharp;
  Symbol flat;
  double gamma = 0.0;
};

/// J_eps a = psi_0(eps D) a on the spatial lattice.
inline RealField mollify(const RealField& a, double eps) {
  return fft::apply_real_multiplier(a, [eps](std::span<const double> k) {
    double r2 = 0.0;
    for (double v : k) r2 += v * v;
    return lp::profile(eps * std::sqrt(r2));
  });
}

/// p^# = sum_j J_{eps_j} p psi_j(xi~), eps_j = 2^{-j gamma}, and p^b = p - p^#, applied term by term
/// (so each homogeneous component is split on its own). Constant coefficients pass to p^# untouched.
inline SmoothingSplit smooth_symbol(const Symbol& p, double gamma, const lp::DyadicPartition& partition) {
  if (!(gamma > p.delta) || !(gamma < 1.0))
    throw ConfigError("smoothing: gamma must lie in (delta, 1), got " + std::to_string(gamma));
  for (const auto& t : p.terms)
    if (t.band >= 0) throw ConfigError("smoothing: symbol is already band-split");
  SmoothingSplit out{p, p, gamma};
  out.sharp.terms.clear();
  out.flat.terms.clear();
  auto shared = std::make_shared<const lp::DyadicPartition>(partition);
  out.sharp.partition = shared;
  out.flat.partition = shared;
  out.flat.tau = p.tau;

  for (const auto& t : p.terms) {
    if (!t.field || detail::is_constant(*t.field)) {
      out.sharp.terms.push_back(t);
      continue;
    }
    for (std::size_t j = 0; j < partition.n_bands(); ++j) {
      const double eps = std::exp2(-gamma * static_cast<double>(j));
      RealField smooth = mollify(*t.field, eps);
      RealField rough = *t.field;
      rough -= smooth;
      out.sharp.terms.push_back({t.degree, t.multiplier, std::move(smooth), static_cast<int>(j)});
      out.flat.terms.push_back({t.degree, t.multiplier, std::move(rough), static_cast<int>(j)});
    }
  }
  return out;
}

/// p(x, D) u with u on the (time x) space lattice; each term costs one FFT pair.
inline ComplexField apply_psdo(const Symbol& p, const ComplexField& u) {
  const Lattice& l = u.lattice;
  if (l.dim() != p.freq_dim()) throw ConfigError("apply_psdo: field dimension does not match symbol");
  const std::size_t off = p.time_slot ? 1 : 0;
  for (std::size_t a = 0; a < p.space.dim(); ++a)
    if (l.shape[a + off] != p.space.shape[a] || l.lengths[a + off] != p.space.lengths[a])
      throw ConfigError("apply_psdo: spatial grid mismatch");

  const std::size_t ns = p.space.size();
  ComplexField out(l, cplx{});
  for (const auto& t : p.terms) {
    const ComplexField bu = fft::apply_multiplier(u, [&](std::span<const double> xi) { return t.multiplier(xi) * p.band_weight(t, xi); });
    if (t.field)
      for (std::size_t f = 0; f < out.size(); ++f) out[f] += (*t.field)[f % ns] * bu[f];
    else
      out += bu;
  }
  return out;
}

inline ComplexField apply_psdo(const Symbol& p, const RealField& u) { return apply_psdo(p, to_complex(u)); }

/// Per xi-band size of the degree-2 band-filtered terms after applying d_x^beta to their
/// coefficients: sup_x |Q_{x,j}| * sup_r psi_j(r) r^2, with |Q| the spectral radius of the
/// quadratic form. Taken as a max over all beta of the given order.
inline std::vector<double> band_profile(const Symbol& p, std::size_t derivative_order) {
  if (!p.partition) throw ConfigError("band profile: symbol carries no band split");
  const std::size_t nb = p.partition->n_bands(), n = p.freq_dim();
  const auto betas = lp::detail::multi_indices(p.space.dim(), derivative_order);
  std::vector<double> out(nb, 0.0);
  for (std::size_t j = 0; j < nb; ++j) {
    std::vector<std::pair<const Term*, std::vector<RealField>>> band_terms;
    for (const auto& t : p.terms) {
      if (t.band != static_cast<int>(j) || t.degree != 2 || !t.field) continue;
      std::vector<RealField> ds;
      for (const auto& beta : betas) ds.push_back(lp::detail::partial(*t.field, beta));
      band_terms.emplace_back(&t, std::move(ds));
    }
    if (band_terms.empty()) continue;

    double form_sup = 0.0;
    for (std::size_t b = 0; b < betas.size(); ++b)
      for (std::size_t x = 0; x < p.space.size(); ++x) {
        Eigen::MatrixXd q = Eigen::MatrixXd::Zero(static_cast<long>(n), static_cast<long>(n));
        for (const auto& [t, ds] : band_terms) {
          std::vector<long> slots;
          for (std::size_t k = 0; k < n; ++k)
            for (int e = 0; e < t->multiplier.powers[k]; ++e) slots.push_back(static_cast<long>(k));
          const double c = t->multiplier.coefficient.real() * ds[b][x];
          if (slots[0] == slots[1])
            q(slots[0], slots[0]) += c;
          else {
            q(slots[0], slots[1]) += 0.5 * c;
            q(slots[1], slots[0]) += 0.5 * c;
          }
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(q, Eigen::EigenvaluesOnly);
        form_sup = std::max(form_sup, es.eigenvalues().cwiseAbs().maxCoeff());
      }

    double radial = 0.0;
    const double lo = p.partition->interior_radius(j);
    const double hi = p.partition->exterior_radius(j);
    for (int s = 0; s <= 4000; ++s) {
      const double r = lo + (hi - lo) * s / 4000.0;
      radial = std::max(radial, p.partition->weight(j, r) * r * r);
    }
    out[j] = form_sup * radial;
  }
  return out;
}

/// Slope of log2 of a band profile over bands [first, last], skipping bands at roundoff level.
inline double profile_slope(const std::vector<double>& prof, std::size_t first, std::size_t last) {
  double peak = 0.0;
  for (double v : prof) peak = std::max(peak, v);
  std::vector<double> js, ls;
  for (std::size_t j = first; j <= last && j < prof.size(); ++j)
    if (prof[j] > 1e-13 * peak) {
      js.push_back(static_cast<double>(j));
      ls.push_back(std::log2(prof[j]));
    }
  return fit_line(js, ls).slope;
}

/// symbol.json (descriptor and term list) plus one CSV per coefficient field.
inline void save(const Symbol& p, const std::filesystem::path& dir, const std::string& stem = "symbol") {
  io::json j;
  j["order"] = p.order;
  j["tau"] = std::isfinite(p.tau) ? io::json(p.tau) : io::json(nullptr);
  j["delta"] = p.delta;
  j["time_slot"] = p.time_slot;
  j["variables"] = p.variables;
  j["space"] = io::lattice_json(p.space);
  if (p.partition) {
    j["n_bands"] = p.partition->n_bands();
    j["partition_space"] = io::lattice_json(p.partition->lattice());
  }
  io::json terms = io::json::array();
  for (std::size_t k = 0; k < p.terms.size(); ++k) {
    const auto& t = p.terms[k];
    io::json e{{"degree", t.degree},
               {"coefficient", {t.multiplier.coefficient.real(), t.multiplier.coefficient.imag()}},
               {"powers", t.multiplier.powers},
               {"band", t.band}};
    if (t.field) {
      const std::string name = stem + "_term" + std::to_string(k) + ".csv";
      io::write_csv(dir / name, *t.field);
      e["field"] = name;
    } else {
      e["field"] = nullptr;
    }
    terms.push_back(e);
  }
  j["terms"] = terms;
  io::write_json(dir / (stem + ".json"), j);
}

inline Symbol load(const std::filesystem::path& dir, const std::string& stem = "symbol") {
  const io::json j = io::read_json(dir / (stem + ".json"));
  Symbol p;
  try {
    p.order = j.at("order").get<double>();
    p.tau = j.at("tau").is_null() ? std::numeric_limits<double>::infinity() : j.at("tau").get<double>();
    p.delta = j.at("delta").get<double>();
    p.time_slot = j.at("time_slot").get<bool>();
    p.variables = j.at("variables").get<std::array<std::string, 2>>();
    p.space = io::lattice_from_json(j.at("space"));
    if (j.contains("n_bands"))
      p.partition = std::make_shared<const lp::DyadicPartition>(io::lattice_from_json(j.at("partition_space")), j.at("n_bands").get<std::size_t>());
    for (const auto& e : j.at("terms")) {
      Term t;
      t.degree = e.at("degree").get<int>();
      const auto c = e.at("coefficient").get<std::array<double, 2>>();
      t.multiplier.coefficient = cplx(c[0], c[1]);
      t.multiplier.powers = e.at("powers").get<std::vector<int>>();
      t.band = e.at("band").get<int>();
      if (!e.at("field").is_null()) t.field = io::read_csv<double>(dir / e.at("field").get<std::string>());
      if (t.band >= 0 && !p.partition) throw IoError("symbol: band term without a partition in " + dir.string());
      p.terms.push_back(std::move(t));
    }
  } catch (const io::json::exception& e) {
    throw IoError("symbol: malformed " + (dir / (stem + ".json")).string() + ": " + e.what());
  }
  return p;
}

} // namespace roughwave::symbolcalc
