#pragma once

// Hamiltonian flow of the principal symbol p_2(x, xi~) on (t, x; xi_0, xi), null-bicharacteristic
// relations between phase-space points, and propagation checks of probe verdicts along a curve.
//
// Hamilton's equations: x~' = d p_2 / d xi~, xi~' = -d p_2 / d x~. Coefficients do not depend on
// t, so xi_0 is conserved. For the unsplit symbol t' = -2 xi_0 exactly; band weights of a
// smoothed symbol add small |xi~|-dependent corrections to t'.

#include <fstream>
#include <iomanip>

#include "roughwave/core/interp.hpp"
#include "roughwave/microlocal.hpp"
#include "roughwave/symbolcalc.hpp"

namespace roughwave::bichar {

/// Spacetime point x~ = (t, x) and covector xi~ = (xi_0, xi).
struct PhasePoint {
  std::vector<double> x;
  std::vector<double> xi;
};

struct Bicharacteristic {
  std::vector<double> times;
  std::vector<PhasePoint> points;
  double step = 0.0;
  std::vector<double> drift; // p_2(gamma(tau)) - p_2(gamma(0))
  double max_drift = 0.0;
  std::vector<std::string> warnings;

  const PhasePoint& front() const { return points.front(); }
  const PhasePoint& back() const { return points.back(); }
};

/// Off-grid evaluation of the degree-2 part of a symbol with its x- and xi-gradients.
class FlowSymbol {
public:
  struct Value {
    double p = 0.0;
    std::vector<double> dx;  // spatial gradient (t-derivative is zero)
    std::vector<double> dxi; // gradient in (xi_0, xi)
  };

  explicit FlowSymbol(const symbolcalc::Symbol& symbol) : space_(symbol.space), partition_(symbol.partition) {
    if (!symbol.time_slot) throw ConfigError("flow: symbol needs a time slot");
    for (const auto& t : symbol.terms) {
      if (t.degree != 2) continue;
      if (std::abs(t.multiplier.coefficient.imag()) > 0.0) throw ConfigError("flow: principal symbol must be real");
      Piece piece{t.multiplier.coefficient.real(), t.multiplier.powers, t.band, std::nullopt};
      if (t.field) piece.field = TrigInterpolant(*t.field);
      pieces_.push_back(std::move(piece));
    }
    if (pieces_.empty()) throw ConfigError("flow: symbol has no principal part");
  }

  std::size_t spatial_dim() const { return space_.dim(); }
  const Lattice& space() const { return space_; }

  /// Largest frequency the underlying grid represents.
  double frequency_limit() const { return space_.nyquist_radius(); }

  Value operator()(std::span<const double> x, std::span<const double> xi) const {
    const std::size_t d = space_.dim(), n = d + 1;
    Value v{0.0, std::vector<double>(d, 0.0), std::vector<double>(n, 0.0)};
    const double r = std::sqrt(microlocal::DirectionSet::dot(xi, xi));
    std::optional<detail_basis> basis;
    for (const auto& pc : pieces_) {
      double psi = 1.0, dpsi = 0.0;
      if (pc.band >= 0) {
        psi = partition_->weight(static_cast<std::size_t>(pc.band), r);
        dpsi = partition_->weight_derivative(static_cast<std::size_t>(pc.band), r);
      }
      if (psi == 0.0 && dpsi == 0.0) continue;
      double a = 1.0;
      std::array<double, 3> ga{};
      if (pc.field) {
        if (!basis) basis = roughwave::detail::trig_basis(space_, x);
        const auto e = roughwave::detail::trig_value(space_, *basis, pc.field->coefficients());
        a = e.value;
        ga = e.grad;
      }
      double m = pc.coefficient;
      for (std::size_t k = 0; k < n; ++k)
        for (int e = 0; e < pc.powers[k]; ++e) m *= xi[k];
      v.p += a * m * psi;
      for (std::size_t i = 0; i < d; ++i) v.dx[i] += ga[i] * m * psi;
      for (std::size_t k = 0; k < n; ++k) {
        double dm = 0.0;
        if (pc.powers[k] > 0) {
          dm = pc.coefficient * pc.powers[k];
          for (std::size_t q = 0; q < n; ++q)
            for (int e = 0; e < pc.powers[q] - (q == k ? 1 : 0); ++e) dm *= xi[q];
        }
        v.dxi[k] += a * (dm * psi + (r > 0.0 ? m * dpsi * xi[k] / r : 0.0));
      }
    }
    return v;
  }

  /// |p_2| <= tol |xi~|^2.
  bool is_characteristic(const PhasePoint& z, double tol = 1e-6) const {
    const double r2 = microlocal::DirectionSet::dot(z.xi, z.xi);
    return std::abs((*this)(spatial(z), z.xi).p) <= tol * r2;
  }

  std::span<const double> spatial(const PhasePoint& z) const { return std::span<const double>(z.x).subspan(1); }

private:
  using detail_basis = roughwave::detail::TrigBasis;
  struct Piece {
    double coefficient;
    std::vector<int> powers;
    int band;
    std::optional<TrigInterpolant> field;
  };
  Lattice space_;
  std::shared_ptr<const lp::DyadicPartition> partition_;
  std::vector<Piece> pieces_;
};

/// The covector (xi_0, xi) with xi_0 > 0 (or < 0 for sign -1) on which p_2 vanishes at the
/// spacetime point x~. Band-split symbols are not homogeneous, so xi_0 is found by fixed-point
/// iteration on xi_0^2 = p_2 + xi_0^2 evaluated at the current |xi~|.
inline PhasePoint null_covector(const FlowSymbol& p, std::vector<double> x, std::vector<double> xi_spatial, double sign = 1.0) {
  if (x.size() != p.spatial_dim() + 1 || xi_spatial.size() != p.spatial_dim()) throw ConfigError("null covector: wrong dimension");
  PhasePoint z{std::move(x), {0.0}};
  z.xi.insert(z.xi.end(), xi_spatial.begin(), xi_spatial.end());
  for (int it = 0; it < 200; ++it) {
    const double q = p(p.spatial(z), z.xi).p + z.xi[0] * z.xi[0];
    if (!(q > 0.0)) throw DomainError("null covector: spatial part of the symbol is not positive");
    const double next = std::copysign(std::sqrt(q), sign);
    const bool done = std::abs(next - z.xi[0]) <= 1e-15 * std::abs(next);
    z.xi[0] = next;
    if (done) return z;
  }
  throw NumericError("null covector: fixed-point iteration did not converge");
}

/// dt = 0.1 * (smallest grid step) / max_x |d p_2 / d xi~ (x, xi~_0)|.
inline double step_rule(const FlowSymbol& p, const PhasePoint& start) {
  const Lattice& g = p.space();
  double h = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < g.dim(); ++a) h = std::min(h, g.spacing(a));
  double speed = 0.0;
  std::vector<double> pt(g.dim());
  for (std::size_t f = 0; f < g.size(); ++f) {
    g.point(f, pt);
    const auto v = p(pt, start.xi);
    speed = std::max(speed, std::sqrt(microlocal::DirectionSet::dot(v.dxi, v.dxi)));
  }
  if (!(speed > 0.0)) throw DomainError("flow: symbol is stationary at the start covector");
  return 0.1 * h / speed;
}

namespace detail {

struct Rate {
  std::vector<double> x, xi;
};

inline Rate rate(const FlowSymbol& p, const PhasePoint& z) {
  const auto v = p(p.spatial(z), z.xi);
  Rate r{v.dxi, std::vector<double>(z.xi.size(), 0.0)};
  for (std::size_t i = 0; i < v.dx.size(); ++i) r.xi[i + 1] = -v.dx[i];
  return r;
}

inline PhasePoint advance(const PhasePoint& z, const Rate& r, double h) {
  PhasePoint out = z;
  for (std::size_t k = 0; k < out.x.size(); ++k) out.x[k] += h * r.x[k];
  for (std::size_t k = 0; k < out.xi.size(); ++k) out.xi[k] += h * r.xi[k];
  return out;
}

inline PhasePoint rk4_step(const FlowSymbol& p, const PhasePoint& z, double h) {
  const Rate k1 = rate(p, z), k2 = rate(p, advance(z, k1, h / 2)), k3 = rate(p, advance(z, k2, h / 2)), k4 = rate(p, advance(z, k3, h));
  PhasePoint out = z;
  for (std::size_t k = 0; k < out.x.size(); ++k) out.x[k] += h / 6 * (k1.x[k] + 2 * k2.x[k] + 2 * k3.x[k] + k4.x[k]);
  for (std::size_t k = 0; k < out.xi.size(); ++k) out.xi[k] += h / 6 * (k1.xi[k] + 2 * k2.xi[k] + 2 * k3.xi[k] + k4.xi[k]);
  return out;
}

inline double norm(std::span<const double> v) { return std::sqrt(microlocal::DirectionSet::dot(v, v)); }

} // namespace detail

/// Integrates the flow over parameter length `span` (negative runs backwards). dt = 0 applies the
/// step rule; the step is then shortened so that an integer number of steps covers the span.
inline Bicharacteristic hamiltonian_flow(const FlowSymbol& p, const PhasePoint& start, double span, double dt = 0.0) {
  const std::size_t d = p.spatial_dim();
  if (start.x.size() != d + 1 || start.xi.size() != d + 1) throw ConfigError("flow: start point has the wrong dimension");
  if (detail::norm(start.xi) < 1e-10) throw NumericError("flow: zero covector at the start");
  if (dt < 0.0) throw ConfigError("flow: dt must be non-negative");
  if (dt == 0.0) dt = step_rule(p, start);
  const std::size_t steps = span == 0.0 ? 0 : static_cast<std::size_t>(std::ceil(std::abs(span) / dt - 1e-9));
  const double h = steps == 0 ? 0.0 : span / static_cast<double>(steps);

  Bicharacteristic c;
  c.step = h;
  c.times.push_back(0.0);
  c.points.push_back(start);
  c.drift.push_back(0.0);
  const double p0 = p(p.spatial(start), start.xi).p;
  const double limit = p.frequency_limit();
  bool warned = false;
  PhasePoint z = start;
  for (std::size_t s = 1; s <= steps; ++s) {
    z = detail::rk4_step(p, z, h);
    const double r = detail::norm(z.xi);
    if (!(r >= 1e-10)) throw NumericError("flow: covector collapsed at tau = " + std::to_string(s * h));
    if (!warned && r > limit) {
      c.warnings.push_back("covector left the represented frequency range at tau = " + std::to_string(s * h));
      warned = true;
    }
    const double dp = p(p.spatial(z), z.xi).p - p0;
    c.times.push_back(static_cast<double>(s) * h);
    c.points.push_back(z);
    c.drift.push_back(dp);
    c.max_drift = std::max(c.max_drift, std::abs(dp));
  }
  return c;
}

/// Spatial distance on the torus plus the time gap.
inline double spacetime_distance(const Lattice& space, std::span<const double> a, std::span<const double> b) {
  double s = (a[0] - b[0]) * (a[0] - b[0]);
  for (std::size_t i = 0; i < space.dim(); ++i) {
    const double len = space.lengths[i];
    double dx = std::fmod(a[i + 1] - b[i + 1], len);
    if (dx > len / 2) dx -= len;
    if (dx < -len / 2) dx += len;
    s += dx * dx;
  }
  return std::sqrt(s);
}

/// Distance between the rays through two covectors.
inline double projective_distance(std::span<const double> a, std::span<const double> b) {
  const double na = detail::norm(a), nb = detail::norm(b);
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::pow(a[k] / na - b[k] / nb, 2);
  return std::sqrt(s);
}

inline double phase_distance(const FlowSymbol& p, const PhasePoint& a, const PhasePoint& b) {
  return spacetime_distance(p.space(), a.x, b.x) + projective_distance(a.xi, b.xi);
}

/// Whether the bicharacteristic through a passes within tol of b, forwards or backwards. The
/// curve is compared with b at the parameter where it reaches time t_b: t' ~ -2 xi_0 gives the
/// first guess and Newton steps on t(tau) = t_b finish it.
inline bool parallel_related(const FlowSymbol& p, const PhasePoint& a, const PhasePoint& b, double tol, double dt = 0.0) {
  if (!p.is_characteristic(a) || !p.is_characteristic(b)) throw DomainError("parallel_related: points must be characteristic");
  if (a.xi[0] == 0.0) return phase_distance(p, a, b) <= tol;
  PhasePoint end = hamiltonian_flow(p, a, (a.x[0] - b.x[0]) / (2.0 * a.xi[0]), dt).back();
  for (int it = 0; it < 20 && std::abs(end.x[0] - b.x[0]) > 1e-12 * std::max(1.0, std::abs(b.x[0])); ++it) {
    const double rate = p(p.spatial(end), end.xi).dxi[0];
    if (rate == 0.0) break;
    end = hamiltonian_flow(p, end, (b.x[0] - end.x[0]) / rate, dt).back();
  }
  return phase_distance(p, end, b) <= tol;
}

/// C+ membership of a pair after the caller has applied the WF' flip to the second covector.
inline bool c_plus_member(const FlowSymbol& p, const PhasePoint& a, const PhasePoint& b, double tol = 1e-6) {
  if (!p.is_characteristic(a) || !p.is_characteristic(b)) return false;
  if (a.xi[0] < 0.0 || b.xi[0] < 0.0) return false;
  return parallel_related(p, a, b, tol);
}

/// Nearest null covector of the same magnitude in d = 1, keeping the signs of both components.
inline PhasePoint project_null(const FlowSymbol& p, PhasePoint z) {
  if (z.xi.size() != 2) throw ConfigError("project_null: needs a (t, x) covector");
  const double r = detail::norm(z.xi);
  if (!(r > 0.0)) throw NumericError("project_null: zero covector");
  const std::vector<double> spatial_only{0.0, r};
  const double c = std::sqrt(std::max(0.0, p(p.spatial(z), spatial_only).p)) / r;
  z.xi = {std::copysign(c, z.xi[0]) * r / std::hypot(c, 1.0), std::copysign(1.0, z.xi[1]) * r / std::hypot(c, 1.0)};
  return z;
}

/// Connectivity predicate for microlocal::classify on a d = 1 kernel patch: the flagged direction
/// is carried to (x~, xi~) and (y~, -eta~) and tested with parallel_related.
inline microlocal::Connectivity connectivity(const FlowSymbol& p, double tol) {
  return [&p, tol](const microlocal::PairPoint& base, std::span<const double> flipped) {
    const Lattice& g = p.space();
    std::vector<double> px(1), py(1);
    g.point(base.x, px);
    g.point(base.y, py);
    const PhasePoint a{{base.t, px[0]}, {flipped[0], flipped[1]}}, b{{base.s, py[0]}, {flipped[2], flipped[3]}};
    // Flagged directions are only known to within the scan resolution (check (a) bounds the
    // error), so the covectors are projected onto the exact null cone before flowing.
    return parallel_related(p, project_null(p, a), project_null(p, b), tol);
  };
}

// ---------------------------------------------------------------------------------------------

struct PropagationReport {
  double s = 0.0;
  std::vector<std::size_t> sample_index; // indices into the curve
  std::vector<double> slopes;
  std::vector<bool> singular;
  double singular_fraction = 0.0;
  bool constant = false; // all verdicts agree
};

/// Patch of the object under test centred at a spacetime point of the curve.
using PatchSampler = std::function<ComplexField(const PhasePoint&)>;

/// Probe verdicts at `samples` evenly spaced points of the curve. At each point the cone axis is
/// (xi~(tau), partner), normalized; partner is a fixed covector appended for two-point patches
/// and empty for functions of x~ alone.
inline PropagationReport propagation_check(const PatchSampler& sample, const Bicharacteristic& curve, std::span<const double> partner, double s,
                                           const microlocal::PatchSpec& spec, const microlocal::ProbeConfig& cfg = {}, std::size_t samples = 5) {
  if (samples < 2) throw ConfigError("propagation: need at least two sample points");
  if (curve.points.empty()) throw ConfigError("propagation: empty curve");
  PropagationReport r;
  r.s = s;
  const std::size_t last = curve.points.size() - 1;
  for (std::size_t k = 0; k < samples; ++k) {
    const std::size_t i = static_cast<std::size_t>(std::llround(static_cast<double>(last) * k / (samples - 1)));
    const PhasePoint& z = curve.points[i];
    const microlocal::SpectralPatch patch(sample(z), spec, cfg);
    std::vector<double> dir(z.xi);
    dir.insert(dir.end(), partner.begin(), partner.end());
    const auto probe = microlocal::conic_probe(patch, dir, patch.scan_angle(), s);
    r.sample_index.push_back(i);
    r.slopes.push_back(probe.fit.slope);
    r.singular.push_back(probe.fit.singular);
  }
  const auto flagged = static_cast<double>(std::count(r.singular.begin(), r.singular.end(), true));
  r.singular_fraction = flagged / static_cast<double>(samples);
  r.constant = flagged == 0.0 || flagged == static_cast<double>(samples);
  return r;
}

/// Sampler of a d = 1 two-point kernel with the second point held at (s0, y0): the curve point
/// is snapped to the nearest grid column.
inline PatchSampler kernel_sampler(const state::TwoPointKernel& k, double s0, std::size_t y0, const microlocal::PatchSpec& spec) {
  return [&k, s0, y0, spec](const PhasePoint& z) {
    const Lattice& g = k.basis().grid;
    const double dx = g.spacing(0);
    const long n = static_cast<long>(g.shape[0]);
    const long ix = std::lround(z.x[1] / dx);
    const microlocal::PairPoint base{z.x[0], static_cast<std::size_t>((ix % n + n) % n), s0, y0};
    return microlocal::sample_kernel_patch(k, base, spec);
  };
}

// ---------------------------------------------------------------------------------------------

/// CSV columns tau, t, x..., xi0, xi..., drift.
inline void write_csv(std::ostream& os, const Bicharacteristic& c) {
  const std::size_t n = c.points.empty() ? 0 : c.points.front().x.size();
  os << "tau,t";
  for (std::size_t i = 1; i < n; ++i) os << ",x" << i;
  os << ",xi0";
  for (std::size_t i = 1; i < n; ++i) os << ",xi" << i;
  os << ",drift\n";
  os << std::setprecision(17);
  for (std::size_t k = 0; k < c.points.size(); ++k) {
    os << c.times[k];
    for (double v : c.points[k].x) os << ',' << v;
    for (double v : c.points[k].xi) os << ',' << v;
    os << ',' << c.drift[k] << '\n';
  }
}

inline void write_csv(const std::filesystem::path& path, const Bicharacteristic& c) {
  auto os = io::open_out(path);
  write_csv(os, c);
}

} // namespace roughwave::bichar
