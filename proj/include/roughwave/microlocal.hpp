#pragma once

// Sobolev orders of two-point kernels through their mode expansion, and conic (wavefront)
// probes of windowed grid functions.
//
// Probe verdicts come from dyadic shell densities rho_j = m_j / |shell j cap cone| of the
// weighted power <zeta>^{2s} |F(phi u)|^2. In n frequency dimensions the cone integral is finite
// iff rho_j decays faster than 2^{-jn}, so a direction is regular iff the fitted slope of
// log2 rho_j is at most -n; slopes within the tolerance band of -n are marked inconclusive.

#include <functional>
#include <map>

#include "roughwave/state.hpp"

namespace roughwave::microlocal {

/// Radial bump exp(-k r^2 / (1 - r^2)) on r < 1, zero outside; r is distance over radius.
struct Bump {
  double radius = 1.0;
  double k = 4.0;
  double operator()(double dist) const {
    const double r = dist / radius;
    if (r >= 1.0) return 0.0;
    const double r2 = r * r;
    return std::exp(-k * r2 / (1.0 - r2));
  }
};

/// Samples a bump centred at index M/2 of every axis of the lattice.
inline RealField centred_window(const Lattice& l, const Bump& b) {
  RealField w(l);
  std::vector<std::size_t> idx(l.dim());
  for (std::size_t f = 0; f < l.size(); ++f) {
    l.unflatten(f, idx);
    double r2 = 0.0;
    for (std::size_t a = 0; a < l.dim(); ++a) {
      const double o = (static_cast<double>(idx[a]) - static_cast<double>(l.shape[a] / 2)) * l.spacing(a);
      r2 += o * o;
    }
    w[f] = b(std::sqrt(r2));
  }
  return w;
}

inline void require_compact(const RealField& w) {
  const double peak = w.max_abs();
  std::vector<std::size_t> idx(w.lattice.dim());
  for (std::size_t f = 0; f < w.size(); ++f) {
    w.lattice.unflatten(f, idx);
    for (std::size_t a = 0; a < idx.size(); ++a)
      if ((idx[a] == 0 || idx[a] + 1 == w.lattice.shape[a]) && std::abs(w[f]) > 1e-14 * peak)
        throw DomainError("window is not compactly supported inside the grid");
  }
}

// ---------------------------------------------------------------------------------------------
// Mixed Sobolev norm through the mode expansion.

struct TimeWindow {
  std::size_t points = 128;
  Bump bump{1.0, 4.0};
  double box = 4.0; // box length over support radius; 4 keeps |F psi|^2 exactly sampled

  Lattice lattice() const {
    const double len = box * bump.radius;
    return Lattice{{points, points}, {len, len}};
  }
};

struct MixedSobolevReport {
  double s = 0.0;
  std::vector<double> lambdas;
  std::vector<double> contributions;
  std::vector<double> partial_sums;
  double total = 0.0;
  double tail_exponent = 0.0;       // slope of log C_j against log lambda_j over the upper half
  double last_block_fraction = 0.0; // share of the total carried by modes J/2 < j <= J
  double threshold = 0.0;           // tail exponents below this are summable
  std::string verdict;              // convergent | divergent | inconclusive
};

namespace detail {

struct WindowSpectrum {
  Lattice lattice;
  std::vector<double> power; // |F psi|^2 / L^2 at lattice frequencies, so the plain sum is ||psi||^2
  std::vector<std::array<double, 2>> freq;
};

inline WindowSpectrum window_spectrum(const RealField& psi) {
  const Lattice& l = psi.lattice;
  const double dv = l.cell_volume();
  const ComplexField f = fft::forward(psi);
  WindowSpectrum ws{l, std::vector<double>(l.size()), std::vector<std::array<double, 2>>(l.size())};
  const double area = l.lengths[0] * l.lengths[1];
  std::vector<double> xi(2);
  for (std::size_t i = 0; i < l.size(); ++i) {
    ws.power[i] = std::norm(f[i] * dv) / area;
    l.frequency(i, xi);
    ws.freq[i] = {xi[0], xi[1]};
  }
  return ws;
}

inline void finish_report(MixedSobolevReport& r, std::size_t dim) {
  double acc = 0.0;
  for (double c : r.contributions) {
    acc += c;
    r.partial_sums.push_back(acc);
  }
  r.total = acc;
  const std::size_t j = r.contributions.size();
  double block = 0.0;
  for (std::size_t i = j / 2; i < j; ++i) block += r.contributions[i];
  r.last_block_fraction = acc > 0.0 ? block / acc : 0.0;
  std::vector<double> x, y;
  for (std::size_t i = j / 2; i < j; ++i)
    if (r.contributions[i] > 0.0) {
      x.push_back(std::log(r.lambdas[i]));
      y.push_back(std::log(r.contributions[i]));
    }
  r.threshold = -static_cast<double>(dim);
  if (x.size() >= 2) {
    r.tail_exponent = fit_line(x, y).slope;
    if (r.tail_exponent <= r.threshold - 0.3)
      r.verdict = "convergent";
    else if (r.tail_exponent >= r.threshold + 0.3)
      r.verdict = "divergent";
    else
      r.verdict = "inconclusive";
  } else {
    r.tail_exponent = -std::numeric_limits<double>::infinity();
    r.verdict = "convergent";
  }
}

} // namespace detail

/// sum_j int (xi0^2 + eta0^2 + 2 lambda_j^2)^s |F(psi u_jj)(xi0, eta0)|^2 for the diagonal mode
/// coefficients u_jj(t, s) = f_j(t - s). For the exponential kinds the closed form
/// F(psi e^{i l (t - s)})(xi0, eta0) = F psi(xi0 - l, eta0 + l) moves the shift onto the weight.
/// The cos and sin kinds mix two exponentials whose interference is not a lattice shift, so
/// they go through the direct quadrature.
inline MixedSobolevReport mixed_sobolev_norm_direct(const state::TwoPointKernel& k, const TimeWindow& tw, double s);

inline MixedSobolevReport mixed_sobolev_norm(const state::TwoPointKernel& k, const TimeWindow& tw, double s) {
  if (k.kind() == state::KernelKind::omega_plus || k.kind() == state::KernelKind::K_G) return mixed_sobolev_norm_direct(k, tw, s);
  const RealField psi = centred_window(tw.lattice(), tw.bump);
  require_compact(psi);
  const auto ws = detail::window_spectrum(psi);
  MixedSobolevReport r;
  r.s = s;
  const auto& b = k.basis();
  for (std::size_t j = 0; j < k.modes(); ++j) {
    const double l = b.lambda(j);
    r.lambdas.push_back(l);
    const double w = k.weights()[j];
    const double a = k.kind() == state::KernelKind::omega_G ? w / l : w / (l * l);
    double sum = 0.0;
    for (std::size_t i = 0; i < ws.power.size(); ++i) {
      const auto& z = ws.freq[i];
      const double x0 = z[0] + l, y0 = z[1] - l;
      sum += ws.power[i] * std::pow(x0 * x0 + y0 * y0 + 2.0 * l * l, s);
    }
    r.contributions.push_back(a * a * sum);
  }
  detail::finish_report(r, b.grid.dim());
  return r;
}

/// The same quantity by direct quadrature: FFT of psi(t, s) f_j(t - s) on the window grid.
inline MixedSobolevReport mixed_sobolev_norm_direct(const state::TwoPointKernel& k, const TimeWindow& tw, double s) {
  const Lattice l = tw.lattice();
  const RealField psi = centred_window(l, tw.bump);
  require_compact(psi);
  MixedSobolevReport r;
  r.s = s;
  const auto& b = k.basis();
  const double dv = l.cell_volume(), area = l.lengths[0] * l.lengths[1];
  std::vector<double> pt(2), xi(2);
  for (std::size_t j = 0; j < k.modes(); ++j) {
    const double lam = b.lambda(j);
    r.lambdas.push_back(lam);
    ComplexField u(l);
    for (std::size_t i = 0; i < l.size(); ++i) {
      l.point(i, pt);
      u[i] = psi[i] * k.mode_factor(j, pt[0] - pt[1]);
    }
    const ComplexField f = fft::forward(std::move(u));
    double sum = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i) {
      l.frequency(i, xi);
      sum += std::pow(xi[0] * xi[0] + xi[1] * xi[1] + 2.0 * lam * lam, s) * std::norm(f[i] * dv) / area;
    }
    r.contributions.push_back(sum);
  }
  detail::finish_report(r, b.grid.dim());
  return r;
}

// ---------------------------------------------------------------------------------------------
// Patches and conic probes.

struct PatchSpec {
  std::size_t points = 64; // per axis
  std::size_t stride = 1;  // spatial grid steps per patch step
  double window_k = 4.0;   // bump steepness
};

/// Base of a (t, x; s, y) patch: times and spatial grid indices of the centre.
struct PairPoint {
  double t = 0.0;
  std::size_t x = 0;
  double s = 0.0;
  std::size_t y = 0;
};

/// Samples a kernel on the 2(1 + 1)-dimensional patch (t, x; s, y) centred at the base point.
/// The spatial axis runs along the lattice direction `step` (all zeros but one entry for an
/// axis, or any integer vector for a slice of a d = 2 grid); the time step equals the spatial
/// patch step length so the patch lattice is isotropic.
inline ComplexField sample_kernel_patch(const state::TwoPointKernel& k, const PairPoint& base, const PatchSpec& spec,
                                        std::vector<long> step = {}) {
  const auto& b = k.basis();
  const Lattice& g = b.grid;
  if (step.empty()) {
    step.assign(g.dim(), 0);
    step[0] = 1;
  }
  double step_len = 0.0;
  for (std::size_t a = 0; a < g.dim(); ++a) step_len += std::pow(static_cast<double>(step[a]) * g.spacing(a), 2);
  const double delta = static_cast<double>(spec.stride) * std::sqrt(step_len);
  const std::size_t m = spec.points;
  const long half = static_cast<long>(m / 2);

  auto spatial = [&](std::size_t centre, long offset) {
    std::vector<std::size_t> idx(g.dim());
    g.unflatten(centre, idx);
    for (std::size_t a = 0; a < g.dim(); ++a) {
      const long n = static_cast<long>(g.shape[a]);
      const long v = static_cast<long>(idx[a]) + offset * static_cast<long>(spec.stride) * step[a];
      idx[a] = static_cast<std::size_t>((v % n + n) % n);
    }
    return g.flat(idx);
  };
  std::vector<std::size_t> xs(m), ys(m);
  for (std::size_t i = 0; i < m; ++i) {
    xs[i] = spatial(base.x, static_cast<long>(i) - half);
    ys[i] = spatial(base.y, static_cast<long>(i) - half);
  }
  // Time dependence enters through t - s only: 2m - 1 distinct offsets.
  const std::size_t nt = 2 * m - 1;
  std::vector<std::vector<cplx>> fac(nt);
  for (std::size_t d = 0; d < nt; ++d) fac[d] = k.factors(base.t - base.s + (static_cast<double>(d) - static_cast<double>(m - 1)) * delta);

  const Lattice patch{{m, m, m, m}, {m * delta, m * delta, m * delta, m * delta}};
  ComplexField out(patch);
  const std::size_t jm = k.modes();
  std::vector<double> prod(jm);
  std::vector<cplx> by_tau(nt);
  for (std::size_t ix = 0; ix < m; ++ix)
    for (std::size_t iy = 0; iy < m; ++iy) {
      for (std::size_t j = 0; j < jm; ++j) prod[j] = b.modes[j][xs[ix]] * b.modes[j][ys[iy]];
      for (std::size_t d = 0; d < nt; ++d) {
        cplx v = 0.0;
        for (std::size_t j = 0; j < jm; ++j) v += fac[d][j] * prod[j];
        by_tau[d] = v;
      }
      for (std::size_t it = 0; it < m; ++it)
        for (std::size_t is = 0; is < m; ++is) out[((it * m + ix) * m + is) * m + iy] = by_tau[it + m - 1 - is];
    }
  return out;
}

/// Patch of a grid function around a base index, stride grid steps per patch step on each axis.
template <class T>
ComplexField extract_patch(const GridFunction<T>& u, std::size_t base, const PatchSpec& spec) {
  const Lattice& g = u.lattice;
  const std::size_t m = spec.points, d = g.dim();
  Lattice patch{std::vector<std::size_t>(d, m), {}};
  for (std::size_t a = 0; a < d; ++a) patch.lengths.push_back(static_cast<double>(m * spec.stride) * g.spacing(a));
  std::vector<std::size_t> bidx(d), pidx(d), gidx(d);
  g.unflatten(base, bidx);
  ComplexField out(patch);
  for (std::size_t f = 0; f < patch.size(); ++f) {
    patch.unflatten(f, pidx);
    for (std::size_t a = 0; a < d; ++a) {
      const long n = static_cast<long>(g.shape[a]);
      const long v = static_cast<long>(bidx[a]) + (static_cast<long>(pidx[a]) - static_cast<long>(m / 2)) * static_cast<long>(spec.stride);
      gidx[a] = static_cast<std::size_t>((v % n + n) % n);
    }
    out[f] = u[g.flat(gidx)];
  }
  return out;
}

/// Directions on the surface of the cube [-R, R]^n, normalized.
class DirectionSet {
public:
  DirectionSet(std::size_t dim, int radius) : dim_(dim), radius_(radius) {
    if (radius < 1) throw ConfigError("direction set: radius must be positive");
    const std::size_t side = 2 * static_cast<std::size_t>(radius) + 1;
    std::size_t total = 1;
    for (std::size_t a = 0; a < dim; ++a) total *= side;
    slot_.assign(total, -1);
    std::vector<int> c(dim);
    for (std::size_t code = 0; code < total; ++code) {
      std::size_t rem = code;
      int mx = 0;
      for (std::size_t a = dim; a-- > 0;) {
        c[a] = static_cast<int>(rem % side) - radius;
        rem /= side;
        mx = std::max(mx, std::abs(c[a]));
      }
      if (mx != radius) continue;
      slot_[code] = static_cast<int>(dirs_.size());
      double n = 0.0;
      for (int v : c) n += v * v;
      std::vector<double> u(dim);
      for (std::size_t a = 0; a < dim; ++a) u[a] = c[a] / std::sqrt(n);
      dirs_.push_back(std::move(u));
      cells_.push_back(c);
    }
    // Angular resolution: the largest angle between a direction and its nearest neighbour.
    resolution_ = 0.0;
    for (std::size_t i = 0; i < dirs_.size(); ++i) {
      double best = -1.0;
      for (std::size_t k = 0; k < dirs_.size(); ++k)
        if (k != i) best = std::max(best, dot(dirs_[i], dirs_[k]));
      resolution_ = std::max(resolution_, std::acos(std::min(1.0, best)));
    }
  }

  std::size_t size() const { return dirs_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<double>& direction(std::size_t i) const { return dirs_[i]; }
  const std::vector<int>& cell(std::size_t i) const { return cells_[i]; }
  double resolution() const { return resolution_; }

  /// Cell containing a nonzero vector: project radially onto the cube surface and round.
  std::size_t locate(std::span<const double> v) const {
    double mx = 0.0;
    for (double x : v) mx = std::max(mx, std::abs(x));
    if (!(mx > 0.0)) throw DomainError("direction set: zero vector");
    const std::size_t side = 2 * static_cast<std::size_t>(radius_) + 1;
    std::size_t code = 0;
    for (double x : v) code = code * side + static_cast<std::size_t>(std::lround(x * radius_ / mx) + radius_);
    const int s = slot_[code];
    if (s < 0) throw NumericError("direction set: rounding left the cube surface");
    return static_cast<std::size_t>(s);
  }

  /// Directions within `angle` of direction i.
  std::vector<std::uint32_t> within(std::size_t i, double angle) const {
    std::vector<std::uint32_t> out;
    const double c = std::cos(angle);
    for (std::size_t k = 0; k < dirs_.size(); ++k)
      if (dot(dirs_[i], dirs_[k]) >= c) out.push_back(static_cast<std::uint32_t>(k));
    return out;
  }

  static double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }

private:
  std::size_t dim_;
  int radius_;
  std::vector<int> slot_;
  std::vector<std::vector<double>> dirs_;
  std::vector<std::vector<int>> cells_;
  double resolution_ = 0.0;
};

struct ProbeConfig {
  int direction_radius = 3;
  double slope_tolerance = 0.3;
  double mass_floor = 1e-26;   // shells below this share of the unweighted power count as empty
  std::size_t first_shell = 0; // 0 picks the first band whose inner radius spans two frequency steps
  std::size_t last_shell = 0;  // 0 means the closure band
  double scan_angle = 0.0;     // cone half-angle of a scan direction; 0 means the set's resolution
  bool skip_closure = false;   // with last_shell == 0, stop one band below the closure band
};

/// Windowed spectrum of one isotropic patch. Power and band-weighted lattice counts are binned
/// by (direction cone, integer squared radius in lattice units); the Sobolev weight depends on
/// the radius only, so every order s reduces the same table exactly.
class SpectralPatch {
public:
  SpectralPatch(const ComplexField& patch, const PatchSpec& spec, const ProbeConfig& cfg = {})
      : lattice_(patch.lattice), dirs_(patch.lattice.dim(), cfg.direction_radius), cfg_(cfg),
        n_bands_(lp::DyadicPartition::max_bands(patch.lattice)) {
    const std::size_t n = lattice_.dim();
    for (std::size_t a = 1; a < n; ++a)
      if (lattice_.shape[a] != lattice_.shape[0] || std::abs(lattice_.lengths[a] / lattice_.lengths[0] - 1.0) > 1e-12)
        throw ConfigError("probe: patch lattice must be isotropic");
    if (n_bands_ < 4) throw ConfigError("probe: patch too small for a dyadic shell fit");
    unit_ = two_pi / lattice_.lengths[0];
    window_ = centred_window(lattice_, Bump{0.5 * lattice_.lengths[0], spec.window_k});
    ComplexField spec_f = patch;
    for (std::size_t f = 0; f < spec_f.size(); ++f) spec_f[f] *= window_[f];
    spec_f = fft::forward(std::move(spec_f));
    const double dv = lattice_.cell_volume();
    const std::size_t size = lattice_.size();
    power_.resize(size);
    m_.resize(size);
    std::vector<std::size_t> idx(n);
    for (std::size_t f = 0; f < size; ++f) {
      lattice_.unflatten(f, idx);
      std::uint32_t m = 0;
      for (std::size_t a = 0; a < n; ++a) {
        const long k = Lattice::signed_index(idx[a], lattice_.shape[a]);
        m += static_cast<std::uint32_t>(k * k);
      }
      m_[f] = m;
      max_m_ = std::max(max_m_, m);
      power_[f] = std::norm(spec_f[f] * dv);
      total_power_ += power_[f];
    }
  }

  const Lattice& lattice() const { return lattice_; }
  const DirectionSet& directions() const { return dirs_; }
  const RealField& window() const { return window_; }
  const ProbeConfig& config() const { return cfg_; }
  std::size_t n_bands() const { return n_bands_; }
  std::size_t top() const { return n_bands_ - 1; }
  std::size_t last_shell() const {
    if (cfg_.last_shell == 0) return cfg_.skip_closure ? top() - 1 : top();
    return std::min(cfg_.last_shell, top());
  }
  std::size_t first_shell() const {
    if (cfg_.first_shell > 0) return cfg_.first_shell;
    std::size_t j = 1;
    while (std::ldexp(1.0, static_cast<int>(j) - 1) < 2.0 * unit_) ++j;
    return j;
  }
  double total_power() const { return total_power_; }
  std::size_t size() const { return power_.size(); }
  double power(std::size_t f) const { return power_[f]; }
  double radius(std::size_t f) const { return unit_ * std::sqrt(static_cast<double>(m_[f])); }
  std::uint32_t max_m() const { return max_m_; }
  double radius_of(std::uint32_t m) const { return unit_ * std::sqrt(static_cast<double>(m)); }
  double scan_angle() const { return cfg_.scan_angle > 0.0 ? cfg_.scan_angle : dirs_.resolution(); }

  /// Calls fn(j, psi_j) for the (at most two) bands that are nonzero at radius r.
  template <class Fn>
  void for_bands(double r, Fn&& fn) const {
    const std::size_t lo = r <= 1.0 ? 0 : std::min(top(), static_cast<std::size_t>(std::floor(std::log2(r))));
    for (std::size_t j = lo; j <= std::min(top(), lo + 1); ++j) {
      const double w = lp::band_weight(j, top(), r);
      if (w > 0.0) fn(j, w);
    }
  }

  /// Power and lattice count of the cone about `dir` with the given half-angle, per squared radius.
  void cone_table(std::span<const double> dir, double half_angle, std::vector<double>& pw, std::vector<double>& count) const {
    pw.assign(max_m_ + 1, 0.0);
    count.assign(max_m_ + 1, 0.0);
    const double cos_a = std::cos(half_angle);
    visit([&](std::size_t f, std::span<const double> k, double rk) {
      if (DirectionSet::dot(k, dir) < cos_a * rk) return;
      pw[m_[f]] += power_[f];
      count[m_[f]] += 1.0;
    });
  }

  /// Tables of every scan direction at once, laid out d * (max_m + 1) + m.
  const std::vector<double>& scan_power() const {
    build_scan();
    return scan_power_;
  }
  const std::vector<double>& scan_count() const {
    build_scan();
    return scan_count_;
  }

private:
  Lattice lattice_;
  DirectionSet dirs_;
  ProbeConfig cfg_;
  std::size_t n_bands_;
  double unit_ = 1.0;
  RealField window_;
  std::vector<double> power_;
  std::vector<std::uint32_t> m_;
  std::uint32_t max_m_ = 0;
  double total_power_ = 0.0;
  mutable std::vector<double> scan_power_, scan_count_;

  // fn(f, integer frequency vector, its length) for every nonzero frequency.
  template <class Fn>
  void visit(Fn&& fn) const {
    const std::size_t n = lattice_.dim();
    std::vector<std::size_t> idx(n);
    std::vector<double> k(n);
    for (std::size_t f = 0; f < power_.size(); ++f) {
      if (m_[f] == 0) continue;
      lattice_.unflatten(f, idx);
      for (std::size_t a = 0; a < n; ++a) k[a] = static_cast<double>(Lattice::signed_index(idx[a], lattice_.shape[a]));
      fn(f, std::span<const double>(k), std::sqrt(static_cast<double>(m_[f])));
    }
  }

  void build_scan() const {
    if (!scan_power_.empty()) return;
    const std::size_t nc = dirs_.size(), stride = max_m_ + 1;
    std::vector<std::vector<std::uint32_t>> cand(nc);
    for (std::size_t c = 0; c < nc; ++c) cand[c] = dirs_.within(c, scan_angle() + dirs_.resolution());
    scan_power_.assign(nc * stride, 0.0);
    scan_count_.assign(nc * stride, 0.0);
    const double cos_a = std::cos(scan_angle());
    visit([&](std::size_t f, std::span<const double> k, double rk) {
      for (std::uint32_t d : cand[dirs_.locate(k)]) {
        if (DirectionSet::dot(k, dirs_.direction(d)) < cos_a * rk) continue;
        scan_power_[d * stride + m_[f]] += power_[f];
        scan_count_[d * stride + m_[f]] += 1.0;
      }
    });
  }
};

struct ShellFit {
  std::vector<double> masses;    // weighted mass per shell
  std::vector<double> volumes;   // band-weighted lattice count per shell
  std::vector<double> densities; // masses / volumes
  std::vector<std::size_t> used; // shells entering the fit
  double slope = -std::numeric_limits<double>::infinity();
  bool singular = false;
  bool inconclusive = false;
  bool resolved = false; // enough populated shells to decide
};

namespace detail {

// Shell fit of one cone from its radial tables.
inline ShellFit fit_cone(const SpectralPatch& p, const double* pw, const double* count, double s) {
  const std::size_t nb = p.n_bands();
  const auto& cfg = p.config();
  std::vector<double> mass(nb, 0.0), vol(nb, 0.0), raw(nb, 0.0);
  for (std::uint32_t m = 1; m <= p.max_m(); ++m) {
    if (count[m] == 0.0) continue;
    const double r = p.radius_of(m), wgt = std::pow(1.0 + r * r, s);
    p.for_bands(r, [&](std::size_t j, double b) {
      mass[j] += b * wgt * pw[m];
      raw[j] += b * pw[m];
      vol[j] += b * count[m];
    });
  }
  ShellFit f{mass, vol, std::vector<double>(nb, 0.0), {}, -std::numeric_limits<double>::infinity(), false, false, false};
  std::size_t populated = 0;
  std::vector<double> js, ls;
  for (std::size_t j = p.first_shell(); j <= p.last_shell(); ++j) {
    if (vol[j] <= 0.0) continue;
    ++populated;
    f.densities[j] = mass[j] / vol[j];
    if (raw[j] <= cfg.mass_floor * p.total_power() || mass[j] <= 0.0) continue;
    f.used.push_back(j);
    js.push_back(static_cast<double>(j));
    ls.push_back(std::log2(f.densities[j]));
  }
  if (populated < 3) return f;
  f.resolved = true;
  const double threshold = -static_cast<double>(p.lattice().dim());
  if (js.size() >= 2) f.slope = fit_line(js, ls).slope;
  // Shells at the floor are rapidly decaying: too few left means regular.
  if (js.size() < 3) return f;
  f.singular = f.slope > threshold;
  f.inconclusive = std::abs(f.slope - threshold) < cfg.slope_tolerance;
  return f;
}

} // namespace detail

struct ProbeReport {
  std::vector<double> direction;
  double half_angle = 0.0;
  double s = 0.0;
  ShellFit fit;
};

/// Shell masses of <zeta>^{2s} |F(phi u)|^2 inside the cone of the given half-angle about a direction.
inline ProbeReport conic_probe(const SpectralPatch& p, std::span<const double> direction, double half_angle, double s) {
  const std::size_t n = p.lattice().dim();
  if (direction.size() != n) throw ConfigError("probe: direction has wrong dimension");
  if (!(half_angle > 0.0 && half_angle < std::numbers::pi / 2)) throw ConfigError("probe: half-angle must lie in (0, pi/2)");
  std::vector<double> dir(direction.begin(), direction.end());
  const double nrm = std::sqrt(DirectionSet::dot(dir, dir));
  if (!(nrm > 0.0)) throw ConfigError("probe: zero direction");
  for (auto& v : dir) v /= nrm;
  std::vector<double> pw, count;
  p.cone_table(dir, half_angle, pw, count);
  ProbeReport r{dir, half_angle, s, detail::fit_cone(p, pw.data(), count.data(), s)};
  if (!r.fit.resolved) throw EstimationError("probe: cone is empty on the lattice at the requested shells");
  return r;
}

struct CellVerdict {
  std::size_t cell = 0;
  std::vector<double> direction;
  ShellFit fit;
};

struct ScanResult {
  double s = 0.0;
  std::vector<CellVerdict> flagged; // singular directions
  std::vector<CellVerdict> all;     // every resolved direction
  double resolution = 0.0;          // angular resolution of the direction set
};

/// conic_probe for every direction of the set, with the scan half-angle.
inline ScanResult wavefront_scan(const SpectralPatch& p, double s) {
  const auto& pw = p.scan_power();
  const auto& count = p.scan_count();
  const std::size_t stride = p.max_m() + 1;
  ScanResult out;
  out.s = s;
  out.resolution = p.directions().resolution();
  for (std::size_t d = 0; d < p.directions().size(); ++d) {
    CellVerdict cv{d, p.directions().direction(d), detail::fit_cone(p, pw.data() + d * stride, count.data() + d * stride, s)};
    if (!cv.fit.resolved) continue;
    if (cv.fit.singular) out.flagged.push_back(cv);
    out.all.push_back(std::move(cv));
  }
  return out;
}

/// Power in the xi_0 < 0 and xi_0 > 0 halves of one shell (axis 0 is time).
inline std::pair<double, double> half_space_masses(const SpectralPatch& p, std::size_t shell) {
  if (shell > p.top()) throw IndexError("probe: shell " + std::to_string(shell) + " beyond the closure band");
  double neg = 0.0, pos = 0.0;
  std::vector<double> xi(p.lattice().dim());
  for (std::size_t f = 0; f < p.size(); ++f) {
    const double b = lp::band_weight(shell, p.top(), p.radius(f));
    if (b == 0.0) continue;
    p.lattice().frequency(f, xi);
    if (xi[0] < 0.0) neg += b * p.power(f);
    if (xi[0] > 0.0) pos += b * p.power(f);
  }
  return {neg, pos};
}

// ---------------------------------------------------------------------------------------------
// Classification of flagged (t, x; s, y) covectors for d = 1 patches.

/// Checks of a flagged covector zeta = (xi0, xi, eta0, eta) at a base pair, each as the angle
/// between zeta and the set it should lie in. h_up_x = h^{11}(x), h_up_y = h^{11}(y).
struct Classification {
  double char_angle = 0.0;     // (a) to Char(P) x Char(P)
  double sum_angle = 0.0;      // (b) to the hyperplane xi0 + eta0 = 0
  double sign_angle = 0.0;     // (c) to the half-space xi0 >= 0
  double diagonal_angle = 0.0; // (d) to the plane eta~ = -xi~, diagonal base points only
  double tolerance = 0.0;
  bool char_ok = false, sum_ok = false, positive_ok = false, diagonal_ok = true, connected_ok = true;
  bool passes() const { return char_ok && sum_ok && positive_ok && diagonal_ok && connected_ok; }
};

/// Predicate for check (e): whether (x~, xi~) and (y~, -eta~) are joined by a bicharacteristic.
/// Receives the base pair and the flipped covector (xi0, xi, -eta0, -eta).
using Connectivity = std::function<bool(const PairPoint&, std::span<const double>)>;

namespace detail {

// Distance from (v0, v1) to the nearest null line of -xi0^2 + c^2 xi^2 = 0, i.e. directions (c, +-1).
inline double null_distance(double v0, double v1, double c) {
  const double nd = std::hypot(c, 1.0);
  double best = std::numeric_limits<double>::infinity();
  for (double sgn : {1.0, -1.0}) {
    const double along = (v0 * c + v1 * sgn) / nd;
    best = std::min(best, std::sqrt(std::max(0.0, v0 * v0 + v1 * v1 - along * along)));
  }
  return best;
}

} // namespace detail

inline Classification classify(std::span<const double> zeta, double h_up_x, double h_up_y, bool diagonal, double tolerance,
                               const PairPoint& base = {}, const Connectivity& connected = {}) {
  if (zeta.size() != 4) throw ConfigError("classify: needs a (t, x; s, y) covector");
  Classification c;
  c.tolerance = tolerance;
  const double nz = std::sqrt(DirectionSet::dot(zeta, zeta));
  auto angle = [nz](double dist) { return std::asin(std::min(1.0, dist / nz)); };
  const double dx = detail::null_distance(zeta[0], zeta[1], std::sqrt(h_up_x));
  const double dy = detail::null_distance(zeta[2], zeta[3], std::sqrt(h_up_y));
  c.char_angle = angle(std::hypot(dx, dy));
  c.sum_angle = angle(std::abs(zeta[0] + zeta[2]) / std::sqrt(2.0));
  c.sign_angle = angle(std::max(0.0, -zeta[0]));
  c.char_ok = c.char_angle <= tolerance;
  c.sum_ok = c.sum_angle <= tolerance;
  // Strictly positive time frequency, up to the angular tolerance.
  c.positive_ok = zeta[0] > 0.0 || c.sign_angle <= tolerance;
  if (diagonal) {
    const double a = zeta[0] + zeta[2], b = zeta[1] + zeta[3];
    c.diagonal_angle = angle(std::sqrt(0.5 * (a * a + b * b)));
    c.diagonal_ok = c.diagonal_angle <= tolerance;
  }
  if (connected) {
    const std::vector<double> flipped{zeta[0], zeta[1], -zeta[2], -zeta[3]};
    c.connected_ok = connected(base, flipped);
  }
  return c;
}

// ---------------------------------------------------------------------------------------------
// Covariance under lattice-preserving affine maps of a d-dimensional torus.

struct AffineMap {
  std::vector<std::vector<long>> matrix; // integer, unimodular
  std::vector<long> shift;               // in grid steps
};

inline long determinant(const std::vector<std::vector<long>>& a) {
  const std::size_t n = a.size();
  if (n == 1) return a[0][0];
  if (n == 2) return a[0][0] * a[1][1] - a[0][1] * a[1][0];
  long det = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<std::vector<long>> minor;
    for (std::size_t r = 1; r < n; ++r) {
      std::vector<long> row;
      for (std::size_t k = 0; k < n; ++k)
        if (k != c) row.push_back(a[r][k]);
      minor.push_back(row);
    }
    det += (c % 2 ? -1 : 1) * a[0][c] * determinant(minor);
  }
  return det;
}

/// (phi^* u)(i) = u(A i + b) on index vectors of a cubic lattice.
inline RealField pull_back(const RealField& u, const AffineMap& map) {
  const Lattice& g = u.lattice;
  const std::size_t d = g.dim();
  if (map.matrix.size() != d || map.shift.size() != d) throw ConfigError("pull back: map dimension mismatch");
  const long det = determinant(map.matrix);
  if (det == 0) throw DomainError("pull back: map is not invertible");
  if (std::abs(det) != 1) throw DomainError("pull back: map does not preserve the lattice (|det| != 1)");
  for (std::size_t a = 1; a < d; ++a)
    if (g.shape[a] != g.shape[0]) throw ConfigError("pull back: needs equal axis sizes");
  const long n = static_cast<long>(g.shape[0]);
  RealField out(g);
  std::vector<std::size_t> idx(d), src(d);
  for (std::size_t f = 0; f < g.size(); ++f) {
    g.unflatten(f, idx);
    for (std::size_t r = 0; r < d; ++r) {
      long v = map.shift[r];
      for (std::size_t c = 0; c < d; ++c) v += map.matrix[r][c] * static_cast<long>(idx[c]);
      src[r] = static_cast<std::size_t>((v % n + n) % n);
    }
    out[f] = u[g.flat(src)];
  }
  return out;
}

struct CovarianceResult {
  bool covariant = false;
  std::size_t flags_original = 0;
  std::size_t flags_pulled = 0;
  double worst_angle = 0.0; // largest distance from a transported flag to the nearest flag
  double resolution = 0.0;
  double tolerance = 0.0; // resolution times the condition number of the map
};

/// Flags of phi^* u at x0 against A^T-transported flags of u at phi(x0). A flag is a cone of
/// directions, and A^T stretches angles inside it by up to cond(A), so that is the tolerance.
inline CovarianceResult diffeo_covariance_check(const RealField& u, const AffineMap& map, std::size_t x0, double s,
                                                const PatchSpec& spec = {32, 1, 4.0}, const ProbeConfig& cfg = {}) {
  const Lattice& g = u.lattice;
  const std::size_t d = g.dim();
  const RealField pulled = pull_back(u, map);
  std::vector<std::size_t> idx(d), img(d);
  g.unflatten(x0, idx);
  const long n = static_cast<long>(g.shape[0]);
  for (std::size_t r = 0; r < d; ++r) {
    long v = map.shift[r];
    for (std::size_t c = 0; c < d; ++c) v += map.matrix[r][c] * static_cast<long>(idx[c]);
    img[r] = static_cast<std::size_t>((v % n + n) % n);
  }
  const SpectralPatch pa(extract_patch(u, g.flat(img), spec), spec, cfg), pb(extract_patch(pulled, x0, spec), spec, cfg);
  const auto fa = wavefront_scan(pa, s), fb = wavefront_scan(pb, s);
  CovarianceResult res;
  res.flags_original = fa.flagged.size();
  res.flags_pulled = fb.flagged.size();
  res.resolution = fa.resolution;
  Eigen::MatrixXd a(d, d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) a(r, c) = static_cast<double>(map.matrix[r][c]);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  res.tolerance = res.resolution * svd.singularValues()(0) / svd.singularValues()(d - 1);
  auto transport = [&](const std::vector<double>& eta) {
    std::vector<double> out(d, 0.0);
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t r = 0; r < d; ++r) out[c] += static_cast<double>(map.matrix[r][c]) * eta[r];
    const double nn = std::sqrt(DirectionSet::dot(out, out));
    for (auto& v : out) v /= nn;
    return out;
  };
  auto nearest = [](const std::vector<double>& v, const std::vector<CellVerdict>& set) {
    double best = std::numbers::pi;
    for (const auto& c : set) best = std::min(best, std::acos(std::clamp(DirectionSet::dot(v, c.direction), -1.0, 1.0)));
    return best;
  };
  bool ok = fa.flagged.size() == 0 ? fb.flagged.empty() : !fb.flagged.empty();
  for (const auto& c : fa.flagged) res.worst_angle = std::max(res.worst_angle, nearest(transport(c.direction), fb.flagged));
  // And the converse, transporting back with the inverse transpose.
  std::vector<CellVerdict> fa_moved;
  for (const auto& c : fa.flagged) fa_moved.push_back({c.cell, transport(c.direction), c.fit});
  for (const auto& c : fb.flagged) res.worst_angle = std::max(res.worst_angle, nearest(c.direction, fa_moved));
  res.covariant = ok && res.worst_angle <= res.tolerance + 1e-9;
  return res;
}

// ---------------------------------------------------------------------------------------------
// Serialization.

inline io::json to_json(const ShellFit& f) {
  auto finite = [](double v) { return std::isfinite(v) ? io::json(v) : io::json(nullptr); };
  return {{"masses", f.masses}, {"volumes", f.volumes}, {"densities", f.densities}, {"used", f.used},
          {"slope", finite(f.slope)}, {"singular", f.singular}, {"inconclusive", f.inconclusive}, {"resolved", f.resolved}};
}

inline io::json to_json(const ProbeReport& r) {
  return {{"direction", r.direction}, {"half_angle", r.half_angle}, {"s", r.s}, {"flag", r.fit.singular ? "singular" : "regular"}, {"fit", to_json(r.fit)}};
}

inline io::json to_json(const MixedSobolevReport& r) {
  return {{"s", r.s}, {"total", r.total}, {"tail_exponent", r.tail_exponent}, {"last_block_fraction", r.last_block_fraction},
          {"threshold", r.threshold}, {"verdict", r.verdict}, {"modes", r.contributions.size()}};
}

/// One row per (probe, shell): plot-ready shell-mass table.
inline void write_shells_csv(std::ostream& os, const std::vector<ProbeReport>& probes) {
  os << "probe,shell,mass,volume,density,used\n";
  for (std::size_t k = 0; k < probes.size(); ++k) {
    const auto& f = probes[k].fit;
    for (std::size_t j = 0; j < f.masses.size(); ++j) {
      const bool used = std::find(f.used.begin(), f.used.end(), j) != f.used.end();
      os << k << ',' << j << ',' << io::num(f.masses[j]) << ',' << io::num(f.volumes[j]) << ',' << io::num(f.densities[j]) << ',' << used << '\n';
    }
  }
}

inline void write_modes_csv(std::ostream& os, const MixedSobolevReport& r) {
  os << "# verdict " << r.verdict << " tail_exponent " << io::num(r.tail_exponent) << '\n';
  os << "j,lambda,contribution,partial_sum\n";
  for (std::size_t j = 0; j < r.contributions.size(); ++j)
    os << j << ',' << io::num(r.lambdas[j]) << ',' << io::num(r.contributions[j]) << ',' << io::num(r.partial_sums[j]) << '\n';
}

} // namespace roughwave::microlocal
