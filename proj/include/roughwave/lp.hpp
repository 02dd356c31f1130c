#pragma once

// Littlewood-Paley partition of unity on periodic lattices, band projections,
// and Zygmund / Hoelder norm estimates.

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "roughwave/core/fft.hpp"
#include "roughwave/core/fit.hpp"
#include "roughwave/core/rng.hpp"

namespace roughwave::lp {

/// Radial profile of psi_0: 1 on r <= 1, cos^2(pi (r-1)/2) on (1, 2), 0 from 2 on.
inline double profile(double r) {
  if (r <= 1.0) return 1.0;
  if (r >= 2.0) return 0.0;
  const double c = std::cos(0.5 * std::numbers::pi * (r - 1.0));
  return c * c;
}

inline constexpr const char* profile_name = "cos2";

/// psi_j(r) for a partition whose closure band is `top`.
inline double band_weight(std::size_t j, std::size_t top, double r) {
  if (j == 0) return profile(r);
  if (j == top) return 1.0 - profile(std::ldexp(r, 1 - static_cast<int>(j)));
  return profile(std::ldexp(r, -static_cast<int>(j))) - profile(std::ldexp(r, 1 - static_cast<int>(j)));
}

/// Sampled Littlewood-Paley multipliers psi_0 ... psi_top on a frequency lattice.
///
/// Bands 1 <= j < top are psi_0(2^-j xi) - psi_0(2^{1-j} xi). The top band closes the
/// partition, 1 - psi_0(2^{1-top} xi), so the bands sum to one at every lattice frequency;
/// below radius 2^top it coincides with the dyadic formula.
class DyadicPartition {
public:
  DyadicPartition() = default;

  DyadicPartition(const Lattice& grid, std::size_t n_bands) : lattice_(grid), n_bands_(n_bands) {
    if (n_bands < 2) throw ConfigError("partition: n_bands must be at least 2");
    const std::size_t max_n = max_bands(grid);
    if (n_bands > max_n)
      throw ConfigError("partition: lattice too small for " + std::to_string(n_bands) +
                        " bands; max feasible n_bands = " + std::to_string(max_n));
    weights_.assign(n_bands, std::vector<double>(grid.size()));
    std::vector<double> xi(grid.dim());
    for (std::size_t f = 0; f < grid.size(); ++f) {
      grid.frequency(f, xi);
      double r2 = 0.0;
      for (double v : xi) r2 += v * v;
      const double r = std::sqrt(r2);
      for (std::size_t j = 0; j < n_bands; ++j) weights_[j][f] = weight(j, r);
    }
  }

  /// Largest band count with 2^{n-1} inside the Nyquist radius.
  static std::size_t max_bands(const Lattice& grid) {
    const double ny = grid.nyquist_radius();
    if (ny < 1.0) return 1;
    return static_cast<std::size_t>(std::floor(std::log2(ny) + 1e-12)) + 1;
  }

  std::size_t n_bands() const { return n_bands_; }
  std::size_t top() const { return n_bands_ - 1; }
  const Lattice& lattice() const { return lattice_; }
  const std::vector<double>& band(std::size_t j) const {
    check(j);
    return weights_[j];
  }

  /// psi_j at an arbitrary radius.
  double weight(std::size_t j, double r) const {
    check(j);
    return band_weight(j, top(), r);
  }

  /// d psi_j / dr at an arbitrary radius.
  double weight_derivative(std::size_t j, double r) const {
    check(j);
    auto dprofile = [](double q) {
      if (q <= 1.0 || q >= 2.0) return 0.0;
      return -0.5 * std::numbers::pi * std::sin(std::numbers::pi * (q - 1.0));
    };
    const double a = std::ldexp(1.0, -static_cast<int>(j));
    const double b = 2.0 * a;
    if (j == 0) return dprofile(r);
    if (j == top()) return -b * dprofile(b * r);
    return a * dprofile(a * r) - b * dprofile(b * r);
  }

  double interior_radius(std::size_t j) const { return j == 0 ? 0.0 : std::ldexp(1.0, static_cast<int>(j) - 1); }
  double exterior_radius(std::size_t j) const { return std::ldexp(1.0, static_cast<int>(j) + 1); }

private:
  void check(std::size_t j) const {
    if (j >= n_bands_) throw IndexError("band index " + std::to_string(j) + " out of range [0, " + std::to_string(n_bands_) + ")");
  }

  Lattice lattice_;
  std::size_t n_bands_ = 0;
  std::vector<std::vector<double>> weights_;
};

inline DyadicPartition build_partition(const Lattice& grid, std::size_t n_bands) { return DyadicPartition(grid, n_bands); }

/// psi_j(D) u.
inline ComplexField band_project(const ComplexField& u, std::size_t j, const DyadicPartition& p) {
  require_same_lattice(u.lattice, p.lattice(), "band_project");
  const auto& w = p.band(j);
  ComplexField spec = fft::forward(u);
  for (std::size_t f = 0; f < spec.size(); ++f) spec[f] *= w[f];
  return fft::inverse(std::move(spec));
}

inline RealField band_project(const RealField& u, std::size_t j, const DyadicPartition& p) {
  return real_part(band_project(to_complex(u), j, p));
}

/// All band projections of one function; their sum reconstructs it.
template <class T>
struct BandSeries {
  std::vector<GridFunction<T>> bands;

  GridFunction<T> reconstruct() const {
    GridFunction<T> sum(bands.front().lattice);
    for (const auto& b : bands) sum += b;
    return sum;
  }
};

template <class T>
BandSeries<T> decompose(const GridFunction<T>& u, const DyadicPartition& p) {
  require_same_lattice(u.lattice, p.lattice(), "decompose");
  const ComplexField spec = fft::forward(to_complex_if_needed(u));
  BandSeries<T> out;
  out.bands.reserve(p.n_bands());
  for (std::size_t j = 0; j < p.n_bands(); ++j) {
    ComplexField s = spec;
    const auto& w = p.band(j);
    for (std::size_t f = 0; f < s.size(); ++f) s[f] *= w[f];
    ComplexField b = fft::inverse(std::move(s));
    if constexpr (std::is_same_v<T, double>)
      out.bands.push_back(real_part(b));
    else
      out.bands.push_back(std::move(b));
  }
  return out;
}

/// max|psi_j(D) u| for every band.
template <class T>
std::vector<double> band_sup_norms(const GridFunction<T>& u, const DyadicPartition& p) {
  const auto series = decompose(u, p);
  std::vector<double> out;
  for (const auto& b : series.bands) out.push_back(b.max_abs());
  return out;
}

/// sup_j 2^{j tau} |psi_j(D) u|_inf over the represented bands; a lower bound of the continuum norm.
template <class T>
double zygmund_norm(const GridFunction<T>& u, double tau, const DyadicPartition& p) {
  const auto norms = band_sup_norms(u, p);
  double m = 0.0;
  for (std::size_t j = 0; j < norms.size(); ++j) m = std::max(m, std::exp2(tau * static_cast<double>(j)) * norms[j]);
  return m;
}

/// Negative slope of log2 |psi_j(D) u|_inf against j, over bands 1 .. top-1 carrying mass above 1e-14.
template <class T>
double regularity_estimate(const GridFunction<T>& u, const DyadicPartition& p) {
  const auto norms = band_sup_norms(u, p);
  const double floor = 1e-14 * std::max(1.0, u.max_abs());
  std::vector<double> js, ls;
  for (std::size_t j = 1; j + 1 < norms.size(); ++j) {
    if (norms[j] > floor) {
      js.push_back(static_cast<double>(j));
      ls.push_back(std::log2(norms[j]));
    }
  }
  if (js.size() < 4) {
    std::ostringstream msg;
    msg << "regularity estimate needs at least 4 bands above floor, have " << js.size() << "; band masses:";
    for (std::size_t j = 0; j < norms.size(); ++j) msg << " [" << j << "]=" << norms[j];
    throw EstimationError(msg.str());
  }
  return -fit_line(js, ls).slope;
}

struct HolderOptions {
  std::uint64_t seed = 0x5eed;
  std::size_t dense_limit_per_axis = 64;
  std::size_t sampled_pairs = 100000;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> multi_indices(std::size_t dim, std::size_t order) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur(dim, 0);
  auto rec = [&](auto&& self, std::size_t axis, std::size_t left) -> void {
    if (axis + 1 == dim) {
      cur[axis] = left;
      out.push_back(cur);
      return;
    }
    for (std::size_t k = 0; k <= left; ++k) {
      cur[axis] = k;
      self(self, axis + 1, left - k);
    }
  };
  rec(rec, 0, order);
  return out;
}

inline RealField partial(const RealField& u, const std::vector<std::size_t>& alpha) {
  RealField g = u;
  for (std::size_t a = 0; a < alpha.size(); ++a)
    for (std::size_t k = 0; k < alpha[a]; ++k) g = fft::derivative(g, a);
  return g;
}

inline double seminorm(const RealField& f, double exponent, const HolderOptions& opt) {
  const Lattice& l = f.lattice;
  const std::size_t d = l.dim();
  std::vector<double> x(d), y(d);
  double best = 0.0;
  auto pair = [&](std::size_t i, std::size_t k) {
    l.point(i, x);
    l.point(k, y);
    const double dist = periodic_distance(x, y, l.lengths);
    if (dist <= 0.0) return;
    best = std::max(best, std::abs(f[i] - f[k]) / std::pow(dist, exponent));
  };

  bool dense = true;
  for (auto n : l.shape) dense = dense && n <= opt.dense_limit_per_axis;
  if (dense) {
    for (std::size_t i = 0; i < f.size(); ++i)
      for (std::size_t k = i + 1; k < f.size(); ++k) pair(i, k);
    return best;
  }

  // Stratified by dyadic offset scale so short and long separations are both sampled.
  Rng rng = Rng::substream(opt.seed, "holder-pairs");
  std::size_t max_half = 1;
  for (auto n : l.shape) max_half = std::max(max_half, n / 2);
  const std::size_t strata = static_cast<std::size_t>(std::floor(std::log2(static_cast<double>(max_half)))) + 1;
  std::vector<std::size_t> idx(d), jdx(d);
  for (std::size_t s = 0; s < opt.sampled_pairs; ++s) {
    const std::size_t stratum = s % strata;
    const long lo = 1L << stratum;
    const std::size_t base = rng.below(f.size());
    l.unflatten(base, idx);
    const std::size_t forced = rng.below(d);
    for (std::size_t a = 0; a < d; ++a) {
      const long half = static_cast<long>(l.shape[a] / 2);
      long off;
      if (a == forced) {
        off = std::min(half, lo + static_cast<long>(rng.below(static_cast<std::uint64_t>(lo))));
        if (rng.below(2)) off = -off;
      } else {
        const long span = std::min(half, 2 * lo - 1);
        off = static_cast<long>(rng.below(static_cast<std::uint64_t>(2 * span + 1))) - span;
      }
      const long n = static_cast<long>(l.shape[a]);
      jdx[a] = static_cast<std::size_t>(((static_cast<long>(idx[a]) + off) % n + n) % n);
    }
    pair(base, l.flat(jdx));
  }
  return best;
}

} // namespace detail

/// Hoelder norm of non-integer order tau: sup norms of derivatives up to [tau] plus the
/// sampled Hoelder seminorm of the order-[tau] derivatives.
inline double holder_norm(const RealField& u, double tau, const HolderOptions& opt = {}) {
  if (!(tau > 0.0)) throw ConfigError("holder_norm: tau must be positive");
  if (std::abs(tau - std::round(tau)) < 1e-12)
    throw ConfigError("holder_norm: integer tau unsupported, use zygmund_norm");
  const auto order = static_cast<std::size_t>(std::floor(tau));
  const double frac = tau - static_cast<double>(order);
  const std::size_t d = u.lattice.dim();
  double total = 0.0;
  for (std::size_t k = 0; k <= order; ++k) {
    for (const auto& alpha : detail::multi_indices(d, k)) {
      const RealField g = k == 0 ? u : detail::partial(u, alpha);
      total += g.max_abs();
      if (k == order) total += detail::seminorm(g, frac, opt);
    }
  }
  return total;
}

} // namespace roughwave::lp
