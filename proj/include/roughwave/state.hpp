#pragma once

// One-particle structure of the ground state in mode coordinates, time translation, and the
// mode-sum two-point kernels.
//
// Factor conventions (fixed once here):
//   k F = ((lambda_j^{1/2} <q, phi_j> - i lambda_j^{-1/2} <p, phi_j>) / sqrt 2)_j
//   <a, b> = sum_j a_j conj(b_j)
//   lambda_G(F1, F2) = <k F1, k F2> = mu(F1, F2) + (i/2) sigma(F1, F2)
// so sigma = 2 Im <k F1, k F2> and the Cauchy-Schwarz bound reads |sigma|^2 <= 4 mu(F1,F1) mu(F2,F2).

#include <complex>
#include <map>
#include <memory>

#include "roughwave/spectral.hpp"

namespace roughwave::state {

struct CauchyData {
  RealField q;
  RealField p;
};

inline void check_data(const CauchyData& f, const Lattice& l) {
  require_same_lattice(f.q.lattice, l, "cauchy data q");
  require_same_lattice(f.p.lattice, l, "cauchy data p");
}

/// sigma(F1, F2) = sum (q1 p2 - q2 p1) sqrt(h) dx
inline double symplectic_form(const CauchyData& a, const CauchyData& b, const RealField& sqrt_det) {
  check_data(a, sqrt_det.lattice);
  check_data(b, sqrt_det.lattice);
  const double dv = sqrt_det.lattice.cell_volume();
  double s = 0.0;
  for (std::size_t x = 0; x < sqrt_det.size(); ++x) s += (a.q[x] * b.p[x] - b.q[x] * a.p[x]) * sqrt_det[x];
  return s * dv;
}

inline std::vector<cplx> one_particle_map(const CauchyData& f, const spectral::ModeBasis& b) {
  check_data(f, b.grid);
  std::vector<cplx> c(b.size());
  const double r2 = std::sqrt(2.0);
  for (std::size_t j = 0; j < b.size(); ++j) {
    const double l = b.lambda(j);
    c[j] = cplx(std::sqrt(l) * b.inner(f.q, b.modes[j]), -b.inner(f.p, b.modes[j]) / std::sqrt(l)) / r2;
  }
  return c;
}

inline cplx mode_inner(const std::vector<cplx>& a, const std::vector<cplx>& b) {
  cplx s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * std::conj(b[j]);
  return s;
}

inline cplx lambda_G(const CauchyData& a, const CauchyData& b, const spectral::ModeBasis& basis) {
  return mode_inner(one_particle_map(a, basis), one_particle_map(b, basis));
}

inline double mu(const CauchyData& a, const CauchyData& b, const spectral::ModeBasis& basis) { return lambda_G(a, b, basis).real(); }

/// Mode-wise q(t) = cos(lt) q + sin(lt) p / l, p(t) = -l sin(lt) q + cos(lt) p on the span of the basis.
inline CauchyData evolve_data(const CauchyData& f, double t, const spectral::ModeBasis& b) {
  check_data(f, b.grid);
  CauchyData out{RealField(b.grid, 0.0), RealField(b.grid, 0.0)};
  for (std::size_t j = 0; j < b.size(); ++j) {
    const double l = b.lambda(j), qj = b.inner(f.q, b.modes[j]), pj = b.inner(f.p, b.modes[j]);
    const double c = std::cos(l * t), s = std::sin(l * t);
    const double qt = c * qj + s * pj / l, pt = -l * s * qj + c * pj;
    for (std::size_t x = 0; x < out.q.size(); ++x) {
      out.q[x] += qt * b.modes[j][x];
      out.p[x] += pt * b.modes[j][x];
    }
  }
  return out;
}

enum class KernelKind { omega_G, omega_A, omega_plus, K_G };

inline std::string kind_name(KernelKind k) {
  switch (k) {
    case KernelKind::omega_G: return "omega_G";
    case KernelKind::omega_A: return "omega_A";
    case KernelKind::omega_plus: return "omega_plus";
    case KernelKind::K_G: return "K_G";
  }
  return "?";
}

inline KernelKind parse_kind(const std::string& s) {
  for (auto k : {KernelKind::omega_G, KernelKind::omega_A, KernelKind::omega_plus, KernelKind::K_G})
    if (kind_name(k) == s) return k;
  throw ConfigError("unknown kernel kind '" + s + "' (omega_G, omega_A, omega_plus, K_G)");
}

/// sum_{j<J} f_j(t - s) phi_j(x) phi_j(y), with f_j the kind's time factor times the mollifier
/// weight w_j = exp(-(sigma_J lambda_j / lambda_J)^2), or 1 when sigma_J = 0.
class TwoPointKernel {
public:
  TwoPointKernel(KernelKind kind, std::shared_ptr<const spectral::ModeBasis> basis, std::size_t j, double sigma_j = 0.0)
      : kind_(kind), basis_(std::move(basis)), j_(j), sigma_(sigma_j) {
    if (j == 0 || j > basis_->size())
      throw IndexError("kernel: J = " + std::to_string(j) + " exceeds the " + std::to_string(basis_->size()) + " available modes");
    if (sigma_j < 0.0) throw ConfigError("kernel: mollifier width must be non-negative");
    const double lj = basis_->lambda(j - 1);
    for (std::size_t r = 0; r < j; ++r) {
      const double q = sigma_ * basis_->lambda(r) / lj;
      weights_.push_back(sigma_ > 0.0 ? std::exp(-q * q) : 1.0);
    }
  }

  KernelKind kind() const { return kind_; }
  std::size_t modes() const { return j_; }
  double mollifier() const { return sigma_; }
  const spectral::ModeBasis& basis() const { return *basis_; }
  std::shared_ptr<const spectral::ModeBasis> basis_ptr() const { return basis_; }
  const std::vector<double>& weights() const { return weights_; }

  /// Time factor of mode j at tau = t - s.
  cplx mode_factor(std::size_t j, double tau) const {
    const double l = basis_->lambda(j), w = weights_[j];
    switch (kind_) {
      case KernelKind::omega_G: return w / l * std::polar(1.0, l * tau);
      case KernelKind::omega_A: return -w / (l * l) * std::polar(1.0, l * tau);
      case KernelKind::omega_plus: return w / l * std::cos(l * tau);
      case KernelKind::K_G: return w / l * std::sin(l * tau);
    }
    return 0.0;
  }

  /// d/dt of the time factor, in closed form.
  cplx mode_factor_dt(std::size_t j, double tau) const {
    const double l = basis_->lambda(j), w = weights_[j];
    switch (kind_) {
      case KernelKind::omega_G: return cplx(0.0, w) * std::polar(1.0, l * tau);
      case KernelKind::omega_A: return cplx(0.0, -w / l) * std::polar(1.0, l * tau);
      case KernelKind::omega_plus: return -w * std::sin(l * tau);
      case KernelKind::K_G: return w * std::cos(l * tau);
    }
    return 0.0;
  }

  const std::vector<cplx>& factors(double tau) const {
    auto it = cache_.find(tau);
    if (it != cache_.end()) return it->second;
    if (cache_.size() > 256) cache_.clear();
    std::vector<cplx> f(j_);
    for (std::size_t r = 0; r < j_; ++r) f[r] = mode_factor(r, tau);
    return cache_.emplace(tau, std::move(f)).first->second;
  }

  cplx operator()(double t, std::size_t x, double s, std::size_t y) const {
    const auto& f = factors(t - s);
    cplx v = 0.0;
    for (std::size_t r = 0; r < j_; ++r) v += f[r] * (basis_->modes[r][x] * basis_->modes[r][y]);
    return v;
  }

  /// Slice over (x, y) at fixed (t, s), on the product lattice of the spatial grid with itself.
  ComplexField slice(double t, double s) const {
    const Lattice& g = basis_->grid;
    Lattice pl{g.shape, g.lengths};
    pl.shape.insert(pl.shape.end(), g.shape.begin(), g.shape.end());
    pl.lengths.insert(pl.lengths.end(), g.lengths.begin(), g.lengths.end());
    const std::size_t n = g.size();
    const auto& f = factors(t - s);
    ComplexField out(pl);
    for (std::size_t r = 0; r < j_; ++r) {
      const auto& phi = basis_->modes[r];
      for (std::size_t x = 0; x < n; ++x) {
        const cplx a = f[r] * phi[x];
        for (std::size_t y = 0; y < n; ++y) out[x * n + y] += a * phi[y];
      }
    }
    return out;
  }

private:
  KernelKind kind_;
  std::shared_ptr<const spectral::ModeBasis> basis_;
  std::size_t j_;
  double sigma_;
  std::vector<double> weights_;
  mutable std::map<double, std::vector<cplx>> cache_;
};

struct ResidualReport {
  double residual = 0.0;   // max |P K| over the sampled slices
  double scale = 0.0;      // max |A K| over the same slices
  double kernel_max = 0.0; // max |K|
  double relative() const { return residual / std::max(1.0, scale); }
};

/// Applies d^2/dt^2 (mode factor -lambda_j^2) plus the given spatial operator in the chosen slot
/// to the kernel on (t, s) slices, and reports the largest residual.
inline ResidualReport kg_residual(const TwoPointKernel& k, const std::string& slot, const spectral::Operator& op,
                                  const std::vector<std::pair<double, double>>& times = {{0.0, 0.0}, {0.37, 0.0}, {1.3, -0.6}}) {
  if (slot != "tx" && slot != "sy") throw ConfigError("kg residual: slot must be tx or sy");
  const auto& b = k.basis();
  require_same_lattice(op.grid, b.grid, "kg residual");
  const std::size_t n = b.grid.size(), jm = k.modes();
  ResidualReport rep;
  for (const auto& [t, s] : times) {
    const auto& f = k.factors(t - s);
    // Second time derivative per mode, identical in t and in s since the factor depends on t - s.
    std::vector<cplx> f2(jm);
    for (std::size_t r = 0; r < jm; ++r) f2[r] = -b.eigenvalues[r] * f[r];
    for (std::size_t fixed = 0; fixed < n; ++fixed) {
      // Column of the kernel as a function of the active slot's spatial variable.
      RealField re(b.grid, 0.0), im(b.grid, 0.0);
      std::vector<cplx> dtt(n, 0.0);
      for (std::size_t r = 0; r < jm; ++r) {
        const double other = b.modes[r][fixed];
        for (std::size_t x = 0; x < n; ++x) {
          const cplx v = f[r] * (b.modes[r][x] * other);
          re[x] += v.real();
          im[x] += v.imag();
          dtt[x] += f2[r] * (b.modes[r][x] * other);
        }
      }
      const RealField are = op.apply(re), aim = op.apply(im);
      for (std::size_t x = 0; x < n; ++x) {
        const cplx ak(are[x], aim[x]);
        rep.residual = std::max(rep.residual, std::abs(dtt[x] + ak));
        rep.scale = std::max(rep.scale, std::abs(ak));
        rep.kernel_max = std::max(rep.kernel_max, std::abs(cplx(re[x], im[x])));
      }
    }
  }
  return rep;
}

enum class Causal { separated, timelike, ambiguous };

struct SpacetimePair {
  double t = 0.0;
  std::size_t x = 0;
  double s = 0.0;
  std::size_t y = 0;
  Causal kind = Causal::ambiguous;
};

/// Extreme coordinate speeds sqrt(eig h^{-1}) over the grid.
struct ConeBounds {
  double c_max = 1.0;
  double c_min = 1.0;
};

inline ConeBounds cone_bounds(const metric::RoughMetric& m) {
  return {std::sqrt(metric::max_inverse_eigenvalue(m)), std::sqrt(1.0 / metric::max_eigenvalue(m))};
}

/// Separated when the minimum-image coordinate distance is at least c_max |t - s| + margin,
/// timelike when it is at most c_min |t - s| - margin; ambiguous otherwise.
inline Causal cone_classify(const ConeBounds& c, const Lattice& grid, const SpacetimePair& p, double margin) {
  std::vector<double> a(grid.dim()), b(grid.dim());
  grid.point(p.x, a);
  grid.point(p.y, b);
  const double r = periodic_distance(a, b, grid.lengths), dt = std::abs(p.t - p.s);
  if (r >= c.c_max * dt + margin) return Causal::separated;
  if (r <= c.c_min * dt - margin) return Causal::timelike;
  return Causal::ambiguous;
}

struct CausalScan {
  double max_separated = 0.0;
  double min_timelike = std::numeric_limits<double>::infinity();
  std::size_t separated = 0;
  std::size_t timelike = 0;
};

inline CausalScan causal_support_scan(const TwoPointKernel& k, const std::vector<SpacetimePair>& pairs) {
  if (k.kind() != KernelKind::K_G) throw ConfigError("causal scan: needs a K_G kernel");
  CausalScan out;
  for (const auto& p : pairs) {
    const double v = std::abs(k(p.t, p.x, p.s, p.y));
    if (p.kind == Causal::separated) {
      out.max_separated = std::max(out.max_separated, v);
      ++out.separated;
    } else if (p.kind == Causal::timelike) {
      out.min_timelike = std::min(out.min_timelike, v);
      ++out.timelike;
    }
  }
  return out;
}

/// Kernel values over all (x, y) grid pairs at fixed times t and s, one row per pair.
inline void write_slice(std::ostream& os, const TwoPointKernel& k, double t, double s) {
  const std::size_t n = k.basis().grid.size();
  os << "# kind " << kind_name(k.kind()) << " modes " << k.modes() << " mollifier " << io::num(k.mollifier()) << " t " << io::num(t) << " s "
     << io::num(s) << '\n';
  os << "x,y,re,im\n";
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t y = 0; y < n; ++y) {
      const cplx v = k(t, x, s, y);
      os << x << ',' << y << ',' << io::num(v.real()) << ',' << io::num(v.imag()) << '\n';
    }
}

} // namespace roughwave::state
