#pragma once

#include <array>
#include <vector>

#include "roughwave/core/fft.hpp"

namespace roughwave {

namespace detail {

struct TrigValue {
  double value = 0.0;
  std::array<double, 3> grad{};
};

struct TrigBasis {
  std::array<std::vector<cplx>, 3> b, db; // e^{i k x} and its x-derivative per axis
};

inline TrigBasis trig_basis(const Lattice& l, std::span<const double> x) {
  TrigBasis out;
  for (std::size_t axis = 0; axis < l.dim(); ++axis) {
    const std::size_t n = l.shape[axis];
    auto& b = out.b[axis];
    auto& db = out.db[axis];
    b.assign(n, 0.0);
    db.assign(n, 0.0);
    const double unit = two_pi / l.lengths[axis];
    const cplx step = std::polar(1.0, unit * x[axis]);
    cplx pos = 1.0;
    // e^{i k x} for k = 0..n/2 by recurrence, negatives by conjugation.
    std::vector<cplx> powers(n / 2 + 1);
    for (std::size_t k = 0; k <= n / 2; ++k) {
      powers[k] = pos;
      pos *= step;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const long k = Lattice::signed_index(i, n);
      const double w = static_cast<double>(k) * unit;
      if (fft::is_nyquist(i, n)) {
        b[i] = powers[n / 2].real();
        db[i] = -w * powers[n / 2].imag();
      } else {
        const cplx e = k >= 0 ? powers[static_cast<std::size_t>(k)] : std::conj(powers[static_cast<std::size_t>(-k)]);
        b[i] = e;
        db[i] = cplx(0.0, w) * e;
      }
    }
  }
  return out;
}

inline TrigValue trig_value(const Lattice& l, const TrigBasis& basis, const std::vector<cplx>& coeffs) {
  const std::size_t d = l.dim();
  TrigValue out;
  if (d == 1) {
    cplx v = 0.0, g = 0.0;
    for (std::size_t f = 0; f < coeffs.size(); ++f) {
      v += coeffs[f] * basis.b[0][f];
      g += coeffs[f] * basis.db[0][f];
    }
    out.value = v.real();
    out.grad[0] = g.real();
    return out;
  }
  std::vector<std::size_t> idx(d);
  for (std::size_t f = 0; f < coeffs.size(); ++f) {
    l.unflatten(f, idx);
    cplx prod = coeffs[f];
    for (std::size_t a = 0; a < d; ++a) prod *= basis.b[a][idx[a]];
    out.value += prod.real();
    for (std::size_t g = 0; g < d; ++g) {
      cplx p = coeffs[f];
      for (std::size_t a = 0; a < d; ++a) p *= (a == g ? basis.db[a][idx[a]] : basis.b[a][idx[a]]);
      out.grad[g] += p.real();
    }
  }
  return out;
}

} // namespace detail

/// Trigonometric interpolant of a real periodic field, evaluable off-grid together with its gradient.
class TrigInterpolant {
public:
  TrigInterpolant() = default;

  explicit TrigInterpolant(const RealField& u) : lattice_(u.lattice) {
    if (lattice_.dim() > 3) throw ConfigError("interpolant: at most three dimensions");
    coeffs_ = fft::forward(u).values;
    const double s = 1.0 / static_cast<double>(u.size());
    for (auto& c : coeffs_) c *= s;
  }

  const Lattice& lattice() const { return lattice_; }

  using Value = detail::TrigValue;

  Value evaluate(std::span<const double> x) const {
    const auto basis = detail::trig_basis(lattice_, x);
    return detail::trig_value(lattice_, basis, coeffs_);
  }

  double operator()(std::span<const double> x) const { return evaluate(x).value; }

  const std::vector<cplx>& coefficients() const { return coeffs_; }

private:
  Lattice lattice_;
  std::vector<cplx> coeffs_;
};

} // namespace roughwave
