#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <string>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "roughwave/core/error.hpp"

namespace roughwave {

using cplx = std::complex<double>;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// Uniform periodic lattice on a box [0, L_0) x ... x [0, L_{d-1}), row-major.
struct Lattice {
  std::vector<std::size_t> shape;
  std::vector<double> lengths;

  static Lattice torus(std::size_t dim, std::size_t n) {
    return Lattice{std::vector<std::size_t>(dim, n), std::vector<double>(dim, two_pi)};
  }

  std::size_t dim() const { return shape.size(); }
  std::size_t size() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
  }
  double spacing(std::size_t axis) const { return lengths[axis] / static_cast<double>(shape[axis]); }
  double cell_volume() const {
    double v = 1.0;
    for (std::size_t a = 0; a < dim(); ++a) v *= spacing(a);
    return v;
  }
  double coordinate(std::size_t axis, std::size_t i) const { return static_cast<double>(i) * spacing(axis); }

  /// Signed integer wave number of DFT index i: i for i <= n/2, i - n above.
  static long signed_index(std::size_t i, std::size_t n) {
    return i <= n / 2 ? static_cast<long>(i) : static_cast<long>(i) - static_cast<long>(n);
  }
  /// Angular frequency of DFT index i along an axis.
  double wavenumber(std::size_t axis, std::size_t i) const {
    return static_cast<double>(signed_index(i, shape[axis])) * two_pi / lengths[axis];
  }
  /// Largest radius fully represented on every axis.
  double nyquist_radius() const {
    double r = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < dim(); ++a)
      r = std::min(r, std::numbers::pi / spacing(a));
    return r;
  }

  std::size_t flat(std::span<const std::size_t> idx) const {
    std::size_t f = 0;
    for (std::size_t a = 0; a < dim(); ++a) f = f * shape[a] + idx[a];
    return f;
  }
  void unflatten(std::size_t f, std::span<std::size_t> idx) const {
    for (std::size_t a = dim(); a-- > 0;) {
      idx[a] = f % shape[a];
      f /= shape[a];
    }
  }
  /// Frequency vector of flat DFT index f.
  void frequency(std::size_t f, std::span<double> xi) const {
    for (std::size_t a = dim(); a-- > 0;) {
      xi[a] = wavenumber(a, f % shape[a]);
      f /= shape[a];
    }
  }
  void point(std::size_t f, std::span<double> x) const {
    for (std::size_t a = dim(); a-- > 0;) {
      x[a] = coordinate(a, f % shape[a]);
      f /= shape[a];
    }
  }

  bool operator==(const Lattice&) const = default;
};

/// Samples of a function on a Lattice.
template <class T>
struct GridFunction {
  Lattice lattice;
  std::vector<T> values;

  GridFunction() = default;
  explicit GridFunction(Lattice l, T fill = T{}) : lattice(std::move(l)), values(lattice.size(), fill) {}
  GridFunction(Lattice l, std::vector<T> v) : lattice(std::move(l)), values(std::move(v)) {
    if (values.size() != lattice.size()) throw ConfigError("grid function: sample count does not match lattice");
  }

  std::size_t size() const { return values.size(); }
  T& operator[](std::size_t i) { return values[i]; }
  const T& operator[](std::size_t i) const { return values[i]; }

  double max_abs() const {
    double m = 0.0;
    for (const auto& v : values) m = std::max(m, static_cast<double>(std::abs(v)));
    return m;
  }

  template <class F>
  static GridFunction sample(const Lattice& l, F&& f) {
    GridFunction g(l);
    std::vector<double> x(l.dim());
    for (std::size_t i = 0; i < l.size(); ++i) {
      l.point(i, x);
      g.values[i] = f(std::span<const double>(x));
    }
    return g;
  }

  GridFunction& operator+=(const GridFunction& o) {
    for (std::size_t i = 0; i < size(); ++i) values[i] += o.values[i];
    return *this;
  }
  GridFunction& operator-=(const GridFunction& o) {
    for (std::size_t i = 0; i < size(); ++i) values[i] -= o.values[i];
    return *this;
  }
  GridFunction& operator*=(T c) {
    for (auto& v : values) v *= c;
    return *this;
  }
};

using RealField = GridFunction<double>;
using ComplexField = GridFunction<cplx>;

inline void require_same_lattice(const Lattice& a, const Lattice& b, const char* what) {
  if (!(a == b)) throw ConfigError(std::string(what) + ": grid mismatch");
}

inline ComplexField to_complex(const RealField& u) {
  ComplexField c(u.lattice);
  for (std::size_t i = 0; i < u.size(); ++i) c[i] = u[i];
  return c;
}

inline ComplexField to_complex_if_needed(const RealField& u) { return to_complex(u); }
inline const ComplexField& to_complex_if_needed(const ComplexField& u) { return u; }

inline RealField real_part(const ComplexField& u) {
  RealField r(u.lattice);
  for (std::size_t i = 0; i < u.size(); ++i) r[i] = u[i].real();
  return r;
}

/// Minimum-image distance on the periodic box.
inline double periodic_distance(std::span<const double> x, std::span<const double> y, std::span<const double> lengths) {
  double s = 0.0;
  for (std::size_t a = 0; a < x.size(); ++a) {
    double d = std::fmod(std::abs(x[a] - y[a]), lengths[a]);
    d = std::min(d, lengths[a] - d);
    s += d * d;
  }
  return std::sqrt(s);
}

} // namespace roughwave
