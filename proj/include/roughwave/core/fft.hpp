#pragma once

#include <fftw3.h>

#include <memory>
#include <vector>

#include "roughwave/core/grid.hpp"

namespace roughwave::fft {

namespace detail {

inline void transform(const Lattice& l, std::vector<cplx>& data, int sign) {
  std::vector<int> n(l.shape.begin(), l.shape.end());
  auto* ptr = reinterpret_cast<fftw_complex*>(data.data());
  fftw_plan plan = fftw_plan_dft(static_cast<int>(n.size()), n.data(), ptr, ptr, sign, FFTW_ESTIMATE);
  if (plan == nullptr) throw NumericError("fftw: plan creation failed");
  std::unique_ptr<fftw_plan_s, decltype(&fftw_destroy_plan)> guard(plan, &fftw_destroy_plan);
  fftw_execute(plan);
}

} // namespace detail

/// Unnormalized forward DFT: U_k = sum_x u_x e^{-i k x}.
inline ComplexField forward(ComplexField u) {
  detail::transform(u.lattice, u.values, FFTW_FORWARD);
  return u;
}

inline ComplexField forward(const RealField& u) { return forward(to_complex(u)); }

/// Inverse DFT including the 1/N normalization.
inline ComplexField inverse(ComplexField u) {
  detail::transform(u.lattice, u.values, FFTW_BACKWARD);
  const double s = 1.0 / static_cast<double>(u.size());
  for (auto& v : u.values) v *= s;
  return u;
}

/// Applies the Fourier multiplier m(xi) to u; m receives the angular frequency vector.
template <class Multiplier>
ComplexField apply_multiplier(const ComplexField& u, Multiplier&& m) {
  ComplexField spec = forward(u);
  std::vector<double> xi(u.lattice.dim());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    u.lattice.frequency(i, xi);
    spec[i] *= m(std::span<const double>(xi));
  }
  return inverse(std::move(spec));
}

template <class Multiplier>
RealField apply_real_multiplier(const RealField& u, Multiplier&& m) {
  return real_part(apply_multiplier(to_complex(u), std::forward<Multiplier>(m)));
}

/// True if axis index i is the unpaired Nyquist index of an even axis.
inline bool is_nyquist(std::size_t i, std::size_t n) { return n % 2 == 0 && i == n / 2; }

/// Spectral partial derivative d/dx_axis of a real periodic field; the Nyquist mode is dropped.
inline RealField derivative(const RealField& u, std::size_t axis) {
  const Lattice& l = u.lattice;
  ComplexField spec = forward(u);
  std::vector<std::size_t> idx(l.dim());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    l.unflatten(i, idx);
    if (is_nyquist(idx[axis], l.shape[axis])) {
      spec[i] = 0.0;
      continue;
    }
    spec[i] *= cplx(0.0, l.wavenumber(axis, idx[axis]));
  }
  return real_part(inverse(std::move(spec)));
}

} // namespace roughwave::fft
