#pragma once

// Discrete m^2 - Delta_h on the periodic lattice, its lowest eigenpairs, and the Weyl growth fit.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <sstream>

#include "roughwave/metric.hpp"

namespace roughwave::spectral {

/// A = m^2 + M^{-1} S with S = sum_e w_e g_e g_e^T a symmetric positive semidefinite stiffness
/// matrix and M = diag(sqrt(h) dV). Diagonal metric entries act across cell faces with
/// two-point differences; off-diagonal entries act at cell corners through averaged differences.
struct Operator {
  Lattice grid;
  double mass2 = 1.0;
  Eigen::SparseMatrix<double> stiffness;
  Eigen::VectorXd mass; // sqrt(h) dV per node

  std::size_t size() const { return grid.size(); }

  RealField apply(const RealField& u) const {
    require_same_lattice(u.lattice, grid, "operator");
    const Eigen::Map<const Eigen::VectorXd> v(u.values.data(), static_cast<long>(u.size()));
    const Eigen::VectorXd s = stiffness * v;
    RealField out(grid);
    for (std::size_t p = 0; p < u.size(); ++p) out[p] = mass2 * u[p] + s[static_cast<long>(p)] / mass[static_cast<long>(p)];
    return out;
  }

  /// <u, v> = sum u v sqrt(h) dV
  double inner(const RealField& u, const RealField& v) const {
    double s = 0.0;
    for (std::size_t p = 0; p < u.size(); ++p) s += u[p] * v[p] * mass[static_cast<long>(p)];
    return s;
  }
};

namespace detail {

inline std::size_t shifted(const Lattice& l, std::size_t f, std::size_t axis, long by) {
  std::vector<std::size_t> idx(l.dim());
  l.unflatten(f, idx);
  const long n = static_cast<long>(l.shape[axis]);
  idx[axis] = static_cast<std::size_t>(((static_cast<long>(idx[axis]) + by) % n + n) % n);
  return l.flat(idx);
}

} // namespace detail

inline Operator assemble_operator(const metric::RoughMetric& m, double mass2) {
  const Lattice& l = m.grid;
  const std::size_t n = l.size(), d = l.dim();
  const double dv = l.cell_volume();
  Operator op{l, mass2, Eigen::SparseMatrix<double>(static_cast<long>(n), static_cast<long>(n)), Eigen::VectorXd(static_cast<long>(n))};
  for (std::size_t p = 0; p < n; ++p) op.mass[static_cast<long>(p)] = m.sqrt_det[p] * dv;

  std::vector<Eigen::Triplet<double>> trip;
  auto add_form = [&](const std::vector<std::pair<std::size_t, double>>& g1, const std::vector<std::pair<std::size_t, double>>& g2, double w) {
    // w (g1 g2^T + g2 g1^T) / 2
    for (const auto& [a, ca] : g1)
      for (const auto& [b, cb] : g2) {
        trip.emplace_back(static_cast<long>(a), static_cast<long>(b), 0.5 * w * ca * cb);
        trip.emplace_back(static_cast<long>(b), static_cast<long>(a), 0.5 * w * ca * cb);
      }
  };

  std::vector<RealField> flux; // h^{ij} sqrt h, packed
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      RealField f = m.upper(i, j);
      for (std::size_t p = 0; p < n; ++p) f[p] *= m.sqrt_det[p];
      flux.push_back(std::move(f));
    }

  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t i = 0; i < d; ++i) {
      const std::size_t q = detail::shifted(l, p, i, 1);
      const double hx = l.spacing(i);
      const double w = 0.5 * (flux[metric::sym_index(i, i, d)][p] + flux[metric::sym_index(i, i, d)][q]) * dv;
      const std::vector<std::pair<std::size_t, double>> g{{q, 1.0 / hx}, {p, -1.0 / hx}};
      add_form(g, g, w);
    }
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j) {
        // Corner at p + (e_i + e_j)/2.
        const std::size_t pi = detail::shifted(l, p, i, 1), pj = detail::shifted(l, p, j, 1), pij = detail::shifted(l, pi, j, 1);
        const RealField& f = flux[metric::sym_index(i, j, d)];
        const double w = 0.25 * (f[p] + f[pi] + f[pj] + f[pij]) * dv;
        if (w == 0.0) continue;
        const double ci = 0.5 / l.spacing(i), cj = 0.5 / l.spacing(j);
        const std::vector<std::pair<std::size_t, double>> gi{{pi, ci}, {pij, ci}, {p, -ci}, {pj, -ci}};
        const std::vector<std::pair<std::size_t, double>> gj{{pj, cj}, {pij, cj}, {p, -cj}, {pi, -cj}};
        add_form(gi, gj, 2.0 * w);
      }
  }
  op.stiffness.setFromTriplets(trip.begin(), trip.end());
  op.stiffness.makeCompressed();
  return op;
}

struct ModeBasis {
  Lattice grid;
  double mass2 = 1.0;
  std::vector<double> eigenvalues;  // lambda_j^2 ascending
  std::vector<RealField> modes;     // phi_j
  RealField sqrt_det;               // weight sqrt(h)

  std::size_t size() const { return eigenvalues.size(); }
  double lambda(std::size_t j) const { return std::sqrt(eigenvalues[j]); }

  double inner(const RealField& u, const RealField& v) const {
    const double dv = grid.cell_volume();
    double s = 0.0;
    for (std::size_t p = 0; p < u.size(); ++p) s += u[p] * v[p] * sqrt_det[p] * dv;
    return s;
  }

  ModeBasis truncated(std::size_t j) const {
    if (j > size()) throw ConfigError("mode basis: cannot truncate to more modes than present");
    ModeBasis b{grid, mass2, {eigenvalues.begin(), eigenvalues.begin() + static_cast<long>(j)}, {modes.begin(), modes.begin() + static_cast<long>(j)}, sqrt_det};
    return b;
  }
};

struct EigenOptions {
  std::size_t dense_limit = 4096;
  double residual_tolerance = 1e-9;
  double cluster_tolerance = 1e-9; // relative eigenvalue gap that counts as degenerate
};

namespace detail {

/// Real Fourier modes ordered by |k|^2, then lexicographic k, cosine before sine.
struct RealMode {
  std::vector<long> k;
  bool sine = false;
};

inline std::vector<RealMode> ordered_modes(const Lattice& l) {
  std::vector<RealMode> out;
  std::vector<std::size_t> idx(l.dim());
  for (std::size_t f = 0; f < l.size(); ++f) {
    l.unflatten(f, idx);
    std::vector<long> k(l.dim()), km(l.dim());
    for (std::size_t a = 0; a < l.dim(); ++a) {
      k[a] = Lattice::signed_index(idx[a], l.shape[a]);
      km[a] = Lattice::signed_index((l.shape[a] - idx[a]) % l.shape[a], l.shape[a]);
    }
    // Keep one representative of each {k, -k} pair: the lexicographically larger one.
    if (k < km) continue;
    out.push_back({k, false});
    if (k != km) out.push_back({k, true});
  }
  auto norm2 = [](const std::vector<long>& k) {
    long s = 0;
    for (long v : k) s += v * v;
    return s;
  };
  std::sort(out.begin(), out.end(), [&](const RealMode& a, const RealMode& b) {
    const long na = norm2(a.k), nb = norm2(b.k);
    if (na != nb) return na < nb;
    if (a.k != b.k) return a.k < b.k;
    return !a.sine && b.sine;
  });
  return out;
}

inline RealField sample_mode(const Lattice& l, const RealMode& m) {
  return RealField::sample(l, [&](std::span<const double> x) {
    double arg = 0.0;
    for (std::size_t a = 0; a < x.size(); ++a) arg += static_cast<double>(m.k[a]) * x[a] * two_pi / l.lengths[a];
    return m.sine ? std::sin(arg) : std::cos(arg);
  });
}

/// Weighted Fourier coefficient of u against each ordered mode, via one FFT of u sqrt(h).
inline std::vector<double> mode_coefficients(const RealField& u, const RealField& w, const std::vector<RealMode>& modes) {
  RealField uw = u;
  for (std::size_t p = 0; p < u.size(); ++p) uw[p] *= w[p];
  const ComplexField spec = fft::forward(uw);
  const Lattice& l = u.lattice;
  std::vector<double> out;
  out.reserve(modes.size());
  std::vector<std::size_t> idx(l.dim());
  for (const auto& m : modes) {
    for (std::size_t a = 0; a < l.dim(); ++a) {
      const long n = static_cast<long>(l.shape[a]);
      idx[a] = static_cast<std::size_t>((m.k[a] % n + n) % n);
    }
    const cplx c = spec[l.flat(idx)];
    out.push_back(m.sine ? -c.imag() : c.real());
  }
  return out;
}

} // namespace detail

/// Fixes the basis of each eigenvalue cluster: cluster members are replaced by the weighted
/// projections of the ordered Fourier modes, Gram-Schmidt orthonormalized; singletons get the
/// sign that makes their dominant Fourier coefficient positive.
inline void canonicalize(ModeBasis& b, double cluster_tolerance) {
  const auto modes = detail::ordered_modes(b.grid);
  auto inner = [&](const RealField& u, const RealField& v) { return b.inner(u, v); };
  std::size_t start = 0;
  while (start < b.size()) {
    std::size_t end = start + 1;
    while (end < b.size() && b.eigenvalues[end] - b.eigenvalues[start] <= cluster_tolerance * std::max(1.0, b.eigenvalues[start])) ++end;
    const std::size_t c = end - start;
    if (c == 1) {
      const auto coef = detail::mode_coefficients(b.modes[start], b.sqrt_det, modes);
      std::size_t best = 0;
      for (std::size_t k = 1; k < coef.size(); ++k)
        if (std::abs(coef[k]) > std::abs(coef[best]) * (1.0 + 1e-9)) best = k;
      if (coef[best] < 0.0) b.modes[start] *= -1.0;
    } else {
      std::vector<RealField> canon;
      std::vector<double> coef_buf;
      for (std::size_t k = 0; k < modes.size() && canon.size() < c; ++k) {
        const RealField f = detail::sample_mode(b.grid, modes[k]);
        RealField v(b.grid, 0.0);
        for (std::size_t r = start; r < end; ++r) {
          const double a = inner(f, b.modes[r]);
          for (std::size_t p = 0; p < v.size(); ++p) v[p] += a * b.modes[r][p];
        }
        const double fnorm = std::sqrt(inner(f, f));
        for (const auto& e : canon) {
          const double a = inner(v, e);
          for (std::size_t p = 0; p < v.size(); ++p) v[p] -= a * e[p];
        }
        const double vn = std::sqrt(inner(v, v));
        if (vn <= 1e-6 * fnorm) continue;
        v *= 1.0 / vn;
        canon.push_back(std::move(v));
      }
      if (canon.size() != c) throw NumericError("canonicalize: could not span an eigenvalue cluster of size " + std::to_string(c));
      const double mean = std::accumulate(b.eigenvalues.begin() + static_cast<long>(start), b.eigenvalues.begin() + static_cast<long>(end), 0.0) / static_cast<double>(c);
      for (std::size_t r = 0; r < c; ++r) {
        b.modes[start + r] = std::move(canon[r]);
        b.eigenvalues[start + r] = mean;
      }
    }
    start = end;
  }
}

namespace detail {

/// Lanczos with full reorthogonalization on T = M^{1/2} (S + m^2 M)^{-1} M^{1/2}; the largest
/// Ritz values of T are the reciprocals of the lowest eigenvalues of A.
inline void lanczos(const Operator& op, std::size_t want, const EigenOptions& opt, Eigen::VectorXd& evals, Eigen::MatrixXd& evecs) {
  const long n = static_cast<long>(op.size());
  Eigen::SparseMatrix<double> k = op.stiffness;
  for (long p = 0; p < n; ++p) k.coeffRef(p, p) += op.mass2 * op.mass[p];
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(k);
  if (solver.info() != Eigen::Success) throw NumericError("lanczos: factorization failed");
  const Eigen::VectorXd msq = op.mass.cwiseSqrt();
  auto apply = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return msq.cwiseProduct(solver.solve(msq.cwiseProduct(x))); };

  long steps = std::min<long>(n, static_cast<long>(2 * want + 40));
  for (;;) {
    Eigen::MatrixXd q(n, steps);
    Eigen::VectorXd alpha(steps), beta(steps);
    Eigen::VectorXd v = Eigen::VectorXd::Ones(n);
    Rng rng(0x1a2c05);
    for (long i = 0; i < n; ++i) v[i] += 0.5 * rng.uniform(-1.0, 1.0);
    v.normalize();
    long used = steps;
    for (long s = 0; s < steps; ++s) {
      q.col(s) = v;
      Eigen::VectorXd w = apply(v);
      alpha[s] = v.dot(w);
      for (int pass = 0; pass < 2; ++pass) w -= q.leftCols(s + 1) * (q.leftCols(s + 1).transpose() * w);
      beta[s] = w.norm();
      if (s + 1 < steps && beta[s] <= 1e-14 * std::abs(alpha[s])) {
        used = s + 1;
        break;
      }
      v = w / beta[s];
    }
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(used, used);
    for (long s = 0; s < used; ++s) {
      t(s, s) = alpha[s];
      if (s + 1 < used) t(s, s + 1) = t(s + 1, s) = beta[s];
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t);
    const long take = std::min<long>(static_cast<long>(want), used);
    evals.resize(take);
    evecs.resize(n, take);
    double worst = 0.0;
    for (long r = 0; r < take; ++r) {
      const long c = used - 1 - r;
      const double theta = es.eigenvalues()[c];
      evals[r] = 1.0 / theta;
      evecs.col(r) = (q.leftCols(used) * es.eigenvectors().col(c)).normalized();
      worst = std::max(worst, (apply(evecs.col(r)) - theta * evecs.col(r)).norm() / std::abs(theta));
    }
    if (worst <= 0.01 * opt.residual_tolerance || steps == n) return;
    steps = std::min<long>(n, 2 * steps);
  }
}

} // namespace detail

/// Lowest J eigenpairs of A, ascending, orthonormal in the sqrt(h)-weighted inner product.
inline ModeBasis eigenpairs(const Operator& op, std::size_t j, const EigenOptions& opt = {}) {
  const std::size_t n = op.size();
  if (j == 0 || j > n) throw ConfigError("eigenpairs: J must lie in [1, " + std::to_string(n) + "]");
  const Eigen::VectorXd msq = op.mass.cwiseSqrt();
  Eigen::VectorXd evals;
  Eigen::MatrixXd evecs;
  std::size_t computed = j;
  if (n <= opt.dense_limit) {
    Eigen::MatrixXd b = Eigen::MatrixXd(op.stiffness);
    b = msq.cwiseInverse().asDiagonal() * b * msq.cwiseInverse().asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b);
    if (es.info() != Eigen::Success) throw NumericError("eigenpairs: dense solver did not converge");
    evals = es.eigenvalues().array() + op.mass2;
    evecs = es.eigenvectors();
    computed = n;
  } else {
    computed = std::min(n, j + 16);
    detail::lanczos(op, computed, opt, evals, evecs);
  }

  RealField weight(op.grid);
  for (std::size_t p = 0; p < n; ++p) weight[p] = op.mass[static_cast<long>(p)] / op.grid.cell_volume();
  ModeBasis basis{op.grid, op.mass2, {}, {}, std::move(weight)};
  for (std::size_t r = 0; r < computed; ++r) {
    basis.eigenvalues.push_back(evals[static_cast<long>(r)]);
    RealField phi(op.grid);
    for (std::size_t p = 0; p < n; ++p) phi[p] = evecs(static_cast<long>(p), static_cast<long>(r)) / msq[static_cast<long>(p)];
    basis.modes.push_back(std::move(phi));
  }
  // A cluster may straddle the cut; canonicalize the whole cluster before truncating.
  std::size_t keep = j;
  while (keep < computed && basis.eigenvalues[keep] - basis.eigenvalues[keep - 1] <= opt.cluster_tolerance * std::max(1.0, basis.eigenvalues[keep - 1])) ++keep;
  basis = basis.truncated(keep);
  canonicalize(basis, opt.cluster_tolerance);
  basis = basis.truncated(j);

  double worst = 0.0;
  std::size_t worst_j = 0;
  for (std::size_t r = 0; r < j; ++r) {
    RealField res = op.apply(basis.modes[r]);
    for (std::size_t p = 0; p < n; ++p) res[p] -= basis.eigenvalues[r] * basis.modes[r][p];
    const double rel = std::sqrt(basis.inner(res, res)) / basis.eigenvalues[r];
    if (rel > worst) {
      worst = rel;
      worst_j = r;
    }
  }
  if (worst > opt.residual_tolerance) {
    std::ostringstream msg;
    msg << "eigenpairs: relative residual " << worst << " at mode " << worst_j << " exceeds " << opt.residual_tolerance;
    throw NumericError(msg.str());
  }
  return basis;
}

inline ModeBasis eigenpairs(const metric::RoughMetric& m, double mass2, std::size_t j, const EigenOptions& opt = {}) {
  return eigenpairs(assemble_operator(m, mass2), j, opt);
}

/// Closed-form eigenvalues of the flat periodic operator: m^2 + sum_a (2/dx_a^2)(1 - cos(2 pi k_a / N_a)).
inline std::vector<double> flat_discrete_spectrum(const Lattice& l, double mass2) {
  std::vector<double> out;
  std::vector<std::size_t> idx(l.dim());
  for (std::size_t f = 0; f < l.size(); ++f) {
    l.unflatten(f, idx);
    double s = mass2;
    for (std::size_t a = 0; a < l.dim(); ++a) {
      const double h = l.spacing(a);
      s += 2.0 / (h * h) * (1.0 - std::cos(two_pi * static_cast<double>(idx[a]) / static_cast<double>(l.shape[a])));
    }
    out.push_back(s);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Largest count J' <= J that does not split a (near-)degenerate cluster: the mode after the
/// cut must sit a relative gap above the last kept one. Unknown beyond the basis, so J itself
/// is returned when J equals the basis size.
inline std::size_t complete_cluster_count(const ModeBasis& b, std::size_t j, double rel_gap = 1e-3) {
  if (j == 0 || j > b.size()) throw ConfigError("cluster count: J out of range");
  std::size_t k = j;
  while (k > 1 && k < b.size() && b.eigenvalues[k] - b.eigenvalues[k - 1] <= rel_gap * b.eigenvalues[k - 1]) --k;
  return k;
}

struct WeylFit {
  double exponent = 0.0;
  double constant = 0.0;
  double target = 0.0;
  std::size_t first = 0, last = 0; // 1-based mode range of the fit
};

/// Least-squares fit of log lambda_j^2 against log j over the middle two quartiles of j.
inline WeylFit weyl_check(const ModeBasis& b, std::size_t dim) {
  const std::size_t j = b.size();
  if (j < 30) throw EstimationError("weyl check: needs at least 30 modes, have " + std::to_string(j));
  WeylFit w;
  w.first = j / 4 + 1;
  w.last = (3 * j) / 4;
  std::vector<double> x, y;
  for (std::size_t r = w.first; r <= w.last; ++r) {
    x.push_back(std::log(static_cast<double>(r)));
    y.push_back(std::log(b.eigenvalues[r - 1]));
  }
  const LineFit f = fit_line(x, y);
  w.exponent = f.slope;
  w.constant = std::exp(f.intercept);
  w.target = 2.0 / static_cast<double>(dim);
  return w;
}

/// Eigenvalues as CSV, plus optional per-mode CSVs, under a JSON header.
inline void save(const ModeBasis& b, const std::filesystem::path& dir, bool with_modes) {
  io::json j;
  j["grid"] = io::lattice_json(b.grid);
  j["mass2"] = b.mass2;
  j["modes"] = b.size();
  j["eigenvalues_file"] = "eigenvalues.csv";
  {
    auto out = io::open_out(dir / "eigenvalues.csv");
    out << "j,lambda2,lambda\n";
    for (std::size_t r = 0; r < b.size(); ++r) out << r << ',' << io::num(b.eigenvalues[r]) << ',' << io::num(b.lambda(r)) << '\n';
  }
  if (with_modes) {
    io::json files = io::json::array();
    for (std::size_t r = 0; r < b.size(); ++r) {
      const std::string name = "mode_" + std::to_string(r) + ".csv";
      io::write_csv(dir / name, b.modes[r]);
      files.push_back(name);
    }
    j["mode_files"] = files;
    io::write_csv(dir / "sqrt_det.csv", b.sqrt_det);
    j["weight_file"] = "sqrt_det.csv";
  }
  io::write_json(dir / "spectrum.json", j);
}

/// Reads a basis written by save(..., true).
inline ModeBasis load(const std::filesystem::path& dir) {
  const io::json j = io::read_json(dir / "spectrum.json");
  if (!j.contains("mode_files")) throw IoError("spectrum at " + dir.string() + " was saved without modes");
  ModeBasis b;
  b.grid = io::lattice_from_json(j.at("grid"));
  b.mass2 = j.at("mass2").get<double>();
  auto in = io::open_in(dir / j.at("eigenvalues_file").get<std::string>());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto cells = io::detail::split(line, ',');
    if (cells.size() >= 2) b.eigenvalues.push_back(std::stod(cells[1]));
  }
  for (const auto& name : j.at("mode_files")) b.modes.push_back(io::read_csv<double>(dir / name.get<std::string>()));
  b.sqrt_det = io::read_csv<double>(dir / j.at("weight_file").get<std::string>());
  if (b.modes.size() != b.eigenvalues.size()) throw IoError("spectrum at " + dir.string() + " is incomplete");
  return b;
}

} // namespace roughwave::spectral
