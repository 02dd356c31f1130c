#pragma once

// Time-independent Riemannian metrics on the flat torus with prescribed Zygmund regularity.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "roughwave/core/io.hpp"
#include "roughwave/lp.hpp"

namespace roughwave::metric {

/// Packed index of the symmetric pair (i, j).
inline std::size_t sym_index(std::size_t i, std::size_t j, std::size_t dim) {
  if (i > j) std::swap(i, j);
  return i * dim - i * (i - 1) / 2 + (j - i);
}

inline std::size_t n_components(std::size_t dim) { return dim * (dim + 1) / 2; }

/// One trigonometric term of the synthesized perturbation of component (i, j).
struct SynthesisTerm {
  std::size_t i = 0, j = 0;
  std::size_t band = 0;
  std::vector<long> wavevector;
  double phase = 0.0;
  double weight = 0.0; // 2^{-k tau} / max|P_k| folded in
};

struct RoughMetric {
  std::size_t dim = 1;
  Lattice grid;
  double tau = 0.0;
  double amplitude = 0.0;
  std::uint64_t seed = 0;
  std::size_t n_bands = 0;
  std::vector<RealField> h;     // packed symmetric h_{ij}
  std::vector<RealField> h_inv; // packed symmetric h^{ij}
  RealField sqrt_det;
  std::vector<SynthesisTerm> terms;

  const RealField& lower(std::size_t i, std::size_t j) const { return h[sym_index(i, j, dim)]; }
  const RealField& upper(std::size_t i, std::size_t j) const { return h_inv[sym_index(i, j, dim)]; }
  bool is_flat() const {
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = i; j < dim; ++j)
        for (double v : lower(i, j).values)
          if (v != (i == j ? 1.0 : 0.0)) return false;
    return true;
  }
};

namespace detail {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;

inline Mat local_matrix(const std::vector<RealField>& packed, std::size_t dim, std::size_t p) {
  Mat m(dim, dim);
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) m(i, j) = packed[sym_index(i, j, dim)][p];
  return m;
}

} // namespace detail

/// Fills h^{ij} and sqrt(det h) from h_{ij}; throws SynthesisError when ellipticity fails.
inline void complete_fields(RoughMetric& m) {
  const std::size_t d = m.dim;
  m.h_inv.assign(n_components(d), RealField(m.grid));
  m.sqrt_det = RealField(m.grid);
  double worst = 0.0;
  for (std::size_t p = 0; p < m.grid.size(); ++p) {
    const auto a = detail::local_matrix(m.h, d, p);
    Eigen::SelfAdjointEigenSolver<detail::Mat> es(a, Eigen::EigenvaluesOnly);
    worst = std::max({worst, 1.0 - es.eigenvalues().minCoeff(), es.eigenvalues().maxCoeff() - 1.0});
    if (d == 1) {
      m.h_inv[0][p] = 1.0 / a(0, 0);
      m.sqrt_det[p] = std::sqrt(a(0, 0));
    } else {
      const detail::Mat inv = a.inverse();
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) m.h_inv[sym_index(i, j, d)][p] = 0.5 * (inv(i, j) + inv(j, i));
      m.sqrt_det[p] = std::sqrt(a.determinant());
    }
  }
  if (!(worst < 1.0)) {
    const double feasible = m.amplitude > 0.0 ? 0.99 * m.amplitude / worst : 0.0;
    throw SynthesisError("metric not uniformly elliptic (eigenvalue deviation " + std::to_string(worst) +
                         "); max feasible amplitude about " + std::to_string(feasible));
  }
}

/// Metric from explicitly sampled components h_{ij} (packed symmetric).
inline RoughMetric from_components(const Lattice& grid, std::vector<RealField> h) {
  RoughMetric m;
  m.dim = grid.dim();
  m.grid = grid;
  if (h.size() != n_components(m.dim)) throw ConfigError("metric: wrong number of components");
  for (const auto& f : h) require_same_lattice(f.lattice, grid, "metric component");
  m.h = std::move(h);
  complete_fields(m);
  return m;
}

inline RoughMetric flat(std::size_t dim, std::size_t n) {
  const Lattice grid = Lattice::torus(dim, n);
  std::vector<RealField> h;
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = i; j < dim; ++j) h.emplace_back(grid, i == j ? 1.0 : 0.0);
  auto m = from_components(grid, std::move(h));
  m.tau = std::numeric_limits<double>::infinity();
  return m;
}

struct GenerateOptions {
  std::size_t dim = 1;
  std::size_t grid = 256;
  double tau = 2.5;
  double amplitude = 0.2;
  std::uint64_t seed = 7;
  std::size_t n_bands = 0; // 0: the largest partition the grid supports
  std::size_t terms_per_band = 3;
};

/// h_{ij} = delta_{ij} + a W^{(ij)} with W^{(ij)} = sum_k 2^{-k tau} P_k, P_k a random-phase
/// trigonometric polynomial at radius 2^k normalized to unit sup norm, k = 1 .. n_bands - 2.
inline RoughMetric generate_rough_metric(const GenerateOptions& opt) {
  if (opt.dim < 1 || opt.dim > 3) throw ConfigError("metric: dim must be 1, 2 or 3");
  if (!(opt.tau > 1.0)) throw ConfigError("metric: tau must satisfy tau > 1");
  if (opt.amplitude < 0.0 || opt.amplitude > 0.4) throw ConfigError("metric: amplitude must lie in [0, 0.4]");
  const Lattice grid = Lattice::torus(opt.dim, opt.grid);
  const std::size_t max_bands = lp::DyadicPartition::max_bands(grid);
  const std::size_t n_bands = opt.n_bands == 0 ? max_bands : opt.n_bands;
  if (n_bands > max_bands)
    throw ConfigError("metric: grid supports at most " + std::to_string(max_bands) + " bands");
  if (n_bands < 3) throw ConfigError("metric: need at least 3 bands");

  RoughMetric m;
  m.dim = opt.dim;
  m.grid = grid;
  m.tau = opt.tau;
  m.amplitude = opt.amplitude;
  m.seed = opt.seed;
  m.n_bands = n_bands;

  Rng rng = Rng::substream(opt.seed, "metric-phases");
  const std::size_t d = opt.dim;
  std::vector<double> x(d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      RealField w(grid, 0.0);
      for (std::size_t k = 1; k + 1 < n_bands; ++k) {
        const double radius = std::ldexp(1.0, static_cast<int>(k));
        const std::size_t count = d == 1 ? 1 : opt.terms_per_band;
        std::vector<SynthesisTerm> band_terms;
        for (std::size_t c = 0; c < count; ++c) {
          SynthesisTerm t;
          t.i = i;
          t.j = j;
          t.band = k;
          t.wavevector.assign(d, 0);
          if (d == 1) {
            t.wavevector[0] = static_cast<long>(radius);
          } else {
            // Random direction on the upper half sphere, rounded to the lattice.
            std::vector<double> dir(d);
            double nrm = 0.0;
            do {
              nrm = 0.0;
              for (auto& v : dir) {
                v = rng.normal();
                nrm += v * v;
              }
            } while (nrm < 1e-12);
            nrm = std::sqrt(nrm);
            if (dir[0] < 0.0)
              for (auto& v : dir) v = -v;
            for (std::size_t a = 0; a < d; ++a) t.wavevector[a] = std::lround(radius * dir[a] / nrm);
          }
          t.phase = rng.uniform(0.0, two_pi);
          band_terms.push_back(std::move(t));
        }
        RealField pk(grid, 0.0);
        for (std::size_t p = 0; p < grid.size(); ++p) {
          grid.point(p, x);
          for (const auto& t : band_terms) {
            double arg = t.phase;
            for (std::size_t a = 0; a < d; ++a) arg += static_cast<double>(t.wavevector[a]) * x[a];
            pk[p] += std::cos(arg);
          }
        }
        const double norm = pk.max_abs();
        const double weight = std::exp2(-static_cast<double>(k) * opt.tau) / norm;
        for (std::size_t p = 0; p < grid.size(); ++p) w[p] += weight * pk[p];
        for (auto& t : band_terms) {
          t.weight = weight;
          m.terms.push_back(std::move(t));
        }
      }
      RealField hij(grid, i == j ? 1.0 : 0.0);
      for (std::size_t p = 0; p < grid.size(); ++p) hij[p] += opt.amplitude * w[p];
      m.h.push_back(std::move(hij));
    }
  }
  complete_fields(m);
  return m;
}

/// h^{ij}, sqrt(h) and the flux divergence sum_i d_i(h^{ij} sqrt h), derivatives taken spectrally.
struct MetricFields {
  std::vector<RealField> h_inv;
  RealField sqrt_det;
  std::vector<RealField> flux_divergence; // index j
};

inline MetricFields metric_fields(const RoughMetric& m) {
  MetricFields f{m.h_inv, m.sqrt_det, {}};
  for (std::size_t j = 0; j < m.dim; ++j) {
    RealField acc(m.grid, 0.0);
    for (std::size_t i = 0; i < m.dim; ++i) {
      RealField flux = m.upper(i, j);
      for (std::size_t p = 0; p < flux.size(); ++p) flux[p] *= m.sqrt_det[p];
      acc += fft::derivative(flux, i);
    }
    f.flux_divergence.push_back(std::move(acc));
  }
  return f;
}

/// Smallest pointwise eigenvalue of h over the grid.
inline double min_eigenvalue(const RoughMetric& m) {
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < m.grid.size(); ++p) {
    Eigen::SelfAdjointEigenSolver<detail::Mat> es(detail::local_matrix(m.h, m.dim, p), Eigen::EigenvaluesOnly);
    lo = std::min(lo, es.eigenvalues().minCoeff());
  }
  return lo;
}

inline double max_eigenvalue(const RoughMetric& m) {
  double hi = 0.0;
  for (std::size_t p = 0; p < m.grid.size(); ++p) {
    Eigen::SelfAdjointEigenSolver<detail::Mat> es(detail::local_matrix(m.h, m.dim, p), Eigen::EigenvaluesOnly);
    hi = std::max(hi, es.eigenvalues().maxCoeff());
  }
  return hi;
}

/// Largest pointwise eigenvalue of h^{-1}; its square root bounds the coordinate speed of light.
inline double max_inverse_eigenvalue(const RoughMetric& m) {
  double hi = 0.0;
  for (std::size_t p = 0; p < m.grid.size(); ++p) {
    Eigen::SelfAdjointEigenSolver<detail::Mat> es(detail::local_matrix(m.h_inv, m.dim, p), Eigen::EigenvaluesOnly);
    hi = std::max(hi, es.eigenvalues().maxCoeff());
  }
  return hi;
}

inline std::string component_name(std::size_t i, std::size_t j) { return "h_" + std::to_string(i) + std::to_string(j); }

/// Writes <dir>/metric.json (header and synthesis terms) and one CSV per h_{ij}.
inline void save(const RoughMetric& m, const std::filesystem::path& dir) {
  io::json j;
  j["dim"] = m.dim;
  j["tau"] = std::isfinite(m.tau) ? io::json(m.tau) : io::json(nullptr);
  j["amplitude"] = m.amplitude;
  j["seed"] = m.seed;
  j["n_bands"] = m.n_bands;
  j["grid"] = io::lattice_json(m.grid);
  j["generator"] = std::string(Rng::generator_name);
  io::json terms = io::json::array();
  for (const auto& t : m.terms)
    terms.push_back({{"i", t.i}, {"j", t.j}, {"band", t.band}, {"wavevector", t.wavevector}, {"phase", t.phase}, {"weight", t.weight}});
  j["terms"] = terms;
  io::json files = io::json::array();
  for (std::size_t a = 0; a < m.dim; ++a)
    for (std::size_t b = a; b < m.dim; ++b) {
      const std::string name = component_name(a, b) + ".csv";
      io::write_csv(dir / name, m.lower(a, b));
      files.push_back(name);
    }
  j["fields"] = files;
  io::write_json(dir / "metric.json", j);
}

inline RoughMetric load(const std::filesystem::path& dir) {
  const io::json j = io::read_json(dir / "metric.json");
  const Lattice grid = io::lattice_from_json(j.at("grid"));
  std::vector<RealField> h;
  for (const auto& name : j.at("fields")) h.push_back(io::read_csv<double>(dir / name.get<std::string>()));
  RoughMetric m = from_components(grid, std::move(h));
  m.tau = j.at("tau").is_null() ? std::numeric_limits<double>::infinity() : j.at("tau").get<double>();
  m.amplitude = j.at("amplitude").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.n_bands = j.at("n_bands").get<std::size_t>();
  for (const auto& t : j.at("terms"))
    m.terms.push_back({t.at("i").get<std::size_t>(), t.at("j").get<std::size_t>(), t.at("band").get<std::size_t>(),
                       t.at("wavevector").get<std::vector<long>>(), t.at("phase").get<double>(), t.at("weight").get<double>()});
  return m;
}

} // namespace roughwave::metric
