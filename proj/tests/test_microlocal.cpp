#include "test_support.hpp"

#include <memory>

#include "roughwave/microlocal.hpp"

using namespace roughwave;
using namespace rw_test;
using Catch::Approx;
namespace ml = roughwave::microlocal;

namespace {

metric::RoughMetric rough1(std::size_t n, double tau, std::uint64_t seed) {
  metric::GenerateOptions o;
  o.dim = 1;
  o.grid = n;
  o.tau = tau;
  o.amplitude = 0.3;
  o.seed = seed;
  return metric::generate_rough_metric(o);
}

// Kernel truncated at a complete cluster below 128 modes, so every retained frequency keeps
// its cosine and sine partner.
state::TwoPointKernel kernel(state::KernelKind kind, const metric::RoughMetric& m, std::size_t j = 128) {
  auto b = std::make_shared<spectral::ModeBasis>(spectral::eigenpairs(m, 1.0, std::min<std::size_t>(m.grid.size(), j + 8)));
  return state::TwoPointKernel(kind, b, spectral::complete_cluster_count(*b, j));
}

// Sum over |k| <= kmax of e^{ik x}: a grid spike of height 2 kmax + 1 at x = 0.
double dirichlet(double x, int kmax) {
  double s = 1.0;
  for (int k = 1; k <= kmax; ++k) s += 2.0 * std::cos(k * x);
  return s;
}

ComplexField as_complex(const RealField& u) {
  ComplexField c(u.lattice);
  for (std::size_t i = 0; i < u.size(); ++i) c[i] = u[i];
  return c;
}

std::size_t centre_index(const Lattice& l) {
  std::vector<std::size_t> idx(l.dim());
  for (std::size_t a = 0; a < l.dim(); ++a) idx[a] = l.shape[a] / 2;
  return l.flat(idx);
}

bool any_flag_near(const ml::ScanResult& r, std::vector<double> dir, double angle) {
  const double n = std::sqrt(ml::DirectionSet::dot(dir, dir));
  for (auto& v : dir) v /= n;
  for (const auto& c : r.flagged)
    if (std::acos(std::clamp(ml::DirectionSet::dot(c.direction, dir), -1.0, 1.0)) <= angle) return true;
  return false;
}

} // namespace

TEST_CASE("windows", "[microlocal]") {
  const Lattice l{{65}, {4.0}};
  const auto w = ml::centred_window(l, ml::Bump{1.0, 4.0});
  CHECK(w[32] == Approx(1.0));
  CHECK(w[0] == 0.0);
  CHECK_NOTHROW(ml::require_compact(w));
  const auto wide = ml::centred_window(l, ml::Bump{3.0, 4.0});
  CHECK_THROWS_AS(ml::require_compact(wide), DomainError);
}

TEST_CASE("mixed Sobolev norm of kernels", "[microlocal]") {
  const auto flat = metric::flat(1, 256);
  const auto rough = rough1(256, 2.5, 7);

  SECTION("one constant mode reduces to the window norm") {
    auto b = std::make_shared<spectral::ModeBasis>(spectral::eigenpairs(flat, 1.0, 4));
    const state::TwoPointKernel k(state::KernelKind::omega_G, b, 1);
    const ml::TimeWindow tw;
    const auto r = ml::mixed_sobolev_norm(k, tw, 0.0);
    const auto psi = ml::centred_window(tw.lattice(), tw.bump);
    double norm2 = 0.0;
    for (double v : psi.values) norm2 += v * v * psi.lattice.cell_volume();
    // lambda_0 = m = 1, so |f_0|^2 = 1.
    CHECK(r.total == Approx(norm2).epsilon(1e-10));
  }

  SECTION("closed form against direct quadrature") {
    // Integer orders make the weighted window spectrum band-limited, so both lattice sums are
    // exact; otherwise they are two Riemann sums of one integral and a finer box brings them together.
    ml::TimeWindow fine;
    fine.box = 8.0;
    fine.points = 256;
    for (auto kind : {state::KernelKind::omega_G, state::KernelKind::omega_A}) {
      const auto k = kernel(kind, rough, 32);
      for (double s : {0.0, 1.0, -0.6, 0.7}) {
        const bool integer = s == std::round(s);
        const ml::TimeWindow tw = integer ? ml::TimeWindow{} : fine;
        const auto a = ml::mixed_sobolev_norm(k, tw, s), d = ml::mixed_sobolev_norm_direct(k, tw, s);
        REQUIRE(a.contributions.size() == d.contributions.size());
        for (std::size_t j = 0; j < a.contributions.size(); ++j)
          CHECK(std::abs(a.contributions[j] - d.contributions[j]) <= (integer ? 1e-9 : 1e-5) * d.contributions[j]);
      }
    }
  }

  SECTION("orders below and above the threshold") {
    const auto kg = kernel(state::KernelKind::omega_G, rough);
    const auto low = ml::mixed_sobolev_norm(kg, ml::TimeWindow{}, -0.6);
    CHECK(low.tail_exponent <= -3.0);
    CHECK(low.verdict == "convergent");
    const auto high = ml::mixed_sobolev_norm(kg, ml::TimeWindow{}, 1.0);
    CHECK(high.verdict == "divergent");
    for (std::size_t j = 0; j < high.contributions.size(); ++j) {
      CHECK(high.contributions[j] >= 0.0);
      if (j > 0) CHECK(high.partial_sums[j] >= high.partial_sums[j - 1]);
    }
    const auto ka = kernel(state::KernelKind::omega_A, rough);
    const auto a = ml::mixed_sobolev_norm(ka, ml::TimeWindow{}, 0.4);
    CHECK(a.last_block_fraction <= 0.01);
    CHECK(a.verdict == "convergent");
  }

  SECTION("the window must fit inside its box") {
    const auto k = kernel(state::KernelKind::omega_G, flat, 16);
    ml::TimeWindow tw;
    tw.box = 1.5;
    CHECK_THROWS_AS(ml::mixed_sobolev_norm(k, tw, 0.0), DomainError);
  }
}

TEST_CASE("conic probes of functions", "[microlocal]") {
  SECTION("a Gaussian bump is smooth in every direction") {
    const Lattice g = Lattice::torus(2, 256);
    const RealField u = RealField::sample(g, [](auto x) {
      const double a = x[0] - std::numbers::pi, b = x[1] - std::numbers::pi;
      return std::exp(-(a * a + b * b) / 0.02);
    });
    const ml::PatchSpec spec;
    const ml::SpectralPatch p(extract_patch(u, centre_index(g), spec), spec);
    const auto r = ml::wavefront_scan(p, 10.0);
    CHECK(r.flagged.empty());
    for (const auto& c : r.all) CHECK((c.fit.slope <= -6.0 || c.fit.used.size() < 3));
  }

  SECTION("a grid spike is singular exactly above order -1/2") {
    const Lattice g = Lattice::torus(1, 256);
    const RealField u = RealField::sample(g, [](auto x) { return dirichlet(x[0], 127); });
    const ml::PatchSpec spec;
    const ml::SpectralPatch p(extract_patch(u, 0, spec), spec);
    for (double d : {1.0, -1.0}) {
      const std::vector<double> dir{d};
      const auto at0 = ml::conic_probe(p, dir, 0.5, 0.0);
      CHECK(at0.fit.slope == Approx(0.0).margin(0.3));
      CHECK(at0.fit.singular);
      const auto below = ml::conic_probe(p, dir, 0.5, -1.0);
      CHECK_FALSE(below.fit.singular);
      CHECK_FALSE(below.fit.inconclusive);
    }
  }

  SECTION("a jump sits between orders 0 and 1") {
    const Lattice g = Lattice::torus(1, 256);
    const RealField u = RealField::sample(g, [](auto x) { return x[0] < std::numbers::pi ? 1.0 : 0.0; });
    const ml::PatchSpec spec;
    const ml::SpectralPatch p(extract_patch(u, 0, spec), spec);
    const std::vector<double> dir{1.0};
    CHECK_FALSE(ml::conic_probe(p, dir, 0.5, 0.0).fit.singular);
    CHECK(ml::conic_probe(p, dir, 0.5, 1.0).fit.singular);

    ml::PatchSpec steep = spec;
    steep.window_k = 8.0;
    const ml::SpectralPatch q(extract_patch(u, 0, steep), steep);
    CHECK_FALSE(ml::conic_probe(q, dir, 0.5, 0.0).fit.singular);
    CHECK(ml::conic_probe(q, dir, 0.5, 1.0).fit.singular);
  }

  SECTION("a smooth function has an empty scan") {
    const Lattice g = Lattice::torus(2, 256);
    const RealField u = RealField::sample(g, [](auto x) { return std::sin(x[0]) + std::cos(2.0 * x[1]); });
    const ml::PatchSpec spec;
    const ml::SpectralPatch p(extract_patch(u, centre_index(g), spec), spec);
    CHECK(ml::wavefront_scan(p, 2.0).flagged.empty());
  }

  SECTION("a line singularity: conormal flags, monotone in s, window independent") {
    const Lattice g = Lattice::torus(2, 256);
    const RealField u = RealField::sample(g, [](auto x) { return x[0] < std::numbers::pi ? 1.0 : 0.0; });
    const ml::PatchSpec spec;
    const ml::SpectralPatch p(extract_patch(u, centre_index(g), spec), spec);
    std::size_t prev = 0;
    for (double s : {-0.5, 0.0, 0.5, 1.0, 1.5}) {
      const auto r = ml::wavefront_scan(p, s);
      CHECK(r.flagged.size() >= prev);
      prev = r.flagged.size();
      for (const auto& c : r.flagged) CHECK(std::abs(c.direction[1]) <= std::sin(2.0 * r.resolution));
    }
    CHECK(ml::wavefront_scan(p, 0.0).flagged.empty());
    const auto r1 = ml::wavefront_scan(p, 1.0);
    CHECK(any_flag_near(r1, {1.0, 0.0}, 1e-9));
    CHECK(any_flag_near(r1, {-1.0, 0.0}, 1e-9));

    ml::PatchSpec steep = spec;
    steep.window_k = 8.0;
    const ml::SpectralPatch q(extract_patch(u, centre_index(g), steep), steep);
    const auto r2 = ml::wavefront_scan(q, 1.0);
    CHECK(any_flag_near(r2, {1.0, 0.0}, 1e-9));
    CHECK(any_flag_near(r2, {-1.0, 0.0}, 1e-9));
  }

  SECTION("invalid cones") {
    const Lattice g = Lattice::torus(2, 256);
    const RealField u = RealField::sample(g, [](auto x) { return std::sin(x[0]); });
    const ml::PatchSpec spec;
    const ml::SpectralPatch p(extract_patch(u, 0, spec), spec);
    const std::vector<double> dir{1.0, 1.0 / std::numbers::pi};
    CHECK_THROWS_AS(ml::conic_probe(p, dir, 1e-6, 0.0), EstimationError);
    CHECK_THROWS_AS(ml::conic_probe(p, dir, 2.0, 0.0), ConfigError);
    CHECK_THROWS_AS(ml::conic_probe(p, std::vector<double>{1.0}, 0.3, 0.0), ConfigError);
    CHECK_THROWS_AS(ml::half_space_masses(p, p.top() + 1), IndexError);
    const Lattice small = Lattice::torus(1, 8);
    CHECK_THROWS_AS(ml::SpectralPatch(as_complex(RealField(small, 1.0)), ml::PatchSpec{8, 1, 4.0}), ConfigError);
    const Lattice oblong{{32, 32}, {1.0, 2.0}};
    CHECK_THROWS_AS(ml::SpectralPatch(as_complex(RealField(oblong, 1.0)), ml::PatchSpec{32, 1, 4.0}), ConfigError);
  }
}

TEST_CASE("wavefront of the two-point function", "[microlocal][slow]") {
  const ml::PatchSpec spec;
  const ml::PairPoint diag{0.0, 0, 0.0, 0};

  SECTION("flat metric") {
    const auto k = kernel(state::KernelKind::omega_G, metric::flat(1, 256));
    const ml::SpectralPatch p(ml::sample_kernel_patch(k, diag, spec), spec);
    const double res = p.directions().resolution();

    // Negative time frequencies carry no singularity at any order probed.
    for (double s : {0.0, 1.0, 2.0}) {
      const auto neg = ml::conic_probe(p, std::vector<double>{-1.0, 1.0, 1.0, -1.0}, res, s);
      CHECK_FALSE(neg.fit.singular);
      const auto pos = ml::conic_probe(p, std::vector<double>{1.0, -1.0, -1.0, 1.0}, res, s);
      CHECK(pos.fit.slope > neg.fit.slope + 5.0);
    }

    CHECK(ml::wavefront_scan(p, 0.0).flagged.empty());
    const auto r = ml::wavefront_scan(p, 1.0);
    CHECK_FALSE(r.flagged.empty());
    for (const auto& c : r.flagged) {
      const auto cl = ml::classify(c.direction, 1.0, 1.0, true, 2.0 * r.resolution);
      CHECK(cl.char_ok);
      CHECK(cl.sum_ok);
      CHECK(cl.positive_ok);
      CHECK(cl.diagonal_ok);
    }

    const auto [neg_mass, pos_mass] = ml::half_space_masses(p, p.top() - 2);
    CHECK(neg_mass <= 1e-3 * pos_mass);

    // The mode sum and the probe agree on which side of order 1/2 the kernel sits.
    CHECK(ml::mixed_sobolev_norm(k, ml::TimeWindow{}, 0.0).verdict == "convergent");
    CHECK(ml::mixed_sobolev_norm(k, ml::TimeWindow{}, 1.0).verdict == "divergent");
  }

  SECTION("rough metric") {
    const auto m = rough1(256, 2.5, 7);
    const auto k = kernel(state::KernelKind::omega_G, m);
    const ml::SpectralPatch p(ml::sample_kernel_patch(k, diag, spec), spec);
    const auto r = ml::wavefront_scan(p, 1.9);
    CHECK_FALSE(r.flagged.empty());
    const double hx = m.h_inv[0][0];
    std::size_t failing = 0;
    for (const auto& c : r.flagged) failing += !ml::classify(c.direction, hx, hx, true, 2.0 * r.resolution).passes();
    CHECK(failing == 0);
  }
}

TEST_CASE("two-point function away from the diagonal", "[microlocal][slow]") {
  // Coarser sampling leaves three shells below the truncation edge of the mode sum.
  const ml::PatchSpec spec{64, 2, 4.0};
  ml::ProbeConfig cfg;
  cfg.skip_closure = true;
  const auto k = kernel(state::KernelKind::omega_G, metric::flat(1, 256));

  SECTION("fit range") {
    const ml::SpectralPatch p(ml::sample_kernel_patch(k, {0.0, 0, 0.0, 0}, spec), spec, cfg);
    CHECK(p.last_shell() + 1 == p.top());
    CHECK(p.last_shell() >= p.first_shell() + 2);
  }

  SECTION("timelike pair is smooth") {
    const ml::SpectralPatch p(ml::sample_kernel_patch(k, {-std::numbers::pi, 0, 0.0, 0}, spec), spec, cfg);
    for (double s : {0.0, 1.0, 1.9, 2.5}) CHECK(ml::wavefront_scan(p, s).flagged.empty());
  }

  SECTION("null pair is singular along its own branch only") {
    // t - s = -(x - y): the branch with conormal (1, 1, -1, -1)
    const ml::SpectralPatch p(ml::sample_kernel_patch(k, {-1.6, 65, 0.0, 0}, spec), spec, cfg);
    const auto r = ml::wavefront_scan(p, 1.9);
    CHECK(any_flag_near(r, {1.0, 1.0, -1.0, -1.0}, r.resolution));
    CHECK_FALSE(any_flag_near(r, {1.0, -1.0, -1.0, 1.0}, 3.0 * r.resolution));
  }
}

TEST_CASE("classification of covectors", "[microlocal]") {
  const double tol = 0.05;
  const std::vector<double> good{1.0, 1.0, -1.0, -1.0};
  const auto c = ml::classify(good, 1.0, 1.0, true, tol);
  CHECK(c.passes());
  CHECK(c.char_angle == Approx(0.0).margin(1e-7));

  // Rescaled null cone: xi0 = c xi with c^2 = h^{11}.
  const std::vector<double> slow{0.5, 1.0, -0.5, -1.0};
  CHECK(ml::classify(slow, 0.25, 0.25, true, tol).char_ok);
  CHECK_FALSE(ml::classify(slow, 1.0, 1.0, true, tol).char_ok);

  CHECK_FALSE(ml::classify(std::vector<double>{-1.0, 1.0, 1.0, -1.0}, 1.0, 1.0, true, tol).positive_ok);
  CHECK_FALSE(ml::classify(std::vector<double>{1.0, 1.0, 1.0, 1.0}, 1.0, 1.0, true, tol).sum_ok);
  CHECK_FALSE(ml::classify(std::vector<double>{1.0, 1.0, -1.0, 1.0}, 1.0, 1.0, true, tol).diagonal_ok);
  CHECK(ml::classify(std::vector<double>{1.0, 1.0, -1.0, 1.0}, 1.0, 1.0, false, tol).char_ok);

  std::vector<double> seen;
  const ml::Connectivity reject = [&](const ml::PairPoint&, std::span<const double> z) {
    seen.assign(z.begin(), z.end());
    return false;
  };
  const auto rc = ml::classify(good, 1.0, 1.0, true, tol, {}, reject);
  CHECK_FALSE(rc.passes());
  CHECK(seen == std::vector<double>{1.0, 1.0, 1.0, 1.0});
  CHECK_THROWS_AS(ml::classify(std::vector<double>{1.0, 1.0}, 1.0, 1.0, true, tol), ConfigError);
}

TEST_CASE("covariance under lattice maps", "[microlocal]") {
  const Lattice g = Lattice::torus(2, 64);
  // A spike along the line x = 0. The band stops short of the grid Nyquist frequency so that a
  // shear, which moves it out by sqrt 2, does not wrap it around the corners of the lattice.
  const RealField u = RealField::sample(g, [](auto x) { return dirichlet(x[0], 24); });
  const std::size_t on_line = g.flat(std::vector<std::size_t>{0, 20});

  SECTION("identity") {
    const auto r = ml::diffeo_covariance_check(u, {{{1, 0}, {0, 1}}, {0, 0}}, on_line, 0.5);
    CHECK(r.flags_original > 0);
    CHECK(r.covariant);
    CHECK(r.worst_angle == Approx(0.0).margin(1e-9));
  }
  SECTION("half-period translation") {
    const auto r = ml::diffeo_covariance_check(u, {{{1, 0}, {0, 1}}, {32, 32}}, g.flat(std::vector<std::size_t>{32, 5}), 0.5);
    CHECK(r.flags_original > 0);
    CHECK(r.covariant);
  }
  SECTION("axis swap and shear") {
    const auto swap = ml::diffeo_covariance_check(u, {{{0, 1}, {1, 0}}, {0, 0}}, g.flat(std::vector<std::size_t>{20, 0}), 0.5);
    CHECK(swap.flags_pulled > 0);
    CHECK(swap.covariant);
    const auto shear = ml::diffeo_covariance_check(u, {{{1, 1}, {0, 1}}, {0, 0}}, g.flat(std::vector<std::size_t>{44, 20}), 0.5);
    CHECK(shear.flags_pulled > 0);
    CHECK(shear.covariant);
    CHECK(shear.tolerance == Approx(shear.resolution * (3.0 + std::sqrt(5.0)) / 2.0));
  }
  SECTION("maps that do not preserve the lattice") {
    CHECK_THROWS_AS(ml::pull_back(u, {{{1, 1}, {1, 1}}, {0, 0}}), DomainError);
    CHECK_THROWS_AS(ml::pull_back(u, {{{2, 0}, {0, 1}}, {0, 0}}), DomainError);
    CHECK_THROWS_AS(ml::pull_back(u, {{{1}}, {0}}), ConfigError);
  }
}
