#include "test_support.hpp"

#include "roughwave/lp.hpp"

using namespace roughwave;
using namespace rw_test;
using Catch::Approx;

namespace {

// Independent closed-form partition used as oracle: psi_j = psi_0(2^-j r) - psi_0(2^{1-j} r).
double oracle_psi0(double r) {
  if (r <= 1.0) return 1.0;
  if (r >= 2.0) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * (r - 1.0)));
}
double oracle_psi(int j, double r) {
  if (j == 0) return oracle_psi0(r);
  return oracle_psi0(r / std::exp2(j)) - oracle_psi0(r / std::exp2(j - 1));
}

// |sin|_inf + sup |sin x - sin y| / d(x, y)^{1/2} over all pairs of a 2048-point grid.
double sine_holder_oracle() {
  const int m = 2048;
  double semi = 0.0;
  for (int a = 0; a < m; ++a)
    for (int b = a + 1; b < m; ++b) {
      const double x = two_pi * a / m, y = two_pi * b / m;
      const double dist = std::min(y - x, two_pi - (y - x));
      semi = std::max(semi, std::abs(std::sin(x) - std::sin(y)) / std::sqrt(dist));
    }
  return 1.0 + semi;
}

} // namespace

TEST_CASE("partition values and support", "[lp]") {
  const Lattice grid = Lattice::torus(1, 256);
  const auto p = lp::build_partition(grid, 8);
  REQUIRE(p.top() == 7);

  SECTION("flat region of psi_0") {
    CHECK(p.weight(0, 0.5) == 1.0);
    for (std::size_t j = 1; j < p.n_bands(); ++j) CHECK(p.weight(j, 0.5) == 0.0);
  }
  SECTION("partition of unity at every lattice frequency") {
    double worst = 0.0;
    for (std::size_t f = 0; f < grid.size(); ++f) {
      double s = 0.0;
      for (std::size_t j = 0; j < p.n_bands(); ++j) s += p.band(j)[f];
      worst = std::max(worst, std::abs(s - 1.0));
    }
    CHECK(worst <= 1e-12);
  }
  SECTION("no mass just outside the exterior radius") {
    for (std::size_t j = 0; j < p.top(); ++j) CHECK(p.weight(j, std::exp2(static_cast<double>(j) + 1) + 1) == 0.0);
  }
  SECTION("dyadic formula below the top band") {
    for (int j = 0; j < 7; ++j)
      for (double r : {0.3, 1.0, 1.5, 3.0, 5.5, 12.0, 40.0, 90.0})
        CHECK(p.weight(static_cast<std::size_t>(j), r) == Approx(oracle_psi(j, r)).margin(1e-14));
  }
  SECTION("nonnegative and nested supports") {
    for (std::size_t j = 1; j < p.top(); ++j)
      for (double r = 0.0; r < 128.0; r += 0.25) {
        const double w = p.weight(j, r);
        CHECK(w >= 0.0);
        if (w > 0.0) CHECK((r > p.interior_radius(j) && r < p.exterior_radius(j)));
      }
  }
}

TEST_CASE("partition errors", "[lp]") {
  const Lattice grid = Lattice::torus(1, 64);
  CHECK_THROWS_AS(lp::build_partition(grid, 1), ConfigError);
  try {
    lp::build_partition(grid, 9);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("max feasible n_bands = 6") != std::string::npos);
  }
  const auto p = lp::build_partition(grid, 6);
  CHECK_THROWS_AS(lp::band_project(RealField(grid, 1.0), 6, p), IndexError);
}

TEST_CASE("band projection", "[lp]") {
  const Lattice grid = Lattice::torus(1, 128);
  const auto p = lp::build_partition(grid, 7);

  SECTION("exponentials are scaled by psi_j") {
    for (long n : {0L, 3L, 6L, 24L, 50L}) {
      const ComplexField u = ComplexField::sample(grid, [&](auto x) { return std::polar(1.0, n * x[0]); });
      for (std::size_t j = 0; j < p.n_bands(); ++j) {
        ComplexField expected = u;
        expected *= p.weight(j, std::abs(static_cast<double>(n)));
        CHECK(max_diff(lp::band_project(u, j, p), expected) <= 1e-12);
      }
    }
  }
  SECTION("constants live in band 0") {
    const RealField c(grid, 2.5);
    CHECK(max_diff(lp::band_project(c, 0, p), c) <= 1e-13);
    for (std::size_t j = 1; j < p.n_bands(); ++j) CHECK(lp::band_project(c, j, p).max_abs() <= 1e-13);
  }
  SECTION("spectrum inside the band-3 annulus") {
    // Oracle: the DFT support of u is {5..15}; psi_j vanishes there unless 2 <= j <= 4.
    Rng rng(11);
    RealField u(grid, 0.0);
    for (int k = 5; k <= 15; ++k) {
      const double a = rng.uniform(-1, 1), ph = rng.uniform(0, two_pi);
      u += cosine(grid, k, a, ph);
    }
    RealField sum(grid, 0.0);
    for (std::size_t j = 0; j < p.n_bands(); ++j) {
      const RealField b = lp::band_project(u, j, p);
      if (j >= 2 && j <= 4)
        sum += b;
      else
        CHECK(b.max_abs() <= 1e-13);
    }
    CHECK(max_diff(sum, u) <= 1e-13);
  }
}

TEST_CASE("band decomposition invariants", "[lp][property]") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = 1 + rng.below(2);
    const std::size_t n = dim == 1 ? 64 + 64 * rng.below(3) : 32;
    const Lattice grid = Lattice::torus(dim, n);
    const auto p = lp::build_partition(grid, lp::DyadicPartition::max_bands(grid));
    const RealField u = random_field(grid, rng, rng.uniform(0.1, 10.0));

    const auto series = lp::decompose(u, p);
    CHECK(max_diff(series.reconstruct(), u) <= 1e-12 * u.max_abs());

    const std::size_t j = rng.below(p.n_bands());
    for (std::size_t k = 0; k < p.n_bands(); ++k)
      if (k + 2 <= j || j + 2 <= k) CHECK(lp::band_project(series.bands[j], k, p).max_abs() <= 1e-12 * u.max_abs());

    const double tau = rng.uniform(-1.0, 3.0), c = rng.uniform(-5.0, 5.0);
    RealField cu = u;
    cu *= c;
    CHECK(lp::zygmund_norm(cu, tau, p) == Approx(std::abs(c) * lp::zygmund_norm(u, tau, p)).epsilon(1e-12));
  }
}

TEST_CASE("zygmund norm", "[lp]") {
  const Lattice grid = Lattice::torus(1, 256);
  const auto p = lp::build_partition(grid, 8);

  CHECK(lp::zygmund_norm(RealField(grid, 5.0), 1.7, p) == Approx(5.0).epsilon(1e-12));

  SECTION("lacunary series at its own exponent is bounded independently of K") {
    // Oracle: at x = 0 every band attains its sup, so the band sup is sum_k c_k psi_j(2^k).
    const double tau = 1.5;
    for (int K = 3; K <= 6; ++K) {
      RealField u(grid, 0.0);
      for (int k = 2; k <= K; ++k) u += cosine(grid, std::exp2(k), std::exp2(-k * tau));
      double oracle = 0.0;
      for (int j = 0; j < 8; ++j) {
        double s = 0.0;
        for (int k = 2; k <= K; ++k) s += std::exp2(-k * tau) * (j == 7 ? 0.0 : oracle_psi(j, std::exp2(k)));
        oracle = std::max(oracle, std::exp2(j * tau) * s);
      }
      CHECK(oracle == Approx(1.0).epsilon(1e-12)); // c1 = c2 = 1 for this profile
      CHECK(lp::zygmund_norm(u, tau, p) == Approx(oracle).epsilon(1e-10));
    }
  }
  SECTION("single cosines") {
    for (double k : {32.0, 24.0}) {
      double oracle = 0.0;
      for (int j = 0; j < 7; ++j) oracle = std::max(oracle, std::exp2(2.0 * j) * oracle_psi(j, k));
      CHECK(lp::zygmund_norm(cosine(grid, k), 2.0, p) == Approx(oracle).epsilon(1e-10));
    }
    CHECK(lp::zygmund_norm(cosine(grid, 32.0), 2.0, p) == Approx(1024.0).epsilon(1e-10));
  }
}

TEST_CASE("hoelder norm", "[lp]") {
  SECTION("zero and integer order") {
    const Lattice grid = Lattice::torus(1, 64);
    CHECK(lp::holder_norm(RealField(grid, 0.0), 0.5) == 0.0);
    CHECK_THROWS_AS(lp::holder_norm(RealField(grid, 1.0), 2.0), ConfigError);
  }
  SECTION("sin x against dense pair enumeration") {
    const double oracle = sine_holder_oracle();
    const Lattice grid = Lattice::torus(1, 64);
    const RealField u = RealField::sample(grid, [](auto x) { return std::sin(x[0]); });
    CHECK(lp::holder_norm(u, 0.5) == Approx(oracle).epsilon(0.05));
  }
  SECTION("sampled pairs on large grids are reproducible") {
    const Lattice grid = Lattice::torus(1, 512);
    const RealField u = RealField::sample(grid, [](auto x) { return std::sin(x[0]); });
    const double a = lp::holder_norm(u, 0.5), b = lp::holder_norm(u, 0.5);
    CHECK(a == b);
    CHECK(a == Approx(sine_holder_oracle()).epsilon(0.05));
  }
  SECTION("Weierstrass function of exponent 0.7") {
    // Below the exponent the seminorm settles; above it grows like h^{-(tau - 0.7)} under refinement.
    auto weierstrass = [](std::size_t n) {
      const Lattice grid = Lattice::torus(1, n);
      RealField u(grid, 0.0);
      for (int k = 0; std::exp2(k) < static_cast<double>(n) / 2; ++k) u += rw_test::cosine(grid, std::exp2(k), std::exp2(-0.7 * k));
      return u;
    };
    lp::HolderOptions opt;
    opt.dense_limit_per_axis = 4096;
    const RealField coarse = weierstrass(256), fine = weierstrass(1024);
    const double low_c = lp::holder_norm(coarse, 0.6, opt), low_f = lp::holder_norm(fine, 0.6, opt);
    const double high_c = lp::holder_norm(coarse, 0.8, opt), high_f = lp::holder_norm(fine, 0.8, opt);
    INFO("tau=0.6: " << low_c << " -> " << low_f << ", tau=0.8: " << high_c << " -> " << high_f);
    CHECK(std::isfinite(low_f));
    CHECK(low_f / low_c < 1.1);
    CHECK(high_f / high_c > 1.1);
    CHECK(high_f / high_c > low_f / low_c * 1.1);
  }
}

TEST_CASE("regularity estimate", "[lp]") {
  const Lattice grid = Lattice::torus(1, 256);
  const auto p = lp::build_partition(grid, 8);
  SECTION("lacunary synthesis") {
    RealField u(grid, 0.0);
    for (int k = 1; k <= 6; ++k) u += cosine(grid, std::exp2(k), std::exp2(-2.5 * k), 0.3 * k);
    const double t = lp::regularity_estimate(u, p);
    CHECK(t >= 2.35);
    CHECK(t <= 2.65);
  }
  SECTION("one cosine is not enough") {
    try {
      lp::regularity_estimate(cosine(grid, 8.0), p);
      FAIL("expected EstimationError");
    } catch (const EstimationError& e) {
      CHECK(std::string(e.what()).find("band masses") != std::string::npos);
    }
  }
  SECTION("white noise has no positive regularity") {
    Rng rng(99);
    CHECK(lp::regularity_estimate(random_field(grid, rng), p) <= 0.1);
  }
}
