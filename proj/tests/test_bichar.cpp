#include "test_support.hpp"

#include <sstream>

#include "roughwave/bichar.hpp"

using namespace roughwave;
using namespace rw_test;
using Catch::Approx;
namespace bc = roughwave::bichar;

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

symbolcalc::Symbol sharp_symbol(const metric::RoughMetric& m) {
  const Lattice st = Lattice::torus(2, m.grid.shape[0]);
  return symbolcalc::smooth_symbol(symbolcalc::kg_symbol(m, 1.0), 0.8, lp::build_partition(st, lp::DyadicPartition::max_bands(st))).sharp;
}

bc::PhasePoint null_start(const bc::FlowSymbol& p, double t, double x, double xi) { return bc::null_covector(p, {t, x}, {xi}); }

double distance(const bc::PhasePoint& a, const bc::PhasePoint& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.x.size(); ++k) s += std::pow(a.x[k] - b.x[k], 2) + std::pow(a.xi[k] - b.xi[k], 2);
  return std::sqrt(s);
}

} // namespace

TEST_CASE("flat flows are straight null lines", "[bichar]") {
  const bc::FlowSymbol p(symbolcalc::kg_symbol(metric::flat(1, 64), 1.0));
  const bc::PhasePoint start{{0.3, 1.0}, {2.0, -2.0}};
  const auto c = bc::hamiltonian_flow(p, start, 1.5, 0.01);
  REQUIRE(c.points.size() == 151);
  for (std::size_t k = 0; k < c.points.size(); ++k) {
    const double tau = c.times[k];
    const auto& z = c.points[k];
    CHECK(std::abs(z.x[0] - (0.3 - 4.0 * tau)) <= 1e-10);
    CHECK(std::abs(z.x[1] - (1.0 - 4.0 * tau)) <= 1e-10);
    CHECK(std::abs(z.xi[0] - 2.0) <= 1e-10);
    CHECK(std::abs(z.xi[1] + 2.0) <= 1e-10);
  }
  CHECK(c.max_drift <= 1e-10);

  // The flat step rule: speed |(-2 xi_0, 2 xi)| at the start covector.
  CHECK(bc::step_rule(p, start) == Approx(0.1 * (two_pi / 64) / (2.0 * std::sqrt(8.0))));
}

TEST_CASE("flow on a rough metric", "[bichar]") {
  const auto m = rough1(256, 2.5, 7);
  const bc::FlowSymbol p(sharp_symbol(m));
  const auto start = null_start(p, 0.0, 0.5, 4.0);
  REQUIRE(p.is_characteristic(start, 1e-12));

  SECTION("conservation of the symbol") {
    const auto c = bc::hamiltonian_flow(p, start, 10.0);
    const double r2 = start.xi[0] * start.xi[0] + start.xi[1] * start.xi[1];
    CHECK(c.max_drift <= 1e-8 * r2);
    CHECK(c.warnings.empty());
    // xi_0 is conserved exactly; t runs backwards at close to -2 xi_0 (band weights perturb it).
    CHECK(c.back().xi[0] == start.xi[0]);
    CHECK(c.back().x[0] == Approx(-2.0 * start.xi[0] * 10.0).epsilon(1e-3));
    for (std::size_t k = 1; k < c.points.size(); ++k) CHECK(c.points[k].x[0] < c.points[k - 1].x[0]);
    // The spatial covector is not constant: the metric bends the ray.
    double lo = start.xi[1], hi = start.xi[1];
    for (const auto& z : c.points) {
      lo = std::min(lo, z.xi[1]);
      hi = std::max(hi, z.xi[1]);
    }
    CHECK(hi - lo >= 0.05 * start.xi[1]);
  }

  SECTION("fourth-order convergence") {
    const double dt = 8.0 * bc::step_rule(p, start), span = 2.0;
    const auto ref = bc::hamiltonian_flow(p, start, span, dt / 32.0).back();
    const double e1 = distance(bc::hamiltonian_flow(p, start, span, dt).back(), ref);
    const double e2 = distance(bc::hamiltonian_flow(p, start, span, dt / 2.0).back(), ref);
    CHECK(e1 / e2 >= 12.0);
  }

  SECTION("time reversal") {
    const auto fwd = bc::hamiltonian_flow(p, start, 5.0);
    const auto back = bc::hamiltonian_flow(p, fwd.back(), -5.0);
    CHECK(distance(back.back(), start) <= 1e-7);
  }

  SECTION("homogeneity of the unsmoothed symbol") {
    // xi -> 2 xi with tau -> tau / 2 traces the same curve with doubled covectors.
    const bc::FlowSymbol raw(symbolcalc::kg_symbol(m, 1.0));
    const auto s1 = null_start(raw, 0.0, 2.0, 1.0);
    bc::PhasePoint s2 = s1;
    for (auto& v : s2.xi) v *= 2.0;
    const auto a = bc::hamiltonian_flow(raw, s1, 3.0, 1e-3), b = bc::hamiltonian_flow(raw, s2, 1.5, 5e-4);
    REQUIRE(a.points.size() == b.points.size());
    for (std::size_t k = 0; k < a.points.size(); k += 100) {
      CHECK(std::abs(a.points[k].x[1] - b.points[k].x[1]) <= 1e-10);
      CHECK(std::abs(2.0 * a.points[k].xi[1] - b.points[k].xi[1]) <= 1e-10);
    }
  }

  SECTION("errors and warnings") {
    CHECK_THROWS_AS(bc::hamiltonian_flow(p, {{0.0, 0.0}, {0.0, 0.0}}, 1.0), NumericError);
    CHECK_THROWS_AS(bc::hamiltonian_flow(p, {{0.0}, {1.0}}, 1.0), ConfigError);
    const bc::FlowSymbol coarse(symbolcalc::kg_symbol(metric::flat(1, 16), 1.0));
    const auto far = bc::hamiltonian_flow(coarse, {{0.0, 0.0}, {20.0, 20.0}}, 0.01);
    CHECK_FALSE(far.warnings.empty());
  }
}

TEST_CASE("bicharacteristic relations", "[bichar]") {
  const bc::FlowSymbol flat(symbolcalc::kg_symbol(metric::flat(1, 64), 1.0));
  const bc::PhasePoint a{{0.0, 0.0}, {1.0, 1.0}};

  CHECK(bc::parallel_related(flat, a, a, 1e-9));
  // t' = -2, x' = 2: the line x = -t.
  const bc::PhasePoint along{{-0.8, 0.8}, {3.0, 3.0}};
  CHECK(bc::parallel_related(flat, a, along, 1e-9));
  CHECK(bc::parallel_related(flat, along, a, 1e-9));
  const bc::PhasePoint ahead{{0.9, -0.9}, {1.0, 1.0}};
  CHECK(bc::parallel_related(flat, a, ahead, 1e-9));
  // A parallel null line shifted in x never meets the first.
  const bc::PhasePoint shifted{{-0.8, 1.3}, {1.0, 1.0}};
  CHECK_FALSE(bc::parallel_related(flat, a, shifted, 1e-3));
  // Same spacetime point, other null direction.
  CHECK_FALSE(bc::parallel_related(flat, a, {{0.0, 0.0}, {1.0, -1.0}}, 1e-3));
  CHECK_THROWS_AS(bc::parallel_related(flat, a, {{0.0, 0.0}, {1.0, 0.0}}, 1e-3), DomainError);

  CHECK(bc::c_plus_member(flat, a, a));
  CHECK_FALSE(bc::c_plus_member(flat, {{0.0, 0.0}, {-1.0, 1.0}}, {{0.0, 0.0}, {-1.0, 1.0}}));
  CHECK_FALSE(bc::c_plus_member(flat, a, {{0.0, 0.0}, {2.0, 1.0}}));

  SECTION("rough metric") {
    const bc::FlowSymbol p(sharp_symbol(rough1(256, 2.5, 7)));
    const auto start = null_start(p, 0.0, 1.0, 4.0);
    const auto c = bc::hamiltonian_flow(p, start, 0.3);
    const auto& end = c.back();
    CHECK(bc::c_plus_member(p, start, end, 1e-6));
    CHECK(bc::c_plus_member(p, end, start, 1e-6));
    // Pushing the endpoint off the curve in x breaks the relation.
    bc::PhasePoint off = null_start(p, end.x[0], end.x[1] + 0.05, 4.0);
    CHECK_FALSE(bc::parallel_related(p, start, off, 1e-3));
  }
}

TEST_CASE("curve export", "[bichar]") {
  const bc::FlowSymbol p(symbolcalc::kg_symbol(metric::flat(1, 64), 1.0));
  const auto c = bc::hamiltonian_flow(p, {{0.0, 0.0}, {1.0, 1.0}}, 0.1, 0.05);
  std::ostringstream os;
  bc::write_csv(os, c);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "tau,t,x1,xi0,xi1,drift");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("propagation along bicharacteristics", "[bichar][slow]") {
  const microlocal::PatchSpec spec;

  SECTION("a finite mode sum is smooth everywhere") {
    const auto m = metric::flat(1, 256);
    auto b = std::make_shared<spectral::ModeBasis>(spectral::eigenpairs(m, 1.0, 9));
    const state::TwoPointKernel k(state::KernelKind::omega_G, b, 9);
    const bc::FlowSymbol p(symbolcalc::kg_symbol(m, 1.0));
    const auto curve = bc::hamiltonian_flow(p, {{0.0, 0.0}, {4.0, -4.0}}, 0.1);
    const std::vector<double> partner{-4.0, 4.0};
    const auto r = bc::propagation_check(bc::kernel_sampler(k, 0.0, 0, spec), curve, partner, 1.0, spec);
    CHECK(r.singular_fraction == 0.0);
    CHECK(r.constant);
  }

  SECTION("flat two-point function") {
    const auto m = metric::flat(1, 256);
    auto b = std::make_shared<spectral::ModeBasis>(spectral::eigenpairs(m, 1.0, 136));
    const state::TwoPointKernel k(state::KernelKind::omega_G, b, spectral::complete_cluster_count(*b, 128));
    const bc::FlowSymbol p(symbolcalc::kg_symbol(m, 1.0));
    const auto curve = bc::hamiltonian_flow(p, {{0.0, 0.0}, {4.0, -4.0}}, 0.1);
    const std::vector<double> partner{-4.0, 4.0};
    const auto r = bc::propagation_check(bc::kernel_sampler(k, 0.0, 0, spec), curve, partner, 1.0, spec);
    CHECK(r.singular_fraction == 1.0);
    CHECK(r.constant);
    // Pairing the curve with the wrong partner covector gives a direction off the wavefront set.
    const std::vector<double> wrong{-4.0, -4.0};
    const auto off = bc::propagation_check(bc::kernel_sampler(k, 0.0, 0, spec), curve, wrong, 1.0, spec);
    CHECK(off.singular_fraction == 0.0);
    for (std::size_t i = 0; i < r.slopes.size(); ++i) CHECK(r.slopes[i] > off.slopes[i] + 2.0);
  }

  SECTION("rough two-point function") {
    const auto m = rough1(256, 2.5, 7);
    auto b = std::make_shared<spectral::ModeBasis>(spectral::eigenpairs(m, 1.0, 136));
    const state::TwoPointKernel k(state::KernelKind::omega_G, b, spectral::complete_cluster_count(*b, 128));
    const bc::FlowSymbol p(sharp_symbol(m));
    const auto start = null_start(p, 0.0, 0.0, -4.0);
    const auto curve = bc::hamiltonian_flow(p, start, 0.1);
    const std::vector<double> partner{-start.xi[0], -start.xi[1]};
    const auto r = bc::propagation_check(bc::kernel_sampler(k, 0.0, 0, spec), curve, partner, 1.9, spec);
    CHECK(r.singular_fraction >= 0.8);
  }
}
