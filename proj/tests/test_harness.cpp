#include "test_support.hpp"

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "roughwave/harness.hpp"

using namespace roughwave;
namespace hn = roughwave::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& tag) {
  const fs::path d = fs::temp_directory_path() / ("roughwave-test-" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// A report built from hand-made records, one per catalogue entry.
hn::VerificationReport synthetic_report() {
  hn::VerificationReport r;
  r.config_hash = hn::ExperimentConfig{}.hash();
  r.environment = hn::environment_fingerprint();
  int k = 0;
  for (const auto& [id, name] : hn::check_catalogue()) {
    const double v = 0.05 * ++k;
    r.checks.push_back(hn::detail::finish(id, {hn::at_most("value " + id, v, 1.0), hn::at_least("count " + id, 3.0, 1.0)}, "note, with \"quotes\""));
  }
  r.checks[4].parts.push_back(hn::at_most("overflowing", std::numeric_limits<double>::infinity(), 1.0));
  r.checks[4] = hn::detail::finish("5", r.checks[4].parts);
  r.comparisons.push_back({"closed form", 1e-13, 1e-10, true});
  r.timing["checks"] = 0.5;
  return r;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

} // namespace

TEST_CASE("experiment configuration", "[harness]") {
  const hn::ExperimentConfig def;
  REQUIRE_NOTHROW(def.validate());

  SECTION("text round trip keeps every field") {
    hn::ExperimentConfig c;
    c.set("tau", "3");
    c.set("seed", "11");
    c.set("s_grid", "0, 0.5, 1.5");
    c.set("output_dir", "/tmp/elsewhere");
    const auto back = hn::ExperimentConfig::parse(c.to_text());
    CHECK(back.to_text() == c.to_text());
    CHECK(back.hash() == c.hash());
    CHECK(back.s_grid == std::vector<double>{0.0, 0.5, 1.5});
    CHECK(back.get("tau") == "3");
  }

  SECTION("comments and blank lines are ignored") {
    const auto c = hn::ExperimentConfig::parse("# a run\n\n grid = 128 \nmodes=64 # fewer modes\n");
    CHECK(c.grid == 128);
    CHECK(c.modes == 64);
    CHECK(c.tau == def.tau);
  }

  SECTION("file round trip") {
    const fs::path d = scratch_dir("config");
    hn::ExperimentConfig c;
    c.set("amplitude", "0.1");
    c.save(d / "run.txt");
    CHECK(hn::ExperimentConfig::from_file(d / "run.txt").hash() == c.hash());
    CHECK_THROWS_AS(hn::ExperimentConfig::from_file(d / "missing.txt"), IoError);
  }

  SECTION("hash") {
    hn::ExperimentConfig c;
    CHECK(c.hash() == def.hash());
    CHECK(c.hash().size() == 16);
    c.output_dir = "somewhere/else";
    CHECK(c.hash() == def.hash());
    c.seed = 8;
    CHECK(c.hash() != def.hash());
  }

  SECTION("errors name the offending key") {
    hn::ExperimentConfig c;
    CHECK_THROWS_AS(c.set("no_such_key", "1"), ConfigError);
    CHECK_THROWS_WITH(c.set("grid", "many"), Catch::Matchers::ContainsSubstring("grid"));
    c.tau = 0.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("tau > 1"));
    c = def;
    c.grid = 200;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = def;
    c.modes = def.grid;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = def;
    c.patch_stride = 8;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = def;
    c.patch_points = 32;
    CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("patch_points"));
    c = def;
    c.s_grid = {1.0, 0.5};
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  SECTION("help lists every key with its default") {
    const std::string h = hn::help_text();
    for (const auto& f : hn::detail::fields()) CHECK(h.find(f.key) != std::string::npos);
    CHECK(h.find("[256]") != std::string::npos);
  }

  SECTION("probe order carries the dimension shift") { CHECK(def.probe_order() == Catch::Approx(1.9)); }
}

TEST_CASE("verification report formats", "[harness]") {
  const auto r = synthetic_report();
  REQUIRE(r.checks.size() == hn::check_catalogue().size());
  CHECK_FALSE(r.all_pass());
  CHECK(r.check("5").measured == std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(r.check("99"), IndexError);

  SECTION("a record passes only when every part does") {
    CHECK(r.check("1").pass);
    CHECK_FALSE(r.check("5").pass);
    CHECK(r.check("5").relation == "<=");
    CHECK(hn::detail::finish("1", {}).pass == false);
  }

  SECTION("json round trip") {
    const auto back = hn::VerificationReport::from_json(r.to_json());
    CHECK(back.to_json().dump() == r.to_json().dump());
    CHECK(r.to_json()["checks"][4]["measured"] == "inf");
    CHECK_FALSE(r.to_json(false).contains("timing"));
  }

  SECTION("files") {
    const fs::path d = scratch_dir("report");
    const auto json_file = hn::emit_report(r, "json", d);
    const auto csv_file = hn::emit_report(r, "csv", d);
    const auto text_file = hn::emit_report(r, "text", d);
    CHECK_THROWS_AS(hn::emit_report(r, "xml", d), ConfigError);

    CHECK(hn::load_report(json_file).to_json(false).dump() == r.to_json(false).dump());

    const std::string csv = slurp(csv_file);
    CHECK(count_lines(csv) == r.checks.size() + 1);
    CHECK(csv.rfind("id,name,anchor,measured,relation,threshold,pass\n", 0) == 0);

    const std::string text = slurp(text_file);
    CHECK(text.find("l^{2/3} ≤ C λ_j²") != std::string::npos);
    CHECK(text.find("FAIL 5") != std::string::npos);
    CHECK(text.find("PASS adiabatic") != std::string::npos);
    CHECK(text.find("overall: FAIL") != std::string::npos);
  }
}

TEST_CASE("standalone checks", "[harness]") {
  const hn::ExperimentConfig c;
  CHECK(hn::check_partition(c).pass);
  CHECK(hn::check_flat_spectrum(c).pass);
  const auto [six, seven] = hn::check_one_particle(c);
  CHECK(six.pass);
  CHECK(seven.pass);
  CHECK(six.parts.size() == 4);
  CHECK(seven.parts.size() == 3);

  std::vector<hn::Measurement> parts;
  hn::covariance_parts(parts);
  REQUIRE(parts.size() == 4);
  for (const auto& m : parts) CHECK(m.pass);
}

TEST_CASE("pipeline stage errors", "[harness]") {
  const fs::path d = scratch_dir("blocked");
  std::ofstream(d / "file") << "not a directory\n";
  hn::ExperimentConfig c;
  c.output_dir = (d / "file" / "out").string();
  try {
    hn::run_pipeline(c);
    FAIL("expected an IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).rfind("stage gen-metric: ", 0) == 0);
  }
  c.tau = 0.9;
  CHECK_THROWS_AS(hn::run_pipeline(c), ConfigError);
}

TEST_CASE("pipeline resume", "[harness][slow]") {
  const fs::path d = scratch_dir("resume");
  hn::ExperimentConfig c;
  c.grid = 128;
  c.modes = 64;
  c.output_dir = d.string();
  std::vector<std::string> log;
  hn::PipelineOptions opt;
  opt.log = [&](const std::string& s) { log.push_back(s); };

  const auto first = hn::run_pipeline(c, opt);
  CHECK(fs::exists(d / "manifest.json"));
  CHECK(fs::exists(d / "metric" / "metric.json"));
  CHECK(fs::exists(d / "spectrum" / "spectrum.json"));
  const auto loaded = [&] { return std::count_if(log.begin(), log.end(), [](const std::string& s) { return s.find("loaded") != std::string::npos; }); };
  CHECK(loaded() == 0);

  opt.resume = true;
  const auto second = hn::run_pipeline(c, opt);
  CHECK(loaded() == 2);
  CHECK(second.to_json(false).dump() == first.to_json(false).dump());

  // A different seed changes the hash, so nothing is reused.
  log.clear();
  c.seed = 8;
  hn::run_pipeline(c, opt);
  CHECK(loaded() == 0);
}

TEST_CASE("pipeline at the acceptance settings", "[harness][slow]") {
  // Weyl growth at d = 2 is the one record expected to fail on the 32^2 grid: at J = 200 the
  // discrete symbol already bends away from the continuum law.
  auto expect = [](const hn::VerificationReport& r) {
    REQUIRE(r.checks.size() == hn::check_catalogue().size());
    for (const auto& c : r.checks) {
      INFO(hn::text_line(c));
      if (c.id != "5") CHECK(c.pass);
    }
    const auto& weyl = r.check("5");
    CHECK_FALSE(weyl.pass);
    for (const auto& m : weyl.parts) CHECK(m.pass == (m.label.find("d=1") != std::string::npos));
    for (const auto& cmp : r.comparisons) {
      INFO(cmp.name);
      CHECK(cmp.pass);
    }
    CHECK(r.comparisons.size() == 4);
  };

  SECTION("rough metric") {
    const fs::path d = scratch_dir("rough");
    hn::ExperimentConfig c;
    c.output_dir = d.string();
    const auto r = hn::run_pipeline(c);
    expect(r);
    for (const char* f : {"report.json", "report.csv", "report.txt", "config.txt", "kernels/omega_G_row.csv", "probes/adiabatic.csv",
                          "probes/flags_rough-null-pair.csv"})
      CHECK(fs::exists(d / f));
    CHECK(hn::load_report(d / "report.json").to_json(false).dump() == r.to_json(false).dump());
  }

  SECTION("flat metric") {
    hn::ExperimentConfig c;
    c.amplitude = 0.0;
    c.output_dir = scratch_dir("flat").string();
    expect(hn::run_pipeline(c));
  }
}
