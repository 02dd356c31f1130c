#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <memory>

#include "roughwave/roughwave.hpp"

namespace rw = roughwave;
namespace hn = roughwave::harness;
namespace fs = std::filesystem;

namespace {

std::vector<double> numbers(const std::string& text, const std::string& what) {
  std::vector<double> out;
  for (const auto& part : rw::io::detail::split(text, ',')) out.push_back(hn::detail::to_double(what, hn::detail::trim(part)));
  return out;
}

std::string dashed(std::string key) {
  for (auto& c : key)
    if (c == '_') c = '-';
  return key;
}

// --config plus one flag per configuration key; flags win over the file.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key = value configuration file")->check(CLI::ExistingFile);
    const hn::ExperimentConfig def;
    for (const auto& f : hn::detail::fields())
      app->add_option("--" + dashed(f.key), values[f.key], f.help)->default_str(f.get(def));
  }

  hn::ExperimentConfig build(const CLI::App* app) const {
    hn::ExperimentConfig c = file.empty() ? hn::ExperimentConfig{} : hn::ExperimentConfig::from_file(file);
    for (const auto& [key, value] : values)
      if (app->count("--" + dashed(key)) > 0) c.set(key, value);
    return c;
  }
};

struct KernelFlags {
  std::string spectrum;
  std::string kind = "omega_G";
  std::size_t modes = 128;
  double mollify = 0.0;

  void attach(CLI::App* app, double default_mollifier) {
    mollify = default_mollifier;
    app->add_option("--spectrum", spectrum, "spectrum directory written by 'roughwave spectrum --save-modes'")->required();
    app->add_option("--kind,--kernel", kind, "omega_G, omega_A, omega_plus or K_G")->capture_default_str();
    app->add_option("--modes", modes, "mode truncation J (lowered to a complete degenerate cluster)")->capture_default_str();
    app->add_option("--mollify", mollify, "Gaussian mode mollifier width sigma_J, 0 for sharp truncation")->capture_default_str();
  }

  rw::state::TwoPointKernel build() const {
    auto b = std::make_shared<rw::spectral::ModeBasis>(rw::spectral::load(spectrum));
    if (modes > b->size()) throw rw::ConfigError("kernel: --modes " + std::to_string(modes) + " exceeds the " + std::to_string(b->size()) + " stored modes");
    const std::size_t j = rw::spectral::complete_cluster_count(*b, modes);
    return rw::state::TwoPointKernel(rw::state::parse_kind(kind), b, j, mollify);
  }
};

void report_kernel(const rw::state::TwoPointKernel& k) {
  std::cout << "kernel " << rw::state::kind_name(k.kind()) << ", J = " << k.modes() << ", mollifier sigma_J = " << k.mollifier() << '\n';
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"roughwave: quantum fields on rough ultrastatic spacetimes"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");
  const hn::ExperimentConfig def;

  // gen-metric
  auto* gen = app.add_subcommand("gen-metric", "synthesize a rough spatial metric");
  std::size_t gen_dim = def.dim, gen_grid = def.grid;
  double gen_tau = def.tau, gen_amp = def.amplitude;
  std::uint64_t gen_seed = def.seed;
  std::string gen_out = "metric";
  gen->add_option("--dim", gen_dim, "spatial dimension (1, 2 or 3)")->capture_default_str();
  gen->add_option("--tau", gen_tau, "Hoelder-Zygmund regularity, must exceed 1")->capture_default_str();
  gen->add_option("--amp", gen_amp, "perturbation amplitude, 0 gives the flat metric")->capture_default_str();
  gen->add_option("--seed", gen_seed, "random seed")->capture_default_str();
  gen->add_option("--grid", gen_grid, "grid points per axis")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();

  // spectrum
  auto* spec = app.add_subcommand("spectrum", "Laplace-Beltrami eigenpairs of a metric");
  std::string spec_metric, spec_out = "spectrum";
  std::size_t spec_modes = def.modes + 8;
  double spec_mass2 = def.mass2;
  bool spec_save_modes = false;
  spec->add_option("--metric", spec_metric, "metric directory")->required()->check(CLI::ExistingDirectory);
  spec->add_option("--modes", spec_modes, "number of eigenpairs")->capture_default_str();
  spec->add_option("--mass2", spec_mass2, "Klein-Gordon mass squared")->capture_default_str();
  spec->add_option("--out", spec_out, "output directory")->capture_default_str();
  spec->add_flag("--save-modes", spec_save_modes, "also write one CSV per eigenvector (needed by kernel, sobolev and probe)");

  // smooth-symbol
  auto* smooth = app.add_subcommand("smooth-symbol", "split the Klein-Gordon symbol into a smooth part and a remainder");
  std::string sm_metric, sm_out = "symbol";
  double sm_gamma = def.gamma, sm_mass2 = def.mass2;
  std::size_t sm_bands = 0;
  smooth->add_option("--metric", sm_metric, "metric directory")->required()->check(CLI::ExistingDirectory);
  smooth->add_option("--gamma", sm_gamma, "smoothing exponent in (0, 1)")->capture_default_str();
  smooth->add_option("--bands", sm_bands, "dyadic bands of the frequency partition, 0 for the most the grid supports")->capture_default_str();
  smooth->add_option("--mass2", sm_mass2, "Klein-Gordon mass squared")->capture_default_str();
  smooth->add_option("--out", sm_out, "output directory")->capture_default_str();

  // kernel
  auto* kern = app.add_subcommand("kernel", "export a slice of a two-point kernel over (x, y)");
  KernelFlags kern_k;
  kern_k.attach(kern, def.mollifier);
  std::string kern_slice = "0,0", kern_out = "kernel_slice.csv";
  kern->add_option("--slice", kern_slice, "times t,s of the slice")->capture_default_str();
  kern->add_option("--out", kern_out, "output CSV")->capture_default_str();

  // sobolev
  auto* sob = app.add_subcommand("sobolev", "mixed Sobolev norm of a time-windowed kernel, mode by mode");
  KernelFlags sob_k;
  sob_k.attach(sob, 0.0);
  double sob_s = -0.6, sob_window = 1.0;
  std::string sob_out = "sobolev.json";
  sob->add_option("--s", sob_s, "Sobolev order")->capture_default_str();
  sob->add_option("--window", sob_window, "support radius of the time window")->capture_default_str();
  sob->add_option("--out", sob_out, "output JSON; the mode table goes next to it as CSV")->capture_default_str();

  // probe
  auto* probe = app.add_subcommand("probe", "wavefront scan of a kernel at base pairs (t, x; s, y)");
  KernelFlags pr_k;
  pr_k.attach(probe, 0.0);
  double pr_s = def.probe_order(), pr_angle = 0.0;
  std::string pr_points = "0,0,0,0", pr_out = "probe";
  int pr_dirs = def.direction_radius;
  std::size_t pr_patch = def.patch_points, pr_stride = def.patch_stride;
  probe->add_option("--s", pr_s, "Sobolev order")->capture_default_str();
  probe->add_option("--points", pr_points, "base pairs t,x,s,y separated by ';' (x, y are grid indices)")->capture_default_str();
  probe->add_option("--dirs", pr_dirs, "radius of the integer cube whose surface gives the directions")->capture_default_str();
  probe->add_option("--angle", pr_angle, "cone half-angle in radians, 0 for the direction-set resolution")->capture_default_str();
  probe->add_option("--patch-points", pr_patch, "patch points per axis")->capture_default_str();
  probe->add_option("--stride", pr_stride, "grid steps between patch samples")->capture_default_str();
  probe->add_option("--out", pr_out, "output directory")->capture_default_str();

  // trace
  auto* trace = app.add_subcommand("trace", "integrate a null bicharacteristic of a smoothed symbol");
  std::string tr_symbol, tr_stem = "sharp", tr_start = "0,0;4", tr_out = "trace.csv";
  double tr_span = 1.0, tr_dt = 0.0;
  trace->add_option("--symbol", tr_symbol, "directory written by smooth-symbol")->required()->check(CLI::ExistingDirectory);
  trace->add_option("--stem", tr_stem, "which saved symbol to flow (sharp, flat or symbol)")->capture_default_str();
  trace->add_option("--start", tr_start, "t,x...;xi... start point and spatial covector; xi_0 is solved for a null start")->capture_default_str();
  trace->add_option("--span", tr_span, "flow parameter span")->capture_default_str();
  trace->add_option("--dt", tr_dt, "step, 0 for the automatic step rule")->capture_default_str();
  trace->add_option("--out", tr_out, "output CSV")->capture_default_str();

  // verify-all
  auto* verify = app.add_subcommand("verify-all", "run the full verification pipeline");
  ConfigFlags verify_cfg;
  verify_cfg.attach(verify);
  bool verify_resume = false, verify_quiet = false;
  verify->add_flag("--resume", verify_resume, "reuse the stored metric and spectrum when the config hash matches");
  verify->add_flag("--quiet", verify_quiet, "no stage log on stderr");

  // report
  auto* rep = app.add_subcommand("report", "render a stored report");
  std::string rep_in, rep_format = "text", rep_out;
  rep->add_option("--in", rep_in, "report.json written by verify-all")->required()->check(CLI::ExistingFile);
  rep->add_option("--format", rep_format, "text, json or csv")->check(CLI::IsMember({"text", "json", "csv"}))->capture_default_str();
  rep->add_option("--out", rep_out, "output directory; standard output when omitted");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto m = hn::synthesize(gen_dim, gen_grid, gen_tau, gen_amp, gen_seed);
      rw::metric::save(m, gen_out);
      std::cout << "metric d = " << gen_dim << ", N = " << gen_grid << ", tau = " << gen_tau << ", amplitude " << gen_amp << ", seed " << gen_seed
                << " -> " << gen_out << '\n';
    } else if (spec->parsed()) {
      const auto m = rw::metric::load(spec_metric);
      const auto b = rw::spectral::eigenpairs(m, spec_mass2, spec_modes);
      rw::spectral::save(b, spec_out, spec_save_modes);
      std::cout << b.size() << " eigenpairs, lambda in [" << b.lambda(0) << ", " << b.lambda(b.size() - 1) << "] -> " << spec_out << '\n';
    } else if (smooth->parsed()) {
      const auto m = rw::metric::load(sm_metric);
      const auto p = rw::symbolcalc::kg_symbol(m, sm_mass2);
      const rw::Lattice st = rw::Lattice::torus(m.grid.dim() + 1, m.grid.shape[0]);
      const std::size_t bands = sm_bands == 0 ? rw::lp::DyadicPartition::max_bands(st) : sm_bands;
      const auto split = rw::symbolcalc::smooth_symbol(p, sm_gamma, rw::lp::build_partition(st, bands));
      rw::symbolcalc::save(p, sm_out, "symbol");
      rw::symbolcalc::save(split.sharp, sm_out, "sharp");
      rw::symbolcalc::save(split.flat, sm_out, "flat");
      std::cout << "symbol split with gamma = " << sm_gamma << " over " << bands << " bands: " << split.sharp.terms.size() << " smooth terms, "
                << split.flat.terms.size() << " remainder terms -> " << sm_out << '\n';
    } else if (kern->parsed()) {
      const auto k = kern_k.build();
      const auto ts = numbers(kern_slice, "slice");
      if (ts.size() != 2) throw rw::ConfigError("kernel: --slice expects t,s");
      if (k.basis().grid.dim() != 1) throw rw::ConfigError("kernel: slices are written for d = 1 only");
      auto os = rw::io::open_out(kern_out);
      rw::state::write_slice(os, k, ts[0], ts[1]);
      report_kernel(k);
      std::cout << "slice t = " << ts[0] << ", s = " << ts[1] << " -> " << kern_out << '\n';
    } else if (sob->parsed()) {
      const auto k = sob_k.build();
      rw::microlocal::TimeWindow tw;
      tw.bump.radius = sob_window;
      const auto r = rw::microlocal::mixed_sobolev_norm(k, tw, sob_s);
      auto j = rw::microlocal::to_json(r);
      j["kernel"] = rw::state::kind_name(k.kind());
      j["mollifier"] = k.mollifier();
      j["window_radius"] = sob_window;
      rw::io::write_json(sob_out, j);
      fs::path table = sob_out;
      table.replace_extension(".csv");
      auto os = rw::io::open_out(table);
      rw::microlocal::write_modes_csv(os, r);
      report_kernel(k);
      std::cout << "s = " << sob_s << ": " << r.verdict << ", tail exponent " << r.tail_exponent << " (threshold " << r.threshold << ") -> " << sob_out
                << '\n';
    } else if (probe->parsed()) {
      const auto k = pr_k.build();
      if (k.basis().grid.dim() != 1) throw rw::ConfigError("probe: kernel patches are built for d = 1 only");
      const rw::microlocal::PatchSpec ps{pr_patch, pr_stride, 4.0};
      rw::microlocal::ProbeConfig pc;
      pc.direction_radius = pr_dirs;
      pc.scan_angle = pr_angle;
      pc.skip_closure = true;
      fs::create_directories(pr_out);
      rw::io::json scans = rw::io::json::array();
      std::size_t index = 0, total_flags = 0;
      report_kernel(k);
      for (const auto& item : rw::io::detail::split(pr_points, ';')) {
        const auto v = numbers(item, "points");
        if (v.size() != 4 || v[1] < 0 || v[3] < 0) throw rw::ConfigError("probe: each base pair needs t,x,s,y with grid indices x, y >= 0");
        const std::size_t n = k.basis().grid.shape[0];
        const rw::microlocal::PairPoint base{v[0], static_cast<std::size_t>(v[1]) % n, v[2], static_cast<std::size_t>(v[3]) % n};
        const rw::microlocal::SpectralPatch patch(rw::microlocal::sample_kernel_patch(k, base, ps), ps, pc);
        const auto scan = rw::microlocal::wavefront_scan(patch, pr_s);
        if (scan.all.empty())
          std::cerr << "warning: no direction resolved at base " << index << "; the patch has too few dyadic bands below the closure band\n";
        std::vector<rw::microlocal::ProbeReport> cells;
        rw::io::json flagged = rw::io::json::array();
        for (const auto& c : scan.all) {
          cells.push_back({c.direction, patch.scan_angle(), pr_s, c.fit});
          if (c.fit.singular) flagged.push_back(rw::microlocal::to_json(cells.back()));
        }
        auto os = rw::io::open_out(fs::path(pr_out) / ("shells_" + std::to_string(index) + ".csv"));
        rw::microlocal::write_shells_csv(os, cells);
        scans.push_back({{"base", {base.t, base.x, base.s, base.y}}, {"resolution", scan.resolution}, {"cells", scan.all.size()},
                         {"fit_shells", {patch.first_shell(), patch.last_shell()}}, {"flagged", flagged}});
        std::cout << "base " << index << " (t = " << base.t << ", x = " << base.x << "; s = " << base.s << ", y = " << base.y << "): "
                  << scan.flagged.size() << " of " << scan.all.size() << " directions singular at order " << pr_s << '\n';
        total_flags += scan.flagged.size();
        ++index;
      }
      rw::io::write_json(fs::path(pr_out) / "probe.json", {{"kernel", rw::state::kind_name(k.kind())}, {"s", pr_s}, {"scans", scans}});
      std::cout << total_flags << " flagged directions -> " << pr_out << '\n';
    } else if (trace->parsed()) {
      const auto sym = rw::symbolcalc::load(tr_symbol, tr_stem);
      const rw::bichar::FlowSymbol flow(sym);
      const auto halves = rw::io::detail::split(tr_start, ';');
      if (halves.size() != 2) throw rw::ConfigError("trace: --start expects t,x...;xi...");
      const auto start = rw::bichar::null_covector(flow, numbers(halves[0], "start"), numbers(halves[1], "start"));
      const auto c = rw::bichar::hamiltonian_flow(flow, start, tr_span, tr_dt);
      for (const auto& w : c.warnings) std::cerr << "warning: " << w << '\n';
      rw::bichar::write_csv(fs::path(tr_out), c);
      std::cout << c.points.size() << " points, step " << c.step << ", max drift " << c.max_drift << " -> " << tr_out << '\n';
    } else if (verify->parsed()) {
      const auto cfg = verify_cfg.build(verify);
      hn::PipelineOptions opt;
      opt.resume = verify_resume;
      if (!verify_quiet) opt.log = [](const std::string& s) { std::cerr << s << '\n'; };
      const auto r = hn::run_pipeline(cfg, opt);
      hn::write_text(std::cout, r);
      std::cout << "reports in " << cfg.output_dir << '\n';
      return r.all_pass() ? 0 : 1;
    } else if (rep->parsed()) {
      const auto r = hn::load_report(rep_in);
      if (!rep_out.empty()) {
        std::cout << hn::emit_report(r, rep_format, rep_out).string() << '\n';
      } else if (rep_format == "json") {
        std::cout << r.to_json().dump(2) << '\n';
      } else if (rep_format == "csv") {
        hn::write_csv(std::cout, r);
      } else {
        hn::write_text(std::cout, r);
      }
      return r.all_pass() ? 0 : 1;
    }
  } catch (const rw::Error& e) {
    std::cerr << "roughwave: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
