#include "harness.hpp"

#include "typeii/modulation_ode.hpp"
#include "typeii/profile_builder.hpp"
#include "typeii/renormalized_flow.hpp"
#include "typeii/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"

namespace typeii::harness {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

json to_json(const Check& c) {
  json j;
  j["name"] = c.name;
  j["value"] = c.value;
  // JSON has no infinity, so open ends are written as null.
  j["lo"] = std::isfinite(c.lo) ? json(c.lo) : json(nullptr);
  j["hi"] = std::isfinite(c.hi) ? json(c.hi) : json(nullptr);
  j["pass"] = c.pass;
  j["margin"] = c.margin;
  return j;
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

/// Writes summary.json: the command, its checks and command-specific fields.
void write_summary(const fs::path& dir, Experiment cmd, const std::vector<Check>& checks,
                   json extra) {
  json j;
  j["command"] = experiment_name(cmd);
  j["checks"] = json::array();
  for (const auto& c : checks) j["checks"].push_back(to_json(c));
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_json(j, dir / "summary.json");
}

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : os_(path) {
    if (!os_) throw std::runtime_error("cannot write " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
    os_ << '\n';
  }
  void row(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      os_ << (i ? "," : "") << format_double(values[i]);
    }
    os_ << '\n';
  }

 private:
  std::ofstream os_;
};

void write_trajectory(const Trajectory& tr, const fs::path& path) {
  CsvWriter w(path, {"s", "U1", "U2", "V1", "V2", "b1", "b2", "b1_e", "b2_e", "lambda", "t"});
  for (const auto& f : tr.frames) {
    w.row({f.s, f.U[0], f.U[1], f.V[0], f.V[1], f.b.b1, f.b.b2, f.b_e.b1, f.b_e.b2, f.lambda,
           f.t});
  }
}

json exit_json(const std::optional<ExitEvent>& e) {
  if (!e) return nullptr;
  json j;
  j["s"] = e->s;
  j["coord"] = e->coord;
  j["sign"] = e->sign;
  j["V2_sign"] = e->V2_sign;
  j["d_ds_square"] = e->dV2_ds;
  j["outgoing"] = e->outgoing();
  return j;
}

IntegrateOptions integrate_options(const OdeSection& o) {
  IntegrateOptions io;
  io.c_mode = o.c_mode;
  io.trap = {o.trap_V1, o.trap_V2};
  io.rtol = o.rtol;
  io.atol = o.atol;
  io.samples_per_decade = o.samples_per_decade;
  return io;
}

FlowConfig flow_config(const FlowSection& f) {
  FlowConfig c;
  c.M = f.M;
  c.K = f.K;
  c.delta = f.delta;
  c.h_log = f.h_log;
  c.ds = f.ds;
  c.defect_tol = f.defect_tol;
  return c;
}

// ---------------------------------------------------------------------------

int cmd_profiles(const RunConfig& cfg, const fs::path& dir, int jobs, std::ostream& log) {
  const auto& p = cfg.profiles;
  ScalingOptions so;
  so.h_log = cfg.grid.h_log;
  so.M = p.M;
  so.jobs = jobs;
  const auto b2_of = [](double b1) { return b_e_at_b1(b1).b2; };
  const ScalingReport rep = verify_error_scaling(p.b1_ladder, b2_of, so, dir / "scaling.json");

  json manifest;
  manifest["scaling"] = "scaling.json";
  manifest["ladder"] = json::array();
  for (std::size_t i = 0; i < p.b1_ladder.size(); ++i) {
    const double b1 = p.b1_ladder[i];
    const GridPtr g = grid_for_b1(b1, cfg.grid.h_log);
    const ProfileBuilder pb(g);
    const CorrectionLadder L = pb.build_corrections(b1);
    ErrorOptions eo;
    eo.M = p.M;
    const ErrorProfile err = pb.compute_error(L, {b1, b2_of(b1)}, eo);
    const std::string sub = "ladder_" + std::to_string(i);
    write_ladder_fixture(L, err, dir / sub);
    manifest["ladder"].push_back({{"b1", b1}, {"dir", sub}});
    log << "profiles: b1 = " << format_double(b1) << " on " << g->size() << " nodes\n";
  }
  write_json(manifest, dir / "manifest.json");

  std::vector<std::string> header{"b1"};
  for (const auto& f : rep.fits) header.push_back(f.norm);
  CsvWriter w(dir / "scaling.csv", header);
  for (std::size_t i = 0; i < rep.b1.size(); ++i) {
    std::vector<double> row{rep.b1[i]};
    for (const auto& f : rep.fits) row.push_back(f.values[i]);
    w.row(row);
  }

  std::vector<Check> checks;
  for (const auto& f : rep.fits) {
    if (f.tolerance > 0.0) {
      checks.push_back(make_check("slope " + f.norm, f.slope, f.target - f.tolerance,
                                  f.target + f.tolerance));
    }
  }
  write_summary(dir, Experiment::Profiles, checks, {{"M", rep.M}, {"b1", rep.b1}});
  return 0;
}

int cmd_spectrum(const RunConfig& cfg, const fs::path& dir, int jobs, std::ostream& log) {
  const auto& sp = cfg.spectrum;
  const double h = cfg.grid.h_log;
  const GridPtr g = cfg.grid.y_max > 0.0 ? RadialGrid::make_patched(cfg.grid.y_max, h)
                                         : spectral_grid(sp.M, h);
  const SpectralPack pack = build_spectral_pack(g, sp.M);
  const ProfileBuilder pb(g);
  const auto& B = pb.basis();
  const double R = 2.0 * sp.M;
  const double t1 = std::abs(inner(pack.PhiM, B.T1)) /
                    std::sqrt(norm2(pack.PhiM) * norm2(B.T1, R));
  const double t2 = std::abs(inner(pack.PhiM, B.T2)) /
                    std::sqrt(norm2(pack.PhiM) * norm2(B.T2, R));
  const double ratio = inner(pack.PhiM, B.LQ) / (64.0 * std::log(sp.M));

  // Refinement table on grids that resolve psi (it decays like exp(-sqrt(sigma) y)).
  const SigmaConvergence conv = sigma_convergence(std::min(g->y_max(), 200.0), h, sp.levels);

  CoercivityOptions co;
  co.samples = sp.samples;
  co.seed = sp.seed;
  co.c_sub = sp.c_sub;
  co.jobs = jobs;
  const CoercivityReport coer = coercivity_suite(pack, co);

  write_csv(pack.psi, dir / "psi.csv");
  write_csv(pack.PhiM, dir / "PhiM.csv");
  write_csv(pack.psi_dual, dir / "psi_dual.csv");
  {
    CsvWriter w(dir / "sigma_convergence.csv", {"h_log", "n", "sigma"});
    for (const auto& l : conv.levels) w.row({l.h_log, static_cast<double>(l.n), l.sigma});
  }

  json j;
  j["grid"] = {{"n", g->size()}, {"y_max", g->y_max()}, {"h_log", h}};
  j["sigma"] = pack.sigma;
  j["negative_count"] = pack.negative_count;
  j["M"] = sp.M;
  j["cM1"] = pack.cM1;
  j["cM2"] = pack.cM2;
  j["PhiM_T1_relative"] = t1;
  j["PhiM_T2_relative"] = t2;
  j["PhiM_LQ_over_64logM"] = ratio;
  j["convergence"] = json::array();
  for (const auto& l : conv.levels) {
    j["convergence"].push_back({{"h_log", l.h_log}, {"n", l.n}, {"sigma", l.sigma}});
  }
  j["richardson"] = conv.richardson;
  j["rel_change"] = conv.rel_change;
  j["coercivity"] = {{"samples", coer.samples.size()},
                     {"sub_violations", coer.sub_violations},
                     {"hardy_violations", coer.hardy_violations},
                     {"worst_sub_ratio", coer.worst_sub_ratio},
                     {"worst_hardy_ratio", coer.worst_hardy_ratio},
                     {"worst_weighted_ratio", coer.worst_weighted_ratio}};
  write_json(j, dir / "spectral.json");
  log << "spectrum: sigma = " << format_double(pack.sigma) << ", " << pack.negative_count
      << " negative eigenvalue(s)\n";

  std::vector<Check> checks{
      make_check("negative eigenvalues", pack.negative_count, 1.0, 1.0),
      make_check("sigma relative shift under refinement", conv.rel_change, 0.0, sp.sigma_tol),
      make_check("(Phi_M, T1) relative", t1, 0.0, 1e-8),
      make_check("(Phi_M, T2) relative", t2, 0.0, 1e-8),
      make_check("(Phi_M, Lambda Q) / (64 log M)", ratio, 0.8, 1.2),
      make_check("sub-coercivity violations", coer.sub_violations, 0.0, 0.0),
      make_check("Hardy violations", coer.hardy_violations, 0.0, 0.0)};
  write_summary(dir, Experiment::Spectrum, checks, {{"sigma", pack.sigma}});
  return 0;
}

int cmd_ode(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto& o = cfg.ode;
  // V = P U with V2 = 2 U1 + 3 U2.
  const Eigen::Vector2d U0(o.U1_0, (o.V2_0 - 2.0 * o.U1_0) / 3.0);
  const Trajectory tr = integrate(frame_from_U(o.s0, U0), o.s_end, integrate_options(o));
  write_trajectory(tr, dir / "trajectory.csv");
  json j;
  j["s0"] = o.s0;
  j["U0"] = {U0[0], U0[1]};
  j["exit"] = exit_json(tr.exit);
  j["s_last"] = tr.s_last();
  write_json(j, dir / "exit.json");
  std::vector<Check> checks;
  if (tr.exit) {
    checks.push_back(make_check("d/ds V^2 at exit", tr.exit->dV2_ds, 0.0, kInf));
    log << "ode: exit at s = " << format_double(tr.exit->s) << " through V"
        << tr.exit->coord << " with sign " << tr.exit->sign << "\n";
  } else {
    log << "ode: trapped up to s = " << format_double(tr.s_last()) << "\n";
  }
  write_summary(dir, Experiment::Ode, checks, {{"exit", j["exit"]}});
  return 0;
}

int cmd_shoot(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto& o = cfg.ode;
  ShootResult sh;
  try {
    sh = shoot_unstable(o.s0, o.bracket_lo, o.bracket_hi, o.s_end, integrate_options(o));
  } catch (const BracketError& e) {
    log << "shoot: invalid bracket, endpoint exit signs " << e.lo_sign << " (V2(0) = "
        << format_double(o.bracket_lo) << ") and " << e.hi_sign
        << " (V2(0) = " << format_double(o.bracket_hi) << ")\n";
    throw;
  }
  write_trajectory(sh.best, dir / "trajectory.csv");
  const RateReport rr = reconstruct_rate(sh.best);
  {
    CsvWriter w(dir / "rate.csv", {"s", "lambda", "t", "T_minus_t"});
    for (std::size_t i = 0; i < rr.s.size(); ++i) {
      w.row({rr.s[i], rr.lambda[i], rr.t[i], rr.T_minus_t[i]});
    }
  }
  const double endpoints = std::max(sh.lo_run.trapped_time(), sh.hi_run.trapped_time());
  const double extension = sh.best.trapped_time() / endpoints;
  json j;
  j["V2_star"] = sh.V2_star;
  j["iterations"] = sh.iterations;
  j["trapped_time"] = sh.best.trapped_time();
  j["endpoint_trapped_time"] = endpoints;
  j["trapped_extension"] = extension;
  j["exit"] = exit_json(sh.best.exit);
  j["T_est"] = rr.T_est;
  j["tail_error"] = rr.tail_error;
  j["fit"] = {{"p", rr.fit.p},         {"q", rr.fit.q},         {"c", rr.fit.c},
              {"residual", rr.fit.residual}, {"s_lo", rr.fit.s_lo}, {"s_hi", rr.fit.s_hi},
              {"t_unit", rr.fit.t_unit}};
  j["lambda_drift"] = rr.lambda_drift;
  write_json(j, dir / "rate.json");
  log << "shoot: V2* = " << format_double(sh.V2_star) << ", p = " << rr.fit.p
      << ", q = " << rr.fit.q << "\n";
  std::vector<Check> checks{
      make_check("rate exponent p", rr.fit.p, 1.9, 2.1),
      make_check("log exponent q", rr.fit.q, -4.0 / 3.0 - 0.15, -4.0 / 3.0 + 0.15),
      make_check("lambda s^{2/3} (log s)^{-4/9} drift, final decade", rr.lambda_drift, 0.0, 0.05),
      make_check("trapped time extension over the bracket", extension, 10.0, kInf)};
  write_summary(dir, Experiment::Shoot, checks, {{"fit", j["fit"]}, {"V2_star", sh.V2_star}});
  return 0;
}

int cmd_evolve(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto& f = cfg.flow;
  const FlowContext ctx(f.s0, f.s_end + f.lookahead, flow_config(f));
  const FlowState start = build_initial_data(ctx, f.V2_0, f.tau_0, f.s0);
  TrapControl tc;
  tc.segment = f.segment;
  tc.lookahead = f.lookahead;
  tc.stop_at_exit = false;
  const TrapRun tr = run_trap(ctx, start, f.s_end, tc);
  const FlowRun& run = tr.run;
  write_run_log(run, dir / "run_log.csv");

  double worst_energy = -kInf;
  for (double e : run.energy_steps) worst_energy = std::max(worst_energy, e);
  const double reached = run.last.s;
  json j;
  j["grid"] = {{"n", ctx.grid()->size()}, {"y_max", ctx.grid()->y_max()}};
  j["M"] = ctx.M();
  j["s_reached"] = reached;
  j["failure"] = run.failure ? json(*run.failure) : json(nullptr);
  j["max_defect"] = run.max_defect;
  j["max_energy_step"] = worst_energy;
  j["halved_steps"] = run.halved_steps;
  j["tau_corrections"] = run.tau_corrections;
  j["lambda_drift"] = tr.lambda_drift;
  j["b1_s_end"] = tr.b1_s_end;
  j["bubble_distance"] = tr.bubble_distance;
  if (run.exit) {
    j["first_bound_violation"] = {{"s", run.exit->s}, {"coord", bound_name(run.exit->coord)}};
  }
  std::vector<Check> checks{
      make_check("fraction of the window completed", (reached - f.s0) / (f.s_end - f.s0), 1.0,
                 kInf),
      make_check("orthogonality defect", run.max_defect, 0.0, f.defect_tol),
      make_check("largest energy step", run.energy_steps.empty() ? 0.0 : worst_energy, -kInf,
                 0.0)};
  if (run.records.size() >= 3) {
    const ModulationFit fit = fit_modulation(run.records, ctx.M());
    j["modulation_fit"] = {{"C", fit.C}, {"C_first", fit.C_first}, {"C_second", fit.C_second}};
    const LyapunovReport ly = lyapunov_monitor(run.records, ctx.M());
    j["lyapunov"] = json::object();
    for (const LyapunovSeries* sr : {&ly.lya6, &ly.lya4, &ly.lya2, &ly.lya2_alt}) {
      j["lyapunov"][sr->name] = {{"C", sr->C}, {"C_first", sr->C_first}, {"C_second", sr->C_second}};
    }
  }
  write_json(j, dir / "flow.json");
  log << "evolve: reached s = " << format_double(reached)
      << (run.failure ? " (" + *run.failure + ")" : std::string()) << "\n";
  write_summary(dir, Experiment::Evolve, checks, {{"s_reached", reached}});
  return run.failure ? 3 : 0;
}

int cmd_brouwer(const RunConfig& cfg, const fs::path& dir, int jobs, std::ostream& log) {
  const auto& f = cfg.flow;
  const FlowContext ctx(f.s0, f.s0 + f.brouwer_budget, flow_config(f));
  const BrouwerMap map = brouwer_shoot(ctx, f.brouwer_n, f.brouwer_budget, f.refine_depth, jobs);
  for (std::size_t k = 0; k < map.cells.size(); ++k) {
    write_run_log(map.cells[k].run, dir / ("cell_" + std::to_string(k) + ".csv"));
  }
  write_exit_map(map, dir / "exit_map.json");

  // The first level is the full n x n grid; boundary cells lie on its edges.
  const int n = f.brouwer_n;
  int outgoing = 0, boundary = 0;
  double centre_margin = kInf;
  const int centre = (n / 2) * n + n / 2;
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n; ++k) {
      const BrouwerCell& c = map.cells[i * n + k];
      if (i * n + k != centre) {
        centre_margin = std::min(centre_margin, map.cells[centre].s_exit - c.s_exit);
      }
      if (i != 0 && i != n - 1 && k != 0 && k != n - 1) continue;
      ++boundary;
      if (c.exit && (c.exit->coord == Bound::V2 || c.exit->coord == Bound::Tau) &&
          c.exit->outgoing()) {
        ++outgoing;
      }
    }
  }
  log << "brouwer: " << outgoing << " of " << boundary << " boundary cells exit outgoing\n";
  std::vector<Check> checks{
      make_check("boundary cells without an outgoing exit", boundary - outgoing, 0.0, 0.0),
      make_check("centre exit time minus the latest other exit", centre_margin, 1e-12, kInf)};
  write_summary(dir, Experiment::Brouwer, checks, {{"best", map.best}});
  return 0;
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

int cmd_report(const fs::path& root, const fs::path& dir, std::ostream& log) {
  std::ostringstream md;
  md << "# Run report\n\n";
  std::ofstream csv(dir / "checks.csv");
  if (!csv) throw std::runtime_error("cannot write checks.csv");
  csv << "command,check,value,lo,hi,pass,margin\n";
  std::vector<std::string> missing;
  int total = 0, passed = 0;
  for (Experiment e : {Experiment::Profiles, Experiment::Spectrum, Experiment::Ode,
                       Experiment::Shoot, Experiment::Evolve, Experiment::Brouwer}) {
    const fs::path summary = command_dir(root, e) / "summary.json";
    md << "## " << experiment_name(e) << "\n\n";
    if (!fs::exists(summary)) {
      missing.push_back(experiment_name(e));
      md << "missing: no " << summary.lexically_relative(root).generic_string() << "\n\n";
      continue;
    }
    std::ifstream is(summary);
    const json j = json::parse(is);
    md << "| check | value | accepted | result | margin |\n|---|---|---|---|---|\n";
    for (const auto& c : j.at("checks")) {
      const double lo = c.at("lo").is_null() ? -kInf : c.at("lo").get<double>();
      const double hi = c.at("hi").is_null() ? kInf : c.at("hi").get<double>();
      const bool pass = c.at("pass").get<bool>();
      md << "| " << c.at("name").get<std::string>() << " | " << fmt(c.at("value").get<double>())
         << " | [" << fmt(lo) << ", " << fmt(hi) << "] | " << (pass ? "pass" : "FAIL") << " | "
         << fmt(c.at("margin").get<double>()) << " |\n";
      csv << experiment_name(e) << ",\"" << c.at("name").get<std::string>() << "\","
          << format_double(c.at("value").get<double>()) << ',' << format_double(lo) << ','
          << format_double(hi) << ',' << (pass ? 1 : 0) << ','
          << format_double(c.at("margin").get<double>()) << '\n';
      ++total;
      passed += pass ? 1 : 0;
    }
    md << "\n";
  }
  md << "## Totals\n\n" << passed << " of " << total << " checks pass.\n";
  if (!missing.empty()) {
    md << "\nMissing inputs:";
    for (const auto& m : missing) md << " " << m;
    md << "\n";
  }
  std::ofstream os(dir / "report.md");
  if (!os) throw std::runtime_error("cannot write report.md");
  os << md.str();
  log << "report: " << passed << " of " << total << " checks pass";
  if (!missing.empty()) log << ", " << missing.size() << " command output(s) missing";
  log << "\n";
  return 0;
}

}  // namespace

Check make_check(const std::string& name, double value, double lo, double hi) {
  Check c;
  c.name = name;
  c.value = value;
  c.lo = lo;
  c.hi = hi;
  c.pass = value >= lo && value <= hi;
  c.margin = std::min(value - lo, hi - value);
  return c;
}

fs::path command_dir(const fs::path& root, Experiment command) {
  return root / experiment_name(command);
}

int run_command(Experiment command, const RunConfig& cfg, const CommandOptions& opt,
                std::ostream& log) {
  if (cfg.experiment && *cfg.experiment != command) {
    throw ConfigError(std::string("config names experiment '") + experiment_name(*cfg.experiment) +
                      "' but the command is '" + experiment_name(command) + "'");
  }
  const fs::path dir = command_dir(opt.out_root, command);
  write_provenance(cfg, command, dir);
  const int jobs = std::max(1, opt.jobs);
  switch (command) {
    case Experiment::Profiles: return cmd_profiles(cfg, dir, jobs, log);
    case Experiment::Spectrum: return cmd_spectrum(cfg, dir, jobs, log);
    case Experiment::Ode: return cmd_ode(cfg, dir, log);
    case Experiment::Shoot: return cmd_shoot(cfg, dir, log);
    case Experiment::Evolve: return cmd_evolve(cfg, dir, log);
    case Experiment::Brouwer: return cmd_brouwer(cfg, dir, jobs, log);
    case Experiment::Report: return cmd_report(opt.out_root, dir, log);
  }
  throw std::logic_error("unhandled command");
}

}  // namespace typeii::harness
