/**
 * Acceptance run: one PASS or FAIL line per criterion, with the tolerances
 * pinned below. Criteria listed in kKnownRed fail for documented reasons
 * (see the README); they still print FAIL, but only an unexpected failure
 * or an exceeded runtime budget makes the process exit nonzero.
 */
#include "typeii/modulation_ode.hpp"
#include "typeii/profile_builder.hpp"
#include "typeii/renormalized_flow.hpp"
#include "typeii/spectral.hpp"

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace typeii;

namespace {

const std::set<int> kKnownRed{2, 3, 4, 5, 7, 9, 10};

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* title;
  double budget_s;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

int jobs() { return static_cast<int>(std::max(1u, std::min(8u, std::thread::hardware_concurrency()))); }

// Closed forms kept in the test so the oracles do not reuse library kernels.
double LQ_exact(double y) {
  const double z = y * y / 8.0;
  return (1.0 - z) / ((1.0 + z) * (1.0 + z));
}

// ---------------------------------------------------------------------------

// L2 norm over 1 <= y <= 100, away from the 1/y^2 singularity of Gamma at the origin.
double window_norm(RadialFunction f) {
  for (int i = 0; i < f.size(); ++i) {
    if (f.y()[i] < 1.0) f.v[i] = 0.0;
  }
  return std::sqrt(norm2(f, 100.0));
}

Outcome kernel_identities() {
  constexpr double kRatioLo = 3.0, kRatioHi = 5.0;
  std::vector<double> rLQ, rG;
  for (double h : {0.02, 0.01}) {
    const auto g = RadialGrid::make_patched(1e3, h);
    const auto LQ = RadialFunction::sample(g, LQ_exact);
    const auto G = sample_kernel(Kernel::Gamma, g);
    rLQ.push_back(window_norm(apply_H(LQ)));
    rG.push_back(window_norm(apply_H(G)));
  }
  const double a = rLQ[0] / rLQ[1], b = rG[0] / rG[1];
  return {a >= kRatioLo && a <= kRatioHi && b >= kRatioLo && b <= kRatioHi,
          "halving ratios |H LQ| " + fmt("%.3f", a) + ", |H Gamma| " + fmt("%.3f", b) +
              " (accepted [3, 5])"};
}

Outcome t1_asymptotics() {
  // Bounded means no growth from [1e2, 1e3] to [1e3, 1e4]; stable means the
  // two grids agree to 50 percent.
  constexpr double kGrowthMax = 2.0, kStable = 0.5;
  std::vector<double> inner_max, outer_max, fitted;
  for (double h : {0.02, 0.01}) {
    const auto g = RadialGrid::make_patched(2e4, h);
    const ProfileBuilder pb(g);
    const auto& T1 = pb.basis().T1;
    double m1 = 0.0, m2 = 0.0, csum = 0.0;
    int cn = 0;
    for (int i = 0; i < g->size(); ++i) {
      const double y = g->y()[i];
      if (y < 1e2 || y > 1e4) continue;
      const double ly = std::log(y);
      const double q = std::abs(T1.v[i] + 4.0 * ly - 2.0) * y * y / (ly * ly);
      (y <= 1e3 ? m1 : m2) = std::max(y <= 1e3 ? m1 : m2, q);
      if (y >= 1e3) {
        csum += T1.v[i] + 4.0 * ly;
        ++cn;
      }
    }
    inner_max.push_back(m1);
    outer_max.push_back(m2);
    fitted.push_back(csum / cn);
  }
  const double growth = outer_max[0] / inner_max[0];
  const double drift = std::abs(outer_max[1] / outer_max[0] - 1.0);
  return {growth <= kGrowthMax && drift <= kStable,
          "max on [1e3,1e4] / max on [1e2,1e3] = " + fmt("%.3g", growth) + ", grid drift " +
              fmt("%.3g", drift) + "; T1 + 4 log y tends to " + fmt("%.6f", fitted[1])};
}

Outcome radiation_constant() {
  constexpr double kLo = 1.5, kHi = 2.5;
  std::vector<double> vals;
  double worst_oracle = 0.0;
  for (double b1 : {1e-4, 1e-6, 1e-8, 1e-10}) {
    const ProfileBuilder pb(grid_for_b1(b1, 0.02));
    const double cb = pb.build_radiation(b1).c_b;
    // 64 / (chi_{B0/4} LQ, LQ) by adaptive quadrature on the closed forms.
    const double B = 0.25 / std::sqrt(b1);
    auto f = [&](double y) { return cutoff::chi(y / B) * std::pow(LQ_exact(y), 2) * y * y * y; };
    double pairing = 0.0, a = 0.0;
    const double e = 2.0 * B;
    while (a < e) {
      const double next = a == 0.0 ? 1.0 : std::min(2.0 * a, e);
      pairing += boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, next, 10u, 1e-13);
      a = next;
    }
    worst_oracle = std::max(worst_oracle, std::abs(cb * pairing / 64.0 - 1.0));
    vals.push_back(cb * std::abs(std::log(b1)));
  }
  bool monotone = true;
  for (std::size_t i = 1; i < vals.size(); ++i) {
    monotone = monotone && std::abs(vals[i] - 2.0) < std::abs(vals[i - 1] - 2.0);
  }
  std::ostringstream d;
  d << "c|log b1| = " << fmt("%.3f", vals[0]) << ", " << fmt("%.3f", vals[1]) << ", "
    << fmt("%.3f", vals[2]) << ", " << fmt("%.3f", vals[3])
    << (monotone ? " (monotone toward 2)" : " (not monotone)")
    << "; quadrature oracle agreement " << fmt("%.1e", worst_oracle);
  return {vals[2] >= kLo && vals[2] <= kHi && monotone && worst_oracle < 1e-4, d.str()};
}

Outcome error_scaling() {
  ScalingOptions opt;
  opt.jobs = jobs();
  auto b2_of = [](double b1) { return b_e_at_b1(b1).b2; };
  auto summarize = [&](const ScalingReport& r, bool& ok) {
    std::ostringstream d;
    const auto& f = r.fit("H3_2B1");
    ok = std::abs(f.slope - 8.0) <= 0.5;
    d << "H3_2B1 " << fmt("%.2f", f.slope);
    for (const char* n : {"H0_2M", "H1_2M", "H2_2M", "H3_2M"}) {
      const auto& m = r.fit(n);
      ok = ok && std::abs(m.slope - 10.0) <= 0.7;
      d << ", " << n << " " << fmt("%.2f", m.slope);
    }
    return d.str();
  };
  bool ok = false, ok_deep = false;
  const auto lit = summarize(verify_error_scaling({1e-3, 1e-4, 1e-5}, b2_of, opt), ok);
  const auto deep = summarize(verify_error_scaling({1e-6, 1e-7, 1e-8}, b2_of, opt), ok_deep);
  return {ok, "ladder 1e-3..1e-5: " + lit + "; ladder 1e-6..1e-8 " +
                  (ok_deep ? "passes: " : "fails: ") + deep};
}

Outcome spectral() {
  constexpr double M = 1e3;
  const auto g = spectral_grid(M, 0.02);
  const SpectralPack pack = build_spectral_pack(g, M);
  const ProfileBuilder pb(g);
  const auto& B = pb.basis();
  const double t1 = std::abs(inner(pack.PhiM, B.T1)) /
                    std::sqrt(norm2(pack.PhiM) * norm2(B.T1, 2.0 * M));
  const double t2 = std::abs(inner(pack.PhiM, B.T2)) /
                    std::sqrt(norm2(pack.PhiM) * norm2(B.T2, 2.0 * M));
  const double ratio = inner(pack.PhiM, B.LQ) / (64.0 * std::log(M));
  const SigmaConvergence conv = sigma_convergence(200.0, 0.02, 2);
  const bool ok = pack.negative_count == 1 && conv.rel_change < 5e-4 && t1 < 1e-8 &&
                  t2 < 1e-8 && ratio >= 0.8 && ratio <= 1.2;
  std::ostringstream d;
  d << pack.negative_count << " negative eigenvalue, sigma " << fmt("%.6f", conv.levels.back().sigma)
    << " (shift " << fmt("%.1e", conv.rel_change) << "), (Phi,T1) " << fmt("%.1e", t1)
    << ", (Phi,T2) " << fmt("%.1e", t2) << ", (Phi,LQ)/(64 log M) " << fmt("%.3f", ratio);
  return {ok, d.str()};
}

Outcome matrix_structure() {
  const Eigen::Matrix2d A = matrix_A();
  Eigen::EigenSolver<Eigen::Matrix2d> es(A);
  std::vector<double> ev{es.eigenvalues()[0].real(), es.eigenvalues()[1].real()};
  std::sort(ev.begin(), ev.end());
  const double imag = es.eigenvalues().imag().cwiseAbs().maxCoeff();
  const double eig_err = std::max(std::abs(ev[0] + 1.0), std::abs(ev[1] - 2.0 / 3.0));
  const Eigen::Matrix2d P = matrix_P();
  const double conj_err = (P * A * P.inverse() - matrix_D_A()).cwiseAbs().maxCoeff();
  const double diag_err = (matrix_D_A() - Eigen::Vector2d(-1.0, 2.0 / 3.0).asDiagonal().toDenseMatrix())
                              .cwiseAbs()
                              .maxCoeff();
  return {eig_err < 1e-12 && imag == 0.0 && conj_err < 1e-12 && diag_err < 1e-12,
          "eigenvalue error " + fmt("%.1e", eig_err) + ", |P A P^-1 - D_A| " + fmt("%.1e", conj_err)};
}

Outcome rate_law() {
  // Full nonlinear b-system with c = 2 / |log b1|.
  IntegrateOptions o;
  const ShootResult sh = shoot_unstable(1e3, -1.0, 1.0, 1e9, o);
  const RateReport rr = reconstruct_rate(sh.best);
  // Independent least squares on the same samples and time unit.
  const int n = static_cast<int>(rr.s.size());
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXd Y(n);
  int m = 0;
  for (int i = 0; i < n; ++i) {
    if (rr.s[i] < rr.fit.s_lo || rr.s[i] > rr.fit.s_hi) continue;
    const double lt = std::log(rr.T_minus_t[i] / rr.fit.t_unit);
    X.row(m) << 1.0, lt, std::log(std::abs(lt));
    Y[m++] = std::log(rr.lambda[i]);
  }
  const Eigen::Vector3d c = X.topRows(m).colPivHouseholderQr().solve(Y.head(m));
  const double p = c[1], q = c[2];
  const bool agree = std::abs(p - rr.fit.p) < 1e-6 && std::abs(q - rr.fit.q) < 1e-6;
  const bool ok = std::abs(p - 2.0) <= 0.1 && std::abs(q + 4.0 / 3.0) <= 0.15 &&
                  rr.lambda_drift < 0.05 && agree;
  return {ok, "p " + fmt("%.3f", p) + ", q " + fmt("%.3f", q) + ", drift " +
                  fmt("%.4f", rr.lambda_drift) + ", V2* " + fmt("%.4f", sh.V2_star) +
                  (agree ? "" : ", library fit disagrees")};
}

Outcome unstable_dynamics() {
  constexpr double s0 = 1e3, kRel = 0.2;
  IntegrateOptions o;
  const ShootResult sh = shoot_unstable(s0, -1.0, 1.0, 1e9, o);
  const auto& ref = sh.best.frames;
  bool ok = true;
  std::ostringstream d;
  for (double v : {-0.5, 0.5}) {
    const Trajectory t = integrate(frame_from_V2(s0, v), 1e9, o);
    if (!t.exit) return {false, "no exit for V2(0) = " + fmt("%.1f", v)};
    // Offset from the shot run grows like (s/s0)^(2/3) on top of it.
    const double d0 = v - sh.V2_star;
    double pred = std::numeric_limits<double>::quiet_NaN();
    for (const auto& f : ref) {
      if (std::abs(f.V[1] + d0 * std::pow(f.s / s0, 2.0 / 3.0)) >= o.trap.V2) {
        pred = std::log(f.s / s0);
        break;
      }
    }
    const double meas = std::log(t.exit->s / s0);
    const double rel = std::abs(meas / pred - 1.0);
    ok = ok && t.exit->coord == 2 && t.exit->outgoing() && rel <= kRel;
    d << "V2(0)=" << fmt("%+.1f", v) << ": log(s/s0) " << fmt("%.3f", meas) << " vs "
      << fmt("%.3f", pred) << ", d/ds V2^2 " << fmt("%.2e", t.exit->dV2_ds) << "; ";
  }
  const double ends = std::max(sh.lo_run.trapped_time(), sh.hi_run.trapped_time());
  const double gain = sh.best.trapped_time() / ends;
  ok = ok && gain >= 10.0;
  d << "bisection gain " << fmt("%.3g", gain);
  return {ok, d.str()};
}

Outcome flow_consistency() {
  constexpr double s0 = 1e3, s_end = 3e3;
  TrapControl ctl;
  ctl.segment = 5.0;
  ctl.lookahead = 10.0;
  ctl.stop_at_exit = false;
  auto run_at = [&](double start, double end, double h, std::string& note) {
    FlowConfig cfg;
    cfg.h_log = h;
    const FlowContext ctx(start, end + ctl.lookahead, cfg);
    const TrapRun tr = run_trap(ctx, build_initial_data(ctx, 0.0, 0.0, start), end, ctl);
    const auto& r = tr.run;
    const double worst_e = r.energy_steps.empty()
                               ? 0.0
                               : *std::max_element(r.energy_steps.begin(), r.energy_steps.end());
    bool ok = !r.failure && r.last.s >= end - 1e-9 && r.max_defect < 1e-9 && worst_e <= 0.0;
    double C = std::numeric_limits<double>::quiet_NaN();
    if (r.records.size() >= 3) C = fit_modulation(r.records, ctx.M()).C;
    std::ostringstream d;
    d << "h " << h << ": reached s " << fmt("%.1f", r.last.s) << ", defect "
      << fmt("%.1e", r.max_defect) << ", largest energy step " << fmt("%.1e", worst_e) << ", C "
      << fmt("%.3g", C);
    if (r.failure) d << " (" << *r.failure << ")";
    note = d.str();
    return std::make_pair(ok, C);
  };
  std::string n1, n2, r1, r2;
  const auto a = run_at(s0, s_end, 0.04, n1);
  const auto b = run_at(s0, s_end, 0.02, n2);
  const double ratio = a.second / b.second;
  const bool ok = a.first && b.first && ratio >= 0.5 && ratio <= 2.0;
  // Reference window further along the curve, reported only.
  const auto ra = run_at(1e4, 1.1e4, 0.04, r1);
  const auto rb = run_at(1e4, 1.1e4, 0.02, r2);
  return {ok, n1 + "; " + n2 + " | reference from s0 = 1e4 over 1000: " + r1 + "; " + r2 +
                  (ra.first && rb.first ? " (holds)" : " (fails)")};
}

Outcome brouwer_map() {
  constexpr double s0 = 1e3, budget = 200.0;
  FlowConfig cfg;
  const FlowContext ctx(s0, s0 + budget, cfg);
  const BrouwerMap map = brouwer_shoot(ctx, 3, budget, 0, jobs());
  int outgoing = 0, centre = -1;
  double latest_other = -1.0;
  for (int i = 0; i < static_cast<int>(map.cells.size()); ++i) {
    const auto& c = map.cells[i];
    if (c.V2_0 == 0.0 && c.tau_0 == 0.0) {
      centre = i;
      continue;
    }
    latest_other = std::max(latest_other, c.s_exit);
    if (c.exit && c.exit->outgoing() && (c.exit->coord == Bound::V2 || c.exit->coord == Bound::Tau)) {
      ++outgoing;
    }
  }
  const double cs = centre >= 0 ? map.cells[centre].s_exit : 0.0;
  const bool ok = outgoing == 8 && centre >= 0 && cs > latest_other;
  return {ok, std::to_string(outgoing) + "/8 boundary cells outgoing, centre exits at s " +
                  fmt("%.2f", cs) + ", latest other " + fmt("%.2f", latest_other)};
}

Outcome coercivity() {
  constexpr double M = 1e3;
  const SpectralPack pack = build_spectral_pack(spectral_grid(M, 0.02), M);
  CoercivityOptions o;
  o.samples = 100;
  o.jobs = jobs();
  const CoercivityReport r = coercivity_suite(pack, o);
  // Recheck both bounds from the stored sample quantities.
  int recount = 0;
  for (const auto& s : r.samples) {
    const double lhs = s.quadratic + s.psi_proj * s.psi_proj / o.c_sub;
    if (lhs < (o.c_sub - o.slack) * s.dirichlet) ++recount;
    if (s.hardy_lhs > o.c_hardy * (1.0 + o.slack) * s.dirichlet) ++recount;
  }
  const bool ok = r.samples.size() == 100 && r.sub_violations == 0 && r.hardy_violations == 0 &&
                  recount == 0;
  return {ok, std::to_string(r.samples.size()) + " samples, " + std::to_string(r.sub_violations) +
                  " sub-coercivity and " + std::to_string(r.hardy_violations) +
                  " Hardy violations, worst ratios " + fmt("%.3g", r.worst_sub_ratio) + " / " +
                  fmt("%.3g", r.worst_hardy_ratio)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "kernel identities", 10, kernel_identities},
      {2, "T1 asymptotics", 30, t1_asymptotics},
      {3, "radiation constant", 120, radiation_constant},
      {4, "error scaling", 600, error_scaling},
      {5, "spectral", 120, spectral},
      {6, "matrix structure", 1, matrix_structure},
      {7, "rate law", 60, rate_law},
      {8, "unstable directions", 120, unstable_dynamics},
      {9, "flow consistency", 1800, flow_consistency},
      {10, "Brouwer exit map", 3600, brouwer_map},
      {11, "coercivity suite", 60, coercivity},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int unexpected = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = sec <= c.budget_s;
    const bool pass = o.pass && in_time;
    const bool known = kKnownRed.count(c.id) > 0;
    if (!pass && (!known || !in_time)) ++unexpected;
    std::printf("%s %2d %s: %s [%.1f s of %.0f s]%s\n", pass ? "PASS" : "FAIL", c.id, c.title,
                o.detail.c_str(), sec, c.budget_s, !pass && known && in_time ? " (known red)" : "");
    std::fflush(stdout);
  }
  return unexpected == 0 ? 0 : 1;
}
