#include "typeii/renormalized_flow.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <thread>

#include <Eigen/Dense>

#include "json.hpp"

namespace typeii {

struct ProfileAt {
  BVector b;
  std::optional<CorrectionLadder> ladder;
  ErrorProfile err;
  RadialFunction Qb;
  std::array<RadialFunction, 3> dirs;
  double c_b = 0.0;
};

namespace {

std::shared_ptr<const ProfileAt> profiles_at(const FlowContext& ctx, const BVector& b) {
  auto p = std::make_shared<ProfileAt>();
  p->b = b;
  const ProfileBuilder& pb = ctx.builder();
  ErrorOptions eo;
  eo.M = ctx.M();
  eo.norms = false;
  if (b.b1 == 0.0 && b.b2 == 0.0) {
    p->err = pb.compute_error(b, eo);
    p->Qb = pb.basis().Q;
  } else {
    if (!(b.b1 > 0.0)) throw PreconditionError("flow: b1 left (0, 0.5)");
    p->ladder = pb.build_corrections(b.b1);
    p->err = pb.compute_error(*p->ladder, b, eo);
    p->Qb = pb.assemble_Qb(*p->ladder, b, true).Qb;
    p->c_b = p->ladder->radiation.c_b;
  }
  p->dirs = modulation_directions(p->err);
  return p;
}

double log_abs(double b1) { return std::abs(std::log(b1)); }

/// chi_{B_delta} Lambda Q with B_delta = b1^{-delta}.
RadialFunction cut_LQ(const FlowContext& ctx, double b1, double delta) {
  const double B = std::pow(b1, -delta);
  const RadialFunction& LQ = ctx.builder().basis().LQ;
  return RadialFunction::sample(ctx.grid(), [B](double y) { return cutoff::scaled(y, B); }) * LQ;
}

/// x = (I + ds A)^{-1} r.
Vec implicit_solve(const OperatorMatrix& op, const Vec& r, double ds) {
  return op.solve_shifted(r / ds, -1.0 / ds);
}

Eigen::Vector2d V_of_tilde(const BVector& b_tilde, double s) {
  return matrix_P() * U_of_b(b_tilde, s);
}

}  // namespace

// ---------------------------------------------------------------------------
// Context.

FlowContext::FlowContext(double s0, double s_end, const FlowConfig& cfg)
    : cfg_(cfg), s0_(s0), s_end_(s_end) {
  if (!(s0 >= 30.0) || !(s_end > s0)) {
    throw PreconditionError("FlowContext: need 30 <= s0 < s_end");
  }
  if (!(cfg.delta > 0.0 && cfg.delta < 0.5)) throw PreconditionError("FlowContext: delta in (0, 0.5)");
  if (!(cfg.ds > 0.0) || !(cfg.h_log > 0.0)) throw PreconditionError("FlowContext: bad step or grid");
  const double b1_0 = b_e(s0).b1;
  // Margin for runs that leave the b^e curve before s_end.
  const double b1_min = 0.5 * b_e(s_end).b1;
  M_ = std::min(cfg.M, B0_of(b1_0) / 8.0);
  const double y_max =
      std::max({4.2 * B1_of(b1_min), 8.4 * B0_of(b1_min), 2.5 * M_, 100.0});
  grid_ = RadialGrid::make_patched(y_max, cfg.h_log);
  builder_ = std::make_unique<ProfileBuilder>(grid_);
  pack_ = build_spectral_pack(grid_, M_);
  op_ = assemble_operator(grid_);
  Eigen::Matrix3d G;
  for (int k = 0; k < 3; ++k)
    for (int l = 0; l < 3; ++l) G(k, l) = inner(pack_.H_PhiM[k], pack_.H_PhiM[l]);
  gram_inv_ = G.inverse();
  LQ_Phi_ = inner(builder_->basis().LQ, pack_.PhiM);
}

double FlowContext::project(RadialFunction& eps) const {
  Eigen::Vector3d r;
  for (int k = 0; k < 3; ++k) r[k] = inner(eps, pack_.H_PhiM[k]);
  const Eigen::Vector3d c = gram_inv_ * r;
  RadialFunction removed = RadialFunction::zeros(grid_);
  for (int k = 0; k < 3; ++k) removed.v += c[k] * pack_.H_PhiM[k].v;
  eps.v -= removed.v;
  return std::sqrt(norm2(removed));
}

double FlowContext::orthogonality_defect(const RadialFunction& eps) const {
  const double ne = std::sqrt(norm2(eps));
  if (ne == 0.0) return 0.0;
  double d = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double nk = std::sqrt(norm2(pack_.H_PhiM[k]));
    d = std::max(d, std::abs(inner(eps, pack_.H_PhiM[k])) / (ne * nk));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Forcing and caches.

std::array<RadialFunction, 3> modulation_directions(const ErrorProfile& err) {
  return {err.Mod_basis[0], err.Mod_basis[1] + err.alpha_dchi, err.Mod_basis[2]};
}

ForcingSplit forcing_split(const FlowContext& ctx, const FlowState& st,
                           const std::array<double, 3>& D) {
  const ProfileAt& p = *st.profiles;
  const Vec& Qb = p.Qb.v;
  const Vec& Q = ctx.builder().basis().Q.v;
  const Vec& e = st.epsilon.v;
  const GridPtr& g = ctx.grid();
  ForcingSplit f;
  f.L = RadialFunction(g, 3.0 * (Qb * Qb - Q * Q) * e);
  f.N = ctx.config().nonlinear ? RadialFunction(g, 3.0 * Qb * e * e + e * e * e)
                               : RadialFunction::zeros(g);
  f.F0 = RadialFunction::zeros(g);
  if (ctx.config().forcing) f.F0.v -= p.err.Psi_tilde.v;
  for (int j = 0; j < 3; ++j) f.F0.v -= D[j] * p.dirs[j].v;
  f.F1 = f.L + f.N;
  f.F_total = f.F0 + f.F1;
  return f;
}

void refresh(const FlowContext& ctx, FlowState& st) {
  if (!st.profiles || st.profiles->b.b1 != st.b.b1 || st.profiles->b.b2 != st.b.b2) {
    st.profiles = profiles_at(ctx, st.b);
  }
  const RadialFunction& eps = st.epsilon;
  st.eps2k[0] = apply_H(eps, OuterBC::Dirichlet);
  st.eps2k[1] = apply_H(st.eps2k[0], OuterBC::Dirichlet);
  st.eps2k[2] = apply_H(st.eps2k[1], OuterBC::Dirichlet);
  st.Xi[0] = norm2(derivative(eps, OuterBC::Dirichlet));
  for (int k = 0; k < 3; ++k) st.Xi[k + 1] = norm2(st.eps2k[k]);
  st.tau = inner(eps, ctx.pack().psi);
  const double b1 = st.b.b1;
  if (b1 > 0.0) {
    const double lb = log_abs(b1);
    st.tau_tilde = st.tau * lb / std::pow(b1, 3.5);
    st.b2_tilde = st.b.b2 + inner(st.eps2k[1], cut_LQ(ctx, b1, st.delta)) / (64.0 * st.delta * lb);
    st.V_tilde = V_of_tilde({b1, st.b2_tilde}, st.s);
  } else {
    st.tau_tilde = 0.0;
    st.b2_tilde = st.b.b2;
    st.V_tilde.setZero();
  }
  // Energy of v = Q~_b + eps and the flux of the scaling generator.
  const RadialFunction v = st.profiles->Qb + eps;
  const RadialFunction v2 = v * v;
  st.energy = 0.5 * norm2(derivative(v)) - 0.25 * norm2(v2);
  RadialFunction W = apply_Laplacian(v);
  W.v += v2.v * v.v;
  st.dissipation = -norm2(W);
  st.flux_integrand = inner(W, apply_Lambda(v));
  st.energy_book = st.energy + st.energy_flux;
}

FlowState build_initial_data(const FlowContext& ctx, double V2_tilde_0, double tau_tilde_0,
                             double s0) {
  if (!(std::abs(V2_tilde_0) <= 1.0) || !(std::abs(tau_tilde_0) <= 1.0)) {
    throw PreconditionError("build_initial_data: (V2~(0), tau~(0)) must lie in [-1, 1]^2");
  }
  FlowState st;
  st.s = s0;
  st.delta = ctx.config().delta;
  const double b1 = b_e(s0).b1;
  const double lb = log_abs(b1);
  const double tau0 = tau_tilde_0 * std::pow(b1, 3.5) / lb;
  const RadialFunction H2psi = apply_H_power(ctx.pack().psi_dual, 2, OuterBC::Dirichlet);
  const double pairing = inner(H2psi, cut_LQ(ctx, b1, st.delta));
  const double U2 = V2_tilde_0 / 3.0 + tau0 * pairing / (64.0 * st.delta * lb) * s0 * s0 *
                                           std::pow(std::log(s0), 1.25);
  st.b = b_of_U(Eigen::Vector2d(0.0, U2), s0);
  st.b1_initial = st.b.b1;
  st.epsilon = tau0 * ctx.pack().psi_dual;
  refresh(ctx, st);
  st.projection_defect = ctx.orthogonality_defect(st.epsilon);
  return st;
}

// ---------------------------------------------------------------------------
// Modulation and time stepping.

ModulationSolution modulation_solve(const FlowContext& ctx, const FlowState& st,
                                    const ErrorProfile* err) {
  std::shared_ptr<const ProfileAt> prof = st.profiles;
  if (!prof) prof = profiles_at(ctx, st.b);
  const ErrorProfile& e = err ? *err : prof->err;
  const std::array<RadialFunction, 3> dirs = modulation_directions(e);
  const GridPtr& g = ctx.grid();
  const RadialFunction Le = apply_Lambda(st.epsilon, OuterBC::Dirichlet);

  FlowState tmp = st;
  tmp.profiles = prof;
  const ForcingSplit f = forcing_split(ctx, tmp, {0.0, 0.0, 0.0});
  // Fixed part: -A eps - b1 Lambda eps + F (with D = 0).
  RadialFunction E(g, -ctx.op().apply(st.epsilon.v) - st.b.b1 * Le.v + f.F_total.v);
  std::array<RadialFunction, 3> col{Le - dirs[0], -dirs[1], -dirs[2]};

  ModulationSolution m;
  Eigen::Vector3d rhs;
  for (int k = 0; k < 3; ++k) {
    const RadialFunction& gk = ctx.pack().H_PhiM[k];
    rhs[k] = -inner(E, gk);
    for (int j = 0; j < 3; ++j) m.matrix(k, j) = inner(col[j], gk);
  }
  m.det = m.matrix.determinant() / std::pow(ctx.LQ_Phi(), 3);
  const Eigen::FullPivLU<Eigen::Matrix3d> lu(m.matrix);
  m.cond = 1.0 / lu.rcond();
  const Eigen::Vector3d D = lu.solve(rhs);
  for (int j = 0; j < 3; ++j) m.D[j] = D[j];
  return m;
}

namespace {

struct StepTry {
  bool ok = false;
  std::string why;
};

StepTry try_step(const FlowContext& ctx, const FlowState& st, double ds, FlowState& out) {
  const FlowConfig& cfg = ctx.config();
  const GridPtr& g = ctx.grid();
  const ProfileAt& p = *st.profiles;
  const ModulationSolution m = modulation_solve(ctx, st);
  if (!(std::abs(m.det) >= cfg.det_min)) return {false, "ill-conditioned modulation system"};
  const RadialFunction Le = apply_Lambda(st.epsilon, OuterBC::Dirichlet);
  const ForcingSplit f = forcing_split(ctx, st, {0.0, 0.0, 0.0});

  // eps_new = a + ds sum_j D_j r_j with a = R (eps + ds (-b1 Lambda eps + F))
  // and r_j = R e_j, R = (I + ds A)^{-1}, e_j the column of D_j in the
  // equation. D is fixed by (eps_new, H^k Phi_M) = 0, which is the modulation
  // law with H eps taken at the new time, so the conditions hold exactly.
  const Vec a = implicit_solve(ctx.op(), st.epsilon.v + ds * (-st.b.b1 * Le.v + f.F_total.v), ds);
  std::array<Vec, 3> rj;
  rj[0] = implicit_solve(ctx.op(), Le.v - p.dirs[0].v, ds);
  rj[1] = implicit_solve(ctx.op(), -p.dirs[1].v, ds);
  rj[2] = implicit_solve(ctx.op(), -p.dirs[2].v, ds);
  Eigen::Matrix3d G;
  Eigen::Vector3d rhs;
  for (int k = 0; k < 3; ++k) {
    const RadialFunction& gk = ctx.pack().H_PhiM[k];
    rhs[k] = -inner(RadialFunction(g, a), gk);
    for (int j = 0; j < 3; ++j) G(k, j) = ds * inner(RadialFunction(g, rj[j]), gk);
  }
  const Eigen::Vector3d Dv = G.fullPivLu().solve(rhs);
  const std::array<double, 3> D{Dv[0], Dv[1], Dv[2]};
  const double ls = D[0] - st.b.b1;

  out = st;
  out.D = D;
  out.D_det = m.det;
  Vec e_new = a;
  for (int j = 0; j < 3; ++j) e_new += ds * D[j] * rj[j];
  out.epsilon = RadialFunction(g, std::move(e_new));
  // Only round-off is left to clear along H^k Phi_M.
  const double removed = ctx.project(out.epsilon);
  const double ne = std::sqrt(norm2(out.epsilon));
  out.projection_removed = ne > 0.0 ? removed / ne : 0.0;
  out.projection_defect = ctx.orthogonality_defect(out.epsilon);
  if (!(out.projection_defect <= cfg.defect_tol)) return {false, "projection defect"};
  if (!out.epsilon.all_finite()) return {false, "non-finite remainder"};

  // Parameters: the formal system plus the modulation residuals.
  const BRates sys = system_rates(st.b, p.c_b);
  out.b.b1 = st.b.b1 + ds * (sys.b1s + D[1]);
  out.b.b2 = st.b.b2 + ds * (sys.b2s + D[2]);
  if (st.b.b1 > 0.0 && !(out.b.b1 > 0.0)) return {false, "b1 left (0, 0.5)"};
  out.t = st.t + ds * st.lambda * st.lambda;
  out.lambda = st.lambda * std::exp(ds * ls);
  out.s = st.s + ds;
  out.energy_flux = st.energy_flux + ds * ls * st.flux_integrand;
  refresh(ctx, out);
  return {true, {}};
}

}  // namespace

StepInfo step(const FlowContext& ctx, FlowState& st, double ds) {
  if (!st.profiles) refresh(ctx, st);
  StepInfo info;
  std::string why;
  while (ds >= ctx.config().ds_min) {
    FlowState out;
    StepTry r;
    try {
      r = try_step(ctx, st, ds, out);
    } catch (const PreconditionError& e) {
      r = {false, e.what()};
    }
    if (r.ok) {
      st = std::move(out);
      info.ds = ds;
      return info;
    }
    why = r.why;
    ds *= 0.5;
    ++info.halvings;
  }
  throw PreconditionError("flow step failed at s = " + format_double(st.s) + " (" + why +
                          "), b1 = " + format_double(st.b.b1) + ", b2 = " +
                          format_double(st.b.b2) + ", |eps|^2 = " +
                          format_double(norm2(st.epsilon)) + ", tau~ = " +
                          format_double(st.tau_tilde));
}

// ---------------------------------------------------------------------------
// Diagnostics.

const char* bound_name(Bound b) {
  switch (b) {
    case Bound::Xi1: return "Xi1";
    case Bound::Xi2: return "Xi2";
    case Bound::Xi4: return "Xi4";
    case Bound::Xi6: return "Xi6";
    case Bound::V1: return "V1";
    case Bound::V2: return "V2";
    case Bound::Tau: return "tau";
    default: return "none";
  }
}

std::string DiagnosticRecord::flags() const {
  return violated ? std::string("exit:") + bound_name(*violated) : std::string("ok");
}

DiagnosticRecord diagnostics(const FlowContext& ctx, const FlowState& st) {
  DiagnosticRecord r;
  r.s = st.s;
  r.t = st.t;
  r.lambda = st.lambda;
  r.b1 = st.b.b1;
  r.b2 = st.b.b2;
  r.b2_tilde = st.b2_tilde;
  r.Xi = st.Xi;
  r.tau = st.tau;
  r.tau_tilde = st.tau_tilde;
  r.V_tilde = st.V_tilde;
  r.energy = st.energy;
  r.energy_book = st.energy_book;
  r.D = st.D;
  r.projection_defect = st.projection_defect;
  r.projection_removed = st.projection_removed;
  const double b1 = st.b.b1;
  if (!(b1 > 0.0)) return r;
  const double lb = log_abs(b1);
  const double K = ctx.config().K;
  auto set = [&r](Bound b, double v) { r.ratio[static_cast<int>(b)] = v; };
  set(Bound::Xi1, st.Xi[0] / (10.0 * std::sqrt(st.b1_initial)));
  set(Bound::Xi2, st.Xi[1] / (std::pow(b1, 4.0 / 3.0) * std::pow(lb, K)));
  set(Bound::Xi4, st.Xi[2] / (std::pow(b1, 4.0) * std::pow(lb, K)));
  set(Bound::Xi6, st.Xi[3] / (K * std::pow(b1, 6.0) / (lb * lb)));
  set(Bound::V1, std::abs(st.V_tilde[0]));
  set(Bound::V2, std::abs(st.V_tilde[1]));
  set(Bound::Tau, std::abs(st.tau_tilde));
  // Points placed on the boundary of the square must not exit by round-off.
  const double slack = 1e-9;
  double worst = 1.0 + slack;
  for (int k = 0; k < static_cast<int>(Bound::Count); ++k) {
    if (r.ratio[k] > worst) {
      worst = r.ratio[k];
      r.violated = static_cast<Bound>(k);
    }
  }
  return r;
}

LyapunovReport lyapunov_monitor(const std::vector<DiagnosticRecord>& h, double M) {
  if (h.size() < 3) throw PreconditionError("lyapunov_monitor: need at least 3 records");
  LyapunovReport rep;
  rep.lya6.name = "Lya6";
  rep.lya4.name = "Lya4";
  rep.lya2.name = "Lya2";
  rep.lya2_alt.name = "Lya2_b1^(5/2)";
  const double sq_logM = std::sqrt(std::log(M));
  const size_t n = h.size();
  struct Acc {
    LyapunovSeries* series;
    std::vector<double> ratio;
  };
  std::array<Acc, 4> acc{Acc{&rep.lya6, {}}, Acc{&rep.lya4, {}}, Acc{&rep.lya2, {}},
                         Acc{&rep.lya2_alt, {}}};
  std::vector<std::array<double, 4>> d(n - 2), rhs(n - 2);
  for (size_t i = 1; i + 1 < n; ++i) {
    const auto& a = h[i - 1];
    const auto& b = h[i + 1];
    const auto& c = h[i];
    const double dt = b.t - a.t;
    if (!(dt > 0.0)) throw PreconditionError("lyapunov_monitor: records not increasing in t");
    auto Y = [](const DiagnosticRecord& r, int k, int p) { return r.Xi[k] / std::pow(r.lambda, p); };
    const double b1 = c.b1, lb = log_abs(c.b1), lam = c.lambda;
    d[i - 1] = {(Y(b, 3, 10) - Y(a, 3, 10)) / dt, (Y(b, 2, 6) - Y(a, 2, 6)) / dt,
                (Y(b, 1, 2) - Y(a, 1, 2)) / dt, (Y(b, 1, 2) - Y(a, 1, 2)) / dt};
    rhs[i - 1] = {b1 / std::pow(lam, 12) *
                      (std::pow(b1, 6) / (lb * lb) + c.Xi[3] / sq_logM +
                       std::pow(b1, 3) / lb * std::sqrt(c.Xi[3])),
                  std::pow(b1, 5) / std::pow(lam, 8), std::pow(b1, 7.0 / 3.0) / std::pow(lam, 4),
                  std::pow(b1, 2.5) / std::pow(lam, 4)};
    rep.s.push_back(c.s);
  }
  const size_t m = d.size();
  for (int k = 0; k < 4; ++k) {
    LyapunovSeries& s = *acc[k].series;
    for (size_t i = 0; i < m; ++i) {
      const double r = std::max(0.0, d[i][k] / rhs[i][k]);
      s.C = std::max(s.C, r);
      if (i < m / 2) s.C_first = std::max(s.C_first, r);
      else s.C_second = std::max(s.C_second, r);
    }
    for (size_t i = 0; i < m; ++i) s.margin.push_back(s.C * rhs[i][k] - d[i][k]);
  }
  return rep;
}

ModulationFit fit_modulation(const std::vector<DiagnosticRecord>& h, double M) {
  if (h.size() < 3) throw PreconditionError("fit_modulation: need at least three records");
  if (!(M > 1.0)) throw PreconditionError("fit_modulation: M must exceed 1");
  ModulationFit fit;
  const size_t mid = 1 + (h.size() - 1) / 2;
  for (size_t i = 1; i < h.size(); ++i) {
    const DiagnosticRecord& r = h[i];
    const double rhs = std::sqrt(r.Xi[3] / std::log(M)) + std::pow(r.b1, 3) / log_abs(r.b1) +
                       std::pow(r.b1, 3.5);
    const double d = std::max({std::abs(r.D[0]), std::abs(r.D[1]), std::abs(r.D[2])});
    const double c = d / rhs;
    fit.C = std::max(fit.C, c);
    (i < mid ? fit.C_first : fit.C_second) = std::max(i < mid ? fit.C_first : fit.C_second, c);
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Runs.

namespace {

double bounded_value(const DiagnosticRecord& r, Bound b) {
  switch (b) {
    case Bound::V1: return r.V_tilde[0];
    case Bound::V2: return r.V_tilde[1];
    case Bound::Tau: return r.tau_tilde;
    default: return r.ratio[static_cast<int>(b)];
  }
}

}  // namespace

FlowRun evolve(const FlowContext& ctx, const FlowState& start, double s_end,
               const EvolveOptions& opt) {
  FlowRun run;
  FlowState st = start;
  if (!st.profiles) refresh(ctx, st);
  DiagnosticRecord prev = diagnostics(ctx, st);
  run.records.push_back(prev);
  run.max_defect = st.projection_defect;
  int count = 0;
  const double eps_s = 1e-9 * std::max(1.0, s_end);
  while (st.s < s_end - eps_s) {
    const double ds = std::min(ctx.config().ds, s_end - st.s);
    const double book = st.energy_book;
    StepInfo info;
    try {
      info = step(ctx, st, ds);
    } catch (const std::exception& e) {
      run.failure = e.what();
      break;
    }
    if (info.halvings > 0) ++run.halved_steps;
    run.energy_steps.push_back(st.energy_book - book);
    run.max_defect = std::max(run.max_defect, st.projection_defect);
    DiagnosticRecord rec = diagnostics(ctx, st);
    ++count;
    const bool last = !(st.s < s_end - eps_s);
    std::optional<Bound> hit;
    for (int k = 0; k < static_cast<int>(Bound::Count) && !hit; ++k) {
      const Bound b = static_cast<Bound>(k);
      if (rec.ratio[k] > 1.0 &&
          std::find(opt.exit_on.begin(), opt.exit_on.end(), b) != opt.exit_on.end()) {
        hit = b;
      }
    }
    if (hit && !run.exit) {
      ExitInfo ex;
      ex.s = st.s;
      ex.coord = *hit;
      const double x1 = bounded_value(rec, ex.coord), x0 = bounded_value(prev, ex.coord);
      ex.sign = x1 > 0.0 ? 1 : (x1 < 0.0 ? -1 : 0);
      ex.d_ds_square = (x1 * x1 - x0 * x0) / (rec.s - prev.s);
      run.exit = ex;
    }
    if (count % std::max(1, opt.record_every) == 0 || last || (run.exit && opt.stop_at_exit)) {
      run.records.push_back(rec);
    }
    prev = rec;
    if (run.exit && opt.stop_at_exit) break;
  }
  run.last = std::move(st);
  return run;
}

TrapRun run_trap(const FlowContext& ctx, const FlowState& start, double s_end,
                 const TrapControl& ctl) {
  if (!(ctl.segment > 0.0 && ctl.lookahead >= ctl.segment)) {
    throw PreconditionError("run_trap: need 0 < segment <= lookahead");
  }
  TrapRun out;
  FlowRun& run = out.run;
  FlowState st = start;
  if (!st.profiles) refresh(ctx, st);
  run.records.push_back(diagnostics(ctx, st));
  run.max_defect = st.projection_defect;
  const RadialFunction& pd = ctx.pack().psi_dual;
  EvolveOptions trial;
  trial.stop_at_exit = false;
  trial.record_every = 1 << 30;
  while (st.s < s_end - 1e-9 * s_end) {
    // Linear response of tau at the end of the look-ahead to a psi_dual kick.
    const double horizon = std::min(st.s + ctl.lookahead, ctx.s_end());
    const double b1 = st.b.b1;
    const double scale = std::pow(b1, 3.5) / log_abs(b1);
    const double kick = 1e-3 * scale;
    FlowState kicked = st;
    kicked.epsilon.v += kick * pd.v;
    refresh(ctx, kicked);
    double tauA = 0.0, tauB = 0.0;
    {
      auto fb = std::async(std::launch::async, [&] { return evolve(ctx, kicked, horizon, trial); });
      const FlowRun ra = evolve(ctx, st, horizon, trial);
      const FlowRun rb = fb.get();
      if (ra.failure || rb.failure) {
        run.failure = "look-ahead: " + *(ra.failure ? ra.failure : rb.failure);
        break;
      }
      tauA = ra.last.tau;
      tauB = rb.last.tau;
    }
    const double response = (tauB - tauA) / kick;
    if (!(std::abs(response) > 0.0) || !std::isfinite(response)) {
      throw PreconditionError("run_trap: no tau response over the look-ahead");
    }
    const double c = -tauA / response;
    st.epsilon.v += c * pd.v;
    refresh(ctx, st);
    run.tau_corrections.push_back(c / scale);

    EvolveOptions eo;
    eo.stop_at_exit = ctl.stop_at_exit;
    FlowRun seg = evolve(ctx, st, std::min(st.s + ctl.segment, s_end), eo);
    run.records.insert(run.records.end(), seg.records.begin() + 1, seg.records.end());
    run.energy_steps.insert(run.energy_steps.end(), seg.energy_steps.begin(), seg.energy_steps.end());
    run.halved_steps += seg.halved_steps;
    run.max_defect = std::max(run.max_defect, seg.max_defect);
    st = std::move(seg.last);
    if (seg.failure) {
      run.failure = seg.failure;
      break;
    }
    if (seg.exit && !run.exit) run.exit = seg.exit;
    if (seg.exit && ctl.stop_at_exit) break;
  }
  run.last = st;

  // Hand lambda, b and t to the modulation layer and measure the bubble distance.
  const Eigen::Matrix2d P = matrix_P();
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& r : run.records) {
    ModulationFrame f;
    f.s = r.s;
    f.b = {r.b1, r.b2};
    f.b_e = b_e(r.s);
    f.U = U_of_b(f.b, r.s);
    f.V = P * f.U;
    f.lambda = r.lambda;
    f.t = r.t;
    out.handoff.frames.push_back(f);
    const double w = r.lambda * std::pow(r.s, 2.0 / 3.0) * std::pow(std::log(r.s), -4.0 / 9.0);
    if (r.s >= run.records.back().s / 1.5) {
      lo = std::min(lo, w);
      hi = std::max(hi, w);
    }
  }
  out.lambda_drift = hi / lo - 1.0;
  out.b1_s_end = run.records.back().b1 * run.records.back().s;
  const RadialFunction& Q = ctx.builder().basis().Q;
  // Only the final state is kept in full, so the distance is reported there and at the start.
  for (const FlowState* s : std::array<const FlowState*, 2>{&start, &run.last}) {
    const RadialFunction& Qb = s->profiles ? s->profiles->Qb : profiles_at(ctx, s->b)->Qb;
    out.bubble_distance.push_back(norm2(derivative(Qb - Q + s->epsilon)));
  }
  return out;
}

BrouwerMap brouwer_shoot(const FlowContext& ctx, int n, double s_budget, int refine_depth,
                         int jobs) {
  if (n < 3) throw PreconditionError("brouwer_shoot: grid must be at least 3 x 3");
  if (!(s_budget > 0.0)) throw PreconditionError("brouwer_shoot: budget must be positive");
  BrouwerMap map;
  const double s0 = ctx.s0();
  const double s_end = std::min(s0 + s_budget, ctx.s_end());
  double cx = 0.0, cy = 0.0, half = 1.0;
  for (int level = 0; level <= refine_depth; ++level) {
    std::vector<BrouwerCell> cells;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        BrouwerCell c;
        c.V2_0 = std::clamp(cx - half + 2.0 * half * i / (n - 1), -1.0, 1.0);
        c.tau_0 = std::clamp(cy - half + 2.0 * half * j / (n - 1), -1.0, 1.0);
        c.level = level;
        cells.push_back(c);
      }
    }
    std::atomic<size_t> next{0};
    auto work = [&] {
      for (size_t k = next++; k < cells.size(); k = next++) {
        BrouwerCell& c = cells[k];
        EvolveOptions eo;
        eo.exit_on = {Bound::V2, Bound::Tau};
        c.run = evolve(ctx, build_initial_data(ctx, c.V2_0, c.tau_0, s0), s_end, eo);
        c.exit = c.run.exit;
        c.s_exit = c.exit ? c.exit->s : c.run.last.s;
      }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < std::max(1, jobs); ++w) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();
    for (auto& c : cells) map.cells.push_back(std::move(c));
    // Refine around the longest survivor found so far.
    int best = 0;
    for (size_t k = 0; k < map.cells.size(); ++k) {
      if (map.cells[k].s_exit > map.cells[best].s_exit) best = static_cast<int>(k);
    }
    map.best = best;
    cx = map.cells[best].V2_0;
    cy = map.cells[best].tau_0;
    half *= 0.5;
  }
  const auto& first = map.cells.front();
  map.degenerate = true;
  for (const auto& c : map.cells) {
    if (!c.exit || !first.exit || c.exit->coord != first.exit->coord ||
        c.exit->sign != first.exit->sign) {
      map.degenerate = false;
      break;
    }
  }
  return map;
}

// ---------------------------------------------------------------------------
// Output.

void write_run_log(const FlowRun& run, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw PreconditionError("write_run_log: cannot open " + path.string());
  os << "s,lambda,b1,b2,b2_tilde,Xi1,Xi2,Xi4,Xi6,tau,tau_tilde,V1_tilde,V2_tilde,E,flags\n";
  for (const auto& r : run.records) {
    const double row[] = {r.s,     r.lambda, r.b1,     r.b2,         r.b2_tilde,
                          r.Xi[0], r.Xi[1],  r.Xi[2],  r.Xi[3],      r.tau,
                          r.tau_tilde, r.V_tilde[0], r.V_tilde[1], r.energy_book};
    for (double x : row) os << format_double(x) << ',';
    os << r.flags() << '\n';
  }
}

void write_exit_map(const BrouwerMap& map, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : map.cells) {
    nlohmann::ordered_json e;
    e["V2_0"] = c.V2_0;
    e["tau_0"] = c.tau_0;
    e["level"] = c.level;
    e["s_exit"] = c.s_exit;
    e["exit_coord"] = c.exit ? bound_name(c.exit->coord) : "none";
    e["outgoing_sign"] = c.exit ? (c.exit->outgoing() ? 1 : -1) : 0;
    j["cells"].push_back(e);
  }
  j["best"] = map.best;
  j["degenerate"] = map.degenerate;
  std::ofstream os(path);
  if (!os) throw PreconditionError("write_exit_map: cannot open " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace typeii
