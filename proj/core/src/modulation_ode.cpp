#include "typeii/modulation_ode.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <mutex>
#include <thread>

#include <Eigen/QR>
#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>
#include <boost/numeric/odeint.hpp>

namespace typeii {

// ---------------------------------------------------------------------------
// Radiation constant.

double LQ_square_moment(double R) {
  // With w = 1 + y^2/8 the integrand becomes 32 (1/w - 5/w^2 + 8/w^3 - 4/w^4) dw.
  const double w = 1.0 + R * R / 8.0;
  return 32.0 * (std::log(w) + 5.0 / w - 4.0 / (w * w) + 4.0 / (3.0 * w * w * w) - 7.0 / 3.0);
}

double cutoff_LQ_pairing(double B) {
  if (!(B > 0.0)) throw PreconditionError("cutoff_LQ_pairing: B must be positive");
  auto f = [B](double y) {
    const double lq = eval_kernel(Kernel::LQ, y);
    return cutoff::scaled(y, B) * lq * lq * y * y * y;
  };
  const double tail = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
      f, B, 2.0 * B, 8, 1e-13);
  return LQ_square_moment(B) + tail;
}

double c_b_exact(double b1) {
  if (!(b1 > 0.0 && b1 < 1.0)) throw PreconditionError("c_b: b1 must lie in (0, 1)");
  return 64.0 / cutoff_LQ_pairing(B0_of(b1) / 4.0);
}

double c_b_asymptotic(double b1) {
  if (!(b1 > 0.0 && b1 < 1.0)) throw PreconditionError("c_b: b1 must lie in (0, 1)");
  return 2.0 / std::abs(std::log(b1));
}

double c_b(double b1, CMode mode) {
  return mode == CMode::Exact ? c_b_exact(b1) : c_b_asymptotic(b1);
}

// ---------------------------------------------------------------------------
// Approximate solution.

namespace {

void require_log_range(double s) {
  if (!(s > std::exp(1.0))) throw PreconditionError("b_e: need s > e (log s > 1)");
}

}  // namespace

BVector b_e(double s) {
  require_log_range(s);
  const double L = std::log(s);
  return {2.0 / (3.0 * s) - 4.0 / (9.0 * s * L),
          -2.0 / (9.0 * s * s) + 20.0 / (27.0 * s * s * L)};
}

double s_of_b1e(double b1) {
  const double lo = std::log(10.0), hi = 690.0;
  if (!(b1 > 0.0 && b1 < b_e(10.0).b1)) {
    throw PreconditionError("s_of_b1e: b1 must lie in (0, b1e(10))");
  }
  // b1e is decreasing on [10, inf), so the root in log s is bracketed.
  auto f = [b1](double ls) { return std::log(b_e(std::exp(ls)).b1 / b1); };
  std::uintmax_t iters = 200;
  const auto r = boost::math::tools::toms748_solve(
      f, lo, hi, boost::math::tools::eps_tolerance<double>(50), iters);
  return std::exp(0.5 * (r.first + r.second));
}

BVector b_e_at_b1(double b1) { return b_e(s_of_b1e(b1)); }

BVector b_e_rate(double s) {
  require_log_range(s);
  const double L = std::log(s);
  return {-2.0 / (3.0 * s * s) + 4.0 * (L + 1.0) / (9.0 * s * s * L * L),
          4.0 / (9.0 * s * s * s) - 20.0 * (2.0 * L + 1.0) / (27.0 * s * s * s * L * L)};
}

std::array<double, 2> b_e_residual(double s) {
  const BVector b = b_e(s), r = b_e_rate(s);
  const double g = 2.0 / std::log(s);
  return {r.b1 + (1.0 + g) * b.b1 * b.b1 - b.b2, r.b2 + (3.0 + g) * b.b1 * b.b2};
}

BRhs ode_rhs(const BVector& b, CMode mode) {
  if (!(b.b1 > 0.0)) throw PreconditionError("ode_rhs: b1 must be positive");
  const double c = c_b(b.b1, mode);
  return {-b.b1 * b.b1 * (1.0 + c) + b.b2, -b.b1 * b.b2 * (3.0 + c), -b.b1};
}

// ---------------------------------------------------------------------------
// Coordinates.

Eigen::Matrix2d matrix_P() { return (Eigen::Matrix2d() << 1.0, -1.0, 2.0, 3.0).finished(); }
Eigen::Matrix2d matrix_A() {
  return (Eigen::Matrix2d() << -1.0 / 3.0, 1.0, 2.0 / 3.0, 0.0).finished();
}
Eigen::Matrix2d matrix_D_A() {
  return (Eigen::Matrix2d() << -1.0, 0.0, 0.0, 2.0 / 3.0).finished();
}

Eigen::Vector2d U_of_b(const BVector& b, double s) {
  const BVector e = b_e(s);
  const double w = std::pow(std::log(s), 1.25);
  return {(b.b1 - e.b1) * s * w, (b.b2 - e.b2) * s * s * w};
}

BVector b_of_U(const Eigen::Vector2d& U, double s) {
  const BVector e = b_e(s);
  const double w = std::pow(std::log(s), 1.25);
  return {e.b1 + U[0] / (s * w), e.b2 + U[1] / (s * s * w)};
}

namespace {

ModulationFrame make_frame(double s, const BVector& b, const Eigen::Vector2d& U,
                           double lambda, double t) {
  ModulationFrame f;
  f.s = s;
  f.b = b;
  f.b_e = b_e(s);
  f.U = U;
  f.V = matrix_P() * U;
  f.lambda = lambda;
  f.t = t;
  return f;
}

}  // namespace

ModulationFrame frame_from_U(double s, const Eigen::Vector2d& U) {
  return make_frame(s, b_of_U(U, s), U, 1.0, 0.0);
}

ModulationFrame frame_from_V2(double s, double V2) {
  return frame_from_U(s, Eigen::Vector2d(0.0, V2 / 3.0));
}

double Trajectory::trapped_time() const {
  return (exit ? exit->s : s_last()) - s_start();
}

// ---------------------------------------------------------------------------
// Integration in tau = log s.

namespace {

using State = std::array<double, 4>;  // (b1, b2) or (U1, U2), then log lambda, t

struct System {
  CMode mode;
  bool linear;

  BVector b_at(const State& x, double s) const {
    return linear ? b_of_U(Eigen::Vector2d(x[0], x[1]), s) : BVector{x[0], x[1]};
  }
  Eigen::Vector2d U_at(const State& x, double s) const {
    return linear ? Eigen::Vector2d(x[0], x[1]) : U_of_b(BVector{x[0], x[1]}, s);
  }

  void operator()(const State& x, State& dx, double tau) const {
    const double s = std::exp(tau);
    const BVector b = b_at(x, s);
    const double lam2 = std::exp(2.0 * x[2]);
    if (linear) {
      const Eigen::Vector2d AU = matrix_A() * Eigen::Vector2d(x[0], x[1]);
      dx[0] = AU[0];
      dx[1] = AU[1];
      dx[2] = -s * b.b1;
    } else {
      const BRhs r = ode_rhs(b, mode);
      dx[0] = s * r.b1s;
      dx[1] = s * r.b2s;
      dx[2] = s * r.log_lambda_s;
    }
    dx[3] = s * lam2;
  }

  // dU/ds from the state and its tau-derivative.
  Eigen::Vector2d dU_ds(const State& x, double s) const {
    State dx{};
    (*this)(x, dx, std::log(s));
    if (linear) return Eigen::Vector2d(dx[0], dx[1]) / s;
    const BVector e = b_e(s), er = b_e_rate(s);
    const double L = std::log(s), w = std::pow(L, 1.25), dw = 1.25 * std::pow(L, 0.25) / s;
    const double d1 = x[0] - e.b1, d2 = x[1] - e.b2;
    const double r1 = dx[0] / s - er.b1, r2 = dx[1] / s - er.b2;
    return {r1 * s * w + d1 * (w + s * dw), r2 * s * s * w + d2 * (2.0 * s * w + s * s * dw)};
  }

  ModulationFrame frame(const State& x, double s) const {
    return make_frame(s, b_at(x, s), U_at(x, s), std::exp(x[2]), x[3]);
  }
};

// Largest excess |V_k| / bound_k - 1 with the offending coordinate.
std::pair<double, int> trap_excess(const Eigen::Vector2d& V, const TrapBounds& tb) {
  const double e1 = std::abs(V[0]) / tb.V1 - 1.0, e2 = std::abs(V[1]) / tb.V2 - 1.0;
  return e2 >= e1 ? std::make_pair(e2, 2) : std::make_pair(e1, 1);
}

int sign_of(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

}  // namespace

Trajectory integrate(const ModulationFrame& start, double s_end, const IntegrateOptions& opt) {
  namespace odeint = boost::numeric::odeint;
  if (!(s_end > start.s)) throw PreconditionError("integrate: s_end must exceed the start");
  const System sys{opt.c_mode, opt.linearized};
  const Eigen::Matrix2d P = matrix_P();
  if (trap_excess(start.V, opt.trap).first > 0.0) {
    throw PreconditionError("integrate: start lies outside the trap");
  }
  State x = opt.linearized ? State{start.U[0], start.U[1], std::log(start.lambda), start.t}
                           : State{start.b.b1, start.b.b2, std::log(start.lambda), start.t};
  const double tau0 = std::log(start.s), tau_end = std::log(s_end);
  const double dtau_out = std::log(10.0) / std::max(1, opt.samples_per_decade);

  Trajectory traj;
  traj.frames.push_back(sys.frame(x, start.s));
  auto stepper = odeint::make_dense_output(opt.atol, opt.rtol, odeint::runge_kutta_dopri5<State>());
  stepper.initialize(x, tau0, 1e-3);
  int next_out = 1;
  State xi{};
  try {
    while (stepper.current_time() < tau_end) {
      const auto [t_prev, t_cur] = stepper.do_step(sys);
      if (!(t_cur > t_prev) || t_cur - t_prev < 1e-14) {
        throw PreconditionError("integrate: step size collapsed");
      }
      const double t_hi = std::min(t_cur, tau_end);
      // Exit detection on the dense output at the end of the step.
      stepper.calc_state(t_hi, xi);
      const double s_hi = std::exp(t_hi);
      const auto ex = trap_excess(P * sys.U_at(xi, s_hi), opt.trap);
      double t_stop = t_hi;
      if (ex.first > 0.0 && !traj.exit) {
        double a = t_prev, b = t_hi;
        for (int it = 0; it < 80 && b - a > 1e-15 * std::abs(b); ++it) {
          const double m = 0.5 * (a + b);
          stepper.calc_state(m, xi);
          (trap_excess(P * sys.U_at(xi, std::exp(m)), opt.trap).first > 0.0 ? b : a) = m;
        }
        stepper.calc_state(b, xi);
        const double s_ex = std::exp(b);
        const Eigen::Vector2d V = P * sys.U_at(xi, s_ex);
        const Eigen::Vector2d dV = P * sys.dU_ds(xi, s_ex);
        const int k = trap_excess(V, opt.trap).second;
        ExitEvent ev;
        ev.s = s_ex;
        ev.coord = k;
        ev.sign = sign_of(V[k - 1]);
        ev.V2_sign = sign_of(V[1]);
        ev.dV2_ds = 2.0 * V[k - 1] * dV[k - 1];
        traj.exit = ev;
        t_stop = b;
      }
      for (; tau0 + next_out * dtau_out < t_stop; ++next_out) {
        const double tt = tau0 + next_out * dtau_out;
        stepper.calc_state(tt, xi);
        traj.frames.push_back(sys.frame(xi, std::exp(tt)));
      }
      if (traj.exit && opt.stop_at_exit) {
        stepper.calc_state(t_stop, xi);
        traj.frames.push_back(sys.frame(xi, std::exp(t_stop)));
        return traj;
      }
    }
  } catch (const PreconditionError& e) {
    const auto& f = traj.frames.back();
    throw PreconditionError(std::string(e.what()) + " near s = " + format_double(f.s) +
                            " (b1 = " + format_double(f.b.b1) + ", b2 = " +
                            format_double(f.b.b2) + ", V = " + format_double(f.V[0]) + ", " +
                            format_double(f.V[1]) + ")");
  }
  stepper.calc_state(tau_end, xi);
  if (traj.frames.back().s < s_end * (1.0 - 1e-12)) traj.frames.push_back(sys.frame(xi, s_end));
  return traj;
}

// ---------------------------------------------------------------------------
// Shooting.

ShootResult shoot_unstable(double s0, double lo, double hi, double s_end,
                           const IntegrateOptions& opt, const ShootOptions& sopt) {
  if (!(hi > lo)) throw PreconditionError("shoot_unstable: bracket must satisfy lo < hi");
  ShootResult r;
  auto run = [&](double v) { return integrate(frame_from_V2(s0, v), s_end, opt); };
  // Both endpoints are independent; run them side by side.
  std::thread th([&] { r.hi_run = run(hi); });
  r.lo_run = run(lo);
  th.join();
  r.lo = lo;
  r.hi = hi;
  auto pick_best = [&](const Trajectory& t, double v) {
    if (r.best.frames.empty() || t.trapped_time() > r.best.trapped_time()) {
      r.best = t;
      r.V2_star = v;
    }
  };
  pick_best(r.lo_run, lo);
  pick_best(r.hi_run, hi);
  if (!r.lo_run.exit || !r.hi_run.exit) return r;
  const int slo = r.lo_run.exit->V2_sign, shi = r.hi_run.exit->V2_sign;
  if (slo == shi) {
    throw BracketError("shoot_unstable: both endpoints exit with V2 sign " + std::to_string(slo),
                       slo, shi);
  }
  double a = lo, b = hi;
  for (; r.iterations < sopt.max_iter; ++r.iterations) {
    const double m = 0.5 * (a + b);
    if (m <= a || m >= b || b - a <= sopt.tol * std::max(1.0, std::abs(m))) break;
    Trajectory t = run(m);
    pick_best(t, m);
    if (!t.exit) {
      r.lo = a;
      r.hi = b;
      r.widths.push_back(b - a);
      ++r.iterations;
      return r;
    }
    (t.exit->V2_sign == slo ? a : b) = m;
    r.widths.push_back(b - a);
  }
  r.lo = a;
  r.hi = b;
  return r;
}

std::vector<Trajectory> sweep_V2(double s0, const std::vector<double>& V2_values, double s_end,
                                 const IntegrateOptions& opt, int jobs) {
  std::vector<Trajectory> out(V2_values.size());
  std::mutex mu;
  size_t next = 0;
  auto worker = [&]() {
    for (;;) {
      size_t k;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= V2_values.size()) return;
        k = next++;
      }
      out[k] = integrate(frame_from_V2(s0, V2_values[k]), s_end, opt);
    }
  };
  const int n = std::clamp<int>(jobs, 1, std::max<int>(1, static_cast<int>(V2_values.size())));
  std::vector<std::thread> pool;
  for (int j = 1; j < n; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return out;
}

double linear_exit_log_time(double V2_0, double bound) {
  if (!(std::abs(V2_0) > 0.0)) throw PreconditionError("linear_exit_log_time: V2(0) is zero");
  return 1.5 * std::log(bound / std::abs(V2_0));
}

std::optional<double> linear_exit_prediction(const Trajectory& reference, double V2_0,
                                             double bound) {
  const auto& f = reference.frames;
  const double s0 = f.front().s, d0 = V2_0 - f.front().V[1];
  for (const auto& fr : f) {
    if (std::abs(fr.V[1] + d0 * std::pow(fr.s / s0, 2.0 / 3.0)) >= bound) {
      return std::log(fr.s / s0);
    }
  }
  return std::nullopt;
}

double separation_growth_exponent(const Trajectory& run, const Trajectory& reference) {
  // Both runs share the output times as long as they start at the same s
  // with the same sampling density.
  const size_t n = std::min(run.frames.size(), reference.frames.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (size_t i = 0; i < n; ++i) {
    const auto& a = run.frames[i];
    const auto& b = reference.frames[i];
    if (std::abs(a.s - b.s) > 1e-9 * b.s) break;
    const double d = std::abs(a.V[1] - b.V[1]);
    if (!(d > 0.0)) continue;
    const double x = std::log(a.s), y = std::log(d);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++m;
  }
  if (m < 3) throw PreconditionError("separation_growth_exponent: fewer than three shared frames");
  return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

// ---------------------------------------------------------------------------
// Rate reconstruction.

double lambda_tail(double s, double lambda, int terms) {
  if (terms == 1) return 3.0 * s * lambda * lambda;
  // sigma = s e^u turns the two-term law into lambda^2 s int e^{-u/3} (1 + u/log s)^{8/9} du.
  const double L = std::log(s);
  boost::math::quadrature::exp_sinh<double> integrator;
  const double I = integrator.integrate(
      [L](double u) { return std::exp(-u / 3.0) * std::pow(1.0 + u / L, 8.0 / 9.0); });
  return lambda * lambda * s * I;
}

RateFit fit_rate(const std::vector<double>& s, const std::vector<double>& lambda,
                 const std::vector<double>& T_minus_t, std::optional<double> t_unit) {
  const size_t n = s.size();
  if (n < 4 || lambda.size() != n || T_minus_t.size() != n) {
    throw PreconditionError("fit_rate: need at least four matching samples");
  }
  RateFit f;
  if (t_unit) {
    f.t_unit = *t_unit;
  } else {
    double m = 0.0;
    for (size_t i = 0; i < n; ++i) m += std::log(T_minus_t[i]) + std::log(s[i]) / 3.0;
    f.t_unit = std::exp(m / n);
  }
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXd Y(n);
  for (size_t i = 0; i < n; ++i) {
    const double lt = std::log(T_minus_t[i] / f.t_unit);
    X(i, 0) = 1.0;
    X(i, 1) = lt;
    X(i, 2) = std::log(std::abs(lt));
    Y[i] = std::log(lambda[i]);
  }
  const Eigen::Vector3d beta = X.colPivHouseholderQr().solve(Y);
  f.c = std::exp(beta[0]);
  f.p = beta[1];
  f.q = beta[2];
  f.residual = std::sqrt((X * beta - Y).squaredNorm() / n);
  f.s_lo = s.front();
  f.s_hi = s.back();
  return f;
}

RateReport reconstruct_rate(const Trajectory& traj, std::optional<double> fit_s_lo,
                            std::optional<double> fit_s_hi) {
  if (traj.frames.size() < 8 || traj.s_last() / traj.s_start() < 1e3 * (1.0 - 1e-9)) {
    throw PreconditionError("reconstruct_rate: trajectory must span at least three decades");
  }
  RateReport r;
  for (const auto& f : traj.frames) {
    r.s.push_back(f.s);
    r.lambda.push_back(f.lambda);
    r.t.push_back(f.t);
  }
  const double sl = r.s.back(), ll = r.lambda.back();
  r.tail_one_term = lambda_tail(sl, ll, 1);
  r.tail_two_term = lambda_tail(sl, ll, 2);
  r.tail_error = std::abs(r.tail_two_term - r.tail_one_term);
  r.T_est = r.t.back() + r.tail_two_term;
  for (size_t i = 0; i < r.s.size(); ++i) {
    r.T_minus_t.push_back((r.t.back() - r.t[i]) + r.tail_two_term);
  }
  const double lo = fit_s_lo.value_or(r.s.front()), hi = fit_s_hi.value_or(sl);
  std::vector<double> fs, fl, fT;
  for (size_t i = 0; i < r.s.size(); ++i) {
    if (r.s[i] < lo * (1.0 - 1e-12) || r.s[i] > hi * (1.0 + 1e-12)) continue;
    fs.push_back(r.s[i]);
    fl.push_back(r.lambda[i]);
    fT.push_back(r.T_minus_t[i]);
  }
  r.fit = fit_rate(fs, fl, fT);
  double mn = 1e300, mx = -1e300;
  for (size_t i = 0; i < r.s.size(); ++i) {
    if (r.s[i] < sl / 10.0 * (1.0 - 1e-12)) continue;
    const double v = r.lambda[i] * std::pow(r.s[i], 2.0 / 3.0) * std::pow(std::log(r.s[i]), -4.0 / 9.0);
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  r.lambda_drift = mx / mn - 1.0;
  return r;
}

}  // namespace typeii
