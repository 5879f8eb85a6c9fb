#include "typeii/spectral.hpp"

#include "typeii/profile_builder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <random>
#include <thread>

#include <Eigen/Dense>

namespace typeii {

// ---------------------------------------------------------------------------
// Operator matrix.

OperatorMatrix assemble_operator(const GridPtr& grid) {
  if (!grid) throw PreconditionError("assemble_operator: null grid");
  const int n = grid->size();
  const Vec& y = grid->y();
  OperatorMatrix m{grid, Vec::Zero(n), Vec::Zero(n), Vec::Zero(n)};
  for (int i = 0; i < n; ++i) {
    const Stencil s = stencil_at(*grid, i);
    const double a = -3.0 / y[i];
    const double lo = a * s.d1[0] - s.d2[0];
    const double mid = a * s.d1[1] - s.d2[1] - eval_kernel(Kernel::V, y[i]);
    const double up = a * s.d1[2] - s.d2[2];
    if (i == 0) {
      // Even ghost: the left neighbour is f_0 itself.
      m.diag[i] = mid + lo;
    } else {
      m.diag[i] = mid;
      m.lower[i] = lo;
    }
    // The outer ghost is zero, so the last row drops its right neighbour.
    if (i + 1 < n) m.upper[i] = up;
  }
  return m;
}

Vec OperatorMatrix::apply(const Vec& f) const {
  const int n = size();
  if (f.size() != n) throw PreconditionError("OperatorMatrix::apply: size mismatch");
  Vec out = diag * f;
  for (int i = 1; i < n; ++i) out[i] += lower[i] * f[i - 1];
  for (int i = 0; i + 1 < n; ++i) out[i] += upper[i] * f[i + 1];
  return out;
}

int OperatorMatrix::count_below(double theta) const {
  // LDL^T pivots of the symmetric matrix with off-diagonals sqrt(upper_i lower_{i+1}).
  const int n = size();
  int count = 0;
  double q = diag[0] - theta;
  for (int i = 0; i < n; ++i) {
    if (i > 0) {
      const double p = std::max(0.0, upper[i - 1] * lower[i]);
      q = diag[i] - theta - p / q;
    }
    if (q == 0.0) q = -1e-300;
    if (q < 0.0) ++count;
  }
  return count;
}

Vec OperatorMatrix::solve_shifted(const Vec& rhs, double shift) const {
  const int n = size();
  Vec c(n), d(n);
  double piv = diag[0] - shift;
  c[0] = upper[0] / piv;
  d[0] = rhs[0] / piv;
  for (int i = 1; i < n; ++i) {
    piv = diag[i] - shift - lower[i] * c[i - 1];
    if (piv == 0.0) throw PreconditionError("solve_shifted: zero pivot");
    c[i] = i + 1 < n ? upper[i] / piv : 0.0;
    d[i] = (rhs[i] - lower[i] * d[i - 1]) / piv;
  }
  Vec x(n);
  x[n - 1] = d[n - 1];
  for (int i = n - 2; i >= 0; --i) x[i] = d[i] - c[i] * x[i + 1];
  return x;
}

double negative_threshold(const RadialGrid& grid) {
  // The spacing near y = 1 sets the scale of discretization artifacts at
  // threshold. The smallest spacing of an unpatched log grid sits at y_min
  // and would make the threshold meaningless.
  const double h = grid.spacing_near(1.0);
  return -1e-6 / (h * h);
}

// ---------------------------------------------------------------------------
// Ground state.

GroundState ground_state(const OperatorMatrix& op) {
  const RadialGrid& g = *op.grid;
  if (g.y_max() < 50.0) {
    throw PreconditionError("ground_state: grid reaches y = " + format_double(g.y_max()) +
                            " but psi needs y_max >= 50 to be resolved");
  }
  const int n = op.size();
  GroundState gs;
  gs.negative_count = op.count_below(negative_threshold(g));
  if (gs.negative_count == 0) {
    throw PreconditionError(
        "ground_state: no negative eigenvalue below the threshold; enlarge y_max or refine");
  }
  // Gershgorin bound of the symmetrized matrix.
  double lo = 0.0;
  for (int i = 0; i < n; ++i) {
    double r = 0.0;
    if (i > 0) r += std::sqrt(std::max(0.0, op.upper[i - 1] * op.lower[i]));
    if (i + 1 < n) r += std::sqrt(std::max(0.0, op.upper[i] * op.lower[i + 1]));
    lo = std::min(lo, op.diag[i] - r);
  }
  double hi = negative_threshold(g);
  for (int it = 0; it < 200 && hi - lo > 1e-15 * std::abs(lo); ++it) {
    const double mid = 0.5 * (lo + hi);
    (op.count_below(mid) >= 1 ? hi : lo) = mid;
  }
  const double lambda = 0.5 * (lo + hi);
  // Inverse iteration just below the eigenvalue, where the shifted matrix
  // is positive definite and elimination without pivoting is stable.
  const double shift = lambda - 1e-9 * std::abs(lambda);
  Vec x = Vec::Ones(n);
  for (int it = 0; it < 4; ++it) {
    x = op.solve_shifted(x, shift);
    x /= x.abs().maxCoeff();
  }
  if (x[0] < 0.0) x = -x;
  RadialFunction psi(op.grid, x);
  psi *= 1.0 / std::sqrt(norm2(psi));
  gs.sigma = -lambda;
  const Vec Ax = op.apply(psi.v);
  gs.residual = (Ax - lambda * psi.v).abs().maxCoeff() / (gs.sigma * psi.v.abs().maxCoeff());
  gs.psi = std::move(psi);

  // Log-linear tail fit between y = 10 and the point where psi leaves the
  // resolved range (or half the grid extent).
  const Vec& y = g.y();
  const double top = gs.psi.v.abs().maxCoeff();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (int i = 0; i < n; ++i) {
    const double a = std::abs(gs.psi.v[i]);
    if (y[i] < 10.0 || y[i] > 0.5 * g.y_max() || a < 1e-200 * top) continue;
    const double l = std::log(a);
    sx += y[i];
    sy += l;
    sxx += y[i] * y[i];
    sxy += y[i] * l;
    ++m;
  }
  gs.tail_slope = m > 2 ? (m * sxy - sx * sy) / (m * sxx - sx * sx) : 0.0;
  return gs;
}

SigmaConvergence sigma_convergence(double y_max, double h_log, int levels) {
  if (levels < 2) throw PreconditionError("sigma_convergence: need at least two levels");
  SigmaConvergence out;
  double h = h_log;
  for (int k = 0; k < levels; ++k, h *= 0.5) {
    auto g = RadialGrid::make_patched(y_max, h);
    const auto gs = ground_state(assemble_operator(g));
    out.levels.push_back({h, g->size(), gs.sigma});
  }
  const double s1 = out.levels[levels - 2].sigma, s2 = out.levels[levels - 1].sigma;
  out.richardson = (4.0 * s2 - s1) / 3.0;
  out.rel_change = std::abs(s2 - s1) / std::abs(s2);
  return out;
}

// ---------------------------------------------------------------------------
// Phi_M and the dual direction.

namespace {

RadialFunction chi_LQ(const GridPtr& g, double M) {
  return RadialFunction::sample(g, [M](double y) {
    return cutoff::scaled(y, M) * eval_kernel(Kernel::LQ, y);
  });
}

// H(chi_M LQ) = -LQ Delta chi_M - 2 chi_M' LQ', exact because H LQ = 0.
// Supported in [M, 2M], free of the discretization residual of H LQ.
RadialFunction H_chi_LQ(const GridPtr& g, double M) {
  return RadialFunction::sample(g, [M](double y) {
    const double d1 = cutoff::scaled_dy(y, M, 1), d2 = cutoff::scaled_dy(y, M, 2);
    const double z = y * y / 8.0;
    const double dLQ = 0.25 * y * (z - 3.0) / std::pow(1.0 + z, 3);
    return -eval_kernel(Kernel::LQ, y) * (d2 + 3.0 * d1 / y) - 2.0 * d1 * dLQ;
  });
}

void check_Phi_M_grid(const RadialGrid& g, double M) {
  if (!(M >= 4.0)) throw PreconditionError("build_Phi_M: M must be at least 4");
  if (g.y_max() < 2.2 * M) {
    throw PreconditionError("build_Phi_M: grid must reach 2.2 M = " + format_double(2.2 * M));
  }
}

}  // namespace

void build_Phi_M(SpectralPack& pack, double M, const RadialFunction& T1,
                 const RadialFunction& T2) {
  const GridPtr& g = pack.grid;
  check_Phi_M_grid(*g, M);
  require_same_grid(T1, T2);
  if (T1.grid != g) throw PreconditionError("build_Phi_M: T1 lives on another grid");
  const RadialFunction f0 = chi_LQ(g, M);
  const double nondeg = inner(f0, sample_kernel(Kernel::LQ, g));
  if (!(std::abs(nondeg) > 1e-8)) {
    throw PreconditionError("build_Phi_M: (chi_M LQ, LQ) vanishes; degenerate M");
  }
  const RadialFunction f1 = H_chi_LQ(g, M);
  const RadialFunction f2 = apply_H(f1, OuterBC::Dirichlet);
  const RadialFunction f3 = apply_H(f2, OuterBC::Dirichlet);
  const RadialFunction f4 = apply_H(f3, OuterBC::Dirichlet);
  Eigen::Matrix2d A;
  A << inner(f1, T1), inner(f2, T1), inner(f1, T2), inner(f2, T2);
  const Eigen::Vector2d rhs(-inner(f0, T1), -inner(f0, T2));
  const Eigen::Vector2d c = A.colPivHouseholderQr().solve(rhs);
  pack.M = M;
  pack.cM1 = c[0];
  pack.cM2 = c[1];
  pack.PhiM = f0 + c[0] * f1 + c[1] * f2;
  pack.H_PhiM[0] = pack.PhiM;
  pack.H_PhiM[1] = f1 + c[0] * f2 + c[1] * f3;
  pack.H_PhiM[2] = f2 + c[0] * f3 + c[1] * f4;
}

std::array<double, 2> Phi_M_ratio_constants(double M, const RadialFunction& T1,
                                            const RadialFunction& T2) {
  check_Phi_M_grid(*T1.grid, M);
  const RadialFunction f0 = chi_LQ(T1.grid, M);
  const double d = inner(f0, sample_kernel(Kernel::LQ, T1.grid));
  const double c1 = inner(f0, T1) / d;
  const double c2 = (-inner(f0, T2) + c1 * inner(f0, T1)) / d;
  return {c1, c2};
}

RadialFunction spline_bump(const GridPtr& g, double c, double w) {
  return RadialFunction::sample(g, [c, w](double y) {
    const double t = std::abs(y - c) / (0.5 * w);
    if (t >= 2.0) return 0.0;
    if (t >= 1.0) return std::pow(2.0 - t, 3) / 6.0;
    return (4.0 - 6.0 * t * t + 3.0 * t * t * t) / 6.0;
  });
}

double build_dual_psi(SpectralPack& pack) {
  const double M = pack.M;
  if (!(M > 0.0) || pack.PhiM.size() == 0) {
    throw PreconditionError("build_dual_psi: Phi_M must be built first");
  }
  // H Phi_M and H^2 Phi_M vanish where chi_M = 1 because H LQ = 0, so the
  // first set only sees them through the bump at M. The fallback set sits in
  // the transition region [M, 2M] where all three constraints are active.
  const std::array<std::array<double, 3>, 2> centre_sets = {
      {{M / 4.0, M / 2.0, M}, {1.2 * M, 1.5 * M, 1.8 * M}}};
  for (const auto& centres : centre_sets) {
    std::array<RadialFunction, 4> cols = {pack.psi, spline_bump(pack.grid, centres[0], M / 8.0),
                                          spline_bump(pack.grid, centres[1], M / 8.0),
                                          spline_bump(pack.grid, centres[2], M / 8.0)};
    std::array<const RadialFunction*, 4> rows = {&pack.psi, &pack.H_PhiM[0], &pack.H_PhiM[1],
                                                 &pack.H_PhiM[2]};
    Eigen::Matrix4d A;
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) A(r, c) = inner(*rows[r], cols[c]);
    }
    // Alternate row and column equilibration so that the psi column, which
    // dominates near the origin, does not hide the bump couplings.
    Eigen::Vector4d rs = Eigen::Vector4d::Ones(), cs = Eigen::Vector4d::Ones();
    for (int sweep = 0; sweep < 8; ++sweep) {
      const Eigen::Matrix4d B = rs.asDiagonal() * A * cs.asDiagonal();
      for (int r = 0; r < 4; ++r) rs[r] /= std::sqrt(B.row(r).cwiseAbs().maxCoeff());
      const Eigen::Matrix4d C = rs.asDiagonal() * A * cs.asDiagonal();
      for (int c = 0; c < 4; ++c) cs[c] /= std::sqrt(C.col(c).cwiseAbs().maxCoeff());
    }
    const Eigen::Matrix4d As = rs.asDiagonal() * A * cs.asDiagonal();
    const Eigen::Vector4d rhs = rs.asDiagonal() * Eigen::Vector4d(1.0, 0.0, 0.0, 0.0);
    const auto qr = As.colPivHouseholderQr();
    const double rcond = std::abs(qr.matrixQR()(3, 3)) / std::abs(qr.matrixQR()(0, 0));
    if (qr.rank() < 4 || rcond < 1e-10) continue;
    const Eigen::Vector4d x = cs.asDiagonal() * qr.solve(rhs);
    RadialFunction d = x[0] * cols[0];
    for (int k = 1; k < 4; ++k) d += x[k] * cols[k];
    pack.psi_dual = std::move(d);
    pack.bump_centres = centres;
    double res = std::abs(inner(pack.psi_dual, pack.psi) - 1.0);
    for (int k = 0; k < 3; ++k) {
      const double nk = std::sqrt(norm2(pack.H_PhiM[k]) * norm2(pack.psi_dual));
      res = std::max(res, std::abs(inner(pack.psi_dual, pack.H_PhiM[k])) / nk);
    }
    return res;
  }
  throw PreconditionError("build_dual_psi: constraint system singular for every bump set");
}

GridPtr spectral_grid(double M, double h_log) {
  return RadialGrid::make_patched(std::max(3.0 * M, 100.0), h_log);
}

SpectralPack build_spectral_pack(const GridPtr& grid, double M) {
  SpectralPack pack;
  pack.grid = grid;
  auto gs = ground_state(assemble_operator(grid));
  pack.sigma = gs.sigma;
  pack.negative_count = gs.negative_count;
  pack.psi = std::move(gs.psi);
  ProfileBuilder pb(grid);
  build_Phi_M(pack, M, pb.basis().T1, pb.basis().T2);
  build_dual_psi(pack);
  return pack;
}

// ---------------------------------------------------------------------------
// Coercivity suite.

CoercivitySample evaluate_coercivity(const SpectralPack& pack, const RadialFunction& u0,
                                     const CoercivityOptions& opt, bool project) {
  RadialFunction u = u0;
  if (project) u -= (inner(u, pack.PhiM) / norm2(pack.PhiM)) * pack.PhiM;
  const Vec& y = pack.grid->y();
  const RadialFunction du = derivative(u, OuterBC::Dirichlet);
  const RadialFunction Hu = apply_H(u, OuterBC::Dirichlet);
  // u'' = Delta u - 3 u' / y avoids differencing the odd function u'.
  RadialFunction d2u = apply_Laplacian(u, OuterBC::Dirichlet);
  d2u.v -= 3.0 * du.v / y;
  const Vec logy = y.log();
  const Vec w0 = 1.0 / (y.pow(4) * (1.0 + logy * logy));

  CoercivitySample s;
  s.dirichlet = norm2(du);
  s.quadratic = inner(Hu, u);
  s.psi_proj = inner(u, pack.psi);
  s.hardy_lhs = inner(RadialFunction(u.grid, u.v / (y * y)), u) + (y * u.v).square().maxCoeff();
  s.weighted_lhs = norm2(Hu);
  s.weighted_rhs = inner(RadialFunction(u.grid, u.v * w0), u) +
                   inner(RadialFunction(u.grid, du.v / (y * y)), du) + norm2(d2u);
  const double c = opt.c_sub;
  s.sub_ok = s.quadratic >= c * s.dirichlet - s.psi_proj * s.psi_proj / c -
                                opt.slack * s.dirichlet;
  s.hardy_ok = s.hardy_lhs <= opt.c_hardy * s.dirichlet * (1.0 + opt.slack);
  return s;
}

CoercivityReport coercivity_suite(const SpectralPack& pack, const CoercivityOptions& opt) {
  if (opt.samples < 1) throw PreconditionError("coercivity_suite: need at least one sample");
  if (pack.PhiM.size() == 0) throw PreconditionError("coercivity_suite: Phi_M not built");
  // Draw every sample up front so the result does not depend on the thread count.
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> amp(0.0, 1.0);
  std::uniform_real_distribution<double> centre(std::log(0.3), std::log(30.0));
  std::uniform_real_distribution<double> width(0.2, 1.0);
  std::uniform_real_distribution<double> core(0.5, 5.0);
  const double R = std::min(pack.M, pack.grid->y_max() / 2.5);
  std::vector<RadialFunction> us;
  us.reserve(opt.samples);
  for (int k = 0; k < opt.samples; ++k) {
    const double a0 = amp(rng), w0 = core(rng);
    std::array<double, 3> a{}, mu{}, sg{};
    for (int j = 0; j < 3; ++j) {
      a[j] = amp(rng);
      mu[j] = centre(rng);
      sg[j] = width(rng);
    }
    us.push_back(RadialFunction::sample(pack.grid, [&](double y) {
      double v = a0 * std::exp(-(y * y) / (w0 * w0));
      const double l = std::log(y);
      for (int j = 0; j < 3; ++j) v += a[j] * std::exp(-0.5 * std::pow((l - mu[j]) / sg[j], 2));
      return v * cutoff::scaled(y, R);
    }));
  }

  CoercivityReport rep;
  rep.samples.resize(opt.samples);
  std::mutex mu_;
  int next = 0;
  auto worker = [&]() {
    for (;;) {
      int k;
      {
        std::lock_guard<std::mutex> lock(mu_);
        if (next >= opt.samples) return;
        k = next++;
      }
      rep.samples[k] = evaluate_coercivity(pack, us[k], opt, true);
    }
  };
  const int jobs = std::clamp(opt.jobs, 1, opt.samples);
  std::vector<std::thread> pool;
  for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  rep.worst_sub_ratio = rep.worst_weighted_ratio = std::numeric_limits<double>::infinity();
  for (const auto& s : rep.samples) {
    rep.sub_violations += s.sub_ok ? 0 : 1;
    rep.hardy_violations += s.hardy_ok ? 0 : 1;
    rep.worst_sub_ratio = std::min(
        rep.worst_sub_ratio, (s.quadratic + s.psi_proj * s.psi_proj / opt.c_sub) / s.dirichlet);
    rep.worst_hardy_ratio = std::max(rep.worst_hardy_ratio, s.hardy_lhs / s.dirichlet);
    rep.worst_weighted_ratio = std::min(rep.worst_weighted_ratio, s.weighted_lhs / s.weighted_rhs);
  }
  return rep;
}

}  // namespace typeii
