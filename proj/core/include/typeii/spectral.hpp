#pragma once

#include "typeii/radial_core.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace typeii {

/**
 * Tridiagonal matrix of H on a radial grid, row for row the stencil used by
 * apply_H with the even ghost at the origin and a zero ghost past the last
 * node. Off-diagonal products are non-negative, so the matrix is similar to
 * a symmetric one and its spectrum is real.
 */
struct OperatorMatrix {
  GridPtr grid;
  Vec lower;  // lower[i] couples row i to node i-1 (lower[0] unused)
  Vec diag;
  Vec upper;  // upper[i] couples row i to node i+1 (upper[n-1] unused)

  int size() const { return static_cast<int>(diag.size()); }
  Vec apply(const Vec& f) const;
  /// Number of eigenvalues strictly below theta (Sturm count).
  int count_below(double theta) const;
  /// Solves (A - shift) x = rhs by Thomas elimination.
  Vec solve_shifted(const Vec& rhs, double shift) const;
};

OperatorMatrix assemble_operator(const GridPtr& grid);

/// Eigenvalues below this value are counted as genuinely negative.
double negative_threshold(const RadialGrid& grid);

struct GroundState {
  double sigma = 0.0;
  RadialFunction psi;
  int negative_count = 0;
  /// |A psi + sigma psi| / |sigma psi| in the max norm.
  double residual = 0.0;
  /// Slope of log|psi| against y over the outer half of its resolved range.
  double tail_slope = 0.0;
};

/// Lowest eigenpair of H. The grid must reach y = 50 so that psi is localized.
GroundState ground_state(const OperatorMatrix& op);

/// One row of the refinement table for sigma.
struct SigmaLevel {
  double h_log = 0.0;
  int n = 0;
  double sigma = 0.0;
};

struct SigmaConvergence {
  std::vector<SigmaLevel> levels;
  /// Second-order Richardson value from the two finest levels.
  double richardson = 0.0;
  /// Relative change of sigma between the two finest levels.
  double rel_change = 0.0;
};

/// Sigma on patched grids with spacings h, h/2, ... (levels entries).
SigmaConvergence sigma_convergence(double y_max, double h_log, int levels = 2);

struct SpectralPack {
  GridPtr grid;
  double sigma = 0.0;
  int negative_count = 0;
  RadialFunction psi;
  double M = 0.0;
  double cM1 = 0.0;
  double cM2 = 0.0;
  RadialFunction PhiM;
  /// H^k Phi_M for k = 0, 1, 2 (Dirichlet outer row).
  std::array<RadialFunction, 3> H_PhiM;
  RadialFunction psi_dual;
  /// Centres of the bumps used for psi_dual.
  std::array<double, 3> bump_centres{};
};

/**
 * Phi_M = chi_M LQ + c1 H(chi_M LQ) + c2 H^2(chi_M LQ), with (c1, c2) from
 * the discrete 2x2 system that makes (Phi_M, T_1) and (Phi_M, T_2) vanish
 * for the grid quadrature. T1 and T2 must live on the same grid.
 */
void build_Phi_M(SpectralPack& pack, double M, const RadialFunction& T1,
                 const RadialFunction& T2);

/// The ratio formulas for (c1, c2), for comparison with the discrete solve.
std::array<double, 2> Phi_M_ratio_constants(double M, const RadialFunction& T1,
                                            const RadialFunction& T2);

/// Cubic B-spline bump centred at c with support [c - w, c + w].
RadialFunction spline_bump(const GridPtr& g, double c, double w);

/**
 * psi_dual = a psi + sum_k c_k g_k with (psi_dual, psi) = 1 and
 * (psi_dual, H^k Phi_M) = 0 for k = 0, 1, 2. Returns the max constraint residual.
 */
double build_dual_psi(SpectralPack& pack);

/**
 * Full pack: eigenpair, Phi_M, psi_dual. The grid must reach 2M and y = 50;
 * T1 and T2 are built on it.
 */
SpectralPack build_spectral_pack(const GridPtr& grid, double M);

/// Grid suited to a pack with scale M.
GridPtr spectral_grid(double M, double h_log);

struct CoercivityOptions {
  int samples = 100;
  std::uint64_t seed = 42;
  /// Constant c of the sub-coercivity bound, fixed in advance.
  double c_sub = 0.1;
  /// Sharp 4D Hardy constant plus the sup term (1 + 1/2).
  double c_hardy = 1.5;
  /// Relative slack allowed for discretization error.
  double slack = 1e-3;
  int jobs = 1;
};

struct CoercivitySample {
  double dirichlet = 0.0;     // int |u'|^2
  double quadratic = 0.0;     // (Hu, u)
  double psi_proj = 0.0;      // (u, psi)
  double hardy_lhs = 0.0;     // int u^2 / y^2 + sup |y u|^2
  double weighted_lhs = 0.0;  // int |Hu|^2
  double weighted_rhs = 0.0;  // three-term lower bound without C(M)
  bool sub_ok = true;
  bool hardy_ok = true;
};

struct CoercivityReport {
  std::vector<CoercivitySample> samples;
  int sub_violations = 0;
  int hardy_violations = 0;
  /// Smallest (Hu,u) + (u,psi)^2 / c over int|u'|^2 seen.
  double worst_sub_ratio = 0.0;
  /// Largest hardy_lhs / int|u'|^2 seen.
  double worst_hardy_ratio = 0.0;
  /// Smallest weighted_lhs / weighted_rhs seen (an estimate of C(M)).
  double worst_weighted_ratio = 0.0;
};

/// Evaluates the three inequalities on one profile (projected first when asked).
CoercivitySample evaluate_coercivity(const SpectralPack& pack, const RadialFunction& u,
                                     const CoercivityOptions& opt, bool project);

/// Random smooth compactly supported samples, projected off Phi_M.
CoercivityReport coercivity_suite(const SpectralPack& pack, const CoercivityOptions& opt);

}  // namespace typeii
