#pragma once

#include "typeii/modulation_ode.hpp"
#include "typeii/profile_builder.hpp"
#include "typeii/spectral.hpp"

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace typeii {

struct FlowConfig {
  /// Requested Phi_M radius, capped at B0(b1(s0)) / 8 so that Phi_M sees no radiation.
  double M = 1e3;
  /// Constant of the bootstrap bounds.
  double K = 50.0;
  /// Exponent of B_delta = b1^{-delta} in the improved b2.
  double delta = 0.05;
  /// Log spacing of the radial grid.
  double h_log = 0.04;
  /// Nominal step in s.
  double ds = 0.25;
  /// Smallest step before the integrator gives up.
  double ds_min = 1e-4;
  /// Relative orthogonality defect allowed after re-projection.
  double defect_tol = 1e-9;
  /// Smallest admissible |det| / (Lambda Q, Phi_M)^3 of the modulation system.
  double det_min = 1e-3;
  /// Test switches: drop Psi~_b from the forcing (Mod stays), drop N(eps).
  bool forcing = true;
  bool nonlinear = true;
};

/**
 * Read-only data shared by every trajectory on one grid: the profile
 * builder, the spectral pack with Phi_M and psi_dual, and the matrix of H.
 */
class FlowContext {
 public:
  /// Builds everything for runs starting at s0 and ending no later than s_end.
  FlowContext(double s0, double s_end, const FlowConfig& cfg);

  const FlowConfig& config() const { return cfg_; }
  const GridPtr& grid() const { return grid_; }
  const ProfileBuilder& builder() const { return *builder_; }
  const SpectralPack& pack() const { return pack_; }
  const OperatorMatrix& op() const { return op_; }
  double M() const { return M_; }
  double s0() const { return s0_; }
  double s_end() const { return s_end_; }
  /// (Lambda Q, Phi_M).
  double LQ_Phi() const { return LQ_Phi_; }

  /// eps minus its component in span{H^k Phi_M}; returns the removed part's norm.
  double project(RadialFunction& eps) const;
  /// max_k |(eps, H^k Phi_M)| / (|eps| |H^k Phi_M|), zero for eps = 0.
  double orthogonality_defect(const RadialFunction& eps) const;

 private:
  FlowConfig cfg_;
  double s0_, s_end_, M_ = 0.0, LQ_Phi_ = 0.0;
  GridPtr grid_;
  std::unique_ptr<ProfileBuilder> builder_;
  SpectralPack pack_;
  OperatorMatrix op_;
  Eigen::Matrix3d gram_inv_;
};

/// Profiles attached to one value of b: ladder, error and Q~_b.
struct ProfileAt;

struct FlowState {
  double s = 0.0;
  double lambda = 1.0;
  double t = 0.0;
  BVector b;
  RadialFunction epsilon;
  /// H eps, H^2 eps, H^3 eps.
  std::array<RadialFunction, 3> eps2k;
  /// Xi_1, Xi_2, Xi_4, Xi_6.
  std::array<double, 4> Xi{};
  double tau = 0.0;
  double tau_tilde = 0.0;
  double b2_tilde = 0.0;
  Eigen::Vector2d V_tilde = Eigen::Vector2d::Zero();
  double delta = 0.05;
  /// E(Q~_b + eps) on the grid.
  double energy = 0.0;
  /// Accumulated int (lambda_s / lambda) (Delta v + v^3, Lambda v) ds.
  double energy_flux = 0.0;
  /// energy + energy_flux, non-increasing along the flow.
  double energy_book = 0.0;
  /// -int |Delta v + v^3|^2, the rate of energy_book.
  double dissipation = 0.0;
  /// b1(s0), used by the Xi_1 bootstrap bound.
  double b1_initial = 0.0;
  /// Modulation residuals of the last step and their system's normalized determinant.
  std::array<double, 3> D{};
  double D_det = 0.0;
  /// Size of the component removed by the last re-projection, relative to |eps|.
  double projection_removed = 0.0;
  double projection_defect = 0.0;
  /// (Delta v + v^3, Lambda v), the scaling flux through the outer boundary.
  double flux_integrand = 0.0;
  std::shared_ptr<const ProfileAt> profiles;
};

/// The two parts of the forcing on the right of the eps equation.
struct ForcingSplit {
  RadialFunction F_total, F0, F1, L, N;
};

/// Modulation directions multiplying D: -Lambda Q~_b, d Q~_b / d b1, d Q~_b / d b2.
std::array<RadialFunction, 3> modulation_directions(const ErrorProfile& err);

/**
 * F0 = -Psi~_b - Mod and F1 = L(eps) + N(eps) with L(eps) = 3 (Q~_b^2 - Q^2) eps
 * and N(eps) = 3 Q~_b eps^2 + eps^3.
 */
ForcingSplit forcing_split(const FlowContext& ctx, const FlowState& st,
                           const std::array<double, 3>& D);

/// Refreshes eps2k, Xi, tau, b2_tilde, V_tilde and energy from (s, b, eps).
void refresh(const FlowContext& ctx, FlowState& st);

/**
 * Initial data v0 = Q~_{b(0)} + tau(0) psi_dual from (V~2(0), tau~(0)) in
 * [-1, 1]^2, with U1(0) = 0 and U2(0) solved so that V~1(0) = -V~2(0) / 3.
 */
FlowState build_initial_data(const FlowContext& ctx, double V2_tilde_0, double tau_tilde_0,
                             double s0);

struct ModulationSolution {
  /// (lambda_s/lambda + b1, (b1)_s + b1^2 (1 + c) - b2, (b2)_s + b1 b2 (3 + c)).
  std::array<double, 3> D{};
  /// Determinant of the system divided by (Lambda Q, Phi_M)^3 (modulus near 1 at small b).
  double det = 0.0;
  /// 1-norm condition number of the unscaled system.
  double cond = 0.0;
  /// The 3x3 system (rows: Phi_M, H Phi_M, H^2 Phi_M).
  Eigen::Matrix3d matrix = Eigen::Matrix3d::Zero();
};

/**
 * D from d/ds (eps, H^k Phi_M) = 0 for k = 0, 1, 2 with the semi-discrete
 * equation. When err is absent the error profile is built at state.b.
 */
ModulationSolution modulation_solve(const FlowContext& ctx, const FlowState& st,
                                    const ErrorProfile* err = nullptr);

struct StepInfo {
  double ds = 0.0;
  int halvings = 0;
};

/**
 * Advances by ds with H implicit and Lambda eps, F explicit. D is solved so
 * that the new eps meets (eps, H^k Phi_M) = 0 exactly, which is the
 * semi-discrete modulation law with H eps taken at the new time. The step is
 * halved while the modulation system is ill-conditioned or the defect
 * exceeds the tolerance.
 */
StepInfo step(const FlowContext& ctx, FlowState& st, double ds);

/// Bootstrap flags, in order.
enum class Bound { Xi1, Xi2, Xi4, Xi6, V1, V2, Tau, Count };
const char* bound_name(Bound b);

struct DiagnosticRecord {
  double s = 0.0, t = 0.0, lambda = 0.0, b1 = 0.0, b2 = 0.0, b2_tilde = 0.0;
  std::array<double, 4> Xi{};
  double tau = 0.0, tau_tilde = 0.0;
  Eigen::Vector2d V_tilde = Eigen::Vector2d::Zero();
  double energy = 0.0, energy_book = 0.0;
  std::array<double, 3> D{};
  double projection_defect = 0.0, projection_removed = 0.0;
  /// Value of each bounded quantity divided by its bound.
  std::array<double, static_cast<int>(Bound::Count)> ratio{};
  /// First violated bound, if any.
  std::optional<Bound> violated;
  std::string flags() const;
};

DiagnosticRecord diagnostics(const FlowContext& ctx, const FlowState& st);

struct LyapunovSeries {
  std::string name;
  /// Fitted constant: max of the finite-difference derivative over its right-hand side.
  double C = 0.0;
  /// The same over the first and second half of the history.
  double C_first = 0.0, C_second = 0.0;
  /// RHS * C - derivative at each interior record (non-negative when the bound holds).
  std::vector<double> margin;
};

struct LyapunovReport {
  std::vector<double> s;
  LyapunovSeries lya6, lya4, lya2, lya2_alt;
};

/// Finite-difference d/dt of lambda^{-10} Xi6, lambda^{-6} Xi4, lambda^{-2} Xi2 against their bounds.
LyapunovReport lyapunov_monitor(const std::vector<DiagnosticRecord>& history, double M);

struct ModulationFit {
  /// Smallest C with |D| <= C (sqrt(Xi6 / log M) + b1^3 / |log b1| + b1^{3.5}) on every record.
  double C = 0.0;
  /// The same over the first and second half of the records.
  double C_first = 0.0, C_second = 0.0;
};

/// Fits the modulation bound over the records after the initial one.
ModulationFit fit_modulation(const std::vector<DiagnosticRecord>& history, double M);

struct ExitInfo {
  double s = 0.0;
  Bound coord = Bound::Count;
  int sign = 0;
  /// d/ds of the squared exiting quantity (for V and tau), by a one-sided difference.
  double d_ds_square = 0.0;
  bool outgoing() const { return d_ds_square > 0.0; }
};

struct FlowRun {
  std::vector<DiagnosticRecord> records;
  std::optional<ExitInfo> exit;
  FlowState last;
  /// Number of steps that needed halving.
  int halved_steps = 0;
  /// Largest post-projection defect over all steps.
  double max_defect = 0.0;
  /// tau~ jumps applied by the trapping control, one per segment.
  std::vector<double> tau_corrections;
  /// Change of energy_book over each accepted step.
  std::vector<double> energy_steps;
  /// Set when a step could not be completed; last holds the final good state.
  std::optional<std::string> failure;
};

struct EvolveOptions {
  /// Stop at the first violated bootstrap bound.
  bool stop_at_exit = true;
  /// Record every n-th step.
  int record_every = 1;
  /// Bounds whose violation counts as an exit.
  std::vector<Bound> exit_on{Bound::Xi1, Bound::Xi2, Bound::Xi4, Bound::Xi6,
                             Bound::V1,  Bound::V2,  Bound::Tau};
};

/// Plain evolution from st to s_end.
FlowRun evolve(const FlowContext& ctx, const FlowState& start, double s_end,
               const EvolveOptions& opt = {});

struct TrapControl {
  /// Advance per segment.
  double segment = 10.0;
  /// Look-ahead used to fix the tau component at each segment start.
  double lookahead = 30.0;
  /// Stop at the first violated bootstrap bound (tau is controlled either way).
  bool stop_at_exit = true;
};

struct TrapRun {
  FlowRun run;
  /// Lambda, b and t handed to the modulation layer.
  Trajectory handoff;
  /// |grad(v - Q)|^2 at each record, the distance to the bubble in the energy norm.
  std::vector<double> bubble_distance;
  /// lambda s^{2/3} (log s)^{-4/9} drift (max/min - 1) and b1 s at the end.
  double lambda_drift = 0.0;
  double b1_s_end = 0.0;
};

/**
 * Trapped run: at every segment start the psi_dual component is corrected so
 * that tau~ returns to zero at the end of the look-ahead, using the linear
 * response of two trial runs. This follows the stable manifold in the tau
 * direction, which no single-shot initial value can do over long windows.
 */
TrapRun run_trap(const FlowContext& ctx, const FlowState& start, double s_end,
                 const TrapControl& ctl = {});

struct BrouwerCell {
  double V2_0 = 0.0;
  double tau_0 = 0.0;
  int level = 0;
  double s_exit = 0.0;
  std::optional<ExitInfo> exit;
  FlowRun run;
};

struct BrouwerMap {
  std::vector<BrouwerCell> cells;
  /// Index of the cell with the latest exit.
  int best = -1;
  /// True when every cell exits through the same coordinate with the same sign.
  bool degenerate = false;
};

/**
 * Runs an n x n grid over [-1, 1]^2 in (V~2(0), tau~(0)), then refine_depth
 * times an n x n grid on half the previous square around the best cell.
 * A cell exits when V~2 or tau~ leaves [-1, 1]; the other bounds are only
 * flagged in the records.
 */
BrouwerMap brouwer_shoot(const FlowContext& ctx, int n, double s_budget, int refine_depth,
                         int jobs);

/// Run log with columns s, lambda, b1, b2, b2_tilde, Xi1, Xi2, Xi4, Xi6, tau, tau_tilde, V1_tilde, V2_tilde, E, flags.
void write_run_log(const FlowRun& run, const std::filesystem::path& path);
/// Exit map JSON {cells: [{V2_0, tau_0, s_exit, exit_coord, outgoing_sign}]}.
void write_exit_map(const BrouwerMap& map, const std::filesystem::path& path);

}  // namespace typeii
