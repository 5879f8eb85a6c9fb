#pragma once

#include "typeii/profile_builder.hpp"

#include <Eigen/Core>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace typeii {

/// How c_{b1} is evaluated inside the b-system.
enum class CMode { Asymptotic, Exact };

/// int_0^R (LQ)^2 y^3 dy in closed form.
double LQ_square_moment(double R);
/// (chi_{B} LQ, LQ) with the smooth cutoff, closed form plus Gauss-Kronrod on [B, 2B].
double cutoff_LQ_pairing(double B);
/// 64 / (chi_{B0/4} LQ, LQ) from the closed-form pairing.
double c_b_exact(double b1);
/// 2 / |log b1|.
double c_b_asymptotic(double b1);
double c_b(double b1, CMode mode);

/// Approximate solution b^e(s); requires s > e.
BVector b_e(double s);
/// The s >= 10 at which b^e_1(s) = b1, for 0 < b1 < b^e_1(10).
double s_of_b1e(double b1);
/// b^e at the point of the curve where b^e_1 = b1 (the on-trajectory b2).
BVector b_e_at_b1(double b1);
/// d/ds b^e(s).
BVector b_e_rate(double s);
/**
 * Residuals (b_k^e)_s + (2k - 1 + 2 / log s) b_1^e b_k^e - b_{k+1}^e for
 * k = 1, 2, with b_3^e = 0.
 */
std::array<double, 2> b_e_residual(double s);

/// Right-hand side of the b-system at b.
struct BRhs {
  double b1s = 0.0;
  double b2s = 0.0;
  /// lambda_s / lambda.
  double log_lambda_s = 0.0;
};
BRhs ode_rhs(const BVector& b, CMode mode);

/// Fixed matrices of the linearized system in (U, V) coordinates.
Eigen::Matrix2d matrix_P();
Eigen::Matrix2d matrix_A();
Eigen::Matrix2d matrix_D_A();

/// U_k = (b_k - b_k^e) s^k (log s)^{5/4}.
Eigen::Vector2d U_of_b(const BVector& b, double s);
BVector b_of_U(const Eigen::Vector2d& U, double s);

struct ModulationFrame {
  double s = 0.0;
  Eigen::Vector2d U = Eigen::Vector2d::Zero();
  Eigen::Vector2d V = Eigen::Vector2d::Zero();
  BVector b;
  BVector b_e;
  double lambda = 1.0;
  double t = 0.0;
};

/// Frame at s with the given U, lambda = 1 and t = 0.
ModulationFrame frame_from_U(double s, const Eigen::Vector2d& U);
/// Frame at s with U_1 = 0 and the given V_2 (so V_1 = -V_2 / 3).
ModulationFrame frame_from_V2(double s, double V2);

struct ExitEvent {
  double s = 0.0;
  /// 1 or 2: the coordinate of V that reached the trap bound.
  int coord = 0;
  /// Sign of V_coord at exit.
  int sign = 0;
  /// Sign of V_2 at exit, which classifies the run for shooting.
  int V2_sign = 0;
  /// d/ds of V_coord^2 at exit.
  double dV2_ds = 0.0;
  bool outgoing() const { return dV2_ds > 0.0; }
};

struct Trajectory {
  std::vector<ModulationFrame> frames;
  std::optional<ExitEvent> exit;
  double s_start() const { return frames.front().s; }
  double s_last() const { return frames.back().s; }
  /// s_exit - s0, or s_last - s0 when the trajectory never exits.
  double trapped_time() const;
};

struct TrapBounds {
  double V1 = 2.0;
  double V2 = 2.0;
};

struct IntegrateOptions {
  CMode c_mode = CMode::Asymptotic;
  TrapBounds trap;
  double rtol = 1e-11;
  double atol = 1e-14;
  /// Output frames per decade of s.
  int samples_per_decade = 40;
  /// Integrate s dU/ds = A U instead of the b-system.
  bool linearized = false;
  /// Stop at the first trap violation.
  bool stop_at_exit = true;
};

/**
 * Adaptive Dormand-Prince integration in log s. Exits are located by
 * bisection on the dense output and recorded with the sign of d/ds V^2.
 */
Trajectory integrate(const ModulationFrame& start, double s_end, const IntegrateOptions& opt);

struct ShootResult {
  double V2_star = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  int iterations = 0;
  Trajectory best;
  Trajectory lo_run;
  Trajectory hi_run;
  /// Bracket widths after each bisection step.
  std::vector<double> widths;
};

struct ShootOptions {
  double tol = 1e-15;
  int max_iter = 200;
};

/**
 * Bisection on V_2(0) between endpoints whose trajectories exit with
 * opposite V_2 signs, until a trajectory stays trapped up to s_end or the
 * bracket collapses.
 */
ShootResult shoot_unstable(double s0, double lo, double hi, double s_end,
                           const IntegrateOptions& opt, const ShootOptions& sopt = {});

/// Thrown when a bracket has same-signed exits; carries both signs.
class BracketError : public PreconditionError {
 public:
  BracketError(const std::string& what, int lo_sign, int hi_sign)
      : PreconditionError(what), lo_sign(lo_sign), hi_sign(hi_sign) {}
  int lo_sign;
  int hi_sign;
};

struct RateFit {
  double p = 0.0;
  double q = 0.0;
  double c = 0.0;
  double residual = 0.0;
  double s_lo = 0.0;
  double s_hi = 0.0;
  /// Time unit t_* dividing T - t before the fit.
  double t_unit = 1.0;
};

/**
 * Least-squares fit of log lambda = log c + p log tau + q log|log tau| with
 * tau = (T - t) / t_unit. When t_unit is absent it is chosen so that
 * log tau + (1/3) log s has zero mean over the samples, the identification
 * behind the final rate.
 */
RateFit fit_rate(const std::vector<double>& s, const std::vector<double>& lambda,
                 const std::vector<double>& T_minus_t, std::optional<double> t_unit = {});

struct RateReport {
  std::vector<double> s, lambda, t, T_minus_t;
  double T_est = 0.0;
  double tail_one_term = 0.0;
  double tail_two_term = 0.0;
  /// |two-term - one-term| tail, the truncation estimate.
  double tail_error = 0.0;
  RateFit fit;
  /// max/min - 1 of lambda s^{2/3} (log s)^{-4/9} over the final decade.
  double lambda_drift = 0.0;
};

/// Rebuilds lambda, t and T from a trajectory spanning at least three decades.
RateReport reconstruct_rate(const Trajectory& traj, std::optional<double> fit_s_lo = {},
                            std::optional<double> fit_s_hi = {});

/// Tail int_{s}^inf lambda^2 ds of the asymptotic law anchored at (s, lambda).
double lambda_tail(double s, double lambda, int terms);

/// Exits of unshot runs for each V_2(0), computed in parallel.
std::vector<Trajectory> sweep_V2(double s0, const std::vector<double>& V2_values, double s_end,
                                 const IntegrateOptions& opt, int jobs);

/// log(s_exit / s0) of the linearized flow from U_1 = 0, V_2(0).
double linear_exit_log_time(double V2_0, double bound);

/**
 * Linearized exit prediction around a trapped reference run: the offset
 * V_2(0) - V_2^ref(0) grows like (s / s0)^{2/3} on top of the reference,
 * and the predicted exit is the first s where |V_2| reaches the bound.
 * Returns log(s_exit / s0), or nothing if the reference ends first.
 */
std::optional<double> linear_exit_prediction(const Trajectory& reference, double V2_0,
                                             double bound);

/// Slope of log|V_2 - V_2^ref| against log s over the frames shared by both runs.
double separation_growth_exponent(const Trajectory& run, const Trajectory& reference);

}  // namespace typeii
