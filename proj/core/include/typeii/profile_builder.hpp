#pragma once

#include "typeii/radial_core.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace typeii {

/// Modulation parameters (b1, b2).
struct BVector {
  double b1 = 0.0;
  double b2 = 0.0;
};

/// Exponents (i, j) of the monomial b1^i b2^j. i may be -1 after a b1 derivative.
using MonoKey = std::pair<int, int>;

/// Weighted order of a monomial, b2 counting as b1^2.
inline int mono_order(const MonoKey& k) { return k.first + 2 * k.second; }

/// Sum over keys of b1^i b2^j times a profile.
using MonomialMap = std::map<MonoKey, RadialFunction>;

/// Adds a * f to the entry of key k, creating it when absent.
void mono_add(MonomialMap& m, const MonoKey& k, const RadialFunction& f, double a = 1.0);
/// Evaluates the map at b on the given grid.
RadialFunction mono_eval(const MonomialMap& m, const BVector& b, const GridPtr& g);
/// Graded product, keeping only keys of order in [min_order, max_order].
MonomialMap mono_product(const MonomialMap& a, const MonomialMap& b, int min_order = 0,
                         int max_order = 1 << 20);

/// Solution of H u = f by variation of constants, with Lambda u from the same integrals.
struct GreenSolution {
  RadialFunction u;
  RadialFunction Lu;
};

/// Fixed kernels of the linearized operator and the two b-independent profiles.
struct SolitonBasis {
  GridPtr grid;
  RadialFunction Q, LQ, L2Q, Gamma, LGamma, V, LV;
  RadialFunction T1, LT1, T2, LT2;
};

/// Radiation correction attached to b1.
struct RadiationProfile {
  double b1 = 0.0;
  double B0 = 0.0;
  double B1 = 0.0;
  double c_b = 0.0;
  double d_b = 0.0;
  RadialFunction Sigma;
  /// Sigma + c_b T1, which vanishes identically for y <= B0/4.
  RadialFunction Sigma_tilde;
  /// H^{-1} Sigma_tilde from the Green formula.
  RadialFunction Hinv_Sigma_tilde;
};

/**
 * The correction ladder at a fixed b1. Each S_j is a monomial map whose
 * profiles still depend on b1 through the radiation and the cutoffs; the
 * D maps hold b1 times the derivative of each profile in b1 at fixed
 * monomial, and the L maps hold Lambda applied to each profile.
 */
struct CorrectionLadder {
  double b1 = 0.0;
  RadiationProfile radiation;
  RadialFunction Theta2, Theta3;
  std::array<MonomialMap, 5> S;   // S[2], S[3], S[4] used
  std::array<MonomialMap, 5> LS;  // Lambda of each profile
  std::array<MonomialMap, 5> DS;  // b1 d/db1 of each profile at fixed monomial
  /// The full alpha as a monomial map, T1 and T2 included.
  MonomialMap alpha;
  MonomialMap L_alpha;
  MonomialMap D_alpha;
};

/// Profiles assembled at a given b.
struct AssembledProfile {
  RadialFunction Qb;
  RadialFunction alpha;
};

/// Nonlinear remainders of Q_b^3 sorted by order.
struct Remainders {
  RadialFunction R2, R3, R4, R;
};

/// Rates (b1)_s and (b2)_s used when assembling the error.
struct BRates {
  double b1s = 0.0;
  double b2s = 0.0;
};

/// The rates imposed by the formal system at b.
BRates system_rates(const BVector& b, double c_b);

struct ErrorOptions {
  /// When absent the formal system rates are used.
  std::optional<BRates> rates;
  /// Radius of the inner norms (Psi4-type), capped by the builder when needed.
  double M = 20.0;
  /// Skip the norm evaluation (used inside time stepping).
  bool norms = true;
};

struct ErrorProfile {
  BVector b;
  BRates rates;
  double M = 0.0;
  RadialFunction Psi;
  RadialFunction Psi_tilde;
  /// Part of Psi_tilde supported in y <= 2 B1 (everything but b1 (1 - chi) Lambda Q).
  RadialFunction Psi_tilde_local;
  /// H applied analytically to b1 (1 - chi) Lambda Q, supported in [B1, 2 B1].
  RadialFunction H_Psi_tilde_far;
  /// -Lambda Qtilde_b, chi d alpha/db1, chi d alpha/db2.
  std::array<RadialFunction, 3> Mod_basis;
  /// alpha d chi_{B1}/d b1, the cutoff part of d Qtilde_b / d b1.
  RadialFunction alpha_dchi;
  std::map<std::string, double> weighted_norms;
};

/// Grid sized for b1: reaches max(4 B1, 8 B0) with log spacing h_log.
GridPtr grid_for_b1(double b1, double h_log);

class ProfileBuilder {
 public:
  explicit ProfileBuilder(GridPtr grid);

  const GridPtr& grid() const { return grid_; }
  const SolitonBasis& basis() const { return basis_; }

  /// u = Gamma int f LQ x^3 - LQ int f Gamma x^3.
  RadialFunction invert_H(const RadialFunction& f) const;
  GreenSolution invert_H_full(const RadialFunction& f) const;
  /// T1 = H^{-1}(-LQ) for k = 1, T2 = H^{-1}(-T1) for k = 2.
  const RadialFunction& build_T(int k) const;

  RadiationProfile build_radiation(double b1) const;
  CorrectionLadder build_corrections(double b1) const;

  AssembledProfile assemble_Qb(const CorrectionLadder& ladder, const BVector& b,
                               bool localized) const;
  Remainders remainders(const CorrectionLadder& ladder, const BVector& b) const;
  ErrorProfile compute_error(const CorrectionLadder& ladder, const BVector& b,
                             const ErrorOptions& opt = {}) const;

  /// Q_b at b, building the ladder when b is nonzero (b = 0 gives Q itself).
  AssembledProfile assemble_Qb(const BVector& b, bool localized) const;
  /// Error at b, building the ladder when b is nonzero (b = 0 gives zero).
  ErrorProfile compute_error(const BVector& b, const ErrorOptions& opt = {}) const;

  /// Bound K_b of the a priori region |b2| <= K_b b1^2.
  void set_apriori_bound(double Kb) { Kb_ = Kb; }
  double apriori_bound() const { return Kb_; }

  /// Radius used by the inner norms: M capped by B0/10 of the ladder.
  static double effective_M(double M, double b1);

 private:
  GridPtr grid_;
  SolitonBasis basis_;
  double Kb_ = 10.0;
};

/// One fitted power law of the scaling report.
struct ScalingFit {
  std::string norm;
  double slope = 0.0;
  double residual = 0.0;
  double target = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::vector<double> values;
};

struct ScalingReport {
  std::vector<double> b1;
  double M = 0.0;
  std::vector<ScalingFit> fits;
  bool all_pass() const;
  const ScalingFit& fit(const std::string& name) const;
};

struct ScalingOptions {
  double h_log = 0.02;
  double M = 20.0;
  int jobs = 1;
};

/**
 * Builds the ladder at each b1 on its own grid, at the on-trajectory b2
 * supplied by b2_of, and fits log-log slopes of every stored norm.
 */
ScalingReport verify_error_scaling(
    const std::vector<double>& b1_ladder, const std::function<double(double)>& b2_of,
    const ScalingOptions& opt, const std::optional<std::filesystem::path>& report_path = {});

/// Writes the ladder profiles as CSV files plus a JSON manifest.
void write_ladder_fixture(const CorrectionLadder& ladder, const ErrorProfile& err,
                          const std::filesystem::path& dir);

}  // namespace typeii
