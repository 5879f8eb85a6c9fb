#include "typeii/profile_builder.hpp"
#include "typeii/spectral.hpp"

#include <boost/numeric/odeint.hpp>
#include <gtest/gtest.h>

#include <array>
#include <cmath>

using namespace typeii;

namespace {

// Ground state energy by shooting u'' + (3/y) u' + (3 Q^2 - sigma) u = 0 from
// the origin: below the eigenvalue the solution crosses zero, above it grows.
double sigma_by_shooting() {
  using State = std::array<double, 2>;
  auto crosses = [](double sigma) {
    auto rhs = [sigma](const State& x, State& dx, double y) {
      const double Q = 1.0 / (1.0 + y * y / 8.0);
      dx[0] = x[1];
      dx[1] = -3.0 / y * x[1] - (3.0 * Q * Q - sigma) * x[0];
    };
    // Series start: u = 1 + a y^2 with 8 a = sigma - 3.
    const double y0 = 1e-4;
    State x{1.0 + (sigma - 3.0) / 8.0 * y0 * y0, (sigma - 3.0) / 4.0 * y0};
    auto stepper = boost::numeric::odeint::make_controlled(
        1e-12, 1e-12, boost::numeric::odeint::runge_kutta_dopri5<State>());
    double y = y0, dy = 1e-3;
    while (y < 30.0) {
      if (stepper.try_step(rhs, x, y, dy) == boost::numeric::odeint::fail) continue;
      if (x[0] < 0.0) return true;
      if (x[0] > 1e6) return false;
    }
    return false;
  };
  double lo = 0.1, hi = 2.0;
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (crosses(mid) ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST(Spectral, GroundStateMatchesShootingOracle) {
  const double oracle = sigma_by_shooting();
  const auto conv = sigma_convergence(200.0, 0.02, 2);
  EXPECT_NEAR(conv.richardson, oracle, 1e-4 * oracle);
  EXPECT_LT(conv.rel_change, 1e-3);
}

TEST(Spectral, OperatorMatrixSolveAndCount) {
  const auto g = RadialGrid::make_patched(100.0, 0.02);
  const auto op = assemble_operator(g);
  EXPECT_EQ(op.count_below(negative_threshold(*g)), 1);
  Vec rhs = Vec::Zero(op.size());
  for (int i = 0; i < op.size(); ++i) rhs[i] = std::exp(-g->y()[i]);
  const double shift = -2.0;
  const Vec x = op.solve_shifted(rhs, shift);
  const Vec back = op.apply(x) - shift * x;
  EXPECT_LT((back - rhs).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Spectral, PackConstraintsHold) {
  const double M = 100.0;
  const auto g = spectral_grid(M, 0.02);
  const SpectralPack pack = build_spectral_pack(g, M);
  const ProfileBuilder pb(g);
  EXPECT_EQ(pack.negative_count, 1);
  EXPECT_LT(std::abs(inner(pack.PhiM, pb.basis().T1)) /
                std::sqrt(norm2(pack.PhiM) * norm2(pb.basis().T1, 2 * M)),
            1e-10);
  EXPECT_NEAR(inner(pack.psi_dual, pack.psi), 1.0, 1e-10);
  for (const auto& hk : pack.H_PhiM) {
    EXPECT_LT(std::abs(inner(pack.psi_dual, hk)) / std::sqrt(norm2(pack.psi_dual) * norm2(hk)),
              1e-10);
  }
  const auto rc = Phi_M_ratio_constants(M, pb.basis().T1, pb.basis().T2);
  EXPECT_NEAR(rc[0], pack.cM1, 1e-2 * std::abs(pack.cM1));
}

TEST(Spectral, PhiMRejectsRadiusBelowFour) {
  const auto g = spectral_grid(100.0, 0.02);
  SpectralPack pack = build_spectral_pack(g, 100.0);
  const ProfileBuilder pb(g);
  EXPECT_THROW(build_Phi_M(pack, 2.0, pb.basis().T1, pb.basis().T2), PreconditionError);
}

TEST(Coercivity, SuiteIsDeterministicAndClean) {
  const SpectralPack pack = build_spectral_pack(spectral_grid(100.0, 0.02), 100.0);
  CoercivityOptions o;
  o.samples = 20;
  const auto a = coercivity_suite(pack, o);
  o.jobs = 4;
  const auto b = coercivity_suite(pack, o);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].quadratic, b.samples[i].quadratic);
  }
  EXPECT_EQ(a.sub_violations, 0);
  EXPECT_EQ(a.hardy_violations, 0);
}

TEST(Coercivity, UnprojectedGroundStateViolatesPositivity) {
  const SpectralPack pack = build_spectral_pack(spectral_grid(100.0, 0.02), 100.0);
  const auto s = evaluate_coercivity(pack, pack.psi, {}, false);
  EXPECT_LT(s.quadratic, 0.0);
}
