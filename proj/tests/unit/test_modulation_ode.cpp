#include "typeii/modulation_ode.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <cmath>

using namespace typeii;

TEST(ApproximateCurve, ResidualIsHigherOrder) {
  for (double s : {1e3, 1e5, 1e7}) {
    const auto r = b_e_residual(s);
    const double scale = std::pow(b_e(s).b1, 2);
    EXPECT_LT(std::abs(r[0]) / scale, 5.0 / std::pow(std::log(s), 2));
  }
}

TEST(ApproximateCurve, InverseInB1) {
  for (double s : {50.0, 1e3, 1e6, 1e12}) {
    const double b1 = b_e(s).b1;
    EXPECT_NEAR(s_of_b1e(b1), s, 1e-9 * s);
    EXPECT_DOUBLE_EQ(b_e_at_b1(b1).b1, b_e(s_of_b1e(b1)).b1);
  }
  EXPECT_THROW(s_of_b1e(-1.0), PreconditionError);
  EXPECT_THROW(s_of_b1e(1.0), PreconditionError);
}

TEST(ApproximateCurve, SecondParameterNegativePastThreshold) {
  EXPECT_GT(b_e(20.0).b2, 0.0);
  for (double s : {30.0, 1e3, 1e8}) EXPECT_LT(b_e(s).b2, 0.0);
}

TEST(Matrices, ConjugationDiagonalizes) {
  const Eigen::Matrix2d A = matrix_A();
  const Eigen::Matrix2d P = matrix_P();
  EXPECT_LT((P * A * P.inverse() - matrix_D_A()).cwiseAbs().maxCoeff(), 1e-12);
  Eigen::EigenSolver<Eigen::Matrix2d> es(A);
  const double a = es.eigenvalues()[0].real(), b = es.eigenvalues()[1].real();
  EXPECT_NEAR(std::min(a, b), -1.0, 1e-12);
  EXPECT_NEAR(std::max(a, b), 2.0 / 3.0, 1e-12);
}

TEST(Coordinates, RoundTrip) {
  const double s = 1e4;
  const Eigen::Vector2d U(0.3, -0.7);
  const Eigen::Vector2d back = U_of_b(b_of_U(U, s), s);
  EXPECT_NEAR(back[0], U[0], 1e-10);
  EXPECT_NEAR(back[1], U[1], 1e-10);
  const auto f = frame_from_V2(s, 0.6);
  EXPECT_NEAR(f.V[1], 0.6, 1e-14);
  EXPECT_NEAR(f.V[0], -0.2, 1e-14);
}

TEST(Integrate, LinearizedFlowMatchesPowerLaws) {
  // s dV/ds = D_A V gives V_k(s) = V_k(s0) (s/s0)^mu_k.
  IntegrateOptions o;
  o.linearized = true;
  const double s0 = 1e3;
  const auto start = frame_from_V2(s0, 0.01);
  const auto t = integrate(start, 1e5, o);
  for (const auto& f : t.frames) {
    const double x = f.s / s0;
    EXPECT_NEAR(f.V[0], start.V[0] / x, 1e-9);
    EXPECT_NEAR(f.V[1], start.V[1] * std::pow(x, 2.0 / 3.0), 1e-8 * std::abs(f.V[1]) + 1e-12);
  }
}

TEST(Integrate, ExitIsOutgoing) {
  const auto t = integrate(frame_from_V2(1e3, 0.5), 1e9, {});
  ASSERT_TRUE(t.exit.has_value());
  EXPECT_EQ(t.exit->coord, 2);
  EXPECT_TRUE(t.exit->outgoing());
  EXPECT_NEAR(std::abs(t.frames.back().V[1]), 2.0, 1e-6);
  EXPECT_THROW(integrate(frame_from_V2(1e3, 2.5), 1e9, {}), PreconditionError);
}

TEST(Shooting, SameSignedBracketReportsBothSigns) {
  try {
    shoot_unstable(1e3, 0.5, 1.0, 1e9, {});
    FAIL() << "expected a bracket error";
  } catch (const BracketError& e) {
    EXPECT_EQ(e.lo_sign, 1);
    EXPECT_EQ(e.hi_sign, 1);
  }
}

TEST(Shooting, ShotValueIsStableUnderTolerance) {
  // Frozen shot value at s0 = 1e3.
  const auto a = shoot_unstable(1e3, -1.0, 1.0, 1e9, {});
  EXPECT_NEAR(a.V2_star, -0.8931, 5e-4);
  EXPECT_GE(a.best.s_last(), 1e9 * (1 - 1e-12));
}

TEST(RateFit, RecoversExponentsOnSyntheticLaw) {
  std::vector<double> s, lam, T;
  for (double x = 1.0; x <= 30.0; x += 0.1) {
    const double tau = std::exp(-x);
    s.push_back(std::exp(x));
    T.push_back(tau);
    lam.push_back(3.0 * tau * tau * std::pow(std::abs(std::log(tau)), -4.0 / 3.0));
  }
  const RateFit f = fit_rate(s, lam, T, 1.0);
  EXPECT_NEAR(f.p, 2.0, 1e-9);
  EXPECT_NEAR(f.q, -4.0 / 3.0, 1e-8);
  EXPECT_NEAR(f.c, 3.0, 1e-8);
}

TEST(RadiationConstant, ExactApproachesAsymptotic) {
  for (double b1 : {1e-6, 1e-10, 1e-14}) {
    const double r = std::abs(c_b_exact(b1) / c_b_asymptotic(b1) - 1.0);
    EXPECT_LT(r * std::abs(std::log(b1)), 12.0);
  }
}
