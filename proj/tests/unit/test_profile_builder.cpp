#include "typeii/modulation_ode.hpp"
#include "typeii/profile_builder.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

#include <cmath>

using namespace typeii;

namespace {

double LQ_exact(double y) {
  const double z = y * y / 8.0;
  return (1.0 - z) / ((1.0 + z) * (1.0 + z));
}

// (chi_B LQ, LQ) by adaptive quadrature on dyadic pieces.
double pairing_oracle(double B) {
  auto f = [&](double y) { return cutoff::chi(y / B) * std::pow(LQ_exact(y), 2) * y * y * y; };
  double sum = 0.0, a = 0.0;
  while (a < 2.0 * B) {
    const double next = a == 0.0 ? 1.0 : std::min(2.0 * a, 2.0 * B);
    sum += boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, next, 10u, 1e-13);
    a = next;
  }
  return sum;
}

}  // namespace

TEST(ProfileBuilder, GreenInverseSolvesHu) {
  const auto g = RadialGrid::make_patched(200.0, 0.01);
  const ProfileBuilder pb(g);
  const auto f = RadialFunction::sample(g, [](double y) { return std::exp(-y * y / 4.0); });
  const auto u = pb.invert_H(f);
  const auto r = apply_H(u) - f;
  EXPECT_LT(std::sqrt(norm2(r, 20.0) / norm2(f, 20.0)), 1e-3);
}

TEST(ProfileBuilder, T1InvertsMinusLambdaQ) {
  const auto g = RadialGrid::make_patched(2e3, 0.01);
  const ProfileBuilder pb(g);
  const auto& B = pb.basis();
  const auto r = apply_H(B.T1) + B.LQ;
  EXPECT_LT(std::sqrt(norm2(r, 100.0) / norm2(B.LQ, 100.0)), 1e-3);
}

TEST(ProfileBuilder, T1LogarithmicTailConstant) {
  // Frozen from the Green formula on two grids; both agree to 1e-4.
  for (double h : {0.02, 0.01}) {
    const auto g = RadialGrid::make_patched(2e4, h);
    const ProfileBuilder pb(g);
    const int i = g->last_below(1e4);
    const double y = g->y()[i];
    EXPECT_NEAR(pb.basis().T1.v[i] + 4.0 * std::log(y), 10.8255, 2e-3);
  }
}

TEST(ProfileBuilder, RadiationConstantMatchesQuadratureOracle) {
  for (double b1 : {1e-4, 1e-6}) {
    const ProfileBuilder pb(grid_for_b1(b1, 0.02));
    const auto rad = pb.build_radiation(b1);
    EXPECT_NEAR(rad.c_b * pairing_oracle(B0_of(b1) / 4.0), 64.0, 64.0 * 1e-5);
    EXPECT_NEAR(rad.c_b, c_b_exact(b1), 1e-6 * rad.c_b);
    // Sigma~ vanishes inside B0 / 4.
    const auto& g = *pb.grid();
    for (int k = 0; k < g.size() && g.y()[k] <= rad.B0 / 4.0; ++k) {
      EXPECT_NEAR(rad.Sigma_tilde.v[k], 0.0, 1e-9);
    }
  }
}

TEST(ProfileBuilder, ZeroBGivesTheSolitonAndNoError) {
  const auto g = RadialGrid::make_patched(100.0, 0.02);
  const ProfileBuilder pb(g);
  const auto q = pb.assemble_Qb(BVector{}, true);
  for (int i = 0; i < g->size(); ++i) EXPECT_EQ(q.Qb.v[i], pb.basis().Q.v[i]);
  const auto e = pb.compute_error(BVector{});
  EXPECT_EQ(norm2(e.Psi), 0.0);
}

TEST(ProfileBuilder, ErrorIsSmallAlongTheApproximateCurve) {
  const double b1 = 1e-6;
  const ProfileBuilder pb(grid_for_b1(b1, 0.02));
  const auto ladder = pb.build_corrections(b1);
  const BVector b = b_e_at_b1(b1);
  const auto e = pb.compute_error(ladder, b);
  ASSERT_TRUE(e.Psi.all_finite());
  // The H^3 norm inside 2 B1 sits at the b1^8 scale, far below b1^6.
  EXPECT_LT(e.weighted_norms.at("H3_2B1"), std::pow(b1, 6));
  EXPECT_GT(e.weighted_norms.at("H3_2B1"), 0.0);
}

TEST(Monomials, ProductKeepsTheRequestedOrders) {
  const auto g = RadialGrid::make_log(0.1, 1.0, 0.5);
  const auto one = RadialFunction::sample(g, [](double) { return 1.0; });
  MonomialMap a, b;
  mono_add(a, {1, 0}, one);
  mono_add(a, {0, 1}, one, 2.0);
  mono_add(b, {1, 0}, one);
  const auto p = mono_product(a, b, 0, 2);
  EXPECT_EQ(p.count({2, 0}), 1u);
  EXPECT_EQ(p.count({1, 1}), 0u);  // order 3 dropped
  const auto v = mono_eval(mono_product(a, b), BVector{0.5, 0.25}, g);
  EXPECT_NEAR(v.v[0], (0.5 + 2.0 * 0.25) * 0.5, 1e-15);
}

TEST(ScalingReport, RejectsShortLadders) {
  auto b2 = [](double) { return 0.0; };
  EXPECT_THROW(verify_error_scaling({1e-4, 1e-5}, b2, {}), PreconditionError);
  EXPECT_THROW(verify_error_scaling({1e-4, 1e-4, 1e-5}, b2, {}), PreconditionError);
}
