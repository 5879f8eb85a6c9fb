#include "typeii/radial_core.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace typeii;

namespace {

double LQ_exact(double y) {
  const double z = y * y / 8.0;
  return (1.0 - z) / ((1.0 + z) * (1.0 + z));
}

}  // namespace

TEST(RadialGrid, LogGridHasUniformLogSpacingAtMostH) {
  const auto g = RadialGrid::make_log(1e-2, 1e3, 0.05);
  ASSERT_GT(g->size(), 10);
  const double step = std::log(g->y()[1] / g->y()[0]);
  EXPECT_LE(step, 0.05);
  for (int i = 1; i < g->size(); ++i) {
    EXPECT_NEAR(std::log(g->y()[i] / g->y()[i - 1]), step, 1e-12);
  }
  EXPECT_NEAR(g->y_min(), 1e-2, 1e-15);
  EXPECT_GE(g->y_max(), 1e3 * (1.0 - 1e-12));
}

TEST(RadialGrid, PatchedGridReachesTheOuterRadius) {
  const auto g = RadialGrid::make_patched(500.0, 0.02);
  EXPECT_LT(g->y_min(), 0.05);
  EXPECT_GE(g->y_max(), 500.0 * (1.0 - 1e-12));
  EXPECT_LE(g->y()[g->last_below(100.0)], 100.0);
}

TEST(RadialGrid, RejectsBadArguments) {
  EXPECT_THROW(RadialGrid::make_log(1.0, 0.5, 0.1), PreconditionError);
  EXPECT_THROW(RadialGrid::make_patched(100.0, -0.1), PreconditionError);
}

TEST(Quadrature, GaussianMomentMatchesClosedForm) {
  // int_0^inf y^3 exp(-y^2) dy = 1/2.
  const auto g = RadialGrid::make_patched(20.0, 0.01);
  const auto f = RadialFunction::sample(g, [](double y) { return std::exp(-0.5 * y * y); });
  EXPECT_NEAR(norm2(f), 0.5, 1e-5);
  EXPECT_NEAR(inner(f, f, 1.0), 0.5 * (1.0 - 2.0 * std::exp(-1.0)), 1e-4);
}

TEST(Operators, LambdaOfPowerIsScaledPower) {
  // Lambda y^2 = y^2 + y (2 y) = 3 y^2.
  const auto g = RadialGrid::make_patched(10.0, 0.01);
  const auto f = RadialFunction::sample(g, [](double y) { return y * y; });
  const auto L = apply_Lambda(f);
  for (int i = 5; i < g->size() - 5; ++i) {
    EXPECT_NEAR(L.v[i], 3.0 * f.v[i], 1e-3 * (1.0 + f.v[i]));
  }
}

TEST(Operators, HAnnihilatesTheScalingKernelToSecondOrder) {
  double prev = 0.0;
  for (double h : {0.04, 0.02, 0.01}) {
    const auto g = RadialGrid::make_patched(200.0, h);
    const double r = std::sqrt(norm2(apply_H(RadialFunction::sample(g, LQ_exact)), 100.0));
    if (prev > 0.0) EXPECT_NEAR(prev / r, 4.0, 0.5);
    prev = r;
  }
}

TEST(Operators, LaplacianOfGaussianMatchesClosedForm) {
  // Radial 4D Laplacian of exp(-y^2) is (4 y^2 - 8) exp(-y^2).
  const auto g = RadialGrid::make_patched(12.0, 0.01);
  const auto f = RadialFunction::sample(g, [](double y) { return std::exp(-y * y); });
  const auto d = apply_Laplacian(f);
  for (int i = 0; i < g->size(); ++i) {
    const double y = g->y()[i];
    if (y > 8.0) break;
    EXPECT_NEAR(d.v[i], (4.0 * y * y - 8.0) * std::exp(-y * y), 2e-3);
  }
}

TEST(Cutoff, ProfileAndDerivatives) {
  EXPECT_EQ(cutoff::chi(0.5), 1.0);
  EXPECT_EQ(cutoff::chi(2.5), 0.0);
  double prev = 1.0;
  for (double x = 1.0; x <= 2.0; x += 0.01) {
    const double c = cutoff::chi(x);
    EXPECT_LE(c, prev + 1e-15);
    prev = c;
    const double fd = (cutoff::chi(x + 1e-6) - cutoff::chi(x - 1e-6)) / 2e-6;
    EXPECT_NEAR(cutoff::chi(x, 1), fd, 1e-5);
  }
  EXPECT_THROW(cutoff::chi(1.5, 5), PreconditionError);
}

TEST(Cutoff, Radii) {
  EXPECT_DOUBLE_EQ(B0_of(1e-4), 100.0);
  EXPECT_NEAR(B1_of(1e-4), std::log(1e4) * 100.0, 1e-9);
  const double b = 1e-5, e = 1e-11;
  EXPECT_NEAR(dB1_db1(b), (B1_of(b + e) - B1_of(b - e)) / (2 * e),
              1e-5 * std::abs(dB1_db1(b)));
}

TEST(RadialFunction, ArithmeticRequiresTheSameGrid) {
  const auto a = RadialFunction::zeros(RadialGrid::make_log(0.1, 10.0, 0.1));
  const auto b = RadialFunction::zeros(RadialGrid::make_log(0.1, 10.0, 0.05));
  EXPECT_THROW(a + b, PreconditionError);
}

TEST(RadialFunction, CsvRoundTripIsExact) {
  const auto g = RadialGrid::make_patched(50.0, 0.05);
  const auto f = RadialFunction::sample(g, [](double y) { return std::sin(y) / (1.0 + y); });
  const auto path = std::filesystem::temp_directory_path() / "typeii_roundtrip.csv";
  write_csv(f, path);
  const auto r = read_csv(g, path);
  for (int i = 0; i < g->size(); ++i) EXPECT_EQ(r.v[i], f.v[i]);
  std::filesystem::remove(path);
}
