#include "typeii/renormalized_flow.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace typeii;

namespace {

const FlowContext& context_1e4() {
  static const FlowContext ctx(1e4, 1.01e4, FlowConfig{});
  return ctx;
}

}  // namespace

TEST(Flow, PhiMRadiusIsCappedInsideTheRadiationFreeZone) {
  const auto& ctx = context_1e4();
  const double b1 = b_e(1e4).b1;
  EXPECT_LE(ctx.M(), B0_of(b1) / 8.0 * (1 + 1e-12));
  EXPECT_GT(std::abs(ctx.LQ_Phi()), 0.0);
}

TEST(Flow, InitialDataMeetsTheConstraints) {
  const auto& ctx = context_1e4();
  const FlowState st = build_initial_data(ctx, 0.4, -0.3, 1e4);
  EXPECT_LT(ctx.orthogonality_defect(st.epsilon), 1e-12);
  // V~ is read back through the improved b2~, a small shift from b2.
  EXPECT_NEAR(st.V_tilde[1], 0.4, 1e-6);
  EXPECT_NEAR(st.V_tilde[0], -0.4 / 3.0, 1e-6);
  EXPECT_NEAR(st.tau_tilde, -0.3, 1e-9);
  EXPECT_THROW(build_initial_data(ctx, 1.5, 0.0, 1e4), PreconditionError);
}

TEST(Flow, ShortEvolutionKeepsConstraintsAndDissipates) {
  const auto& ctx = context_1e4();
  EvolveOptions eo;
  eo.stop_at_exit = false;
  const FlowRun run = evolve(ctx, build_initial_data(ctx, 0.0, 0.0, 1e4), 1e4 + 5.0, eo);
  ASSERT_FALSE(run.failure) << *run.failure;
  EXPECT_NEAR(run.last.s, 1e4 + 5.0, 1e-9);
  EXPECT_LT(run.max_defect, 1e-9);
  ASSERT_FALSE(run.energy_steps.empty());
  EXPECT_LE(*std::max_element(run.energy_steps.begin(), run.energy_steps.end()), 0.0);
  // Parameters move along the approximate curve at this scale.
  EXPECT_NEAR(run.last.b.b1 / b_e(run.last.s).b1, 1.0, 1e-2);
}

TEST(Flow, ExitOnlyThroughSelectedBounds) {
  const auto& ctx = context_1e4();
  const FlowState st = build_initial_data(ctx, 0.0, 1.0, 1e4);
  EvolveOptions eo;
  eo.exit_on = {Bound::Tau};
  const FlowRun run = evolve(ctx, st, 1e4 + 20.0, eo);
  ASSERT_TRUE(run.exit.has_value());
  EXPECT_EQ(run.exit->coord, Bound::Tau);
  EXPECT_TRUE(run.exit->outgoing());
  eo.exit_on.clear();
  eo.stop_at_exit = true;
  const FlowRun free = evolve(ctx, st, 1e4 + 1.0, eo);
  EXPECT_FALSE(free.exit.has_value());
}

TEST(Flow, FailedStepsAreRecordedNotThrown) {
  // At s0 = 1e3 the approximate profile blows up in the far field near s = 1005.
  const FlowContext ctx(1e3, 1.02e3, FlowConfig{});
  EvolveOptions eo;
  eo.stop_at_exit = false;
  const FlowRun run = evolve(ctx, build_initial_data(ctx, 0.0, 0.0, 1e3), 1.02e3, eo);
  ASSERT_TRUE(run.failure.has_value());
  EXPECT_LT(run.last.s, 1.02e3);
  EXPECT_TRUE(run.last.epsilon.all_finite());
}

TEST(Flow, ModulationFitNeedsRecords) {
  EXPECT_THROW(fit_modulation({}, 100.0), PreconditionError);
  std::vector<DiagnosticRecord> h(4);
  for (int i = 0; i < 4; ++i) {
    h[i].s = i;
    h[i].b1 = 1e-3;
    h[i].Xi[3] = 0.0;
    h[i].D = {1e-9, 0.0, 0.0};
  }
  const double bound = std::pow(1e-3, 3) / std::abs(std::log(1e-3)) + std::pow(1e-3, 3.5);
  EXPECT_NEAR(fit_modulation(h, 100.0).C, 1e-9 / bound, 1e-12);
  EXPECT_THROW(fit_modulation(h, 1.0), PreconditionError);
}

TEST(Flow, ModulationSystemIsWellConditioned) {
  const auto& ctx = context_1e4();
  const auto sol = modulation_solve(ctx, build_initial_data(ctx, 0.0, 0.0, 1e4));
  EXPECT_NEAR(std::abs(sol.det), 1.0, 0.2);
}
