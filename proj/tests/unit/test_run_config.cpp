#include "typeii/run_config.hpp"

#include <gtest/gtest.h>

using namespace typeii;

TEST(RunConfig, DefaultTextParsesToDefaults) {
  const RunConfig c = parse_config(default_config_text());
  const RunConfig d;
  EXPECT_EQ(c.grid.h_log, d.grid.h_log);
  EXPECT_EQ(c.profiles.b1_ladder, d.profiles.b1_ladder);
  EXPECT_EQ(c.spectrum.seed, d.spectrum.seed);
  EXPECT_EQ(c.ode.rtol, d.ode.rtol);
  EXPECT_EQ(c.flow.ds, d.flow.ds);
  EXPECT_EQ(c.flow.lookahead, d.flow.lookahead);
}

TEST(RunConfig, ParsesValuesAndExperiment) {
  const RunConfig c = parse_config(
      "[run]\nexperiment = ode\n[ode]\ns0 = 2000\nV2_0 = -0.25\n[profiles]\nb1_ladder = 1e-6, 1e-7, 1e-8\n");
  ASSERT_TRUE(c.experiment);
  EXPECT_EQ(*c.experiment, Experiment::Ode);
  EXPECT_EQ(c.ode.s0, 2000.0);
  EXPECT_EQ(c.ode.V2_0, -0.25);
  EXPECT_EQ(c.profiles.b1_ladder.size(), 3u);
}

TEST(RunConfig, RejectsMalformedInput) {
  EXPECT_THROW(parse_config("[ode]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[nowhere]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("x = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[ode]\ns0 = 1e3x\n"), ConfigError);
  EXPECT_THROW(parse_config("[ode]\ns0 = 1e3\ns0 = 2e3\n"), ConfigError);
  EXPECT_THROW(parse_config("[profiles]\nb1_ladder =\n"), ConfigError);
  EXPECT_THROW(parse_config("[ode]\ns0 = 1e9\ns_end = 1e8\n"), ConfigError);
  EXPECT_THROW(parse_config("[flow]\nsegment = 20\nlookahead = 10\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nexperiment = teleport\n"), ConfigError);
}
