#include <gtest/gtest.h>

#include "sevlab/config.hpp"

using namespace sevlab;

TEST(Config, ParsesKeysCommentsAndWhitespace) {
  const RunConfig c = parse_config_text(
      "# attack run\n"
      "machine.n = 20\n"
      "machine.mode=xe   # trailing comment\n"
      "\n"
      "  machine.rmp = on\n"
      "machine.seed = 0x2A\n"
      "scenario.name = oracle16\n"
      "scenario.count = 1000\n"
      "scenario.driver = pagefault\n"
      "recover.jobs = 4\n"
      "output.timestamps = false\n");
  EXPECT_EQ(c.machine().n, 20u);
  EXPECT_EQ(c.machine().mode, CipherMode::XE);
  EXPECT_TRUE(c.machine().flags.rmp_ownership);
  EXPECT_EQ(c.machine().seed, 42u);
  EXPECT_EQ(c.scenario.name, "oracle16");
  EXPECT_EQ(c.scenario.count, 1000u);
  EXPECT_EQ(c.scenario.driver, DriverKind::PageFault);
  EXPECT_EQ(c.recover.jobs, 4u);
  EXPECT_FALSE(c.output.timestamps);
}

TEST(Config, DefaultsSurviveAnEmptyFile) {
  const RunConfig c = parse_config_text("# nothing\n\n");
  const RunConfig d;
  EXPECT_EQ(c.machine().n, d.machine().n);
  EXPECT_EQ(c.scenario.driver, DriverKind::Auto);
  EXPECT_TRUE(c.output.timestamps);
}

TEST(Config, LaterKeysOverrideEarlierOnes) {
  RunConfig c = parse_config_text("scenario.count = 5\nscenario.count = 7\n");
  EXPECT_EQ(c.scenario.count, 7u);
  apply_config_key(c, "scenario.count", "9");
  EXPECT_EQ(c.scenario.count, 9u);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_config_text("machine.bogus = 1\n"), ValidationError);
  EXPECT_THROW(parse_config_text("machine.n = twenty\n"), ValidationError);
  EXPECT_THROW(parse_config_text("machine.n = 20x\n"), ValidationError);
  EXPECT_THROW(parse_config_text("machine.rmp = maybe\n"), ValidationError);
  EXPECT_THROW(parse_config_text("machine.n 20\n"), ValidationError);
  EXPECT_THROW(parse_config_text("scenario.driver = polling\n"), ValidationError);
  RunConfig c;
  EXPECT_THROW(load_config_file("/nonexistent/run.conf", c), ValidationError);
}
