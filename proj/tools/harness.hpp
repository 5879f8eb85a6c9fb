#pragma once

#include "typeii/run_config.hpp"

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace typeii::harness {

/// One measured quantity against its bound, as listed in summary.json and the report.
struct Check {
  std::string name;
  double value = 0.0;
  /// Accepted interval [lo, hi]; infinite ends are open.
  double lo = 0.0;
  double hi = 0.0;
  bool pass = false;
  /// Distance to the nearest end of the interval, negative when outside.
  double margin = 0.0;
};

Check make_check(const std::string& name, double value, double lo, double hi);

struct CommandOptions {
  /// Root output directory; each command writes into root / <command>.
  std::filesystem::path out_root;
  int jobs = 1;
};

/**
 * Runs one experiment. Outputs land in out_root / <command> together with
 * the config echo and provenance. Returns 0, or 3 when the run finished but
 * hit a numerical failure that its outputs record. Configuration problems
 * throw ConfigError and violated preconditions throw PreconditionError.
 */
int run_command(Experiment command, const RunConfig& cfg, const CommandOptions& opt,
                std::ostream& log);

/// Output directory of a command under the root.
std::filesystem::path command_dir(const std::filesystem::path& root, Experiment command);

}  // namespace typeii::harness
