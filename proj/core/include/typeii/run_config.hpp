#pragma once

#include "typeii/modulation_ode.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace typeii {

/// Malformed or inconsistent configuration (a usage error).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Experiment { Profiles, Spectrum, Ode, Shoot, Evolve, Brouwer, Report };

const char* experiment_name(Experiment e);
Experiment parse_experiment(const std::string& name);

struct GridSection {
  /// Spacing in log y of the patched grids.
  double h_log = 0.02;
  /// Outer radius; 0 sizes the grid from the run (B1, B0 or M).
  double y_max = 0.0;
};

struct ProfilesSection {
  std::vector<double> b1_ladder{1e-3, 1e-4, 1e-5};
  /// Radius of the inner norms (capped by B0 / 10 of the largest b1).
  double M = 20.0;
};

struct SpectrumSection {
  double M = 1e3;
  /// Refinement levels of the sigma table (h, h/2, ...).
  int levels = 2;
  /// Declared tolerance on the relative sigma shift between the finest levels.
  double sigma_tol = 1e-3;
  int samples = 100;
  std::uint64_t seed = 42;
  double c_sub = 0.1;
};

struct OdeSection {
  double s0 = 1e3;
  double s_end = 1e9;
  double U1_0 = 0.0;
  double V2_0 = 0.5;
  CMode c_mode = CMode::Asymptotic;
  double trap_V1 = 2.0;
  double trap_V2 = 2.0;
  double rtol = 1e-11;
  double atol = 1e-14;
  int samples_per_decade = 40;
  double bracket_lo = -1.0;
  double bracket_hi = 1.0;
};

struct FlowSection {
  double s0 = 1e3;
  double s_end = 3e3;
  double M = 1e3;
  double K = 50.0;
  double delta = 0.05;
  double h_log = 0.04;
  double ds = 0.25;
  double defect_tol = 1e-9;
  double V2_0 = 0.0;
  double tau_0 = 0.0;
  double segment = 5.0;
  double lookahead = 10.0;
  int brouwer_n = 3;
  double brouwer_budget = 200.0;
  int refine_depth = 0;
};

/**
 * Every input of a harness run. Parsed from key = value text with
 * [sections]; unknown sections or keys, duplicates and unparsable values are
 * rejected before anything is computed.
 */
struct RunConfig {
  /// Set when the file names an experiment; it must then match the command.
  std::optional<Experiment> experiment;
  std::filesystem::path output_dir = "out";
  GridSection grid;
  ProfilesSection profiles;
  SpectrumSection spectrum;
  OdeSection ode;
  FlowSection flow;
  /// The text the config was parsed from, echoed into every output directory.
  std::string source_text;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// A complete config with every key at its default value.
std::string default_config_text();

/**
 * Creates dir and writes config.ini (verbatim source text) and
 * provenance.json with the command and the source hash of the library.
 */
void write_provenance(const RunConfig& cfg, Experiment command, const std::filesystem::path& dir);

}  // namespace typeii
