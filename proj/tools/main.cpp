#include "harness.hpp"

#include "typeii/version.hpp"

#include <iostream>

#include "CLI11.hpp"

namespace {

/** Exit statuses of the harness. */
enum Status { kOk = 0, kUsage = 2, kPrecondition = 3, kInternal = 4 };

}  // namespace

int main(int argc, char** argv) {
  using namespace typeii;
  CLI::App app{"Type II blow-up harness: profiles, spectrum, modulation ODE and flow experiments"};
  app.set_version_flag("--version", std::string("source ") + kSourceHash);
  std::string config_path, out_dir;
  int jobs = 1;
  bool print_default = false;
  app.add_option("--config", config_path, "key = value config file (defaults when omitted)");
  app.add_option("--out", out_dir, "output root, overrides run.output_dir");
  app.add_option("--jobs", jobs, "parallel workers")->check(CLI::Range(1, 1024));
  app.add_flag("--print-default-config", print_default, "print a complete default config");
  app.require_subcommand(0, 1);
  std::vector<std::pair<CLI::App*, Experiment>> commands;
  for (Experiment e : {Experiment::Profiles, Experiment::Spectrum, Experiment::Ode,
                       Experiment::Shoot, Experiment::Evolve, Experiment::Brouwer,
                       Experiment::Report}) {
    commands.emplace_back(app.add_subcommand(experiment_name(e)), e);
    commands.back().first->fallthrough();
  }
  commands[0].first->description("correction ladder fixtures and error scaling fits");
  commands[1].first->description("negative eigenpair, Phi_M, psi_dual and coercivity suite");
  commands[2].first->description("one trajectory of the b-system");
  commands[3].first->description("bisection on V2(0) and rate reconstruction");
  commands[4].first->description("trapped run of the renormalized flow");
  commands[5].first->description("exit map over (V~2(0), tau~(0))");
  commands[6].first->description("consolidated markdown report from earlier outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (print_default) {
    std::cout << default_config_text();
    return kOk;
  }
  const auto chosen = std::find_if(commands.begin(), commands.end(),
                                   [](const auto& c) { return c.first->parsed(); });
  if (chosen == commands.end()) {
    std::cerr << app.help();
    return kUsage;
  }
  try {
    RunConfig cfg = config_path.empty() ? parse_config(default_config_text())
                                        : load_config(config_path);
    harness::CommandOptions opt;
    opt.out_root = out_dir.empty() ? cfg.output_dir : std::filesystem::path(out_dir);
    opt.jobs = jobs;
    return harness::run_command(chosen->second, cfg, opt, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const PreconditionError& e) {
    std::cerr << "numerical precondition failed: " << e.what() << "\n";
    return kPrecondition;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}
