#include "typeii/run_config.hpp"

#include "typeii/version.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"

namespace typeii {

namespace {

constexpr std::pair<Experiment, const char*> kExperiments[] = {
    {Experiment::Profiles, "profiles"}, {Experiment::Spectrum, "spectrum"},
    {Experiment::Ode, "ode"},           {Experiment::Shoot, "shoot"},
    {Experiment::Evolve, "evolve"},     {Experiment::Brouwer, "brouwer"},
    {Experiment::Report, "report"}};

double to_double(const std::string& key, const std::string& text) {
  const std::string t = boost::algorithm::trim_copy(text);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (t.empty() || used != t.size() || !std::isfinite(v)) {
    throw ConfigError(key + ": '" + text + "' is not a finite number");
  }
  return v;
}

long long to_integer(const std::string& key, const std::string& text) {
  const double v = to_double(key, text);
  if (v != std::floor(v) || std::abs(v) > 9.0e15) {
    throw ConfigError(key + ": '" + text + "' is not an integer");
  }
  return static_cast<long long>(v);
}

/// One accepted key: parses its text into the config and checks its own range.
using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& text)>;

template <class Section>
Setter real_in(Section RunConfig::*sec, double Section::*field,
               std::function<bool(double)> ok, const char* what) {
  return [=](RunConfig& c, const std::string& key, const std::string& text) {
    const double v = to_double(key, text);
    if (!ok(v)) throw ConfigError(key + ": " + text + " must be " + what);
    (c.*sec).*field = v;
  };
}

template <class Section, class Int>
Setter int_in(Section RunConfig::*sec, Int Section::*field, long long lo, long long hi) {
  return [=](RunConfig& c, const std::string& key, const std::string& text) {
    const long long v = to_integer(key, text);
    if (v < lo || v > hi) {
      throw ConfigError(key + ": " + text + " must lie in [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "]");
    }
    (c.*sec).*field = static_cast<Int>(v);
  };
}

const auto positive = [](double v) { return v > 0.0; };
const auto non_negative = [](double v) { return v >= 0.0; };
const auto unit_box = [](double v) { return v >= -1.0 && v <= 1.0; };

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["run.experiment"] = [](RunConfig& c, const std::string&, const std::string& text) {
      c.experiment = parse_experiment(boost::algorithm::trim_copy(text));
    };
    t["run.output_dir"] = [](RunConfig& c, const std::string& key, const std::string& text) {
      const std::string v = boost::algorithm::trim_copy(text);
      if (v.empty()) throw ConfigError(key + ": must not be empty");
      c.output_dir = v;
    };

    t["grid.h_log"] = real_in(&RunConfig::grid, &GridSection::h_log,
                              [](double v) { return v > 0.0 && v <= 0.2; }, "in (0, 0.2]");
    t["grid.y_max"] = real_in(&RunConfig::grid, &GridSection::y_max, non_negative,
                              "non-negative (0 sizes the grid from the run)");

    t["profiles.b1_ladder"] = [](RunConfig& c, const std::string& key, const std::string& text) {
      std::vector<std::string> parts;
      const std::string body = boost::algorithm::trim_copy(text);
      if (!body.empty()) boost::algorithm::split(parts, body, boost::is_any_of(","));
      std::vector<double> ladder;
      for (const auto& p : parts) {
        const double v = to_double(key, p);
        if (!(v > 0.0 && v < 0.01)) throw ConfigError(key + ": entries must lie in (0, 0.01)");
        ladder.push_back(v);
      }
      if (ladder.empty()) throw ConfigError(key + ": the ladder is empty");
      c.profiles.b1_ladder = ladder;
    };
    t["profiles.M"] = real_in(&RunConfig::profiles, &ProfilesSection::M,
                              [](double v) { return v >= 4.0; }, "at least 4");

    t["spectrum.M"] = real_in(&RunConfig::spectrum, &SpectrumSection::M,
                              [](double v) { return v >= 4.0 && v <= 1e6; }, "in [4, 1e6]");
    t["spectrum.levels"] = int_in(&RunConfig::spectrum, &SpectrumSection::levels, 2, 6);
    t["spectrum.sigma_tol"] = real_in(&RunConfig::spectrum, &SpectrumSection::sigma_tol,
                                      positive, "positive");
    t["spectrum.samples"] = int_in(&RunConfig::spectrum, &SpectrumSection::samples, 1, 100000);
    t["spectrum.seed"] = int_in(&RunConfig::spectrum, &SpectrumSection::seed, 0,
                                static_cast<long long>(9.0e15));
    t["spectrum.c_sub"] = real_in(&RunConfig::spectrum, &SpectrumSection::c_sub,
                                  [](double v) { return v > 0.0 && v < 1.0; }, "in (0, 1)");

    t["ode.s0"] = real_in(&RunConfig::ode, &OdeSection::s0,
                          [](double v) { return v >= 30.0; }, "at least 30");
    t["ode.s_end"] = real_in(&RunConfig::ode, &OdeSection::s_end, positive, "positive");
    t["ode.U1_0"] = real_in(&RunConfig::ode, &OdeSection::U1_0,
                            [](double) { return true; }, "finite");
    t["ode.V2_0"] = real_in(&RunConfig::ode, &OdeSection::V2_0,
                            [](double) { return true; }, "finite");
    t["ode.c_mode"] = [](RunConfig& c, const std::string& key, const std::string& text) {
      const std::string v = boost::algorithm::trim_copy(text);
      if (v == "asymptotic") {
        c.ode.c_mode = CMode::Asymptotic;
      } else if (v == "exact") {
        c.ode.c_mode = CMode::Exact;
      } else {
        throw ConfigError(key + ": '" + text + "' must be asymptotic or exact");
      }
    };
    t["ode.trap_V1"] = real_in(&RunConfig::ode, &OdeSection::trap_V1, positive, "positive");
    t["ode.trap_V2"] = real_in(&RunConfig::ode, &OdeSection::trap_V2, positive, "positive");
    t["ode.rtol"] = real_in(&RunConfig::ode, &OdeSection::rtol,
                            [](double v) { return v >= 1e-15 && v <= 1e-3; }, "in [1e-15, 1e-3]");
    t["ode.atol"] = real_in(&RunConfig::ode, &OdeSection::atol,
                            [](double v) { return v > 0.0 && v <= 1e-3; }, "in (0, 1e-3]");
    t["ode.samples_per_decade"] =
        int_in(&RunConfig::ode, &OdeSection::samples_per_decade, 4, 10000);
    t["ode.bracket_lo"] = real_in(&RunConfig::ode, &OdeSection::bracket_lo,
                                  [](double) { return true; }, "finite");
    t["ode.bracket_hi"] = real_in(&RunConfig::ode, &OdeSection::bracket_hi,
                                  [](double) { return true; }, "finite");

    t["flow.s0"] = real_in(&RunConfig::flow, &FlowSection::s0,
                           [](double v) { return v >= 100.0; }, "at least 100");
    t["flow.s_end"] = real_in(&RunConfig::flow, &FlowSection::s_end, positive, "positive");
    t["flow.M"] = real_in(&RunConfig::flow, &FlowSection::M,
                          [](double v) { return v >= 4.0; }, "at least 4");
    t["flow.K"] = real_in(&RunConfig::flow, &FlowSection::K, positive, "positive");
    t["flow.delta"] = real_in(&RunConfig::flow, &FlowSection::delta,
                              [](double v) { return v > 0.0 && v < 0.5; }, "in (0, 0.5)");
    t["flow.h_log"] = real_in(&RunConfig::flow, &FlowSection::h_log,
                              [](double v) { return v > 0.0 && v <= 0.2; }, "in (0, 0.2]");
    t["flow.ds"] = real_in(&RunConfig::flow, &FlowSection::ds,
                           [](double v) { return v > 0.0 && v <= 10.0; }, "in (0, 10]");
    t["flow.defect_tol"] = real_in(&RunConfig::flow, &FlowSection::defect_tol, positive,
                                   "positive");
    t["flow.V2_0"] = real_in(&RunConfig::flow, &FlowSection::V2_0, unit_box, "in [-1, 1]");
    t["flow.tau_0"] = real_in(&RunConfig::flow, &FlowSection::tau_0, unit_box, "in [-1, 1]");
    t["flow.segment"] = real_in(&RunConfig::flow, &FlowSection::segment, positive, "positive");
    t["flow.lookahead"] = real_in(&RunConfig::flow, &FlowSection::lookahead, positive,
                                  "positive");
    t["flow.brouwer_n"] = int_in(&RunConfig::flow, &FlowSection::brouwer_n, 3, 101);
    t["flow.brouwer_budget"] = real_in(&RunConfig::flow, &FlowSection::brouwer_budget,
                                       positive, "positive");
    t["flow.refine_depth"] = int_in(&RunConfig::flow, &FlowSection::refine_depth, 0, 10);
    return t;
  }();
  return table;
}

void check_consistency(const RunConfig& c) {
  if (!(c.ode.s_end > c.ode.s0)) throw ConfigError("ode.s_end must exceed ode.s0");
  if (!(c.ode.bracket_lo < c.ode.bracket_hi)) {
    throw ConfigError("ode.bracket_lo must be below ode.bracket_hi");
  }
  if (!(c.flow.s_end > c.flow.s0)) throw ConfigError("flow.s_end must exceed flow.s0");
  if (!(c.flow.lookahead >= c.flow.segment)) {
    throw ConfigError("flow.lookahead must be at least flow.segment");
  }
}

}  // namespace

const char* experiment_name(Experiment e) {
  for (const auto& [k, name] : kExperiments) {
    if (k == e) return name;
  }
  return "unknown";
}

Experiment parse_experiment(const std::string& name) {
  for (const auto& [k, n] : kExperiments) {
    if (name == n) return k;
  }
  throw ConfigError("unknown experiment '" + name + "'");
}

RunConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  RunConfig cfg;
  const auto& table = setters();
  static const char* const kSections[] = {"run", "grid", "profiles", "spectrum", "ode", "flow"};
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) {
      throw ConfigError("key '" + section + "' must sit inside a [section]");
    }
    if (std::find(std::begin(kSections), std::end(kSections), section) == std::end(kSections)) {
      throw ConfigError("unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const auto it = table.find(full);
      if (it == table.end()) throw ConfigError("unknown key '" + full + "'");
      it->second(cfg, full, value.get_value<std::string>());
    }
  }
  check_consistency(cfg);
  cfg.source_text = text;
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return parse_config(os.str());
}

std::string default_config_text() {
  const RunConfig d;
  std::ostringstream os;
  auto num = [](double v) { return format_double(v); };
  os << "[run]\noutput_dir = " << d.output_dir.string() << "\n\n";
  os << "[grid]\nh_log = " << num(d.grid.h_log) << "\ny_max = " << num(d.grid.y_max) << "\n\n";
  os << "[profiles]\nb1_ladder = ";
  for (std::size_t i = 0; i < d.profiles.b1_ladder.size(); ++i) {
    os << (i ? ", " : "") << num(d.profiles.b1_ladder[i]);
  }
  os << "\nM = " << num(d.profiles.M) << "\n\n";
  os << "[spectrum]\nM = " << num(d.spectrum.M) << "\nlevels = " << d.spectrum.levels
     << "\nsigma_tol = " << num(d.spectrum.sigma_tol) << "\nsamples = " << d.spectrum.samples
     << "\nseed = " << d.spectrum.seed << "\nc_sub = " << num(d.spectrum.c_sub) << "\n\n";
  os << "[ode]\ns0 = " << num(d.ode.s0) << "\ns_end = " << num(d.ode.s_end)
     << "\nU1_0 = " << num(d.ode.U1_0) << "\nV2_0 = " << num(d.ode.V2_0)
     << "\nc_mode = asymptotic\ntrap_V1 = " << num(d.ode.trap_V1)
     << "\ntrap_V2 = " << num(d.ode.trap_V2) << "\nrtol = " << num(d.ode.rtol)
     << "\natol = " << num(d.ode.atol) << "\nsamples_per_decade = " << d.ode.samples_per_decade
     << "\nbracket_lo = " << num(d.ode.bracket_lo) << "\nbracket_hi = " << num(d.ode.bracket_hi)
     << "\n\n";
  const FlowSection& f = d.flow;
  os << "[flow]\ns0 = " << num(f.s0) << "\ns_end = " << num(f.s_end) << "\nM = " << num(f.M)
     << "\nK = " << num(f.K) << "\ndelta = " << num(f.delta) << "\nh_log = " << num(f.h_log)
     << "\nds = " << num(f.ds) << "\ndefect_tol = " << num(f.defect_tol)
     << "\nV2_0 = " << num(f.V2_0) << "\ntau_0 = " << num(f.tau_0)
     << "\nsegment = " << num(f.segment) << "\nlookahead = " << num(f.lookahead)
     << "\nbrouwer_n = " << f.brouwer_n << "\nbrouwer_budget = " << num(f.brouwer_budget)
     << "\nrefine_depth = " << f.refine_depth << "\n";
  return os.str();
}

void write_provenance(const RunConfig& cfg, Experiment command, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "config.ini", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / "config.ini").string());
    os << cfg.source_text;
  }
  nlohmann::json j;
  j["command"] = experiment_name(command);
  j["source_hash"] = kSourceHash;
  std::ofstream os(dir / "provenance.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "provenance.json").string());
  os << j.dump(2) << "\n";
}

}  // namespace typeii
