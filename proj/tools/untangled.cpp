// untangled: scenario runner.
//
//   untangled run <config> [--out DIR]
//   untangled verify <config> [--out DIR]
//   untangled study <config> [--out DIR]
//   untangled envelope <config> --at t,x[,y]
//
// Exit codes: 0 ok, 1 certificate violation, 2 config error, 3 numerical or
// stage error.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "untangled/scenario.hpp"

namespace {

using namespace untangled;

std::vector<double> parse_at(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("--at: '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.size() < 2) throw ConfigError("--at needs t followed by the point coordinates");
  return out;
}

void print_report(const RunReport& r, const fs::path& dir) {
  for (const auto& c : r.checks) {
    std::cout << (c.pass ? "ok   " : "FAIL ") << c.name << " = " << c.value;
    if (c.min) std::cout << "  min " << *c.min;
    if (c.max) std::cout << "  max " << *c.max;
    std::cout << '\n';
  }
  std::cout << r.command << " " << r.scenario << ": " << (r.passed() ? "passed" : "certificate violation") << " ("
            << r.manifest.size() << " files in " << dir.string() << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Filippov flows, densities and transport along selected trajectories"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string at;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config_path, "scenario YAML file")->required();
    sub->add_option("--out", out_dir, "output directory (overrides output_dir)");
  };
  auto* run = app.add_subcommand("run", "run the full pipeline and its certificates");
  auto* verify = app.add_subcommand("verify", "run the pipeline and every invariant check");
  auto* study = app.add_subcommand("study", "mollification and Galerkin refinement tables");
  auto* envelope = app.add_subcommand("envelope", "dump the Filippov envelope at one point");
  add_common(run);
  add_common(verify);
  add_common(study);
  envelope->add_option("config", config_path, "scenario YAML file")->required();
  envelope->add_option("--at", at, "t,x[,y]")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    const ScenarioConfig cfg = load_config(config_path);
    if (envelope->parsed()) {
      const auto v = parse_at(at);
      std::cout << envelope_at(cfg, v[0], std::vector<double>(v.begin() + 1, v.end())).dump(2) << '\n';
      return kExitOk;
    }
    const fs::path dir = out_dir.empty() ? fs::path(cfg.output_dir) : fs::path(out_dir);
    RunReport report;
    if (run->parsed()) report = run_scenario(cfg, dir);
    else if (verify->parsed()) report = verify_scenario(cfg, dir);
    else report = convergence_study(cfg, dir);
    print_report(report, dir);
    return report.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_of(e);
  }
}
