#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cli.hpp"
#include "sim2rec/errors.hpp"

using namespace sim2rec;
using namespace sim2rec::cli;

namespace {

using Command = std::vector<fs::path> (*)(RunDir&, const RunConfig&, const CommandOptions&);

struct Flags {
  std::string config;
  std::string out;
  std::string variant;
  std::int64_t seed = -1;
  bool force = false;
  bool desk = false;
  std::vector<std::string> checkpoints;
};

int run(const std::string& name, Command cmd, const Flags& f) {
  RunConfig base = f.desk ? RunConfig::desk_scale() : RunConfig::full();
  std::string text;
  RunConfig cfg = base;
  if (!f.config.empty()) {
    std::ifstream in(f.config, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + f.config);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    cfg = from_json(j, base);
  } else {
    text = to_json(cfg).dump(2) + "\n";
  }
  if (!f.variant.empty()) cfg.variant = f.variant;
  if (f.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(f.seed)};
  if (!f.out.empty()) cfg.output_dir = f.out;
  cfg.validate();

  RunDir dir(cfg.output_dir, text);
  CommandOptions opt;
  opt.force = f.force;
  for (const auto& c : f.checkpoints) opt.checkpoints.emplace_back(c);
  const auto t0 = std::chrono::steady_clock::now();
  const auto artifacts = cmd(dir, cfg, opt);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  dir.record(name, wall, artifacts);
  for (const auto& a : artifacts) std::cout << a.string() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulator-ensemble policy learning for long-term user engagement"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config, "JSON run configuration");
  app.add_option("--out", f.out, "Run directory (overrides output_dir)");
  app.add_option("--seed", f.seed, "Single seed instead of the configured seed list");
  app.add_option("--variant", f.variant, "SIM2REC, DR_OSI, DR_UNI, DIRECT or UPPER");
  app.add_flag("--force", f.force, "Overwrite existing outputs");
  app.add_flag("--desk-scale", f.desk, "Start from the reduced preset");

  const std::vector<std::pair<std::string, Command>> commands{
      {"gen-logs", cmd_gen_logs},         {"train-sadae", cmd_train_sadae},
      {"train-policy", cmd_train_policy}, {"train-ensemble", cmd_train_ensemble},
      {"evaluate", cmd_evaluate},         {"intervention", cmd_intervention},
      {"pca", cmd_pca},                   {"probe", cmd_probe}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, cmd] : commands) {
    CLI::App* s = app.add_subcommand(name);
    s->fallthrough();
    subs.push_back(s);
  }
  subs[4]->add_option("checkpoints", f.checkpoints, "Checkpoint directories (default: latest per seed)");
  CLI::App* audit = app.add_subcommand("audit", "Check that a run directory is complete");
  audit->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (audit->parsed()) {
      fs::path root = f.out;
      if (root.empty()) {
        RunConfig cfg = f.desk ? RunConfig::desk_scale() : RunConfig::full();
        if (!f.config.empty()) {
          std::ifstream in(f.config);
          cfg = from_json(nlohmann::json::parse(in), cfg);
        }
        root = cfg.output_dir;
      }
      const auto problems = audit_run(root);
      for (const auto& p : problems) std::cout << "missing: " << p << '\n';
      if (problems.empty()) std::cout << "audit ok: " << root.string() << '\n';
      return problems.empty() ? kExitOk : kExitStage;
    }
    for (std::size_t i = 0; i < commands.size(); ++i) {
      if (subs[i]->parsed()) return run(commands[i].first, commands[i].second, f);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << '\n';
    return kExitStage;
  }
  return kExitConfig;
}
