// Pipeline driver: every subcommand reads a config file plus --set overrides,
// works inside <out>/<run-id>/ and writes a manifest next to its artifacts.
// Exit codes: 0 success, 1 validation error, 2 runtime/numeric error.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rlhflab/config.hpp"
#include "rlhflab/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "config file (JSON)")->required();
  cmd->add_option("--set", args.overrides, "override, e.g. --set ppo.gamma=0");
  cmd->add_option("--out", args.out_dir, "output root (default: paths.out_dir)");
  cmd->add_option("--seed", args.seed, "override environment.seed");
}

rlhflab::RunConfig resolve_config(const CommonArgs& args) {
  rlhflab::RunConfig cfg = rlhflab::load_config(args.config_path, args.overrides);
  if (args.seed) {
    cfg.environment.seed = *args.seed;
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic-preference laboratory for RLHF training stability"};
  app.require_subcommand(1);

  const std::vector<std::string> verbs = {
      "gen-data",  "train-rm",         "train-am", "eval-score", "train-sft",
      "train-ppo", "select-rehearsal", "report",   "experiment"};

  std::map<std::string, CommonArgs> args;
  std::string experiment_name;
  for (const std::string& verb : verbs) {
    CLI::App* cmd = app.add_subcommand(verb);
    add_common(cmd, args[verb]);
    if (verb == "experiment") {
      cmd->add_option("name", experiment_name,
                      "am-vs-rm-calibration | disparity | hacking | forgetting | "
                      "cluster-sweep")
          ->required();
    }
  }

  CLI11_PARSE(app, argc, argv);

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    const CommonArgs& common = args[verb];
    rlhflab::RunConfig cfg = resolve_config(common);
    const std::filesystem::path out_root =
        common.out_dir.empty() ? std::filesystem::path(cfg.paths.out_dir)
                               : std::filesystem::path(common.out_dir);
    const int rc = rlhflab::run_command(verb, cfg, out_root, experiment_name);
    if (rc == 0) {
      std::cout << "ok: " << verb << " -> "
                << (out_root / rlhflab::run_id_for(cfg)).string() << "\n";
    }
    return rc;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
}
