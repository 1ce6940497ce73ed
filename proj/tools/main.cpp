#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <map>

#include "commands.hpp"
#include "hyperpeft/error.hpp"

namespace {

using hyperpeft::cli::Invocation;
using Handler = int (*)(const Invocation&, std::ostream&);

const std::map<std::string, std::pair<Handler, const char*>>& commands() {
  static const std::map<std::string, std::pair<Handler, const char*>> table = {
      {"synth-data", {&hyperpeft::cli::cmd_synth_data, "write the synthetic task suite"}},
      {"hyperpretrain", {&hyperpeft::cli::cmd_hyperpretrain, "CACLM hyperpretraining"}},
      {"mtf", {&hyperpeft::cli::cmd_mtf, "multi-task fine-tuning (mode from train.mode)"}},
      {"peft-finetune", {&hyperpeft::cli::cmd_peft_finetune, "per-task PEFT fine-tuning grid"}},
      {"eval", {&hyperpeft::cli::cmd_eval, "evaluate tasks and write a report"}},
      {"gen-adapter", {&hyperpeft::cli::cmd_gen_adapter, "generate adapters from few-shot sets"}},
      {"gradcheck", {&hyperpeft::cli::cmd_gradcheck, "finite-difference check of the pipeline"}},
  };
  return table;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hypermodels that generate parameter-efficient adapters", "hyperpeft"};
  app.require_subcommand(1);
  // Must precede add_subcommand so -c/--set work after the command name.
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> sets;
  int coords = 256;
  app.add_option("-c,--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("-s,--set", sets, "override, e.g. --set train.steps=500");
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, entry] : commands()) {
    CLI::App* sub = app.add_subcommand(name, entry.second);
    if (name == "gradcheck") sub->add_option("--coords", coords, "coordinates probed");
    subs[name] = sub;
  }

  // --a.b=value overrides are pulled out before CLI11 sees the rest.
  std::vector<std::string> overrides;
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    const auto eq = a.find('=');
    if (a.rfind("--", 0) == 0 && eq != std::string::npos && a.find('.') < eq) {
      overrides.push_back(a.substr(2));
    } else {
      args.push_back(a);
    }
  }
  std::reverse(args.begin(), args.end());

  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  Invocation inv;
  inv.argv.assign(argv, argv + argc);
  inv.gradcheck_coords = coords;
  overrides.insert(overrides.begin(), sets.begin(), sets.end());
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) inv.command = name;
  }

  try {
    inv.config = hyperpeft::load_run_config(config_path, overrides);
    return commands().at(inv.command).first(inv, std::cout);
  } catch (const hyperpeft::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const hyperpeft::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
