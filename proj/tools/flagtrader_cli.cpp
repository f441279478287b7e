#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "flagtrader/app.hpp"

int main(int argc, char** argv) {
  using namespace flagtrader;
  CLI::App app{"Desk-scale LLM-style trading agent: PPO training, backtests and gradient checks"};
  app.set_help_flag("-h,--help", "Show usage");
  CommandLine cl;
  app.add_option("command", cl.command, "train | backtest | compare | gradcheck")
      ->required()
      ->check(CLI::IsMember({"train", "backtest", "compare", "gradcheck"}));
  app.add_option("--config", cl.config, "Flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", cl.seed, "Seed (overrides the config file)");
  app.add_option("--out", cl.out, "Output directory (overrides output_dir)");
  app.add_option("--mode", cl.mode, "Action selection for backtest/compare")
      ->check(CLI::IsMember({"greedy", "sample"}));
  app.add_option("--checkpoint", cl.checkpoint, "Checkpoint for backtest/compare");
  app.add_option("--data", cl.data, "Price CSV (overrides data.path)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }
  return run_command(cl, std::cout, std::cerr);
}
