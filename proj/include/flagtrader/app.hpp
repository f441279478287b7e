#ifndef FLAGTRADER_APP_HPP
#define FLAGTRADER_APP_HPP

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "flagtrader/checkpoint.hpp"
#include "flagtrader/config.hpp"
#include "flagtrader/errors.hpp"
#include "flagtrader/gradcheck.hpp"
#include "flagtrader/metrics.hpp"
#include "flagtrader/ppo.hpp"

namespace flagtrader {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

inline int exit_code(ErrorClass c) {
  switch (c) {
    case ErrorClass::Usage: return kExitUsage;
    case ErrorClass::Data: return kExitData;
    case ErrorClass::Numerical: return kExitNumerical;
  }
  return kExitUsage;
}

/// Parsed command line. Unset flags fall back to the config file, then defaults.
struct CommandLine {
  std::string command;
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> mode;
  std::optional<std::string> checkpoint;
  std::optional<std::string> data;
};

namespace detail {

inline std::filesystem::path prepare_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
  return dir;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  return f;
}

inline SelectionMode parse_mode(const std::optional<std::string>& mode) {
  if (!mode || *mode == "greedy") return SelectionMode::Greedy;
  if (*mode == "sample") return SelectionMode::Sample;
  throw UsageError("--mode must be greedy or sample, got '" + *mode + "'");
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  auto f = open_out(p);
  f << j.dump(2) << "\n";
}

}  // namespace detail

/// Config file (if any) with command-line overrides applied.
inline RunConfig resolve_config(const CommandLine& cl) {
  RunConfig cfg = cl.config ? load_config(*cl.config) : RunConfig{};
  if (cl.seed) cfg.seed = *cl.seed;
  if (cl.out) cfg.output_dir = *cl.out;
  if (cl.data) cfg.data.path = *cl.data;
  cfg.validate();
  return cfg;
}

inline int cmd_train(const CommandLine& cl, std::ostream& log) {
  const RunConfig cfg = resolve_config(cl);
  const auto series = std::make_shared<const MarketSeries>(load_data(cfg.data));
  const PromptTemplate prompt = load_prompt(cfg);
  const auto dir = detail::prepare_dir(cfg.output_dir);

  auto train_log = detail::open_out(dir / "training_log.jsonl");
  auto meta_log = detail::open_out(dir / "training_meta.jsonl");
  TrainOptions options;
  options.env = cfg.env;
  options.prompt = prompt;
  options.checkpoint_interval = cfg.checkpoint_interval;
  options.on_iteration = [&](const IterationRecord& r) {
    train_log << to_json(r).dump() << "\n";
    meta_log << nlohmann::json{{"iteration", r.iteration}, {"wall_ms", r.wall_ms}}.dump() << "\n";
  };
  options.on_checkpoint = [&](std::size_t iteration, const ParameterStore<double>& params) {
    save_checkpoint((dir / ("checkpoint_" + std::to_string(iteration) + ".bin")).string(),
                    Checkpoint{cfg, prompt, params});
  };

  auto result = train<double>(series, cfg.model, cfg.ppo, cfg.seed, options);
  save_checkpoint((dir / "checkpoint.bin").string(), Checkpoint{cfg, prompt, result.params});
  {
    auto f = detail::open_out(dir / "config.cfg");
    write_config(f, cfg);
  }
  log << "trained " << result.log.records.size() << " iterations (" << result.params.step << " timesteps); wrote "
      << (dir / "checkpoint.bin").string() << "\n";
  return kExitOk;
}

struct BacktestRun {
  Checkpoint checkpoint;
  std::shared_ptr<const MarketSeries> series;
  EpisodeTrace trace;
  MetricsReport report;
  std::filesystem::path out_dir;
};

/// Loads the checkpoint, resolves the series (--data overrides the stored
/// data source) and rolls the policy over the test range.
inline BacktestRun run_backtest(const CommandLine& cl) {
  if (!cl.checkpoint) throw UsageError("--checkpoint is required");
  BacktestRun run;
  run.checkpoint = load_checkpoint(*cl.checkpoint);
  const RunConfig& cfg = run.checkpoint.config;
  DataSpec data = cfg.data;
  if (cl.data) data.path = *cl.data;
  run.series = std::make_shared<const MarketSeries>(load_data(data));
  if (run.series->test_range->size() < 2) throw CompatibilityError("test range needs at least two bars");
  const auto mode = detail::parse_mode(cl.mode);
  run.trace = backtest_policy(run.checkpoint.params, run.series, cfg.env, run.checkpoint.prompt, mode,
                              cl.seed.value_or(cfg.seed));
  run.report = evaluate(run.trace, run.series->risk_free_rate, cfg.periods_per_year);
  run.out_dir = detail::prepare_dir(cl.out.value_or(cfg.output_dir));
  return run;
}

inline int cmd_backtest(const CommandLine& cl, std::ostream& log) {
  const auto run = run_backtest(cl);
  detail::write_json(run.out_dir / "metrics.json", to_json(run.report));
  auto trace = detail::open_out(run.out_dir / "trace.csv");
  write_trace_csv(trace, run.trace);
  char line[160];
  std::snprintf(line, sizeof(line), "CR %.4f%%  SR %.4f  AV %.4f%%  MDD %.4f%%\n", run.report.cr_pct, run.report.sr,
                run.report.av_pct, run.report.mdd_pct);
  log << line;
  return kExitOk;
}

inline int cmd_compare(const CommandLine& cl, std::ostream& log) {
  const auto run = run_backtest(cl);
  const auto& cfg = run.checkpoint.config;
  const auto baseline =
      evaluate(buy_and_hold_trace(*run.series, cfg.env.initial_cash), run.series->risk_free_rate, cfg.periods_per_year);
  detail::write_json(run.out_dir / "metrics.json", to_json(run.report));
  detail::write_json(run.out_dir / "comparison.json",
                     nlohmann::json{{"agent", to_json(run.report)}, {"buy_and_hold", to_json(baseline)}});
  auto trace = detail::open_out(run.out_dir / "trace.csv");
  write_trace_csv(trace, run.trace);

  char line[160];
  std::snprintf(line, sizeof(line), "%-14s %12s %10s %12s %12s\n", "strategy", "CR%", "SR", "AV%", "MDD%");
  log << line;
  for (const auto& [name, r] : {std::pair{"agent", run.report}, std::pair{"buy_and_hold", baseline}}) {
    std::snprintf(line, sizeof(line), "%-14s %12.4f %10.4f %12.4f %12.4f\n", name, r.cr_pct, r.sr, r.av_pct,
                  r.mdd_pct);
    log << line;
  }
  return kExitOk;
}

/// Finite-difference suite on the configured model. Adapters are switched on
/// whenever a rank is set so that the LoRA group and identity are covered.
inline int cmd_gradcheck(const CommandLine& cl, std::ostream& log) {
  RunConfig cfg = resolve_config(cl);
  if (cfg.model.lora_rank > 0) cfg.model.lora_enabled = true;
  const auto report = run_gradcheck(cfg.model, cfg.seed);
  print_gradcheck(log, report);
  log << (report.pass ? "gradcheck PASSED\n" : "gradcheck FAILED\n");
  return report.pass ? kExitOk : kExitNumerical;
}

/// Dispatches a command and maps failures onto exit codes.
inline int run_command(const CommandLine& cl, std::ostream& out, std::ostream& err) {
  try {
    if (cl.command == "train") return cmd_train(cl, out);
    if (cl.command == "backtest") return cmd_backtest(cl, out);
    if (cl.command == "compare") return cmd_compare(cl, out);
    if (cl.command == "gradcheck") return cmd_gradcheck(cl, out);
    err << "error: unknown command '" << cl.command << "'\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.error_class());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace flagtrader

#endif  // FLAGTRADER_APP_HPP
