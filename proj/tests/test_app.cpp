#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flagtrader/app.hpp"

namespace ft = flagtrader;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("flagtrader_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  std::string operator/(const std::string& leaf) const { return (path_ / leaf).string(); }

 private:
  fs::path path_;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

ft::RunConfig tiny_config() {
  ft::RunConfig c;
  c.model.d_model = 8;
  c.model.d_ff = 16;
  c.model.max_seq_len = 16;
  c.ppo.num_steps = 8;
  c.ppo.minibatch_size = 8;
  c.ppo.total_timesteps = 16;
  c.data.synthetic = {"sinusoid", 40};
  c.data.warmup = 10;
  return c;
}

/// Checkpoint whose greedy policy is Buy when legal, otherwise Hold.
ft::Checkpoint always_buy(const ft::RunConfig& cfg) {
  ft::Checkpoint ck;
  ck.config = cfg;
  ck.params = ft::init_params<double>(cfg.model, 3);
  ck.params.weights.policy_w.setZero();
  ck.params.weights.policy_b << -10.0, 0.0, 10.0;
  return ck;
}

ft::CommandLine command(const std::string& name) {
  ft::CommandLine cl;
  cl.command = name;
  return cl;
}

int run(const ft::CommandLine& cl, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = ft::run_command(cl, out, err);
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

// Config ---------------------------------------------------------------------

TEST(Config, ParsesKeysCommentsAndBlankLines) {
  std::istringstream in(
      "# comment\n"
      "\n"
      "model.d_model = 24\n"
      "  ppo.gamma=0.9   \n"
      "ppo.target_kl = 0.02\n"
      "model.lora_targets = q, k ,o\n"
      "ppo.optimizer = adam\n");
  const auto c = ft::parse_config(in, "inline");
  EXPECT_EQ(c.model.d_model, 24u);
  EXPECT_DOUBLE_EQ(c.ppo.gamma, 0.9);
  ASSERT_TRUE(c.ppo.target_kl.has_value());
  EXPECT_DOUBLE_EQ(*c.ppo.target_kl, 0.02);
  EXPECT_EQ(c.model.lora_targets,
            (std::vector<ft::LoraTarget>{ft::LoraTarget::Query, ft::LoraTarget::Key, ft::LoraTarget::Output}));
  EXPECT_EQ(c.ppo.optimizer, ft::OptimizerKind::Adam);
}

TEST(Config, DefaultsMatchTable) {
  const ft::RunConfig c;
  EXPECT_EQ(c.ppo.gamma, 0.95);
  EXPECT_EQ(c.ppo.gae_lambda, 0.98);
  EXPECT_EQ(c.ppo.clip_coef, 0.2);
  EXPECT_EQ(c.ppo.ent_coef, 0.05);
  EXPECT_EQ(c.ppo.vf_coef, 0.5);
  EXPECT_EQ(c.ppo.kl_coef, 0.05);
  EXPECT_EQ(c.ppo.lr_heads, 5e-4);
  EXPECT_EQ(c.ppo.lr_backbone, 5e-4);
  EXPECT_EQ(c.ppo.num_steps, 40u);
  EXPECT_EQ(c.ppo.num_envs, 1u);
  EXPECT_EQ(c.ppo.update_epochs, 1u);
  EXPECT_EQ(c.ppo.minibatch_size, 32u);
  EXPECT_EQ(c.ppo.max_grad_norm, 0.5);
  EXPECT_EQ(c.ppo.total_timesteps, 13860u);
  EXPECT_EQ(c.ppo.gradient_accumulation_steps, 8u);
  EXPECT_EQ(c.ppo.max_episode_steps, 65u);
  EXPECT_TRUE(c.ppo.anneal_lr);
  EXPECT_TRUE(c.ppo.norm_adv);
  EXPECT_TRUE(c.ppo.clip_vloss);
  EXPECT_FALSE(c.ppo.target_kl.has_value());
  EXPECT_EQ(c.env.initial_cash, 1000.0);
}

TEST(Config, ShippedDefaultFileEqualsBuiltInDefaults) {
  const auto file = ft::load_config(FLAGTRADER_CONFIG_DIR "/default.cfg");
  std::ostringstream a, b;
  ft::write_config(a, file);
  ft::write_config(b, ft::RunConfig{});
  EXPECT_EQ(a.str(), b.str());
}

TEST(Config, UnknownKeyIsRejectedWithLine) {
  std::istringstream in("model.d_model = 8\nppo.gama = 0.9\n");
  try {
    ft::parse_config(in, "x.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ft::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("ppo.gama"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("x.cfg line 2"), std::string::npos) << e.what();
  }
}

TEST(Config, MalformedValuesAreRejected) {
  for (const char* text : {"ppo.gamma = abc\n", "model.d_model = -3\n", "ppo.anneal_lr = maybe\n",
                           "ppo.optimizer = rmsprop\n", "model.lora_targets = q,x\n", "just text\n"}) {
    std::istringstream in(text);
    EXPECT_THROW(ft::parse_config(in, "x"), ft::Error) << text;
  }
}

TEST(Config, ValidationRejectsInconsistentSettings) {
  std::istringstream in("model.d_model = 10\nmodel.n_heads = 3\n");
  EXPECT_THROW(ft::parse_config(in, "x").validate(), ft::ConfigError);
  ft::RunConfig c;
  c.ppo.minibatch_size = 41;
  EXPECT_THROW(c.validate(), ft::ConfigError);
  c = ft::RunConfig{};
  c.ppo.total_timesteps = 39;
  EXPECT_THROW(c.validate(), ft::ConfigError);
}

TEST(Config, WriteThenParseRoundTrips) {
  ft::RunConfig c = tiny_config();
  c.ppo.target_kl = 0.015;
  c.ppo.lr_heads = 1.0 / 3.0;
  c.model.lora_enabled = true;
  c.model.lora_targets = {ft::LoraTarget::Value, ft::LoraTarget::Query};
  c.data.path = "some/prices.csv";
  std::ostringstream first;
  ft::write_config(first, c);
  std::istringstream in(first.str());
  const auto back = ft::parse_config(in, "rt");
  std::ostringstream second;
  ft::write_config(second, back);
  EXPECT_EQ(first.str(), second.str());
  EXPECT_EQ(back.ppo.lr_heads, 1.0 / 3.0);
}

TEST(Config, RelativeInputPathsResolveAgainstConfigFile) {
  TempDir dir;
  fs::create_directories(dir.path() / "sub");
  write_file(dir / "sub/run.cfg", "data.path = prices.csv\nprompt.template = p.txt\noutput_dir = out\n");
  const auto c = ft::load_config(dir / "sub/run.cfg");
  EXPECT_EQ(fs::path(c.data.path), dir.path() / "sub" / "prices.csv");
  EXPECT_EQ(fs::path(c.prompt_template), dir.path() / "sub" / "p.txt");
  EXPECT_EQ(c.output_dir, "out");
}

TEST(Config, CommandLineOverridesFile) {
  TempDir dir;
  write_file(dir / "run.cfg", "seed = 11\noutput_dir = from_file\ndata.path = file.csv\n");
  ft::CommandLine cl;
  cl.config = dir / "run.cfg";
  auto c = ft::resolve_config(cl);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.output_dir, "from_file");
  cl.seed = 99;
  cl.out = "from_flag";
  cl.data = "flag.csv";
  c = ft::resolve_config(cl);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.output_dir, "from_flag");
  EXPECT_EQ(c.data.path, "flag.csv");
}

TEST(Config, MissingConfigFileIsAnIoError) {
  EXPECT_THROW(ft::load_config("/nonexistent/run.cfg"), ft::IoError);
}

TEST(Config, WarmupCoveringWholeSeriesIsIncompatible) {
  ft::DataSpec d;
  d.synthetic = {"constant", 20};
  d.warmup = 20;
  EXPECT_THROW(ft::load_data(d), ft::CompatibilityError);
}

// Checkpoint -----------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  ft::Checkpoint ck;
  ck.config = tiny_config();
  ck.config.model.lora_enabled = true;
  ck.params = ft::init_params<double>(ck.config.model, 17);
  ck.params.step = 1234;
  std::stringstream buf;
  ft::save_checkpoint(buf, ck);
  const std::string bytes = buf.str();
  const auto back = ft::load_checkpoint(buf);

  EXPECT_EQ(back.params.step, 1234u);
  std::vector<const ft::Matrix<double>*> originals;
  ck.params.weights.for_each([&](const std::string&, ft::ParamGroup, const ft::Matrix<double>& m) { originals.push_back(&m); });
  std::size_t i = 0;
  back.params.weights.for_each([&](const std::string& name, ft::ParamGroup, const ft::Matrix<double>& m) {
    ASSERT_EQ(m.size(), originals[i]->size()) << name;
    EXPECT_EQ(std::memcmp(m.data(), originals[i]->data(), sizeof(double) * m.size()), 0) << name;
    ++i;
  });

  std::stringstream again;
  ft::save_checkpoint(again, back);
  EXPECT_EQ(again.str(), bytes);
}

TEST(Checkpoint, RejectsBadMagic) {
  std::stringstream buf("NOTACKPT and some more bytes");
  EXPECT_THROW(ft::load_checkpoint(buf), ft::CompatibilityError);
}

TEST(Checkpoint, RejectsTruncation) {
  ft::Checkpoint ck;
  ck.config = tiny_config();
  ck.params = ft::init_params<double>(ck.config.model, 1);
  std::stringstream buf;
  ft::save_checkpoint(buf, ck);
  const std::string bytes = buf.str();
  for (std::size_t cut : {std::size_t{12}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    std::stringstream partial(bytes.substr(0, cut));
    EXPECT_THROW(ft::load_checkpoint(partial), ft::ParseError) << "cut at " << cut;
  }
}

TEST(Checkpoint, RejectsShapeMismatch) {
  ft::Checkpoint ck;
  ck.config = tiny_config();
  ck.params = ft::init_params<double>(ck.config.model, 1);
  ck.config.model.d_ff = 12;  // stored config disagrees with stored weights
  std::stringstream buf;
  ft::save_checkpoint(buf, ck);
  EXPECT_THROW(ft::load_checkpoint(buf), ft::CompatibilityError);
}

// Commands -------------------------------------------------------------------

TEST(Cli, TrainWritesAllOutputs) {
  TempDir dir;
  ft::RunConfig c = tiny_config();
  c.checkpoint_interval = 1;
  std::ofstream(dir / "run.cfg") << [&] {
    std::ostringstream s;
    ft::write_config(s, c);
    return s.str();
  }();
  auto cl = command("train");
  cl.config = dir / "run.cfg";
  cl.out = dir / "out";
  ASSERT_EQ(run(cl), ft::kExitOk);
  for (const char* f : {"training_log.jsonl", "training_meta.jsonl", "checkpoint.bin", "checkpoint_1.bin",
                        "checkpoint_2.bin", "config.cfg"})
    EXPECT_TRUE(fs::exists(dir.path() / "out" / f)) << f;

  std::ifstream log(dir / "out/training_log.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"iteration", "timestep", "mean_reward", "L_P", "L_V", "entropy", "kl", "lr"})
      EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_FALSE(j.contains("wall_ms"));
  }
  EXPECT_EQ(lines, 2u);
  EXPECT_EQ(ft::load_checkpoint(dir / "out/checkpoint.bin").params.step, 16u);
}

TEST(Cli, MissingDataFileExitsWithDataCodeAndNamesPath) {
  TempDir dir;
  auto cl = command("train");
  cl.data = "/nonexistent/prices.csv";
  cl.out = dir / "out";
  std::string err;
  EXPECT_EQ(run(cl, &err), ft::kExitData);
  EXPECT_NE(err.find("/nonexistent/prices.csv"), std::string::npos) << err;
}

TEST(Cli, UsageErrorsExitWithUsageCode) {
  EXPECT_EQ(run(command("backtest")), ft::kExitUsage);  // no --checkpoint
  EXPECT_EQ(run(command("launch")), ft::kExitUsage);
  TempDir dir;
  ft::save_checkpoint(dir / "ck.bin", always_buy(tiny_config()));
  auto cl = command("backtest");
  cl.checkpoint = dir / "ck.bin";
  cl.out = dir / "out";
  cl.mode = "random";
  EXPECT_EQ(run(cl), ft::kExitUsage);
  write_file(dir / "bad.cfg", "model.nonsense = 1\n");
  auto bad = command("train");
  bad.config = dir / "bad.cfg";
  EXPECT_EQ(run(bad), ft::kExitUsage);
}

TEST(Cli, CorruptCheckpointExitsWithDataCode) {
  TempDir dir;
  write_file(dir / "ck.bin", "garbage");
  auto cl = command("backtest");
  cl.checkpoint = dir / "ck.bin";
  cl.out = dir / "out";
  EXPECT_EQ(run(cl), ft::kExitData);
}

TEST(Cli, ShortTestRangeIsIncompatible) {
  TempDir dir;
  ft::RunConfig c = tiny_config();
  c.data.synthetic.length = 11;
  ft::save_checkpoint(dir / "ck.bin", always_buy(c));
  auto cl = command("backtest");
  cl.checkpoint = dir / "ck.bin";
  cl.out = dir / "out";
  EXPECT_THROW(ft::run_backtest(cl), ft::CompatibilityError);
  EXPECT_EQ(run(cl), ft::kExitData);
}

TEST(Cli, GreedyBacktestIsDeterministic) {
  TempDir dir;
  ft::Checkpoint ck;
  ck.config = tiny_config();
  ck.params = ft::init_params<double>(ck.config.model, 8);
  ft::save_checkpoint(dir / "ck.bin", ck);
  std::string traces[2], metrics[2];
  for (int i = 0; i < 2; ++i) {
    auto cl = command("backtest");
    cl.checkpoint = dir / "ck.bin";
    cl.out = dir / ("out" + std::to_string(i));
    ASSERT_EQ(run(cl), ft::kExitOk);
    traces[i] = slurp(dir / ("out" + std::to_string(i) + "/trace.csv"));
    metrics[i] = slurp(dir / ("out" + std::to_string(i) + "/metrics.json"));
  }
  EXPECT_FALSE(traces[0].empty());
  EXPECT_EQ(traces[0], traces[1]);
  EXPECT_EQ(metrics[0], metrics[1]);
}

TEST(Cli, UntrainedPolicyOnFlatSeriesEarnsNothing) {
  ft::RunConfig c = tiny_config();
  c.data.synthetic = {"constant", 30};
  ft::Checkpoint ck;
  ck.config = c;
  ck.params = ft::init_params<double>(c.model, 2);
  TempDir dir;
  ft::save_checkpoint(dir / "ck.bin", ck);
  auto cl = command("backtest");
  cl.checkpoint = dir / "ck.bin";
  cl.out = dir / "out";
  const auto r = ft::run_backtest(cl).report;
  EXPECT_EQ(r.cr_pct, 0.0);
  EXPECT_EQ(r.mdd_pct, 0.0);
}

TEST(Cli, BuyThenHoldOnRisingSeriesMatchesClosedForm) {
  ft::RunConfig c = tiny_config();
  c.data.synthetic = {"trend", 40};
  c.data.synthetic.slope = 2.0;
  TempDir dir;
  ft::save_checkpoint(dir / "ck.bin", always_buy(c));
  auto cl = command("compare");
  cl.checkpoint = dir / "ck.bin";
  cl.out = dir / "out";
  ASSERT_EQ(run(cl), ft::kExitOk);

  const auto series = ft::load_data(c.data);
  const auto test = *series.test_range;
  const double p_start = series.bars[test.begin].price;
  const double p_exec = series.bars[test.begin + 1].price;
  const double p_end = series.bars[test.end - 1].price;
  const auto cmp = nlohmann::json::parse(slurp(dir / "out/comparison.json"));
  // The agent's first Buy fills at the next bar; buy-and-hold buys at the first test close.
  EXPECT_NEAR(cmp["agent"]["cr_pct"].get<double>(), 100.0 * std::log(p_end / p_exec), 1e-9);
  EXPECT_NEAR(cmp["buy_and_hold"]["cr_pct"].get<double>(), 100.0 * std::log(p_end / p_start), 1e-9);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "out/metrics.json")), cmp["agent"]);
  EXPECT_TRUE(fs::exists(dir.path() / "out/trace.csv"));
}

TEST(Cli, DataFlagOverridesCheckpointSource) {
  TempDir dir;
  std::ostringstream csv;
  csv << "date,close\n";
  for (int i = 0; i < 30; ++i) csv << "2024-01-" << (i + 1 < 10 ? "0" : "") << (i + 1) << "," << 50.0 << "\n";
  write_file(dir / "flat.csv", csv.str());
  ft::save_checkpoint(dir / "ck.bin", always_buy(tiny_config()));
  auto cl = command("backtest");
  cl.checkpoint = dir / "ck.bin";
  cl.out = dir / "out";
  cl.data = dir / "flat.csv";
  const auto run_result = ft::run_backtest(cl);
  EXPECT_EQ(run_result.series->bars.size(), 30u);
  EXPECT_EQ(run_result.report.cr_pct, 0.0);
}

TEST(Cli, GradcheckCommandPasses) {
  auto cl = command("gradcheck");
  std::ostringstream out, err;
  EXPECT_EQ(ft::run_command(cl, out, err), ft::kExitOk) << out.str() << err.str();
  EXPECT_NE(out.str().find("PASSED"), std::string::npos);
}

TEST(Configs, ShippedPromptsParse) {
  ft::RunConfig c;
  c.prompt_template = FLAGTRADER_CONFIG_DIR "/prompt_default.txt";
  const auto shipped = ft::load_prompt(c);
  const auto builtin = ft::PromptTemplate::default_template();
  EXPECT_EQ(shipped.task_description, builtin.task_description);
  EXPECT_EQ(shipped.action_space, builtin.action_space);
  EXPECT_EQ(shipped.state_block, builtin.state_block);
  EXPECT_EQ(shipped.output_instruction, builtin.output_instruction);
  c.prompt_template = FLAGTRADER_CONFIG_DIR "/prompt_compact.txt";
  EXPECT_NO_THROW(ft::load_prompt(c).validate());
}

TEST(Configs, ShippedConfigsValidate) {
  for (const char* name : {"default.cfg", "alternating.cfg", "lora.cfg", "smoke.cfg"}) {
    const auto c = ft::load_config(std::string(FLAGTRADER_CONFIG_DIR "/") + name);
    EXPECT_NO_THROW(c.validate()) << name;
    EXPECT_NO_THROW(ft::load_data(c.data)) << name;
  }
}
