#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "flagtrader/gradcheck.hpp"
#include "flagtrader/policy_model.hpp"

using namespace flagtrader;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 32;
  return c;
}

TokenSeq random_tokens(std::mt19937_64& rng, std::size_t n) {
  TokenSeq t;
  for (std::size_t i = 0; i < n; ++i) t.ids.push_back(static_cast<int>(rng() % 256));
  return t;
}

bool same(const ParameterSet<double>& a, const ParameterSet<double>& b) {
  std::vector<const Matrix<double>*> ma, mb;
  a.for_each([&](const std::string&, ParamGroup, const Matrix<double>& m) { ma.push_back(&m); });
  b.for_each([&](const std::string&, ParamGroup, const Matrix<double>& m) { mb.push_back(&m); });
  if (ma.size() != mb.size()) return false;
  for (std::size_t i = 0; i < ma.size(); ++i)
    if (ma[i]->rows() != mb[i]->rows() || ma[i]->cols() != mb[i]->cols() || *ma[i] != *mb[i]) return false;
  return true;
}

}  // namespace

TEST(InitParams, SameSeedIsBitIdentical) {
  const auto a = init_params<double>(small_config(), 5);
  const auto b = init_params<double>(small_config(), 5);
  const auto c = init_params<double>(small_config(), 6);
  EXPECT_TRUE(same(a.weights, b.weights));
  EXPECT_FALSE(same(a.weights, c.weights));
}

TEST(InitParams, LayerSplitMustAddUp) {
  auto c = small_config();
  c.n_trainable = 2;
  EXPECT_THROW(init_params<double>(c, 1), ConfigError);
  c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(InitParams, LoraWithZeroBMatchesBaseModel) {
  auto base_cfg = small_config();
  auto lora_cfg = base_cfg;
  lora_cfg.lora_enabled = true;
  lora_cfg.lora_targets = {LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output,
                           LoraTarget::FF1, LoraTarget::FF2};
  const auto base = init_params<double>(base_cfg, 3);
  const auto lora = init_params<double>(lora_cfg, 3);
  EXPECT_EQ(lora.weights.lora.size(), 6u * base_cfg.n_layers);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    const auto tokens = random_tokens(rng, 1 + rng() % 32);
    const auto a = forward(base, tokens, kAllLegal);
    const auto b = forward(lora, tokens, kAllLegal);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.value, b.value);
  }
}

TEST(ApplyLora, ZeroAdapterAndRankOneOuterProduct) {
  auto cfg = small_config();
  cfg.lora_enabled = true;
  cfg.lora_rank = 1;
  auto store = init_params<double>(cfg, 2);
  const auto& base = store.weights.frozen_layers[0];
  std::vector<LoraPair<double>> pairs;
  for (const auto& p : store.weights.lora)
    if (p.layer == 0) pairs.push_back(p);
  ASSERT_EQ(pairs.size(), 2u);

  pairs[0].a.setZero();
  pairs[1].b.setZero();
  auto eff = apply_lora(base, std::span<const LoraPair<double>>(pairs));
  EXPECT_EQ(eff.w_q, base.w_q);
  EXPECT_EQ(eff.w_v, base.w_v);

  pairs[0].a.setRandom();
  pairs[0].b.setRandom();
  pairs[1].a.setRandom();
  pairs[1].b.setRandom();
  eff = apply_lora(base, std::span<const LoraPair<double>>(pairs));
  for (Eigen::Index i = 0; i < base.w_q.rows(); ++i)
    for (Eigen::Index j = 0; j < base.w_q.cols(); ++j) {
      EXPECT_NEAR(eff.w_q(i, j), base.w_q(i, j) + pairs[0].a(i, 0) * pairs[0].b(0, j), 1e-15);
      EXPECT_NEAR(eff.w_v(i, j), base.w_v(i, j) + pairs[1].a(i, 0) * pairs[1].b(0, j), 1e-15);
    }
  EXPECT_EQ(eff.w_k, base.w_k);
  EXPECT_EQ(eff.w_ff1, base.w_ff1);
}

TEST(MaskedPolicy, Examples) {
  const auto uniform = masked_policy<double>({0.7, 0.7, 0.7}, kAllLegal);
  for (double p : uniform.probs) EXPECT_NEAR(p, 1.0 / 3, 1e-15);
  EXPECT_NEAR(uniform.entropy(), std::log(3.0), 1e-15);

  const double z = -0.4;
  const auto two = masked_policy<double>({5.0, z, z + std::log(2.0)}, {false, true, true});
  EXPECT_EQ(two.probs[0], 0.0);
  EXPECT_NEAR(two.probs[1], 1.0 / 3, 1e-15);
  EXPECT_NEAR(two.probs[2], 2.0 / 3, 1e-15);
  EXPECT_THROW(masked_policy<double>({0, 0, 0}, {false, false, false}), UsageError);
}

TEST(MaskedPolicy, NormalizedZeroOnIllegalAndShiftInvariant) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 3);
  for (int i = 0; i < 500; ++i) {
    ActionMask mask{};
    do
      for (auto& m : mask) m = rng() & 1;
    while (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }));
    std::array<double, 3> z{n(rng), n(rng), n(rng)};
    const auto out = masked_policy(z, mask);
    double sum = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      if (mask[k]) {
        sum += out.probs[k];
      } else {
        EXPECT_EQ(out.probs[k], 0.0);
      }
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    const double c = n(rng) * 100;
    const auto shifted = masked_policy<double>({z[0] + c, z[1] + c, z[2] + c}, mask);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(shifted.probs[k], out.probs[k], 1e-12);
  }
}

TEST(SampleAction, DegenerateAndGreedyTieBreak) {
  SplitMix64 rng(1);
  const auto buy_only = masked_policy<double>({0, 0, 0}, {false, false, true});
  for (int i = 0; i < 100; ++i) {
    const auto c = sample_action(buy_only, rng, SelectionMode::Sample);
    EXPECT_EQ(c.action, Action::Buy);
    EXPECT_EQ(c.log_prob, 0.0);
  }
  const auto tie = masked_policy<double>({1, 1, 0}, {true, true, false});
  EXPECT_EQ(sample_action(tie, rng, SelectionMode::Greedy).action, Action::Sell);
}

TEST(SampleAction, FrequenciesWithinThreeSigma) {
  SplitMix64 rng(99);
  const auto out = masked_policy<double>({0.2, -0.5, 1.1}, kAllLegal);
  const int n = 100000;
  std::array<int, 3> counts{};
  for (int i = 0; i < n; ++i) ++counts[action_index(sample_action(out, rng, SelectionMode::Sample).action)];
  for (std::size_t k = 0; k < 3; ++k) {
    const double p = out.probs[k];
    EXPECT_NEAR(counts[k], n * p, 3 * std::sqrt(n * p * (1 - p))) << k;
  }
}

TEST(Forward, Causality) {
  auto cfg = small_config();
  const auto store = init_params<double>(cfg, 8);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto tokens = random_tokens(rng, 20);
    const std::size_t i = rng() % 20;
    auto changed = tokens;
    changed.ids[i] = (changed.ids[i] + 1 + static_cast<int>(rng() % 255)) % 256;
    auto g1 = GradientStore<double>::zeros_for(store), g2 = g1;
    Recording<double> r1, r2;
    forward(store, tokens, kAllLegal, r1, g1);
    forward(store, changed, kAllLegal, r2, g2);
    const auto& h1 = r1.tape.value(r1.sequence);
    const auto& h2 = r2.tape.value(r2.sequence);
    for (Eigen::Index row = 0; row < static_cast<Eigen::Index>(i); ++row) EXPECT_EQ(h1.row(row), h2.row(row));
    EXPECT_NE(h1.row(static_cast<Eigen::Index>(i)), h2.row(static_cast<Eigen::Index>(i)));
  }
}

TEST(Forward, InputContracts) {
  const auto store = init_params<double>(small_config(), 1);
  std::mt19937_64 rng(0);
  EXPECT_THROW(forward(store, random_tokens(rng, 33), kAllLegal), BoundsError);
  EXPECT_THROW(forward(store, TokenSeq{}, kAllLegal), UsageError);
  EXPECT_THROW(forward(store, random_tokens(rng, 4), ActionMask{false, false, false}), UsageError);
}

TEST(Backward, RequiresRecording) {
  Recording<double> rec;
  EXPECT_THROW(backward(rec, std::array<double, 3>{1, 0, 0}, 0.0), UsageError);
  const auto store = init_params<double>(small_config(), 1);
  auto grads = GradientStore<double>::zeros_for(store);
  std::mt19937_64 rng(0);
  Recording<double> once;
  forward(store, random_tokens(rng, 5), kAllLegal, once, grads);
  backward(once, std::array<double, 3>{1, 0, 0}, 0.0);
  EXPECT_THROW(backward(once, std::array<double, 3>{1, 0, 0}, 0.0), UsageError);
}

TEST(Backward, FrozenGradientsAreExactlyZero) {
  auto cfg = small_config();
  cfg.lora_enabled = true;
  const auto store = init_params<double>(cfg, 4);
  std::mt19937_64 rng(3);
  auto grads = GradientStore<double>::zeros_for(store);
  Recording<double> rec;
  forward(store, random_tokens(rng, 12), kAllLegal, rec, grads);
  backward(rec, std::array<double, 3>{0.3, -1, 2}, 1.5);
  grads.grads.for_each([](const std::string& name, ParamGroup g, const Matrix<double>& m) {
    if (g == ParamGroup::Frozen) {
      EXPECT_EQ(m.cwiseAbs().maxCoeff(), 0.0) << name;
    }
  });
}

class GradcheckTest : public ::testing::TestWithParam<std::tuple<bool, bool>> {};

TEST_P(GradcheckTest, FiniteDifferencesAgree) {
  const auto [lora, post_norm] = GetParam();
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.n_frozen = 1;
  cfg.n_trainable = 1;
  cfg.lora_rank = 2;
  cfg.lora_enabled = lora;
  cfg.post_norm = post_norm;
  cfg.max_seq_len = 32;
  const auto report = run_gradcheck(cfg, 17);
  for (const auto& g : report.groups) {
    if (g.group == ParamGroup::Frozen) {
      EXPECT_EQ(g.max_abs_gradient, 0.0);
    } else {
      EXPECT_LT(g.max_relative_error, 1e-4) << group_name(g.group);
    }
  }
  EXPECT_LT(report.identity_error, 1e-8);
  EXPECT_TRUE(report.pass);
}

INSTANTIATE_TEST_SUITE_P(Variants, GradcheckTest,
                         ::testing::Values(std::tuple{true, false}, std::tuple{false, false}, std::tuple{true, true}));

TEST(Gradcheck, AllLoraTargetsAndNoTrainableLayers) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_frozen = 2;
  cfg.n_trainable = 0;
  cfg.lora_enabled = true;
  cfg.lora_targets = {LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output,
                      LoraTarget::FF1, LoraTarget::FF2};
  cfg.max_seq_len = 16;
  GradcheckOptions opt;
  opt.sequence_length = 12;
  const auto report = run_gradcheck(cfg, 3, opt);
  EXPECT_TRUE(report.pass);
}
