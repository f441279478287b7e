#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "flagtrader/text_state.hpp"

using namespace flagtrader;

namespace {

MarketState make_state(double price, double sentiment, double cash, double holdings) {
  return MarketState{0, price, sentiment, AccountState{cash, holdings}};
}

}  // namespace

TEST(RenderPrompt, StateBlockFormat) {
  const auto p = render_prompt(make_state(50.0, 0.1, 1000.0, 0.0), PromptTemplate::default_template());
  EXPECT_NE(p.state_block.find("Price: $50.00"), std::string::npos);
  EXPECT_NE(p.state_block.find("Cash: 1000.00"), std::string::npos);
  EXPECT_NE(p.state_block.find("Sentiment: 0.1000"), std::string::npos);
  EXPECT_NE(p.state_block.find("Holdings: 0.0000"), std::string::npos);
  EXPECT_EQ(p.text, p.task_description + "\n" + p.action_space + "\n" + p.state_block + "\n" + p.output_instruction);
}

TEST(RenderPrompt, Deterministic) {
  const auto s = make_state(12.34, -0.5, 10.0, 3.25);
  EXPECT_EQ(render_prompt(s, PromptTemplate::default_template()).text,
            render_prompt(s, PromptTemplate::default_template()).text);
}

TEST(RenderPrompt, PriceChangeIsLocal) {
  const auto tpl = PromptTemplate::default_template();
  const auto a = render_prompt(make_state(50.00, 0.1, 1000, 0), tpl).text;
  const auto b = render_prompt(make_state(57.25, 0.1, 1000, 0), tpl).text;
  ASSERT_EQ(a.size(), b.size());
  const auto span = a.find("$50.00");
  ASSERT_NE(span, std::string::npos);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (i < span + 1 || i >= span + 6) {
      EXPECT_EQ(a[i], b[i]) << "at " << i;
    }
}

TEST(RenderPrompt, EmptySectionIsRejectedBeforeTokenizing) {
  auto tpl = PromptTemplate::default_template();
  tpl.state_block.clear();
  EXPECT_THROW(render_prompt(make_state(1, 0, 1, 0), tpl), ConfigError);
  tpl = PromptTemplate::default_template();
  tpl.state_block = "Price: {price}";
  EXPECT_THROW(tpl.validate(), ConfigError);
}

TEST(Tokenize, ByteIdentity) {
  const auto seq = tokenize("abc", ByteVocabulary{}, 16);
  EXPECT_EQ(seq.ids, (std::vector<int>{ByteVocabulary::kBos, 'a', 'b', 'c'}));
  EXPECT_EQ(detokenize(seq), "abc");
}

TEST(Tokenize, KeepsTail) {
  const auto seq = tokenize("abcdefgh", ByteVocabulary{}, 4);
  EXPECT_EQ(seq.ids, (std::vector<int>{'e', 'f', 'g', 'h'}));
  EXPECT_THROW(tokenize("x", ByteVocabulary{}, 0), ConfigError);
}

TEST(Tokenize, RoundTripOnRenderedPrompts) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 5000.0), s(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const auto p = render_prompt(make_state(u(rng) + 0.01, s(rng), u(rng), u(rng) / 7),
                                 PromptTemplate::default_template());
    EXPECT_EQ(detokenize(tokenize(p, ByteVocabulary{}, 4096)), p.text);
  }
}

TEST(Tokenize, InjectiveOnRenderedState) {
  std::mt19937_64 rng(12);
  std::set<std::tuple<long, long, long, long>> keys;
  std::set<std::vector<int>> seqs;
  for (int i = 0; i < 2000; ++i) {
    // draw on the rendered grid so distinct tuples are distinct at display precision
    const long pc = 1 + rng() % 3000, sc = static_cast<long>(rng() % 20001) - 10000, cc = rng() % 5000,
               hc = rng() % 5000;
    if (!keys.insert({pc, sc, cc, hc}).second) continue;
    const auto st = make_state(pc / 100.0, sc / 10000.0, cc / 100.0, hc / 10000.0);
    EXPECT_TRUE(seqs.insert(encode_state(st, PromptTemplate::default_template(), 4096).ids).second);
  }
}

TEST(PromptTemplateFile, ParseWriteRoundTrip) {
  const auto tpl = PromptTemplate::default_template();
  std::stringstream buf;
  write_prompt_template(buf, tpl);
  const auto back = parse_prompt_template(buf);
  EXPECT_EQ(back.task_description, tpl.task_description);
  EXPECT_EQ(back.action_space, tpl.action_space);
  EXPECT_EQ(back.state_block, tpl.state_block);
  EXPECT_EQ(back.output_instruction, tpl.output_instruction);
}

TEST(PromptTemplateFile, RejectsUnknownSection) {
  std::istringstream in("## task\nx\n## colour\ny\n");
  EXPECT_THROW(parse_prompt_template(in), ConfigError);
  EXPECT_THROW(load_prompt_template("/no/such/template.txt"), IoError);
}
