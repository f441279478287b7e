#ifndef FLAGTRADER_TEXT_STATE_HPP
#define FLAGTRADER_TEXT_STATE_HPP

#include <cstddef>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flagtrader/errors.hpp"
#include "flagtrader/trading_env.hpp"

namespace flagtrader {

/// Four-section prompt layout. Placeholders {price}, {sentiment}, {cash} and
/// {holdings} are substituted in every section.
struct PromptTemplate {
  std::string task_description;
  std::string action_space;
  std::string state_block;
  std::string output_instruction;

  /// Default layout: task, legible action set, state, output format.
  /// Price sits last in the state block so its offset from the sequence end
  /// does not depend on how many digits cash and holdings render to.
  static PromptTemplate default_template() {
    return PromptTemplate{
        "You are a trading agent managing one stock. Each day you read the market and your "
        "account, then choose one action to maximize risk-adjusted return.",
        "Actions: Sell (-1) sells all shares; Hold (0) keeps the position; Buy (1) spends all cash.",
        "Cash: {cash}, Holdings: {holdings}, Sentiment: {sentiment}, Price: ${price}",
        "Reply with one action.\nAction:"};
  }

  void validate() const {
    if (task_description.empty() || action_space.empty() || state_block.empty() || output_instruction.empty())
      throw ConfigError("prompt template: all four sections must be non-empty");
    for (const char* key : {"{price}", "{sentiment}", "{cash}", "{holdings}"}) {
      if (state_block.find(key) == std::string::npos)
        throw ConfigError(std::string("prompt template: state section lacks placeholder ") + key);
    }
  }
};

/// Template file format: sections introduced by header lines
/// `## task`, `## actions`, `## state`, `## output`; body lines follow verbatim.
inline PromptTemplate parse_prompt_template(std::istream& in) {
  PromptTemplate tpl;
  std::string* current = nullptr;
  std::string line;
  auto append = [](std::string& dst, const std::string& text) {
    if (!dst.empty()) dst += '\n';
    dst += text;
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("## ", 0) == 0) {
      const auto name = line.substr(3);
      if (name == "task") current = &tpl.task_description;
      else if (name == "actions") current = &tpl.action_space;
      else if (name == "state") current = &tpl.state_block;
      else if (name == "output") current = &tpl.output_instruction;
      else throw ConfigError("prompt template: unknown section '" + name + "'");
      continue;
    }
    if (current == nullptr) {
      if (line.empty()) continue;
      throw ConfigError("prompt template: text before the first section header");
    }
    append(*current, line);
  }
  tpl.validate();
  return tpl;
}

inline PromptTemplate load_prompt_template(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt template: " + path);
  return parse_prompt_template(in);
}

inline void write_prompt_template(std::ostream& out, const PromptTemplate& tpl) {
  out << "## task\n" << tpl.task_description << "\n## actions\n" << tpl.action_space << "\n## state\n"
      << tpl.state_block << "\n## output\n" << tpl.output_instruction << "\n";
}

struct Prompt {
  std::string text;
  std::string task_description;
  std::string action_space;
  std::string state_block;
  std::string output_instruction;
};

namespace detail {

inline std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

inline std::string substitute(std::string s, const MarketState& st) {
  const std::pair<std::string_view, std::string> subs[] = {
      {"{price}", fixed(st.price, 2)},
      {"{sentiment}", fixed(st.sentiment, 4)},
      {"{cash}", fixed(st.account.cash, 2)},
      {"{holdings}", fixed(st.account.holdings, 4)},
  };
  for (const auto& [key, value] : subs) {
    for (auto pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size()))
      s.replace(pos, key.size(), value);
  }
  return s;
}

}  // namespace detail

inline Prompt render_prompt(const MarketState& state, const PromptTemplate& tpl) {
  tpl.validate();
  Prompt p;
  p.task_description = detail::substitute(tpl.task_description, state);
  p.action_space = detail::substitute(tpl.action_space, state);
  p.state_block = detail::substitute(tpl.state_block, state);
  p.output_instruction = detail::substitute(tpl.output_instruction, state);
  p.text = p.task_description + "\n" + p.action_space + "\n" + p.state_block + "\n" + p.output_instruction;
  return p;
}

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by special tokens.
struct ByteVocabulary {
  static constexpr int kBos = 256;
  static constexpr int kPad = 257;
  static constexpr std::size_t kSize = 258;

  std::size_t size() const noexcept { return kSize; }
  static bool is_special(int id) noexcept { return id >= 256; }
};

struct TokenSeq {
  std::vector<int> ids;
  std::size_t length() const noexcept { return ids.size(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// BOS followed by the text's bytes. Sequences over `max_seq_len` keep their
/// last `max_seq_len` tokens, so the state block and output instruction survive.
inline TokenSeq tokenize(std::string_view text, const ByteVocabulary&, std::size_t max_seq_len) {
  if (max_seq_len == 0) throw ConfigError("tokenize: max_seq_len must be positive");
  TokenSeq seq;
  seq.ids.reserve(text.size() + 1);
  seq.ids.push_back(ByteVocabulary::kBos);
  for (unsigned char c : text) seq.ids.push_back(static_cast<int>(c));
  if (seq.ids.size() > max_seq_len)
    seq.ids.erase(seq.ids.begin(), seq.ids.end() - static_cast<std::ptrdiff_t>(max_seq_len));
  return seq;
}

inline TokenSeq tokenize(const Prompt& prompt, const ByteVocabulary& vocab, std::size_t max_seq_len) {
  return tokenize(prompt.text, vocab, max_seq_len);
}

inline std::string detokenize(const TokenSeq& seq) {
  std::string out;
  out.reserve(seq.ids.size());
  for (int id : seq.ids) {
    if (!ByteVocabulary::is_special(id)) out.push_back(static_cast<char>(id));
  }
  return out;
}

/// Convenience: state -> prompt -> tokens.
inline TokenSeq encode_state(const MarketState& state, const PromptTemplate& tpl, std::size_t max_seq_len) {
  return tokenize(render_prompt(state, tpl), ByteVocabulary{}, max_seq_len);
}

}  // namespace flagtrader

#endif  // FLAGTRADER_TEXT_STATE_HPP
