#ifndef FLAGTRADER_CHECKPOINT_HPP
#define FLAGTRADER_CHECKPOINT_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "flagtrader/config.hpp"
#include "flagtrader/errors.hpp"
#include "flagtrader/policy_model.hpp"
#include "flagtrader/text_state.hpp"

namespace flagtrader {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'F', 'L', 'A', 'G', 'T', 'R', 'D', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to resume evaluation: run config, prompt and weights.
struct Checkpoint {
  RunConfig config;
  PromptTemplate prompt = PromptTemplate::default_template();
  ParameterStore<double> params;
};

namespace detail {

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename U>
U get(std::istream& in, const char* what) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) throw ParseError(std::string("checkpoint truncated reading ") + what);
  return v;
}

inline std::string get_string(std::istream& in, const char* what) {
  const auto n = get<std::uint64_t>(in, what);
  if (n > (std::uint64_t{1} << 32)) throw ParseError(std::string("checkpoint: implausible length for ") + what);
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n)))
    throw ParseError(std::string("checkpoint truncated reading ") + what);
  return s;
}

}  // namespace detail

/// Layout: magic, version, scalar width, step, config text, prompt text,
/// parameter count, then per parameter: name, group, rows, cols, raw values.
inline void save_checkpoint(std::ostream& out, const Checkpoint& ck) {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, sizeof(double));
  detail::put<std::uint64_t>(out, ck.params.step);
  std::ostringstream cfg, prompt;
  write_config(cfg, ck.config);
  write_prompt_template(prompt, ck.prompt);
  detail::put_string(out, cfg.str());
  detail::put_string(out, prompt.str());

  std::uint64_t count = 0;
  ck.params.weights.for_each([&](const std::string&, ParamGroup, const Matrix<double>&) { ++count; });
  detail::put<std::uint64_t>(out, count);
  ck.params.weights.for_each([&](const std::string& name, ParamGroup g, const Matrix<double>& m) {
    detail::put_string(out, name);
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(g));
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
  if (!out) throw IoError("checkpoint write failed");
}

inline Checkpoint load_checkpoint(std::istream& in) {
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CompatibilityError("not a checkpoint file (bad magic)");
  const auto version = detail::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw CompatibilityError("unsupported checkpoint version " + std::to_string(version));
  if (detail::get<std::uint32_t>(in, "scalar size") != sizeof(double))
    throw CompatibilityError("checkpoint scalar type is not 64-bit");

  Checkpoint ck;
  const auto step = detail::get<std::uint64_t>(in, "step");
  std::istringstream cfg(detail::get_string(in, "config"));
  ck.config = parse_config(cfg, "checkpoint config");
  ck.config.model.validate();
  std::istringstream prompt(detail::get_string(in, "prompt"));
  ck.prompt = parse_prompt_template(prompt);

  ck.params = init_params<double>(ck.config.model, 0);
  ck.params.step = step;
  std::uint64_t expected = 0;
  ck.params.weights.for_each([&](const std::string&, ParamGroup, const Matrix<double>&) { ++expected; });
  const auto count = detail::get<std::uint64_t>(in, "parameter count");
  if (count != expected)
    throw CompatibilityError("checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                             std::to_string(expected));
  ck.params.weights.for_each([&](const std::string& name, ParamGroup g, Matrix<double>& m) {
    const auto stored = detail::get_string(in, "parameter name");
    const auto group = detail::get<std::uint8_t>(in, "parameter group");
    const auto rows = detail::get<std::uint64_t>(in, "rows");
    const auto cols = detail::get<std::uint64_t>(in, "cols");
    if (stored != name || group != static_cast<std::uint8_t>(g) || rows != static_cast<std::uint64_t>(m.rows()) ||
        cols != static_cast<std::uint64_t>(m.cols()))
      throw CompatibilityError("checkpoint parameter '" + stored + "' does not match model parameter '" + name + "'");
    if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double))))
      throw ParseError("checkpoint truncated in parameter " + name);
  });
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  save_checkpoint(out, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  return load_checkpoint(in);
}

}  // namespace flagtrader

#endif  // FLAGTRADER_CHECKPOINT_HPP
