#ifndef FLAGTRADER_MARKET_DATA_HPP
#define FLAGTRADER_MARKET_DATA_HPP

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flagtrader/errors.hpp"

namespace flagtrader {

using Date = std::chrono::sys_days;

struct Bar {
  Date date;
  double price = 0.0;
  double sentiment = 0.0;  // scalar score in [-1, 1]
};

/// Half-open index interval [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool empty() const noexcept { return end <= begin; }
  bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

/// A validated single-asset series. Immutable once built; the warm-up/test
/// ranges are only present after split().
struct MarketSeries {
  std::string symbol;
  std::vector<Bar> bars;
  double risk_free_rate = 0.0;
  std::optional<IndexRange> warmup_range;
  std::optional<IndexRange> test_range;

  std::size_t size() const noexcept { return bars.size(); }
  bool is_split() const noexcept { return warmup_range.has_value() && test_range.has_value(); }

  std::span<const Bar> warmup() const { return slice(warmup_range); }
  std::span<const Bar> test() const { return slice(test_range); }

 private:
  std::span<const Bar> slice(const std::optional<IndexRange>& r) const {
    if (!r) return {};
    return std::span<const Bar>(bars).subspan(r->begin, r->size());
  }
};

/// Column names used to locate fields in the CSV header.
struct ColumnSchema {
  std::string date = "date";
  std::string close = "close";
  std::string sentiment = "sentiment";
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  // std::from_chars rejects a leading '+'
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Parses "YYYY-MM-DD". A trailing time component ("T..." or " ...") is ignored.
inline std::optional<Date> parse_iso_date(std::string_view s) {
  s = detail::trim(s);
  if (s.size() > 10 && (s[10] == 'T' || s[10] == ' ')) s = s.substr(0, 10);
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0;
  unsigned m = 0, d = 0;
  auto num = [&](std::string_view part, auto& out) {
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
    return ec == std::errc{} && ptr == part.data() + part.size();
  };
  if (!num(s.substr(0, 4), y) || !num(s.substr(5, 2), m) || !num(s.substr(8, 2), d)) return std::nullopt;
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) return std::nullopt;
  return Date{ymd};
}

inline std::string format_iso_date(Date date) {
  const std::chrono::year_month_day ymd{date};
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

/// Checks the series-level invariants: positive prices, sentiment in range,
/// strictly increasing dates.
inline void validate_series(const MarketSeries& series) {
  for (std::size_t i = 0; i < series.bars.size(); ++i) {
    const Bar& b = series.bars[i];
    if (!(b.price > 0.0) || !std::isfinite(b.price))
      throw ValidationError("bar " + std::to_string(i) + ": price must be positive and finite");
    if (!(b.sentiment >= -1.0 && b.sentiment <= 1.0))
      throw ValidationError("bar " + std::to_string(i) + ": sentiment must lie in [-1, 1]");
    if (i > 0 && !(series.bars[i - 1].date < b.date))
      throw ValidationError("bar " + std::to_string(i) + ": dates must be strictly increasing");
  }
}

/// Reads a CSV market series from a stream. `source` names the input in error messages.
inline MarketSeries read_series(std::istream& in, const ColumnSchema& schema = {},
                                const std::string& source = "<stream>") {
  std::string line;
  std::size_t line_no = 0;
  std::optional<std::vector<std::string>> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) {
      header.emplace();
      for (auto f : detail::split_csv_line(line)) header->emplace_back(f);
      break;
    }
  }
  if (!header) throw EmptyInputError(source + ": empty input");

  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(header->begin(), header->end(), name);
    if (it == header->end()) return std::nullopt;
    return static_cast<std::size_t>(it - header->begin());
  };
  const auto date_col = column(schema.date);
  const auto close_col = column(schema.close);
  const auto sent_col = column(schema.sentiment);
  if (!date_col) throw ParseError(source + ": missing required column '" + schema.date + "'");
  if (!close_col) throw ParseError(source + ": missing required column '" + schema.close + "'");

  MarketSeries series;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto where = source + ": row " + std::to_string(row) + " (line " + std::to_string(line_no) + ")";
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header->size())
      throw ParseError(where + ": expected " + std::to_string(header->size()) + " fields, got " +
                       std::to_string(fields.size()));
    Bar bar;
    const auto date = parse_iso_date(fields[*date_col]);
    if (!date) throw ParseError(where + ": malformed date '" + std::string(fields[*date_col]) + "'");
    bar.date = *date;
    const auto price = detail::parse_double(fields[*close_col]);
    if (!price) throw ParseError(where + ": malformed close '" + std::string(fields[*close_col]) + "'");
    if (!(*price > 0.0) || !std::isfinite(*price))
      throw ValidationError(where + ": price must be positive, got " + std::string(fields[*close_col]));
    bar.price = *price;
    if (sent_col) {
      const auto s = detail::parse_double(fields[*sent_col]);
      if (!s) throw ParseError(where + ": malformed sentiment '" + std::string(fields[*sent_col]) + "'");
      if (!(*s >= -1.0 && *s <= 1.0))
        throw ValidationError(where + ": sentiment must lie in [-1, 1]");
      bar.sentiment = *s;
    }
    series.bars.push_back(bar);
  }
  if (series.bars.empty()) throw EmptyInputError(source + ": no data rows");

  std::stable_sort(series.bars.begin(), series.bars.end(),
                   [](const Bar& a, const Bar& b) { return a.date < b.date; });
  for (std::size_t i = 1; i < series.bars.size(); ++i) {
    if (series.bars[i].date == series.bars[i - 1].date)
      throw ValidationError(source + ": duplicate date " + format_iso_date(series.bars[i].date));
  }
  return series;
}

inline MarketSeries load_series(const std::string& path, const ColumnSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open data file: " + path);
  auto series = read_series(in, schema, path);
  const auto slash = path.find_last_of("/\\");
  auto stem = path.substr(slash == std::string::npos ? 0 : slash + 1);
  if (const auto dot = stem.rfind('.'); dot != std::string::npos) stem.resize(dot);
  series.symbol = stem;
  return series;
}

inline void write_series(std::ostream& out, const MarketSeries& series) {
  out << "date,close,sentiment\n";
  char buf[64];
  for (const Bar& b : series.bars) {
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g\n", b.price, b.sentiment);
    out << format_iso_date(b.date) << buf;
  }
}

/// Returns a copy of `series` with warm-up [0, warmup_len) and test [warmup_len, n).
inline MarketSeries split(MarketSeries series, std::size_t warmup_len) {
  const auto n = series.size();
  if (warmup_len == 0 || warmup_len >= n)
    throw BoundsError("warmup length " + std::to_string(warmup_len) + " out of range (0, " +
                      std::to_string(n) + ")");
  series.warmup_range = IndexRange{0, warmup_len};
  series.test_range = IndexRange{warmup_len, n};
  return series;
}

// Synthetic fixtures --------------------------------------------------------

struct SyntheticSpec {
  std::string generator = "random_walk";  // sinusoid | trend | random_walk | alternating | constant
  std::size_t length = 120;
  std::uint64_t seed = 0;
  double start_price = 100.0;
  double amplitude = 10.0;   // sinusoid half-range
  double period = 20.0;      // sinusoid period in bars
  double slope = 1.0;        // trend increment per bar
  double volatility = 0.01;  // random_walk per-step log-return stddev
  double low = 10.0;         // alternating
  double high = 12.0;
};

/// Deterministic synthetic series; dates are consecutive days from 2020-01-01.
inline MarketSeries make_synthetic(const SyntheticSpec& spec) {
  if (spec.length < 2) throw ConfigError("synthetic series needs at least 2 bars");
  using namespace std::chrono;
  const Date origin{year{2020} / January / 1};
  MarketSeries series;
  series.symbol = "SYN-" + spec.generator;
  series.bars.resize(spec.length);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  double price = spec.start_price;
  for (std::size_t i = 0; i < spec.length; ++i) {
    Bar& b = series.bars[i];
    b.date = origin + days{static_cast<int>(i)};
    const double t = static_cast<double>(i);
    if (spec.generator == "sinusoid") {
      b.price = spec.start_price + spec.amplitude * std::sin(2.0 * std::numbers::pi * t / spec.period);
      b.sentiment = std::cos(2.0 * std::numbers::pi * t / spec.period);
    } else if (spec.generator == "trend") {
      b.price = spec.start_price + spec.slope * t;
    } else if (spec.generator == "random_walk") {
      if (i > 0) price *= std::exp(spec.volatility * normal(rng));
      b.price = price;
      b.sentiment = std::clamp(0.3 * normal(rng), -1.0, 1.0);
    } else if (spec.generator == "alternating") {
      b.price = (i % 2 == 0) ? spec.low : spec.high;
    } else if (spec.generator == "constant") {
      b.price = spec.start_price;
    } else {
      throw ConfigError("unknown synthetic generator: " + spec.generator);
    }
  }
  validate_series(series);
  return series;
}

}  // namespace flagtrader

#endif  // FLAGTRADER_MARKET_DATA_HPP
