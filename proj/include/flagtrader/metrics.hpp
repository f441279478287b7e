#ifndef FLAGTRADER_METRICS_HPP
#define FLAGTRADER_METRICS_HPP

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flagtrader/errors.hpp"
#include "flagtrader/trading_env.hpp"

namespace flagtrader {

inline constexpr double kTradingDaysPerYear = 252.0;

/// Evaluation summary of one episode. Percent fields are in percent; sr is dimensionless.
struct MetricsReport {
  double cr_pct = 0.0;
  double sr = 0.0;
  double av_pct = 0.0;
  double dv_pct = 0.0;
  double mdd_pct = 0.0;
  std::vector<double> equity_curve;
};

namespace detail {

inline double mean(std::span<const double> xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

inline double sample_std(std::span<const double> xs) {
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

}  // namespace detail

/// Per-step log returns log(1 + pnl_t / balance_{t-1}).
inline std::vector<double> log_returns(std::span<const double> pnl, std::span<const double> balances) {
  if (pnl.size() != balances.size())
    throw UsageError("log_returns: pnl and balances lengths differ");
  std::vector<double> out;
  out.reserve(pnl.size());
  for (std::size_t t = 0; t < pnl.size(); ++t) {
    if (!(balances[t] > 0.0))
      throw DomainError("log return at step " + std::to_string(t) + ": balance must be positive");
    const double growth = 1.0 + pnl[t] / balances[t];
    if (!(growth > 0.0))
      throw DomainError("log return at step " + std::to_string(t) + ": loss exceeds balance");
    out.push_back(std::log(growth));
  }
  return out;
}

/// Sum of per-step log returns, in percent.
inline double cumulative_return(std::span<const double> pnl, std::span<const double> balances) {
  const auto r = log_returns(pnl, balances);
  return 100.0 * std::accumulate(r.begin(), r.end(), 0.0);
}

/// Same convention as the environment's Sharpe: sample std, zero-spread guard.
inline double sharpe_final(std::span<const double> pnl, double rf) {
  if (pnl.size() < 2) throw InsufficientDataError("sharpe needs at least 2 samples");
  const double sd = detail::sample_std(pnl);
  if (!(sd >= kSharpeStdEpsilon)) return 0.0;
  return (detail::mean(pnl) - rf) / sd;
}

struct Volatility {
  double dv_pct = 0.0;
  double av_pct = 0.0;
};

inline Volatility volatility(std::span<const double> log_rets, double periods_per_year = kTradingDaysPerYear) {
  if (log_rets.size() < 2) throw InsufficientDataError("volatility needs at least 2 returns");
  Volatility v;
  v.dv_pct = 100.0 * detail::sample_std(log_rets);
  v.av_pct = v.dv_pct * std::sqrt(periods_per_year);
  return v;
}

/// Largest peak-to-trough decline (percent) with the trough after the peak.
inline double max_drawdown(std::span<const double> curve) {
  if (curve.empty()) throw InsufficientDataError("max_drawdown: empty equity curve");
  double peak = curve.front();
  double worst = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (!(curve[i] > 0.0))
      throw DomainError("max_drawdown: non-positive equity at index " + std::to_string(i));
    if (curve[i] > peak) peak = curve[i];
    const double dd = (peak - curve[i]) / peak;
    if (dd > worst) worst = dd;
  }
  return 100.0 * worst;
}

/// All metrics from an episode trace. Sharpe uses the episode's own pnl only.
inline MetricsReport evaluate(const EpisodeTrace& trace, double rf = 0.0,
                              double periods_per_year = kTradingDaysPerYear) {
  const auto pnl = trace.pnl();
  const auto balances = trace.balances();
  const auto rets = log_returns(pnl, balances);
  MetricsReport report;
  report.cr_pct = 100.0 * std::accumulate(rets.begin(), rets.end(), 0.0);
  report.sr = sharpe_final(pnl, rf);
  const auto vol = volatility(rets, periods_per_year);
  report.dv_pct = vol.dv_pct;
  report.av_pct = vol.av_pct;
  report.equity_curve = trace.equity_curve();
  report.mdd_pct = max_drawdown(report.equity_curve);
  return report;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  return nlohmann::json{{"cr_pct", r.cr_pct}, {"sr", r.sr},         {"av_pct", r.av_pct},
                        {"dv_pct", r.dv_pct}, {"mdd_pct", r.mdd_pct}, {"equity_curve", r.equity_curve}};
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.cr_pct = j.at("cr_pct").get<double>();
  r.sr = j.at("sr").get<double>();
  r.av_pct = j.at("av_pct").get<double>();
  r.dv_pct = j.at("dv_pct").get<double>();
  r.mdd_pct = j.at("mdd_pct").get<double>();
  r.equity_curve = j.at("equity_curve").get<std::vector<double>>();
  return r;
}

// Buy-and-hold baseline --------------------------------------------------------

/// Passive baseline: converts all cash to shares at the first test bar's price
/// and marks the position at every later test bar. Does not go through the
/// environment's next-bar execution.
inline EpisodeTrace buy_and_hold_trace(const MarketSeries& series, double initial_cash) {
  if (!series.is_split()) throw ConfigError("buy-and-hold: series has not been split");
  const auto test = series.test();
  EpisodeTrace trace;
  trace.initial_equity = initial_cash;
  const double shares = initial_cash / test.front().price;
  for (std::size_t k = 1; k < test.size(); ++k) {
    TraceRow row;
    row.t = series.test_range->begin + k - 1;
    row.price = test[k - 1].price;
    row.action = k == 1 ? Action::Buy : Action::Hold;
    row.cash = 0.0;
    row.holdings = shares;
    row.equity = shares * test[k].price;
    row.pnl = shares * (test[k].price - test[k - 1].price);
    trace.rows.push_back(row);
  }
  return trace;
}

}  // namespace flagtrader

#endif  // FLAGTRADER_METRICS_HPP
