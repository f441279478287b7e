#ifndef FLAGTRADER_TRADING_ENV_HPP
#define FLAGTRADER_TRADING_ENV_HPP

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <memory>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "flagtrader/errors.hpp"
#include "flagtrader/market_data.hpp"

namespace flagtrader {

enum class Action : int { Sell = -1, Hold = 0, Buy = 1 };

inline constexpr std::size_t kNumActions = 3;
inline constexpr std::array<Action, kNumActions> kAllActions{Action::Sell, Action::Hold, Action::Buy};

/// Dense slot of an action in logit/probability vectors, ordered by code.
constexpr std::size_t action_index(Action a) noexcept { return static_cast<std::size_t>(static_cast<int>(a) + 1); }
constexpr Action action_at(std::size_t index) noexcept { return static_cast<Action>(static_cast<int>(index) - 1); }
constexpr int action_code(Action a) noexcept { return static_cast<int>(a); }

inline const char* action_name(Action a) noexcept {
  switch (a) {
    case Action::Sell: return "Sell";
    case Action::Hold: return "Hold";
    case Action::Buy: return "Buy";
  }
  return "?";
}

/// Legality flags indexed by action_index().
using ActionMask = std::array<bool, kNumActions>;

inline constexpr ActionMask kAllLegal{true, true, true};

struct AccountState {
  double cash = 0.0;      // C_t
  double holdings = 0.0;  // H_t, fractional shares allowed
  friend bool operator==(const AccountState&, const AccountState&) = default;
};

struct MarketState {
  std::size_t t = 0;  // absolute bar index into the series
  double price = 0.0;
  double sentiment = 0.0;
  AccountState account;
  friend bool operator==(const MarketState&, const MarketState&) = default;
};

/// Realized per-step pnl, including any warm-up seeds, and the risk-free rate.
struct PnlLedger {
  std::vector<double> history;
  double rf = 0.0;
};

struct StepOutcome {
  MarketState next_state;
  double reward = 0.0;
  double pnl = 0.0;
  bool done = false;
};

/// Below this sample standard deviation the Sharpe ratio is reported as 0.
inline constexpr double kSharpeStdEpsilon = 1e-12;

/// Sharpe ratio of the first `upto` ledger entries: (mean - rf) / sample std.
/// Defined as 0 with fewer than two samples or a (numerically) zero spread.
inline double sharpe(const PnlLedger& ledger, std::size_t upto) {
  if (upto > ledger.history.size())
    throw BoundsError("sharpe: upto " + std::to_string(upto) + " exceeds ledger length " +
                      std::to_string(ledger.history.size()));
  if (upto < 2) return 0.0;
  const auto first = ledger.history.begin();
  const double n = static_cast<double>(upto);
  const double mean = std::accumulate(first, first + upto, 0.0) / n;
  double ss = 0.0;
  for (auto it = first; it != first + upto; ++it) ss += (*it - mean) * (*it - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (!(sd >= kSharpeStdEpsilon)) return 0.0;
  return (mean - ledger.rf) / sd;
}

inline double equity(const MarketState& state) noexcept {
  return state.account.cash + state.account.holdings * state.price;
}

/// Sell needs shares, Buy needs cash, Hold is always available.
inline ActionMask legal_actions(const MarketState& state) noexcept {
  ActionMask mask{};
  mask[action_index(Action::Sell)] = state.account.holdings > 0.0;
  mask[action_index(Action::Hold)] = true;
  mask[action_index(Action::Buy)] = state.account.cash > 0.0;
  return mask;
}

inline bool is_legal(const ActionMask& mask, Action a) noexcept { return mask[action_index(a)]; }

/// Rebooks the account for `action` executed at `price` (all-in / all-out, no fees).
inline AccountState rebook(const AccountState& acct, Action action, double price) noexcept {
  switch (action) {
    case Action::Sell: return {acct.cash + acct.holdings * price, 0.0};
    case Action::Hold: return acct;
    case Action::Buy: return {0.0, acct.holdings + acct.cash / price};
  }
  return acct;
}

struct EnvOptions {
  double initial_cash = 1000.0;
  bool seed_warmup = true;  // seed the pnl ledger with warm-up buy-and-hold pnl
};

/// Single-asset trading MDP over the test range of a split series.
///
/// The functional core (reset_state/step) is const and deterministic; the
/// stateful convenience layer (reset()/advance()) keeps one episode's state
/// and ledger for rollout loops. Instances share nothing mutable.
class TradingEnv {
 public:
  TradingEnv(std::shared_ptr<const MarketSeries> series, EnvOptions options = {})
      : series_(std::move(series)), options_(options) {
    if (!series_) throw ConfigError("trading env: null series");
  }

  const MarketSeries& series() const noexcept { return *series_; }
  const EnvOptions& options() const noexcept { return options_; }

  /// Initial state at the first test bar with an all-cash account.
  MarketState reset_state() const {
    check_ready();
    const std::size_t t0 = series_->test_range->begin;
    const Bar& bar = series_->bars[t0];
    return MarketState{t0, bar.price, bar.sentiment, AccountState{options_.initial_cash, 0.0}};
  }

  /// Fresh ledger: warm-up buy-and-hold pnl (when enabled) and the series' rf.
  PnlLedger initial_ledger() const {
    check_ready();
    PnlLedger ledger;
    ledger.rf = series_->risk_free_rate;
    if (options_.seed_warmup) {
      const auto warm = series_->warmup();
      const double shares = options_.initial_cash / warm.front().price;
      for (std::size_t k = 1; k < warm.size(); ++k)
        ledger.history.push_back(shares * (warm[k].price - warm[k - 1].price));
    }
    return ledger;
  }

  std::size_t last_index() const { return series_->test_range->end - 1; }

  /// One transition: execute at the next bar's price, append pnl, reward = ΔSharpe.
  StepOutcome step(const MarketState& state, Action action, PnlLedger& ledger) const {
    check_ready();
    if (!is_legal(legal_actions(state), action))
      throw MaskedActionError(std::string("illegal action ") + action_name(action) + " at t=" +
                              std::to_string(state.t));
    if (state.t + 1 > last_index())
      throw HorizonError("no bar after t=" + std::to_string(state.t));

    const Bar& next = series_->bars[state.t + 1];
    StepOutcome out;
    out.next_state = MarketState{state.t + 1, next.price, next.sentiment, rebook(state.account, action, next.price)};
    const AccountState& before = state.account;
    const AccountState& after = out.next_state.account;
    out.pnl = (after.cash - before.cash) + (after.holdings * next.price - before.holdings * state.price);

    const double sr_prev = sharpe(ledger, ledger.history.size());
    ledger.history.push_back(out.pnl);
    out.reward = sharpe(ledger, ledger.history.size()) - sr_prev;
    out.done = out.next_state.t == last_index();
    return out;
  }

  // Stateful layer --------------------------------------------------------

  const MarketState& reset() {
    state_ = reset_state();
    ledger_ = initial_ledger();
    return state_;
  }

  StepOutcome advance(Action action) {
    StepOutcome out = step(state_, action, ledger_);
    state_ = out.next_state;
    return out;
  }

  const MarketState& state() const noexcept { return state_; }
  const PnlLedger& ledger() const noexcept { return ledger_; }

 private:
  void check_ready() const {
    if (!series_->is_split()) throw ConfigError("trading env: series has not been split");
    if (!(options_.initial_cash > 0.0)) throw ConfigError("trading env: initial cash must be positive");
  }

  std::shared_ptr<const MarketSeries> series_;
  EnvOptions options_;
  MarketState state_;
  PnlLedger ledger_;
};

// Episode traces -------------------------------------------------------------

struct TraceRow {
  std::size_t t = 0;  // decision bar
  double price = 0.0;
  Action action = Action::Hold;
  double cash = 0.0;      // after the step
  double holdings = 0.0;  // after the step
  double equity = 0.0;    // after the step, marked at the next bar
  double pnl = 0.0;
  double reward = 0.0;
};

struct EpisodeTrace {
  double initial_equity = 0.0;
  std::vector<TraceRow> rows;

  std::vector<double> pnl() const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r.pnl);
    return out;
  }
  /// Account value before each step (the CR denominators).
  std::vector<double> balances() const {
    std::vector<double> out;
    out.reserve(rows.size());
    double prev = initial_equity;
    for (const auto& r : rows) {
      out.push_back(prev);
      prev = r.equity;
    }
    return out;
  }
  std::vector<double> equity_curve() const {
    std::vector<double> out{initial_equity};
    for (const auto& r : rows) out.push_back(r.equity);
    return out;
  }
};

/// Runs one full episode over the test range; `choose(state, mask)` returns an Action.
template <typename Chooser>
EpisodeTrace run_episode(TradingEnv& env, Chooser&& choose) {
  EpisodeTrace trace;
  const MarketState* state = &env.reset();
  trace.initial_equity = equity(*state);
  while (state->t < env.last_index()) {
    const MarketState current = *state;
    const Action a = choose(current, legal_actions(current));
    const StepOutcome out = env.advance(a);
    trace.rows.push_back(TraceRow{current.t, current.price, a, out.next_state.account.cash,
                                  out.next_state.account.holdings, equity(out.next_state), out.pnl, out.reward});
    state = &env.state();
  }
  return trace;
}

inline void write_trace_csv(std::ostream& out, const EpisodeTrace& trace) {
  out << "t,price,action,cash,holdings,pnl,reward\n";
  char buf[256];
  for (const auto& r : trace.rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%d,%.17g,%.17g,%.17g,%.17g\n", r.t, r.price, action_code(r.action),
                  r.cash, r.holdings, r.pnl, r.reward);
    out << buf;
  }
}

}  // namespace flagtrader

#endif  // FLAGTRADER_TRADING_ENV_HPP
