#ifndef FLAGTRADER_PPO_HPP
#define FLAGTRADER_PPO_HPP

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flagtrader/errors.hpp"
#include "flagtrader/market_data.hpp"
#include "flagtrader/policy_model.hpp"
#include "flagtrader/text_state.hpp"
#include "flagtrader/trading_env.hpp"

namespace flagtrader {

enum class OptimizerKind { Sgd, Adam };

struct PpoConfig {
  double gamma = 0.95;
  double gae_lambda = 0.98;
  double clip_coef = 0.2;
  double ent_coef = 0.05;
  double vf_coef = 0.5;
  double kl_coef = 0.05;
  double lr_heads = 5e-4;     // η, policy and value heads
  double lr_backbone = 5e-4;  // β, trainable layers and adapters
  std::size_t num_steps = 40;
  std::size_t num_envs = 1;
  std::size_t update_epochs = 1;
  std::size_t minibatch_size = 32;
  double max_grad_norm = 0.5;
  bool anneal_lr = true;
  bool norm_adv = true;
  bool clip_vloss = true;
  std::size_t total_timesteps = 13860;
  std::optional<double> target_kl;
  std::size_t gradient_accumulation_steps = 8;
  std::size_t max_episode_steps = 65;

  OptimizerKind optimizer = OptimizerKind::Sgd;
  double momentum = 0.0;  // SGD only
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::size_t batch_size() const noexcept { return num_steps * num_envs; }
  std::size_t num_iterations() const noexcept { return batch_size() == 0 ? 0 : total_timesteps / batch_size(); }

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("ppo: gamma must lie in (0, 1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("ppo: gae_lambda must lie in [0, 1]");
    if (!(clip_coef > 0.0)) throw ConfigError("ppo: clip_coef must be positive");
    if (!(lr_heads > 0.0 && lr_backbone > 0.0)) throw ConfigError("ppo: learning rates must be positive");
    if (!(vf_coef > 0.0)) throw ConfigError("ppo: vf_coef must be positive");
    if (ent_coef < 0.0 || kl_coef < 0.0) throw ConfigError("ppo: ent_coef and kl_coef must be non-negative");
    if (!(max_grad_norm > 0.0)) throw ConfigError("ppo: max_grad_norm must be positive");
    if (num_steps == 0 || num_envs == 0 || update_epochs == 0 || minibatch_size == 0 ||
        gradient_accumulation_steps == 0 || max_episode_steps == 0)
      throw ConfigError("ppo: step, env, epoch, batch and episode counts must be positive");
    if (target_kl && !(*target_kl > 0.0)) throw ConfigError("ppo: target_kl must be positive when set");
    if (minibatch_size > batch_size()) throw ConfigError("ppo: minibatch_size exceeds num_steps * num_envs");
    if (total_timesteps < batch_size()) throw ConfigError("ppo: total_timesteps is shorter than one rollout");
  }
};

// Rollout storage -------------------------------------------------------------

template <typename T>
struct Transition {
  TokenSeq state_tokens;
  Action action = Action::Hold;
  T reward = 0;
  TokenSeq next_state_tokens;
  T log_prob_old = 0;
  T value_old = 0;
  bool done = false;
  ActionMask legal_mask = kAllLegal;
};

/// On-policy storage for one iteration, step-major: index = step·num_envs + env.
template <typename T>
struct RolloutBuffer {
  std::vector<Transition<T>> transitions;
  std::size_t num_envs = 1;
  std::size_t num_steps = 0;

  std::size_t capacity() const noexcept { return num_envs * num_steps; }
  std::size_t size() const noexcept { return transitions.size(); }
  bool full() const noexcept { return size() == capacity(); }
  void clear() noexcept { transitions.clear(); }
  const Transition<T>& at(std::size_t step, std::size_t env) const { return transitions.at(step * num_envs + env); }
};

template <typename T>
struct AdvantageBatch {
  std::vector<T> advantages;
  std::vector<T> returns;
};

/// One environment stream. Episodes start at the first test bar and end at
/// the last test bar or after max_episode_steps steps.
class EnvStream {
 public:
  EnvStream(std::shared_ptr<const MarketSeries> series, EnvOptions options) : env_(std::move(series), options) {}

  TradingEnv& env() noexcept { return env_; }
  bool needs_reset() const noexcept { return needs_reset_; }
  std::size_t episode_steps() const noexcept { return episode_steps_; }

  const MarketState& ensure_started() {
    if (needs_reset_) {
      env_.reset();
      needs_reset_ = false;
      episode_steps_ = 0;
    }
    return env_.state();
  }

  StepOutcome step(Action a, std::size_t max_episode_steps) {
    if (needs_reset_) throw UsageError("env stream stepped without reset");
    StepOutcome out = env_.advance(a);
    ++episode_steps_;
    if (episode_steps_ >= max_episode_steps) out.done = true;
    needs_reset_ = out.done;
    return out;
  }

 private:
  TradingEnv env_;
  bool needs_reset_ = true;
  std::size_t episode_steps_ = 0;
};

/// Prompt rendering and tokenization for the model's sequence budget.
struct StateEncoder {
  PromptTemplate prompt = PromptTemplate::default_template();
  std::size_t max_seq_len = 96;

  TokenSeq operator()(const MarketState& s) const { return encode_state(s, prompt, max_seq_len); }
};

/// num_steps transitions per stream: render → tokenize → forward → sample → step.
/// Streams that finish an episode are reset on their next step.
template <typename T>
RolloutBuffer<T> collect_rollout(std::vector<EnvStream>& streams, const ParameterStore<T>& params,
                                 const StateEncoder& encode, const PpoConfig& cfg, SplitMix64& rng) {
  RolloutBuffer<T> buffer;
  buffer.num_envs = streams.size();
  buffer.num_steps = cfg.num_steps;
  buffer.transitions.reserve(buffer.capacity());
  for (std::size_t step = 0; step < cfg.num_steps; ++step) {
    for (auto& stream : streams) {
      const MarketState state = stream.ensure_started();
      if (state.t >= stream.env().last_index())
        throw UsageError("collect_rollout: stream at the end of data without a reset");
      Transition<T> tr;
      tr.state_tokens = encode(state);
      tr.legal_mask = legal_actions(state);
      const auto out = forward(params, tr.state_tokens, tr.legal_mask);
      const auto choice = sample_action(out, rng, SelectionMode::Sample);
      const StepOutcome outcome = stream.step(choice.action, cfg.max_episode_steps);
      tr.action = choice.action;
      tr.log_prob_old = choice.log_prob;
      tr.value_old = out.value;
      tr.reward = static_cast<T>(outcome.reward);
      tr.done = outcome.done;
      tr.next_state_tokens = encode(outcome.next_state);
      buffer.transitions.push_back(std::move(tr));
    }
  }
  return buffer;
}

/// Backward GAE recursion for one stream:
///   δ_t = r_t + γ·V(s_{t+1})·(1 − done_t) − V(s_t)
///   A_t = δ_t + γλ·(1 − done_t)·A_{t+1}
/// V(s_{t+1}) is values[t+1], or `bootstrap` for the last step.
template <typename T>
std::vector<T> gae_advantages(const std::vector<T>& rewards, const std::vector<T>& values,
                              const std::vector<bool>& dones, T bootstrap, T gamma, T lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw UsageError("gae: input lengths differ");
  std::vector<T> adv(n);
  T next_adv = 0;
  for (std::size_t i = n; i-- > 0;) {
    const T next_value = i + 1 < n ? values[i + 1] : bootstrap;
    const T live = dones[i] ? T(0) : T(1);
    const T delta = rewards[i] + gamma * next_value * live - values[i];
    next_adv = delta + gamma * lambda * live * next_adv;
    adv[i] = next_adv;
  }
  return adv;
}

/// Advantages and return targets (A_t + V_old) for every transition. A stream
/// cut off mid-episode bootstraps from V of its final next state.
template <typename T>
AdvantageBatch<T> compute_gae(const RolloutBuffer<T>& buffer, const ParameterStore<T>& params, const PpoConfig& cfg) {
  if (!buffer.full() || buffer.num_steps == 0) throw UsageError("compute_gae: buffer is not full");
  AdvantageBatch<T> batch;
  batch.advantages.resize(buffer.size());
  batch.returns.resize(buffer.size());
  const std::size_t n = buffer.num_steps;
  for (std::size_t e = 0; e < buffer.num_envs; ++e) {
    std::vector<T> r(n), v(n);
    std::vector<bool> d(n);
    for (std::size_t s = 0; s < n; ++s) {
      const auto& tr = buffer.at(s, e);
      r[s] = tr.reward;
      v[s] = tr.value_old;
      d[s] = tr.done;
    }
    const auto& last = buffer.at(n - 1, e);
    T bootstrap = 0;
    if (!last.done) {
      if (last.next_state_tokens.length() == 0) throw UsageError("compute_gae: missing bootstrap state");
      bootstrap = forward(params, last.next_state_tokens, kAllLegal).value;
    }
    const auto adv =
        gae_advantages<T>(r, v, d, bootstrap, static_cast<T>(cfg.gamma), static_cast<T>(cfg.gae_lambda));
    for (std::size_t s = 0; s < n; ++s) {
      batch.advantages[s * buffer.num_envs + e] = adv[s];
      batch.returns[s * buffer.num_envs + e] = adv[s] + v[s];
    }
  }
  return batch;
}

/// Whitens to mean 0, std 1 (population std, guarded by 1e-8). Fewer than two
/// values are only centered.
template <typename T>
void whiten(std::span<T> xs, T eps = T(1e-8)) {
  if (xs.empty()) return;
  const T n = static_cast<T>(xs.size());
  const T mean = std::accumulate(xs.begin(), xs.end(), T(0)) / n;
  for (auto& x : xs) x -= mean;
  if (xs.size() < 2) return;
  T ss = 0;
  for (T x : xs) ss += x * x;
  const T sd = std::sqrt(ss / n);
  for (auto& x : xs) x /= (sd + eps);
}

template <typename T>
struct Minibatch {
  std::vector<std::size_t> indices;
  std::vector<T> advantages;  // whitened when norm_adv
  std::vector<T> returns;
};

template <typename T>
Minibatch<T> make_minibatch(const AdvantageBatch<T>& adv, std::span<const std::size_t> indices, const PpoConfig& cfg) {
  Minibatch<T> mb;
  mb.indices.assign(indices.begin(), indices.end());
  for (auto i : indices) {
    mb.advantages.push_back(adv.advantages.at(i));
    mb.returns.push_back(adv.returns.at(i));
  }
  if (cfg.norm_adv) whiten<T>(mb.advantages);
  return mb;
}

template <typename T>
struct LossStats {
  T policy_objective = 0;  // L_P, clipped surrogate (maximized)
  T value_loss = 0;        // L_V
  T entropy = 0;
  T kl = 0;         // KL(π ‖ π_ref), closed form over the action set
  T total = 0;      // −L_P + c1·L_V − c2·H + kl_coef·KL
  T approx_kl = 0;  // old → new, for target_kl
  T clip_fraction = 0;
};

/// Per-sample pieces of the PPO objective and their derivatives with respect
/// to the sample's logits and value. Kept free of the model so it can be
/// checked in isolation.
template <typename T>
struct SampleLoss {
  T surrogate = 0;
  T value_loss = 0;
  T entropy = 0;
  T kl = 0;
  T ratio = 1;
  bool clipped = false;
  std::array<T, kNumActions> dtotal_dlogits{};  // of −surrogate + c1·lv − c2·H + kl_coef·KL
  T dtotal_dvalue = 0;
};

template <typename T>
SampleLoss<T> sample_loss(const PolicyOutput<T>& out, const PolicyOutput<T>& ref, Action action, T log_prob_old,
                          T value_old, T advantage, T target, const PpoConfig& cfg) {
  SampleLoss<T> s;
  const T eps = static_cast<T>(cfg.clip_coef);
  const T lp = out.log_prob(action);
  s.ratio = std::exp(lp - log_prob_old);
  const T surr1 = s.ratio * advantage;
  const T surr2 = std::clamp(s.ratio, T(1) - eps, T(1) + eps) * advantage;
  T dsurr_dlp = 0;
  if (surr1 <= surr2) {
    s.surrogate = surr1;
    dsurr_dlp = s.ratio * advantage;
  } else {
    s.surrogate = surr2;  // clamp active, flat in θ
  }
  s.clipped = std::abs(s.ratio - T(1)) > eps;

  const T v = out.value;
  const T unclipped = (v - target) * (v - target);
  T dlv_dv = T(2) * (v - target);
  s.value_loss = unclipped;
  if (cfg.clip_vloss) {
    const T vc = value_old + std::clamp(v - value_old, -eps, eps);
    const T clipped = (vc - target) * (vc - target);
    if (clipped > unclipped) {
      s.value_loss = clipped;
      dlv_dv = std::abs(v - value_old) < eps ? T(2) * (vc - target) : T(0);
    }
  }

  s.entropy = out.entropy();
  for (std::size_t i = 0; i < kNumActions; ++i)
    if (out.legal[i] && out.probs[i] > 0) s.kl += out.probs[i] * (out.log_probs[i] - ref.log_probs[i]);

  const auto dlp = dlog_prob_dlogits(out, action);
  for (std::size_t j = 0; j < kNumActions; ++j) {
    if (!out.legal[j]) continue;
    const T p = out.probs[j];
    const T lpj = p > 0 ? out.log_probs[j] : T(0);
    const T dH = -p * (lpj + s.entropy);
    const T dKL = p > 0 ? p * (out.log_probs[j] - ref.log_probs[j] - s.kl) : T(0);
    s.dtotal_dlogits[j] = -dsurr_dlp * dlp[j] - static_cast<T>(cfg.ent_coef) * dH + static_cast<T>(cfg.kl_coef) * dKL;
  }
  s.dtotal_dvalue = static_cast<T>(cfg.vf_coef) * dlv_dv;
  return s;
}

/// Losses over a minibatch with fresh forward passes. When `grads` is given,
/// ∇L_total (minibatch mean) is added into it.
template <typename T>
LossStats<T> ppo_losses(const Minibatch<T>& mb, const RolloutBuffer<T>& buffer, const ParameterStore<T>& params,
                        const ParameterStore<T>& ref_params, const PpoConfig& cfg, GradientStore<T>* grads = nullptr) {
  LossStats<T> st;
  const std::size_t n = mb.indices.size();
  if (n == 0) return st;
  const T inv_n = T(1) / static_cast<T>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& tr = buffer.transitions.at(mb.indices[k]);
    if (!std::isfinite(tr.log_prob_old)) throw UsageError("ppo_losses: missing behaviour log-probability");
    Recording<T> rec;
    const auto out = grads ? forward(params, tr.state_tokens, tr.legal_mask, rec, *grads)
                           : forward(params, tr.state_tokens, tr.legal_mask);
    const auto ref = forward(ref_params, tr.state_tokens, tr.legal_mask);
    const auto s = sample_loss(out, ref, tr.action, tr.log_prob_old, tr.value_old, mb.advantages[k], mb.returns[k], cfg);
    st.policy_objective += s.surrogate * inv_n;
    st.value_loss += s.value_loss * inv_n;
    st.entropy += s.entropy * inv_n;
    st.kl += s.kl * inv_n;
    st.approx_kl += ((s.ratio - T(1)) - std::log(s.ratio)) * inv_n;
    st.clip_fraction += (s.clipped ? T(1) : T(0)) * inv_n;
    if (grads) {
      auto dl = s.dtotal_dlogits;
      for (auto& x : dl) x *= inv_n;
      backward(rec, dl, s.dtotal_dvalue * inv_n);
    }
  }
  st.total = -st.policy_objective + static_cast<T>(cfg.vf_coef) * st.value_loss -
             static_cast<T>(cfg.ent_coef) * st.entropy + static_cast<T>(cfg.kl_coef) * st.kl;
  return st;
}

// Parameter updates -----------------------------------------------------------

/// Linear decay from 1 at step 0 to 0 at total_timesteps.
inline double learning_rate_scale(const PpoConfig& cfg, std::uint64_t step) {
  if (!cfg.anneal_lr || cfg.total_timesteps == 0) return 1.0;
  return std::max(0.0, 1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_timesteps));
}

template <typename T>
struct OptimizerState {
  ParameterSet<T> m;  // momentum / first moment
  ParameterSet<T> v;  // second moment (Adam)
  std::uint64_t t = 0;
  bool initialized = false;
};

struct UpdateStats {
  double grad_norm = 0.0;  // before clipping
  double clip_scale = 1.0;
  double lr_heads = 0.0;
  double lr_backbone = 0.0;
};

/// Grouped step on ∇L_total:
///  - policy head (η) descends its part of L_total,
///  - value head (η) descends L_V (the total-loss gradient divided by c1),
///  - trainable layers and adapters (β) descend L_total,
///  - frozen parameters are never touched.
/// The global gradient norm is clipped to max_grad_norm before the step.
template <typename T>
UpdateStats update(ParameterStore<T>& params, GradientStore<T>& grads, const PpoConfig& cfg, std::uint64_t step,
                   OptimizerState<T>& opt) {
  UpdateStats us;
  const double scale = learning_rate_scale(cfg, step);
  us.lr_heads = cfg.lr_heads * scale;
  us.lr_backbone = cfg.lr_backbone * scale;

  grads.grads.value_w /= static_cast<T>(cfg.vf_coef);
  grads.grads.value_b /= static_cast<T>(cfg.vf_coef);

  double sq = 0.0;
  grads.grads.for_each([&](const std::string& name, ParamGroup g, const Matrix<T>& m) {
    if (g == ParamGroup::Frozen) return;
    if (!m.allFinite())
      throw NumericalError(std::string("non-finite gradient in group ") + group_name(g) + " (" + name + ")");
    sq += static_cast<double>(m.squaredNorm());
  });
  us.grad_norm = std::sqrt(sq);
  if (us.grad_norm > cfg.max_grad_norm) us.clip_scale = cfg.max_grad_norm / us.grad_norm;

  if (!opt.initialized) {
    opt.m = params.weights.zeros_like();
    opt.v = params.weights.zeros_like();
    opt.initialized = true;
  }
  ++opt.t;

  std::vector<Matrix<T>*> ms, vs;
  opt.m.for_each([&](const std::string&, ParamGroup, Matrix<T>& x) { ms.push_back(&x); });
  opt.v.for_each([&](const std::string&, ParamGroup, Matrix<T>& x) { vs.push_back(&x); });
  std::vector<const Matrix<T>*> gs;
  grads.grads.for_each([&](const std::string&, ParamGroup, const Matrix<T>& x) { gs.push_back(&x); });

  std::size_t k = 0;
  params.weights.for_each([&](const std::string&, ParamGroup group, Matrix<T>& w) {
    const std::size_t i = k++;
    if (group == ParamGroup::Frozen) return;
    const bool head = group == ParamGroup::PolicyHead || group == ParamGroup::ValueHead;
    const T lr = static_cast<T>(head ? us.lr_heads : us.lr_backbone);
    const Matrix<T> g = *gs[i] * static_cast<T>(us.clip_scale);
    if (cfg.optimizer == OptimizerKind::Sgd) {
      if (cfg.momentum > 0.0) {
        *ms[i] = *ms[i] * static_cast<T>(cfg.momentum) + g;
        w -= lr * *ms[i];
      } else {
        w -= lr * g;
      }
    } else {
      const T b1 = static_cast<T>(cfg.adam_beta1), b2 = static_cast<T>(cfg.adam_beta2);
      *ms[i] = b1 * *ms[i] + (T(1) - b1) * g;
      *vs[i] = b2 * *vs[i] + (T(1) - b2) * g.cwiseProduct(g);
      const T c1 = T(1) - std::pow(b1, static_cast<T>(opt.t));
      const T c2 = T(1) - std::pow(b2, static_cast<T>(opt.t));
      w.array() -= lr * (ms[i]->array() / c1) / ((vs[i]->array() / c2).sqrt() + static_cast<T>(cfg.adam_eps));
    }
  });
  return us;
}

// Training loop -----------------------------------------------------------------

struct IterationRecord {
  std::size_t iteration = 0;
  std::uint64_t timestep = 0;
  double mean_reward = 0.0;
  double policy_loss = 0.0;  // L_P
  double value_loss = 0.0;   // L_V
  double entropy = 0.0;
  double kl = 0.0;
  double lr = 0.0;  // backbone learning rate in effect
  double wall_ms = 0.0;
};

/// Deterministic fields only; wall-clock time is kept out so that logs of
/// identical runs compare byte-for-byte.
inline nlohmann::json to_json(const IterationRecord& r) {
  return nlohmann::json{{"iteration", r.iteration}, {"timestep", r.timestep}, {"mean_reward", r.mean_reward},
                        {"L_P", r.policy_loss},     {"L_V", r.value_loss},   {"entropy", r.entropy},
                        {"kl", r.kl},               {"lr", r.lr}};
}

struct TrainingLog {
  std::vector<IterationRecord> records;
};

template <typename T>
struct TrainResult {
  ParameterStore<T> params;
  TrainingLog log;
};

struct TrainOptions {
  EnvOptions env;
  PromptTemplate prompt = PromptTemplate::default_template();
  std::function<void(const IterationRecord&)> on_iteration;
  /// Called with (iteration, params) every checkpoint_interval iterations.
  std::size_t checkpoint_interval = 0;
  std::function<void(std::size_t, const ParameterStore<double>&)> on_checkpoint;
};

template <typename T = double>
TrainResult<T> train(std::shared_ptr<const MarketSeries> series, const ModelConfig& model_cfg, const PpoConfig& cfg,
                     std::uint64_t seed, const TrainOptions& options = {}) {
  model_cfg.validate();
  cfg.validate();
  if (!series || !series->is_split()) throw ConfigError("train: series must be split into warm-up and test ranges");
  if (series->test_range->size() < 2) throw ConfigError("train: test range needs at least two bars");

  TrainResult<T> result;
  result.params = init_params<T>(model_cfg, seed);
  auto& params = result.params;
  const ParameterStore<T> reference = params;  // KL anchor: the pre-training policy
  const StateEncoder encode{options.prompt, model_cfg.max_seq_len};
  SplitMix64 rng(seed ^ 0xA5A5A5A5DEADBEEFULL);

  std::vector<EnvStream> streams;
  for (std::size_t e = 0; e < cfg.num_envs; ++e) streams.emplace_back(series, options.env);

  OptimizerState<T> opt;
  auto grads = GradientStore<T>::zeros_for(params);
  std::vector<std::size_t> order(cfg.batch_size());

  for (std::size_t iter = 1; iter <= cfg.num_iterations(); ++iter) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t step0 = static_cast<std::uint64_t>(iter - 1) * cfg.batch_size();

    RolloutBuffer<T> buffer = collect_rollout(streams, params, encode, cfg, rng);
    const AdvantageBatch<T> adv = compute_gae(buffer, params, cfg);

    IterationRecord rec;
    rec.iteration = iter;
    for (const auto& tr : buffer.transitions) rec.mean_reward += static_cast<double>(tr.reward);
    rec.mean_reward /= static_cast<double>(buffer.size());

    std::size_t n_updates = 0;
    for (std::size_t epoch = 0; epoch < cfg.update_epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      double epoch_approx_kl = 0.0;
      std::size_t epoch_mbs = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg.minibatch_size) {
        const std::size_t len = std::min(cfg.minibatch_size, order.size() - start);
        const auto mb = make_minibatch(adv, std::span<const std::size_t>(order).subspan(start, len), cfg);
        // Gradient accumulation: equal micro-batch slices, gradients averaged.
        const std::size_t micro = std::min(cfg.gradient_accumulation_steps, len);
        grads.set_zero();
        LossStats<T> mb_stats;
        for (std::size_t m = 0; m < micro; ++m) {
          const std::size_t b = m * len / micro, e = (m + 1) * len / micro;
          Minibatch<T> part;
          part.indices.assign(mb.indices.begin() + b, mb.indices.begin() + e);
          part.advantages.assign(mb.advantages.begin() + b, mb.advantages.begin() + e);
          part.returns.assign(mb.returns.begin() + b, mb.returns.begin() + e);
          const auto st = ppo_losses(part, buffer, params, reference, cfg, &grads);
          const T w = static_cast<T>(e - b) / static_cast<T>(len);
          mb_stats.policy_objective += st.policy_objective * w;
          mb_stats.value_loss += st.value_loss * w;
          mb_stats.entropy += st.entropy * w;
          mb_stats.kl += st.kl * w;
          mb_stats.approx_kl += st.approx_kl * w;
        }
        grads.grads.for_each([&](const std::string&, ParamGroup, Matrix<T>& g) { g /= static_cast<T>(micro); });
        const auto us = update(params, grads, cfg, step0, opt);
        rec.policy_loss += static_cast<double>(mb_stats.policy_objective);
        rec.value_loss += static_cast<double>(mb_stats.value_loss);
        rec.entropy += static_cast<double>(mb_stats.entropy);
        rec.kl += static_cast<double>(mb_stats.kl);
        rec.lr = us.lr_backbone;
        epoch_approx_kl += static_cast<double>(mb_stats.approx_kl);
        ++epoch_mbs;
        ++n_updates;
      }
      if (cfg.target_kl && epoch_approx_kl / static_cast<double>(epoch_mbs) > *cfg.target_kl) break;
    }
    if (n_updates > 0) {
      const double k = static_cast<double>(n_updates);
      rec.policy_loss /= k;
      rec.value_loss /= k;
      rec.entropy /= k;
      rec.kl /= k;
    }
    buffer.clear();
    params.step = step0 + cfg.batch_size();
    rec.timestep = params.step;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.records.push_back(rec);
    if (options.on_iteration) options.on_iteration(rec);
    if constexpr (std::is_same_v<T, double>) {
      if (options.on_checkpoint && options.checkpoint_interval > 0 && iter % options.checkpoint_interval == 0)
        options.on_checkpoint(iter, params);
    }
  }
  return result;
}

// Evaluation ------------------------------------------------------------------------

/// Rolls the policy over the full test range (greedy by default).
template <typename T>
EpisodeTrace backtest_policy(const ParameterStore<T>& params, std::shared_ptr<const MarketSeries> series,
                             const EnvOptions& env_options, const PromptTemplate& prompt,
                             SelectionMode mode = SelectionMode::Greedy, std::uint64_t seed = 0) {
  TradingEnv env(std::move(series), env_options);
  const StateEncoder encode{prompt, params.config.max_seq_len};
  SplitMix64 rng(seed);
  return run_episode(env, [&](const MarketState& s, const ActionMask& legal) {
    const auto out = forward(params, encode(s), legal);
    return sample_action(out, rng, mode).action;
  });
}

}  // namespace flagtrader

#endif  // FLAGTRADER_PPO_HPP
