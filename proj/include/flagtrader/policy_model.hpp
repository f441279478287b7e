#ifndef FLAGTRADER_POLICY_MODEL_HPP
#define FLAGTRADER_POLICY_MODEL_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flagtrader/autodiff.hpp"
#include "flagtrader/errors.hpp"
#include "flagtrader/text_state.hpp"
#include "flagtrader/trading_env.hpp"

namespace flagtrader {

/// Base matrices a LoRA adapter can target.
enum class LoraTarget : std::uint8_t { Query, Key, Value, Output, FF1, FF2 };

inline constexpr std::array<LoraTarget, 6> kAllLoraTargets{LoraTarget::Query,  LoraTarget::Key, LoraTarget::Value,
                                                           LoraTarget::Output, LoraTarget::FF1, LoraTarget::FF2};

inline const char* lora_target_name(LoraTarget t) {
  switch (t) {
    case LoraTarget::Query: return "q";
    case LoraTarget::Key: return "k";
    case LoraTarget::Value: return "v";
    case LoraTarget::Output: return "o";
    case LoraTarget::FF1: return "ff1";
    case LoraTarget::FF2: return "ff2";
  }
  return "?";
}

inline LoraTarget parse_lora_target(const std::string& s) {
  for (auto t : kAllLoraTargets)
    if (s == lora_target_name(t)) return t;
  throw ConfigError("unknown LoRA target '" + s + "' (expected q,k,v,o,ff1,ff2)");
}

struct ModelConfig {
  std::size_t vocab_size = ByteVocabulary::kSize;
  std::size_t d_model = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 32;
  std::size_t max_seq_len = 96;
  std::size_t n_frozen = 1;     // bottom layers, never updated
  std::size_t n_trainable = 1;  // top layers, updated with the backbone rate
  std::size_t lora_rank = 2;
  bool lora_enabled = false;  // adapters on every layer when enabled
  std::vector<LoraTarget> lora_targets{LoraTarget::Query, LoraTarget::Value};
  bool post_norm = false;  // LayerNorm(x + sublayer(x)) instead of pre-norm blocks

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0 || n_layers == 0)
      throw ConfigError("model: dimensions must be positive");
    if (vocab_size < ByteVocabulary::kSize)
      throw ConfigError("model: vocab_size must cover the byte vocabulary (" +
                        std::to_string(ByteVocabulary::kSize) + ")");
    if (n_frozen + n_trainable != n_layers)
      throw ConfigError("model: n_frozen + n_trainable must equal n_layers");
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (lora_enabled && lora_rank == 0) throw ConfigError("model: lora_rank must be >= 1 when LoRA is enabled");
    if (lora_enabled && lora_targets.empty()) throw ConfigError("model: LoRA enabled without targets");
  }

  bool targets(LoraTarget t) const {
    return lora_enabled && std::find(lora_targets.begin(), lora_targets.end(), t) != lora_targets.end();
  }
};

enum class ParamGroup : std::uint8_t { Frozen, Trainable, Lora, PolicyHead, ValueHead };

inline constexpr std::array<ParamGroup, 5> kAllGroups{ParamGroup::Frozen, ParamGroup::Trainable, ParamGroup::Lora,
                                                      ParamGroup::PolicyHead, ParamGroup::ValueHead};

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Frozen: return "frozen";
    case ParamGroup::Trainable: return "trainable";
    case ParamGroup::Lora: return "lora";
    case ParamGroup::PolicyHead: return "policy_head";
    case ParamGroup::ValueHead: return "value_head";
  }
  return "?";
}

template <typename T>
struct LayerWeights {
  Matrix<T> w_q, w_k, w_v, w_o;  // d×d
  Matrix<T> w_ff1;               // d×d_ff
  Matrix<T> w_ff2;               // d_ff×d
  Matrix<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  Matrix<T>& base(LoraTarget t) {
    switch (t) {
      case LoraTarget::Query: return w_q;
      case LoraTarget::Key: return w_k;
      case LoraTarget::Value: return w_v;
      case LoraTarget::Output: return w_o;
      case LoraTarget::FF1: return w_ff1;
      case LoraTarget::FF2: return w_ff2;
    }
    return w_q;
  }
  const Matrix<T>& base(LoraTarget t) const { return const_cast<LayerWeights&>(*this).base(t); }
};

/// Low-rank delta for one base matrix: effective W = W + a·b.
template <typename T>
struct LoraPair {
  Matrix<T> a;  // d_in×r
  Matrix<T> b;  // r×d_out
  std::size_t layer = 0;
  LoraTarget target = LoraTarget::Query;
};

/// Every weight of the actor-critic model. Also used, zero-filled, as gradient storage.
template <typename T>
struct ParameterSet {
  Matrix<T> embedding;  // vocab×d
  Matrix<T> positions;  // max_seq_len×d, learned absolute positions
  std::vector<LayerWeights<T>> frozen_layers;
  std::vector<LayerWeights<T>> trainable_layers;
  Matrix<T> final_gain, final_bias;  // final LayerNorm (pre-norm only)
  std::vector<LoraPair<T>> lora;
  Matrix<T> policy_w, policy_b;  // d×|A|, 1×|A|
  Matrix<T> value_w, value_b;    // d×1, 1×1

  LayerWeights<T>& layer(std::size_t l) {
    return l < frozen_layers.size() ? frozen_layers[l] : trainable_layers[l - frozen_layers.size()];
  }
  const LayerWeights<T>& layer(std::size_t l) const { return const_cast<ParameterSet&>(*this).layer(l); }

  /// Visits every matrix with a stable name and its group, in a fixed order.
  /// `f(name, group, matrix)`; the matrix is const iff `self` is.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("embedding"), ParamGroup::Frozen, self.embedding);
    f(std::string("positions"), ParamGroup::Frozen, self.positions);
    const std::size_t n_frozen = self.frozen_layers.size();
    auto visit_layer = [&](auto& w, std::size_t l, ParamGroup g) {
      const auto p = "layer" + std::to_string(l) + ".";
      f(p + "w_q", g, w.w_q);
      f(p + "w_k", g, w.w_k);
      f(p + "w_v", g, w.w_v);
      f(p + "w_o", g, w.w_o);
      f(p + "w_ff1", g, w.w_ff1);
      f(p + "w_ff2", g, w.w_ff2);
      f(p + "ln1_gain", g, w.ln1_gain);
      f(p + "ln1_bias", g, w.ln1_bias);
      f(p + "ln2_gain", g, w.ln2_gain);
      f(p + "ln2_bias", g, w.ln2_bias);
    };
    for (std::size_t l = 0; l < n_frozen; ++l) visit_layer(self.frozen_layers[l], l, ParamGroup::Frozen);
    for (std::size_t l = 0; l < self.trainable_layers.size(); ++l)
      visit_layer(self.trainable_layers[l], n_frozen + l, ParamGroup::Trainable);
    // The final norm sits on top of the trainable stack; with no trainable
    // layers it belongs to the frozen backbone.
    const ParamGroup final_group = self.trainable_layers.empty() ? ParamGroup::Frozen : ParamGroup::Trainable;
    f(std::string("final_gain"), final_group, self.final_gain);
    f(std::string("final_bias"), final_group, self.final_bias);
    for (auto& pair : self.lora) {
      const auto p = "lora" + std::to_string(pair.layer) + "." + lora_target_name(pair.target) + ".";
      f(p + "a", ParamGroup::Lora, pair.a);
      f(p + "b", ParamGroup::Lora, pair.b);
    }
    f(std::string("policy_w"), ParamGroup::PolicyHead, self.policy_w);
    f(std::string("policy_b"), ParamGroup::PolicyHead, self.policy_b);
    f(std::string("value_w"), ParamGroup::ValueHead, self.value_w);
    f(std::string("value_b"), ParamGroup::ValueHead, self.value_b);
  }

  template <typename F>
  void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

  /// Same shapes, all zeros.
  ParameterSet zeros_like() const {
    ParameterSet z = *this;
    z.for_each([](const std::string&, ParamGroup, Matrix<T>& m) { m.setZero(); });
    return z;
  }

  void set_zero() {
    for_each([](const std::string&, ParamGroup, Matrix<T>& m) { m.setZero(); });
  }

  std::size_t count(std::optional<ParamGroup> group = std::nullopt) const {
    std::size_t n = 0;
    for_each([&](const std::string&, ParamGroup g, const Matrix<T>& m) {
      if (!group || *group == g) n += static_cast<std::size_t>(m.size());
    });
    return n;
  }
};

template <typename T>
struct ParameterStore {
  ModelConfig config;
  ParameterSet<T> weights;
  std::uint64_t step = 0;  // training timestep counter
};

template <typename T>
struct GradientStore {
  ParameterSet<T> grads;

  static GradientStore zeros_for(const ParameterStore<T>& store) { return GradientStore{store.weights.zeros_like()}; }
  void set_zero() { grads.set_zero(); }
};

// Deterministic randomness ----------------------------------------------------

/// splitmix64; fixed algorithm so seeds reproduce across standard libraries.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double normal() {
    // Box–Muller; 1 - u keeps the log argument in (0, 1]
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : (*this)() % n; }

 private:
  std::uint64_t state_;
};

template <typename T>
ParameterStore<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SplitMix64 rng(seed);
  const auto d = static_cast<Eigen::Index>(config.d_model);
  const auto ff = static_cast<Eigen::Index>(config.d_ff);
  auto gaussian = [&](Eigen::Index r, Eigen::Index c, double stddev) {
    Matrix<T> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
    return m;
  };
  auto ones = [](Eigen::Index c) { return Matrix<T>::Ones(1, c); };
  auto zeros = [](Eigen::Index r, Eigen::Index c) { return Matrix<T>::Zero(r, c); };
  auto make_layer = [&] {
    LayerWeights<T> w;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    w.w_q = gaussian(d, d, s);
    w.w_k = gaussian(d, d, s);
    w.w_v = gaussian(d, d, s);
    w.w_o = gaussian(d, d, s);
    w.w_ff1 = gaussian(d, ff, s);
    w.w_ff2 = gaussian(ff, d, 1.0 / std::sqrt(static_cast<double>(ff)));
    w.ln1_gain = ones(d);
    w.ln1_bias = zeros(1, d);
    w.ln2_gain = ones(d);
    w.ln2_bias = zeros(1, d);
    return w;
  };

  ParameterStore<T> store;
  store.config = config;
  auto& p = store.weights;
  p.embedding = gaussian(static_cast<Eigen::Index>(config.vocab_size), d, 1.0);
  p.positions = gaussian(static_cast<Eigen::Index>(config.max_seq_len), d, 0.5);
  for (std::size_t l = 0; l < config.n_frozen; ++l) p.frozen_layers.push_back(make_layer());
  for (std::size_t l = 0; l < config.n_trainable; ++l) p.trainable_layers.push_back(make_layer());
  p.final_gain = ones(d);
  p.final_bias = zeros(1, d);
  p.policy_w = gaussian(d, static_cast<Eigen::Index>(kNumActions), 0.01);
  p.policy_b = zeros(1, static_cast<Eigen::Index>(kNumActions));
  p.value_w = gaussian(d, 1, 0.01);
  p.value_b = zeros(1, 1);
  // Adapters draw from their own stream so the base weights do not depend on them.
  rng = SplitMix64(seed ^ 0x10A710A710A710A7ULL);
  if (config.lora_enabled) {
    const auto r = static_cast<Eigen::Index>(config.lora_rank);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      for (LoraTarget t : kAllLoraTargets) {
        if (!config.targets(t)) continue;
        const auto& base = p.layer(l).base(t);
        LoraPair<T> pair;
        pair.layer = l;
        pair.target = t;
        pair.a = gaussian(base.rows(), r, 1.0 / std::sqrt(static_cast<double>(base.rows())));
        pair.b = zeros(r, base.cols());  // zero delta at init
        p.lora.push_back(std::move(pair));
      }
    }
  }
  return store;
}

/// base + a·b for every pair targeting a matrix of this layer.
template <typename T>
LayerWeights<T> apply_lora(const LayerWeights<T>& base, std::span<const LoraPair<T>> pairs) {
  LayerWeights<T> eff = base;
  for (const auto& pair : pairs) {
    Matrix<T>& w = eff.base(pair.target);
    if (pair.a.rows() != w.rows() || pair.b.cols() != w.cols() || pair.a.cols() != pair.b.rows())
      throw ConfigError(std::string("apply_lora: dimension mismatch for target ") + lora_target_name(pair.target));
    w += pair.a * pair.b;
  }
  return eff;
}

// Policy output -------------------------------------------------------------

template <typename T>
struct PolicyOutput {
  std::array<T, kNumActions> logits{};
  std::array<T, kNumActions> probs{};      // masked softmax; exactly 0 for illegal actions
  std::array<T, kNumActions> log_probs{};  // -inf for illegal actions
  T value = 0;
  ActionMask legal{};

  T log_prob(Action a) const { return log_probs[action_index(a)]; }
  T prob(Action a) const { return probs[action_index(a)]; }

  /// Entropy over the legal support.
  T entropy() const {
    T h = 0;
    for (std::size_t i = 0; i < kNumActions; ++i)
      if (legal[i] && probs[i] > 0) h -= probs[i] * log_probs[i];
    return h;
  }
};

/// Masked softmax: softmax over legal logits, zero elsewhere.
template <typename T>
PolicyOutput<T> masked_policy(const std::array<T, kNumActions>& logits, const ActionMask& legal, T value = 0) {
  if (std::none_of(legal.begin(), legal.end(), [](bool b) { return b; }))
    throw UsageError("policy: empty legal action set");
  PolicyOutput<T> out;
  out.logits = logits;
  out.legal = legal;
  out.value = value;
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < kNumActions; ++i)
    if (legal[i]) m = std::max(m, logits[i]);
  T sum = 0;
  for (std::size_t i = 0; i < kNumActions; ++i)
    if (legal[i]) sum += std::exp(logits[i] - m);
  const T lse = m + std::log(sum);
  for (std::size_t i = 0; i < kNumActions; ++i) {
    if (legal[i]) {
      out.log_probs[i] = logits[i] - lse;
      out.probs[i] = std::exp(out.log_probs[i]);
    } else {
      out.log_probs[i] = -std::numeric_limits<T>::infinity();
      out.probs[i] = 0;
    }
  }
  return out;
}

enum class SelectionMode { Sample, Greedy };

template <typename T>
struct ActionChoice {
  Action action = Action::Hold;
  T log_prob = 0;
};

/// Sample from the masked distribution, or take the argmax with the lowest action code winning ties.
template <typename T>
ActionChoice<T> sample_action(const PolicyOutput<T>& out, SplitMix64& rng, SelectionMode mode) {
  std::size_t pick = kNumActions;
  if (mode == SelectionMode::Greedy) {
    for (std::size_t i = 0; i < kNumActions; ++i)
      if (out.legal[i] && (pick == kNumActions || out.probs[i] > out.probs[pick])) pick = i;
  } else {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < kNumActions; ++i) {
      if (!out.legal[i] || out.probs[i] <= 0) continue;
      pick = i;  // last positive-probability action absorbs rounding slack
      acc += static_cast<double>(out.probs[i]);
      if (u < acc) break;
    }
  }
  if (pick == kNumActions) throw UsageError("sample_action: no legal action");
  return {action_at(pick), out.log_probs[pick]};
}

// Forward / backward ----------------------------------------------------------

/// Recorded computation of one forward pass. Default-constructed instances
/// hold no graph, and backward() on them is a usage error.
template <typename T>
struct Recording {
  ad::Tape<T> tape{false};
  ad::Var logits;
  ad::Var log_probs;
  ad::Var value;
  ad::Var hidden;    // pooled (last-position) state
  ad::Var sequence;  // all positions, before pooling
  std::vector<bool> legal;
};

namespace detail {

template <typename T>
PolicyOutput<T> run_forward(const ParameterStore<T>& store, const TokenSeq& tokens, const ActionMask& legal,
                            ad::Tape<T>& tape, ParameterSet<T>* sink, Recording<T>* rec) {
  using ad::Var;
  const ModelConfig& cfg = store.config;
  const ParameterSet<T>& w = store.weights;
  if (tokens.length() == 0) throw UsageError("forward: empty token sequence");
  if (tokens.length() > cfg.max_seq_len)
    throw BoundsError("forward: sequence length " + std::to_string(tokens.length()) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  if (std::none_of(legal.begin(), legal.end(), [](bool b) { return b; }))
    throw UsageError("forward: empty legal action set");

  // Binds a leaf; gradients flow to `sink` only for differentiable groups.
  auto leaf = [&](const Matrix<T>& value, Matrix<T>* sink_slot, ParamGroup group) {
    const bool differentiable = group != ParamGroup::Frozen;
    return tape.parameter(value, differentiable && sink ? sink_slot : nullptr);
  };
  auto sink_of = [&](auto member) -> Matrix<T>* { return sink ? &((*sink).*member) : nullptr; };

  Var h = ad::embed(tape, leaf(w.embedding, nullptr, ParamGroup::Frozen),
                    leaf(w.positions, nullptr, ParamGroup::Frozen), std::span<const int>(tokens.ids));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const bool frozen = l < cfg.n_frozen;
    const ParamGroup group = frozen ? ParamGroup::Frozen : ParamGroup::Trainable;
    const LayerWeights<T>& lw = w.layer(l);
    LayerWeights<T>* lg = sink ? &sink->layer(l) : nullptr;
    auto weight = [&](LoraTarget t) {
      Var base = leaf(lw.base(t), lg ? &lg->base(t) : nullptr, group);
      for (std::size_t i = 0; i < w.lora.size(); ++i) {
        const auto& pair = w.lora[i];
        if (pair.layer != l || pair.target != t) continue;
        Var a = leaf(pair.a, sink ? &sink->lora[i].a : nullptr, ParamGroup::Lora);
        Var b = leaf(pair.b, sink ? &sink->lora[i].b : nullptr, ParamGroup::Lora);
        base = ad::add(tape, base, ad::matmul(tape, a, b));
      }
      return base;
    };
    auto norm_param = [&](const Matrix<T>& m, Matrix<T>* g) { return leaf(m, g, group); };

    auto attention = [&](Var x) {
      Var q = ad::matmul(tape, x, weight(LoraTarget::Query));
      Var k = ad::matmul(tape, x, weight(LoraTarget::Key));
      Var v = ad::matmul(tape, x, weight(LoraTarget::Value));
      Var att = ad::causal_attention(tape, q, k, v, cfg.n_heads);
      return ad::matmul(tape, att, weight(LoraTarget::Output));
    };
    auto ffn = [&](Var x) {
      return ad::matmul(tape, ad::silu(tape, ad::matmul(tape, x, weight(LoraTarget::FF1))), weight(LoraTarget::FF2));
    };
    Var g1 = norm_param(lw.ln1_gain, lg ? &lg->ln1_gain : nullptr);
    Var b1 = norm_param(lw.ln1_bias, lg ? &lg->ln1_bias : nullptr);
    Var g2 = norm_param(lw.ln2_gain, lg ? &lg->ln2_gain : nullptr);
    Var b2 = norm_param(lw.ln2_bias, lg ? &lg->ln2_bias : nullptr);

    if (cfg.post_norm) {
      h = ad::layer_norm(tape, ad::add(tape, h, attention(h)), g1, b1);
      h = ad::layer_norm(tape, ad::add(tape, h, ffn(h)), g2, b2);
    } else {
      h = ad::add(tape, h, attention(ad::layer_norm(tape, h, g1, b1)));
      h = ad::add(tape, h, ffn(ad::layer_norm(tape, h, g2, b2)));
    }
  }

  const ParamGroup top_group = cfg.n_trainable > 0 ? ParamGroup::Trainable : ParamGroup::Frozen;
  if (!cfg.post_norm) {
    h = ad::layer_norm(tape, h, leaf(w.final_gain, sink_of(&ParameterSet<T>::final_gain), top_group),
                       leaf(w.final_bias, sink_of(&ParameterSet<T>::final_bias), top_group));
  }
  Var z = ad::last_row(tape, h);
  Var logits = ad::add_row(tape,
                           ad::matmul(tape, z, leaf(w.policy_w, sink_of(&ParameterSet<T>::policy_w), ParamGroup::PolicyHead)),
                           leaf(w.policy_b, sink_of(&ParameterSet<T>::policy_b), ParamGroup::PolicyHead));
  Var value = ad::add_row(tape,
                          ad::matmul(tape, z, leaf(w.value_w, sink_of(&ParameterSet<T>::value_w), ParamGroup::ValueHead)),
                          leaf(w.value_b, sink_of(&ParameterSet<T>::value_b), ParamGroup::ValueHead));

  std::array<T, kNumActions> lv{};
  for (std::size_t i = 0; i < kNumActions; ++i) lv[i] = tape.value(logits)(0, static_cast<Eigen::Index>(i));
  PolicyOutput<T> out = masked_policy(lv, legal, tape.value(value)(0, 0));

  if (rec) {
    rec->legal.assign(legal.begin(), legal.end());
    rec->logits = logits;
    rec->value = value;
    rec->hidden = z;
    rec->sequence = h;
    rec->log_probs = ad::masked_log_softmax(tape, logits, rec->legal);
  }
  return out;
}

}  // namespace detail

/// Inference-only forward pass.
template <typename T>
PolicyOutput<T> forward(const ParameterStore<T>& store, const TokenSeq& tokens, const ActionMask& legal) {
  ad::Tape<T> tape(false);
  return detail::run_forward(store, tokens, legal, tape, static_cast<ParameterSet<T>*>(nullptr),
                             static_cast<Recording<T>*>(nullptr));
}

/// Forward pass that records the graph in `rec`. backward() on `rec` adds
/// parameter gradients into `sink`, which must stay alive until then. Frozen
/// parameters never receive gradient.
template <typename T>
PolicyOutput<T> forward(const ParameterStore<T>& store, const TokenSeq& tokens, const ActionMask& legal,
                        Recording<T>& rec, GradientStore<T>& sink) {
  rec = Recording<T>{};
  rec.tape = ad::Tape<T>(true);
  return detail::run_forward(store, tokens, legal, rec.tape, &sink.grads, &rec);
}

/// Backpropagates dL/dlogits and dL/dV through a recorded forward pass.
template <typename T>
void backward(Recording<T>& rec, const std::array<T, kNumActions>& dlogits, T dvalue) {
  if (!rec.tape.recording()) throw UsageError("backward: forward pass was not recorded");
  Matrix<T> gl(1, static_cast<Eigen::Index>(kNumActions));
  for (std::size_t i = 0; i < kNumActions; ++i) gl(0, static_cast<Eigen::Index>(i)) = dlogits[i];
  Matrix<T> gv(1, 1);
  gv(0, 0) = dvalue;
  const typename ad::Tape<T>::Seed seeds[] = {{rec.logits, std::move(gl)}, {rec.value, std::move(gv)}};
  rec.tape.backward(std::span<const typename ad::Tape<T>::Seed>(seeds));
}

/// Backpropagates d(log π(a|s)) through the recorded log-softmax node.
template <typename T>
void backward_log_prob(Recording<T>& rec, Action a) {
  if (!rec.tape.recording()) throw UsageError("backward: forward pass was not recorded");
  Matrix<T> g = Matrix<T>::Zero(1, static_cast<Eigen::Index>(kNumActions));
  g(0, static_cast<Eigen::Index>(action_index(a))) = 1;
  rec.tape.backward(rec.log_probs, std::move(g));
}

/// Convenience: fresh gradient store for one recorded pass.
template <typename T>
GradientStore<T> gradients(const ParameterStore<T>& store, const TokenSeq& tokens, const ActionMask& legal,
                           const std::array<T, kNumActions>& dlogits, T dvalue) {
  auto grads = GradientStore<T>::zeros_for(store);
  Recording<T> rec;
  forward(store, tokens, legal, rec, grads);
  backward(rec, dlogits, dvalue);
  return grads;
}

/// dlog π(a)/dlogits over the legal support: e_a - π.
template <typename T>
std::array<T, kNumActions> dlog_prob_dlogits(const PolicyOutput<T>& out, Action a) {
  std::array<T, kNumActions> g{};
  for (std::size_t i = 0; i < kNumActions; ++i) g[i] = out.legal[i] ? -out.probs[i] : T(0);
  g[action_index(a)] += 1;
  return g;
}

}  // namespace flagtrader

#endif  // FLAGTRADER_POLICY_MODEL_HPP
