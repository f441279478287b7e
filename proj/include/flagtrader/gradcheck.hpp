#ifndef FLAGTRADER_GRADCHECK_HPP
#define FLAGTRADER_GRADCHECK_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <vector>

#include "flagtrader/policy_model.hpp"

namespace flagtrader {

struct GradcheckOptions {
  double step = 1e-4;                // central-difference h
  double tolerance = 1e-4;           // max elementwise relative error per group
  double identity_tolerance = 1e-8;  // log-policy-gradient identity, both sides
  double relative_floor = 1e-6;      // denominators below this are clamped
  std::size_t sequences = 2;
  std::size_t sequence_length = 24;
};

struct GroupCheck {
  ParamGroup group = ParamGroup::Frozen;
  std::size_t entries = 0;
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;  // for the frozen group this must be exactly 0
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GroupCheck> groups;
  double identity_error = 0.0;  // max relative disagreement of the two sides
  ParamGroup identity_group = ParamGroup::Lora;
  bool identity_pass = false;
  bool pass = false;
};

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

namespace detail {

/// Fixed random probe: token sequences, masks and loss weights.
struct GradProbe {
  std::vector<TokenSeq> tokens;
  std::vector<ActionMask> masks;
  std::vector<std::array<double, kNumActions>> action_weights;
  std::vector<double> value_weights;
};

inline GradProbe make_probe(const ModelConfig& cfg, const GradcheckOptions& opt, SplitMix64& rng) {
  static constexpr ActionMask kMasks[] = {{true, true, true}, {false, true, true}, {true, true, false}};
  GradProbe probe;
  const std::size_t len = std::min(opt.sequence_length, cfg.max_seq_len);
  for (std::size_t s = 0; s < opt.sequences; ++s) {
    TokenSeq seq;
    for (std::size_t i = 0; i < len; ++i) seq.ids.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
    probe.tokens.push_back(std::move(seq));
    probe.masks.push_back(kMasks[s % 3]);
    std::array<double, kNumActions> w{};
    for (auto& x : w) x = rng.normal();
    probe.action_weights.push_back(w);
    probe.value_weights.push_back(rng.normal());
  }
  return probe;
}

/// L = Σ_s [ Σ_{a legal} w_{s,a} log π(a|s) + v_s V(s) ]
inline double probe_loss(const ParameterStore<double>& store, const GradProbe& probe) {
  double loss = 0.0;
  for (std::size_t s = 0; s < probe.tokens.size(); ++s) {
    const auto out = forward(store, probe.tokens[s], probe.masks[s]);
    for (std::size_t i = 0; i < kNumActions; ++i)
      if (probe.masks[s][i]) loss += probe.action_weights[s][i] * out.log_probs[i];
    loss += probe.value_weights[s] * out.value;
  }
  return loss;
}

inline GradientStore<double> probe_gradient(const ParameterStore<double>& store, const GradProbe& probe) {
  auto grads = GradientStore<double>::zeros_for(store);
  for (std::size_t s = 0; s < probe.tokens.size(); ++s) {
    Recording<double> rec;
    const auto out = forward(store, probe.tokens[s], probe.masks[s], rec, grads);
    std::array<double, kNumActions> dlogits{};
    for (std::size_t i = 0; i < kNumActions; ++i) {
      if (!probe.masks[s][i]) continue;
      const auto d = dlog_prob_dlogits(out, action_at(i));
      for (std::size_t j = 0; j < kNumActions; ++j) dlogits[j] += probe.action_weights[s][i] * d[j];
    }
    backward(rec, dlogits, probe.value_weights[s]);
  }
  return grads;
}

}  // namespace detail

/// Store used by the checker: LoRA B and the heads are re-drawn so that every
/// differentiable group has non-trivial gradients.
inline ParameterStore<double> gradcheck_store(const ModelConfig& cfg, std::uint64_t seed) {
  auto store = init_params<double>(cfg, seed);
  SplitMix64 rng(seed ^ 0x5eedULL);
  auto redraw = [&](Matrix<double>& m, double sd) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  };
  for (auto& pair : store.weights.lora) redraw(pair.b, 0.3);
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  redraw(store.weights.policy_w, sd);
  redraw(store.weights.policy_b, 0.1);
  redraw(store.weights.value_w, sd);
  redraw(store.weights.value_b, 0.1);
  return store;
}

/// Central finite differences against reverse-mode gradients for every
/// differentiable group, the frozen-group zero contract, and the identity
/// ∇log π(a|s) = ∇F(s)[a] − Σ_a' π(a'|s)∇F(s)[a'] on the adapter parameters.
inline GradcheckReport run_gradcheck(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& opt = {}) {
  cfg.validate();
  auto store = gradcheck_store(cfg, seed);
  SplitMix64 rng(seed * 0x9E3779B97F4A7C15ULL + 7);
  const auto probe = detail::make_probe(cfg, opt, rng);
  const auto analytic = detail::probe_gradient(store, probe);

  std::map<ParamGroup, GroupCheck> checks;
  for (auto g : kAllGroups) checks[g].group = g;

  // Walk the store and its gradient in lockstep (identical visit order).
  std::vector<std::pair<ParamGroup, Matrix<double>*>> params;
  store.weights.for_each([&](const std::string&, ParamGroup g, Matrix<double>& m) { params.emplace_back(g, &m); });
  std::vector<const Matrix<double>*> grads;
  analytic.grads.for_each([&](const std::string&, ParamGroup, const Matrix<double>& m) { grads.push_back(&m); });

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto [group, mat] = params[p];
    GroupCheck& check = checks[group];
    const Matrix<double>& grad = *grads[p];
    for (Eigen::Index i = 0; i < mat->size(); ++i) {
      const double g = grad.data()[i];
      check.max_abs_gradient = std::max(check.max_abs_gradient, std::abs(g));
      ++check.entries;
      if (group == ParamGroup::Frozen) continue;  // not a variable of the optimization
      double& x = mat->data()[i];
      const double saved = x;
      x = saved + opt.step;
      const double up = detail::probe_loss(store, probe);
      x = saved - opt.step;
      const double down = detail::probe_loss(store, probe);
      x = saved;
      const double fd = (up - down) / (2.0 * opt.step);
      check.max_relative_error = std::max(check.max_relative_error, relative_error(g, fd, opt.relative_floor));
    }
  }

  GradcheckReport report;
  report.pass = true;
  for (auto g : kAllGroups) {
    GroupCheck c = checks[g];
    if (g == ParamGroup::Frozen) {
      c.max_relative_error = c.max_abs_gradient;  // both sides are zero by contract
      c.pass = c.max_abs_gradient == 0.0;
    } else {
      c.pass = c.max_relative_error < opt.tolerance;
    }
    if (c.entries == 0) continue;
    report.pass = report.pass && c.pass;
    report.groups.push_back(c);
  }

  // Identity check: one reverse pass through log-softmax versus a weighted
  // combination of per-logit reverse passes.
  report.identity_group = cfg.lora_enabled ? ParamGroup::Lora : ParamGroup::Trainable;
  double worst = 0.0;
  for (std::size_t s = 0; s < probe.tokens.size(); ++s) {
    const auto& mask = probe.masks[s];
    const auto out = forward(store, probe.tokens[s], mask);
    std::array<GradientStore<double>, kNumActions> per_logit;
    for (std::size_t j = 0; j < kNumActions; ++j) {
      per_logit[j] = GradientStore<double>::zeros_for(store);
      Recording<double> rec;
      forward(store, probe.tokens[s], mask, rec, per_logit[j]);
      std::array<double, kNumActions> e{};
      e[j] = 1.0;
      backward(rec, e, 0.0);
    }
    for (std::size_t a = 0; a < kNumActions; ++a) {
      if (!mask[a]) continue;
      auto lhs = GradientStore<double>::zeros_for(store);
      Recording<double> rec;
      forward(store, probe.tokens[s], mask, rec, lhs);
      backward_log_prob(rec, action_at(a));

      std::vector<const Matrix<double>*> lhs_m;
      lhs.grads.for_each([&](const std::string&, ParamGroup g, const Matrix<double>& m) {
        if (g == report.identity_group) lhs_m.push_back(&m);
      });
      std::array<std::vector<const Matrix<double>*>, kNumActions> rhs_m;
      for (std::size_t j = 0; j < kNumActions; ++j)
        per_logit[j].grads.for_each([&](const std::string&, ParamGroup g, const Matrix<double>& m) {
          if (g == report.identity_group) rhs_m[j].push_back(&m);
        });
      for (std::size_t p = 0; p < lhs_m.size(); ++p) {
        Matrix<double> rhs = *rhs_m[a][p];
        for (std::size_t j = 0; j < kNumActions; ++j)
          if (mask[j]) rhs -= out.probs[j] * *rhs_m[j][p];
        for (Eigen::Index i = 0; i < rhs.size(); ++i)
          worst = std::max(worst, relative_error(lhs_m[p]->data()[i], rhs.data()[i], opt.relative_floor));
      }
    }
  }
  report.identity_error = worst;
  report.identity_pass = worst < opt.identity_tolerance;
  report.pass = report.pass && report.identity_pass;
  return report;
}

inline void print_gradcheck(std::ostream& os, const GradcheckReport& r) {
  for (const auto& c : r.groups) {
    os << (c.pass ? "PASS " : "FAIL ") << group_name(c.group) << ": entries=" << c.entries
       << " max_rel_error=" << c.max_relative_error << " max_abs_grad=" << c.max_abs_gradient << "\n";
  }
  os << (r.identity_pass ? "PASS " : "FAIL ") << "log-policy-gradient identity (" << group_name(r.identity_group)
     << "): max_rel_error=" << r.identity_error << "\n";
}

}  // namespace flagtrader

#endif  // FLAGTRADER_GRADCHECK_HPP
