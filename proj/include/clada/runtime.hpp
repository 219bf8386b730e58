#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clada/activation_meter.hpp"
#include "clada/cogload.hpp"
#include "clada/corpus.hpp"
#include "clada/error.hpp"
#include "clada/forward.hpp"
#include "clada/model.hpp"
#include "clada/threshold_search.hpp"

namespace clada {

enum class ModeKind { dense, clada_full, clada_no_semantic, clada_no_statistical, top_p, top_k };

struct RuntimeMode {
  ModeKind kind = ModeKind::dense;
  double param = 0.0;  // p for top_p, k_fraction for top_k

  static RuntimeMode dense() { return {ModeKind::dense}; }
  static RuntimeMode clada_full() { return {ModeKind::clada_full}; }
  static RuntimeMode clada_no_semantic() { return {ModeKind::clada_no_semantic}; }
  static RuntimeMode clada_no_statistical() { return {ModeKind::clada_no_statistical}; }
  static RuntimeMode top_p(double p) {
    if (!(p > 0.0 && p <= 1.0)) throw DimensionError("top_p requires 0 < p <= 1");
    return {ModeKind::top_p, p};
  }
  static RuntimeMode top_k(double k) {
    if (!(k > 0.0 && k <= 1.0)) throw DimensionError("top_k requires 0 < k_fraction <= 1");
    return {ModeKind::top_k, k};
  }

  /// Accepts dense, clada_full, clada_no_semantic, clada_no_statistical,
  /// top_p:<p>, top_k:<fraction>.
  static RuntimeMode parse(std::string_view s) {
    if (s == "dense") return dense();
    if (s == "clada_full" || s == "clada") return clada_full();
    if (s == "clada_no_semantic") return clada_no_semantic();
    if (s == "clada_no_statistical") return clada_no_statistical();
    auto param = [&](std::string_view prefix) {
      const std::string rest(s.substr(prefix.size()));
      try {
        std::size_t used = 0;
        const double v = std::stod(rest, &used);
        if (used != rest.size()) throw FormatError("");
        return v;
      } catch (const std::exception&) {
        throw FormatError("bad mode parameter in '" + std::string(s) + "'");
      }
    };
    if (s.starts_with("top_p:")) return top_p(param("top_p:"));
    if (s.starts_with("top_k:")) return top_k(param("top_k:"));
    throw FormatError("unknown mode '" + std::string(s) + "'");
  }

  std::string name() const {
    char buf[48];
    switch (kind) {
      case ModeKind::dense: return "dense";
      case ModeKind::clada_full: return "clada_full";
      case ModeKind::clada_no_semantic: return "clada_no_semantic";
      case ModeKind::clada_no_statistical: return "clada_no_statistical";
      case ModeKind::top_p: std::snprintf(buf, sizeof buf, "top_p:%g", param); return buf;
      case ModeKind::top_k: std::snprintf(buf, sizeof buf, "top_k:%g", param); return buf;
    }
    return "?";
  }
};

/// 1 + sign * (lambda * [s > tau_s] + gamma * [H > tau_H]).
inline double threshold_multiplier(const ThresholdPolicy& p, std::size_t layer, double s, double h) {
  const auto& l = p.layers.at(layer);
  const double bump = (s > p.tau_s ? l.lambda : 0.0) + (h > p.tau_H ? l.gamma : 0.0);
  return 1.0 + p.modulation_sign * bump;
}

/// tau_final = tau_base * multiplier, floored at zero.
inline double final_threshold(const ThresholdPolicy& p, std::size_t layer, double s, double h) {
  if (layer >= p.layers.size())
    throw IndexError("policy has no layer " + std::to_string(layer));
  return std::max(0.0, p.layers[layer].tau_base * threshold_multiplier(p, layer, s, h));
}

/// Keeps the smallest set of largest-magnitude neurons whose mass reaches
/// p * sum(A). All-zero magnitudes keep nothing.
inline NeuronMask top_p_mask(std::span<const float> mags, double p) {
  std::vector<std::uint32_t> order(mags.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return mags[a] > mags[b]; });
  double total = 0.0;
  for (auto j : order) total += mags[j];
  NeuronMask mask(mags.size(), 0);
  const double target = p * total;
  double cum = 0.0;
  for (auto j : order) {
    if (cum >= target) break;
    mask[j] = 1;
    cum += mags[j];
  }
  return mask;
}

/// Keeps ceil(k * d_h) largest-magnitude neurons; ties go to the lower index.
inline NeuronMask top_k_mask(std::span<const float> mags, double k_fraction) {
  const auto k = std::min(mags.size(), static_cast<std::size_t>(
                                           std::ceil(k_fraction * static_cast<double>(mags.size()) - 1e-9)));
  std::vector<std::uint32_t> order(mags.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return mags[a] > mags[b]; });
  NeuronMask mask(mags.size(), 0);
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
  return mask;
}

/// Static baselines: top_p and top_k masks from fixed magnitudes.
inline NeuronMask static_mask(std::span<const float> mags, const RuntimeMode& mode) {
  if (mags.empty()) throw EmptyInputError("static_mask needs magnitudes");
  switch (mode.kind) {
    case ModeKind::top_p: return top_p_mask(mags, mode.param);
    case ModeKind::top_k: return top_k_mask(mags, mode.param);
    default: throw FormatError("static_mask supports only top_p and top_k modes");
  }
}

/// Running min-max normalizer over a signal history.
class OnlineNormalizer {
 public:
  double push(double v) {
    lo_ = std::min(lo_, v);
    hi_ = std::max(hi_, v);
    return hi_ > lo_ ? (v - lo_) / (hi_ - lo_) : 0.0;
  }

 private:
  double lo_ = INFINITY;
  double hi_ = -INFINITY;
};

struct PrefillState {
  DecodeState cache;
  std::vector<NeuronMagnitudes> magnitudes;  // per layer
  LayerMasks masks;                          // thresholded at tau_base
  std::vector<float> last_logits;
  CognitiveSignal prompt_signal;             // empty for a one-token prompt
};

namespace detail {

class MagnitudeSink : public TraceSink {
 public:
  MagnitudeSink(const ModelWeights& m, std::size_t n_tokens, bool inputs_only = false)
      : m_(m), inputs_only_(inputs_only), rows_(m.dims.n_layers), inputs_(m.dims.n_layers) {
    for (std::size_t l = 0; l < m.dims.n_layers; ++l) norms_.push_back(m.out_column_norms(l));
    if (!inputs_only)
      for (auto& r : rows_) r.reserve(n_tokens);
  }

  bool wants(std::size_t, std::size_t, std::size_t) const override { return true; }

  void record(std::size_t, std::size_t layer, std::size_t, std::span<const float> x, std::span<const float> hidden,
              std::span<const float>) override {
    if (inputs_only_) {
      inputs_[layer].assign(x.begin(), x.end());
      return;
    }
    std::vector<float> a(hidden.size());
    for (std::size_t j = 0; j < a.size(); ++j)
      a[j] = static_cast<float>(std::fabs(static_cast<double>(hidden[j])) * norms_[layer][j]);
    rows_[layer].push_back(std::move(a));
  }

  const std::vector<std::vector<float>>& rows(std::size_t l) const { return rows_[l]; }
  const std::vector<float>& input(std::size_t l) const { return inputs_[l]; }
  const std::vector<float>& norms(std::size_t l) const { return norms_[l]; }

 private:
  const ModelWeights& m_;
  bool inputs_only_;
  std::vector<std::vector<float>> norms_;
  std::vector<std::vector<std::vector<float>>> rows_;
  std::vector<std::vector<float>> inputs_;
};

}  // namespace detail

/// Dense pass over the prompt: magnitudes per layer, masks at tau_base, the
/// attention cache and the last-position logits.
inline PrefillState prefill(const ModelWeights& m, const TokenSequence& prompt, const ThresholdPolicy& policy,
                            Engine* engine = nullptr) {
  if (prompt.empty()) throw EmptyInputError("prompt is empty");
  if (prompt.size() > m.dims.max_ctx)
    throw LengthError("prompt length " + std::to_string(prompt.size()) + " exceeds max_ctx " +
                      std::to_string(m.dims.max_ctx));
  if (policy.layers.size() != m.dims.n_layers)
    throw DimensionError("policy has " + std::to_string(policy.layers.size()) + " layers, model has " +
                         std::to_string(m.dims.n_layers));
  Engine local(m);
  Engine& eng = engine ? *engine : local;
  PrefillState st{DecodeState(m.dims), {}, {}, {}, {}};
  detail::MagnitudeSink sink(m, prompt.size());
  Matrix logits(prompt.size(), m.dims.vocab_size);
  for (std::size_t t = 0; t < prompt.size(); ++t) eng.step(st.cache, prompt[t], nullptr, logits.row(t), &sink);
  for (std::size_t l = 0; l < m.dims.n_layers; ++l) {
    std::vector<std::span<const float>> rows(sink.rows(l).begin(), sink.rows(l).end());
    st.magnitudes.push_back(aggregate_magnitudes(l, rows, policy.aggregation));
    st.masks.push_back(build_mask(st.magnitudes.back(), policy.layers[l].tau_base));
  }
  auto last = logits.row(prompt.size() - 1);
  st.last_logits.assign(last.begin(), last.end());
  if (prompt.size() >= 2) st.prompt_signal = signal_from_logits(logits, prompt);
  return st;
}

/// Where generation-time masks take their neuron magnitudes from.
enum class MagnitudeSource {
  prefill_static,  // fixed after prefill; only the threshold moves
  lagged,          // recomputed from the previous token's MLP inputs
};

struct GenerationOptions {
  MagnitudeSource source = MagnitudeSource::prefill_static;
  /// Teacher forcing: when set, the context is extended with these tokens
  /// instead of the greedy choice; predictions are still recorded.
  const TokenSequence* forced = nullptr;
};

struct GenerationStats {
  std::size_t tokens_generated = 0;
  std::vector<double> layer_sparsity;  // mean over sparse steps
  double mean_sparsity = 0.0;
  double wall_time_s = 0.0;            // generation loop only
  double prefill_time_s = 0.0;
  std::vector<std::uint8_t> fired_s;   // per step, s_t > tau_s
  std::vector<std::uint8_t> fired_H;   // per step, H_t > tau_H
  std::size_t fires_s = 0;
  std::size_t fires_H = 0;
  std::uint64_t mlp_multiplies = 0;    // during generation
  std::uint64_t dense_mlp_multiplies = 0;
  std::string decode = "greedy";
};

struct GenerationResult {
  TokenSequence tokens;     // tokens appended to the context
  TokenSequence predicted;  // greedy choice at each step (== tokens unless forced)
  GenerationStats stats;
};

namespace detail {

struct StreamState {
  PrefillState pre;
  LayerMasks masks;
  std::vector<NeuronMagnitudes> mags;  // current source for thresholding
  OnlineNormalizer norm_s, norm_H;
  std::vector<float> logits;
  GenerationResult result;
  std::vector<double> sparsity_sum;
  std::size_t sparse_steps = 0;
};

inline void compute_masks(const ModelWeights& m, const ThresholdPolicy& policy, const RuntimeMode& mode,
                          StreamState& s, double s_sig, double h_sig) {
  for (std::size_t l = 0; l < m.dims.n_layers; ++l) {
    const auto& a = s.mags[l].values;
    switch (mode.kind) {
      case ModeKind::dense: std::fill(s.masks[l].begin(), s.masks[l].end(), 1); break;
      case ModeKind::clada_full: s.masks[l] = build_mask(a, final_threshold(policy, l, s_sig, h_sig)); break;
      case ModeKind::clada_no_semantic: s.masks[l] = build_mask(a, policy.layers[l].tau_base); break;
      case ModeKind::clada_no_statistical: {
        // Top-P(0.5) base; the load multiplier scales the cut mass fraction.
        const double cut = std::clamp(0.5 * threshold_multiplier(policy, l, s_sig, h_sig), 0.0, 1.0);
        s.masks[l] = top_p_mask(a, 1.0 - cut);
        break;
      }
      case ModeKind::top_p:
      case ModeKind::top_k: s.masks[l] = static_mask(a, mode); break;
    }
  }
}

}  // namespace detail

/// Greedy generation for several independent prompts sharing one engine.
/// Per step and stream: surprisal and entropy of the previous step's
/// prediction, per-layer thresholds, masks from the prefill magnitudes, one
/// sparse forward step for the newest token.
inline std::vector<GenerationResult> generate_batch(const ModelWeights& m, const std::vector<TokenSequence>& prompts,
                                                    const ThresholdPolicy& policy, const RuntimeMode& mode,
                                                    std::size_t max_new, const GenerationOptions& opts = {}) {
  using clock = std::chrono::steady_clock;
  if (max_new < 1) throw DimensionError("max_new must be >= 1");
  if (prompts.empty()) throw EmptyInputError("no prompts");
  for (const auto& p : prompts)
    if (p.size() + max_new - 1 > m.dims.max_ctx)
      throw LengthError("prompt + generation exceeds max_ctx " + std::to_string(m.dims.max_ctx));
  if (opts.forced && (prompts.size() != 1 || opts.forced->size() < max_new))
    throw DimensionError("teacher forcing needs one prompt and >= max_new forced tokens");

  const std::size_t B = prompts.size();
  const std::size_t L = m.dims.n_layers;
  const bool use_raw = policy.signal_mode == SignalMode::raw;
  Engine eng(m);
  std::vector<detail::StreamState> streams;
  streams.reserve(B);

  const auto t_pre = clock::now();
  for (const auto& p : prompts) {
    detail::StreamState s{prefill(m, p, policy, &eng), {}, {}, {}, {}, {}, {}, {}, 0};
    s.masks = s.pre.masks;
    s.mags = s.pre.magnitudes;
    s.logits = s.pre.last_logits;
    s.sparsity_sum.assign(L, 0.0);
    for (std::size_t i = 0; i < s.pre.prompt_signal.size(); ++i) {
      s.norm_s.push(s.pre.prompt_signal.surprisal_raw[i]);
      s.norm_H.push(s.pre.prompt_signal.entropy_raw[i]);
    }
    streams.push_back(std::move(s));
  }
  const double prefill_time = std::chrono::duration<double>(clock::now() - t_pre).count();
  const std::uint64_t evals_before = eng.neuron_evals();

  const bool lagged = opts.source == MagnitudeSource::lagged && mode.kind != ModeKind::dense;
  detail::MagnitudeSink input_sink(m, 0, /*inputs_only=*/true);

  std::vector<DecodeState*> states(B);
  std::vector<TokenId> next(B);
  std::vector<const LayerMasks*> mask_ptrs(B);
  std::vector<std::span<float>> logit_spans(B);

  const auto t0 = clock::now();
  for (std::size_t t = 1; t <= max_new; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      auto& s = streams[b];
      const TokenId pred = argmax(s.logits);
      const TokenId tok = opts.forced ? (*opts.forced)[t - 1] : pred;
      s.result.predicted.push_back(pred);
      s.result.tokens.push_back(tok);
      next[b] = tok;
      if (t == max_new) continue;

      const double s_raw = surprisal(s.logits, tok);
      const double h_raw = entropy(s.logits);
      const double s_norm = s.norm_s.push(s_raw);
      const double h_norm = s.norm_H.push(h_raw);
      const double s_sig = use_raw ? s_raw : s_norm;
      const double h_sig = use_raw ? h_raw : h_norm;
      const bool fs = s_sig > policy.tau_s, fh = h_sig > policy.tau_H;
      s.result.stats.fired_s.push_back(fs);
      s.result.stats.fired_H.push_back(fh);
      s.result.stats.fires_s += fs;
      s.result.stats.fires_H += fh;

      detail::compute_masks(m, policy, mode, s, s_sig, h_sig);
      for (std::size_t l = 0; l < L; ++l) s.sparsity_sum[l] += sparsity(s.masks[l]);
      ++s.sparse_steps;
      states[b] = &s.pre.cache;
      mask_ptrs[b] = mode.kind == ModeKind::dense ? nullptr : &s.masks;
      logit_spans[b] = s.logits;
    }
    if (t == max_new) break;
    if (lagged && B == 1) {
      eng.step(*states[0], next[0], mask_ptrs[0], logit_spans[0], &input_sink);
      auto& s = streams[0];
      for (std::size_t l = 0; l < L; ++l)
        s.mags[l].values = token_magnitudes(m, l, input_sink.input(l), input_sink.norms(l));
    } else {
      eng.step(states, next, mask_ptrs, logit_spans);
    }
  }
  const double wall = std::chrono::duration<double>(clock::now() - t0).count();
  const std::uint64_t evals = eng.neuron_evals() - evals_before;

  std::vector<GenerationResult> out;
  out.reserve(B);
  for (auto& s : streams) {
    auto& st = s.result.stats;
    st.tokens_generated = max_new;
    st.wall_time_s = wall;
    st.prefill_time_s = prefill_time;
    st.layer_sparsity.assign(L, 0.0);
    if (s.sparse_steps > 0) {
      for (std::size_t l = 0; l < L; ++l) st.layer_sparsity[l] = s.sparsity_sum[l] / static_cast<double>(s.sparse_steps);
    } else {
      for (std::size_t l = 0; l < L; ++l) st.layer_sparsity[l] = mode.kind == ModeKind::dense ? 0.0 : sparsity(s.masks[l]);
    }
    st.mean_sparsity = std::accumulate(st.layer_sparsity.begin(), st.layer_sparsity.end(), 0.0) / static_cast<double>(L);
    st.mlp_multiplies = evals * 3 * m.dims.d_model / B;
    st.dense_mlp_multiplies = static_cast<std::uint64_t>(s.sparse_steps) * L * m.dims.d_h * 3 * m.dims.d_model;
    out.push_back(std::move(s.result));
  }
  return out;
}

inline GenerationResult generate(const ModelWeights& m, const TokenSequence& prompt, const ThresholdPolicy& policy,
                                 const RuntimeMode& mode, std::size_t max_new, const GenerationOptions& opts = {}) {
  return std::move(generate_batch(m, {prompt}, policy, mode, max_new, opts).front());
}

/// Greedy decoding through plain forward() calls, the reference for dense
/// equivalence checks.
inline TokenSequence greedy_reference(const ModelWeights& m, const TokenSequence& prompt, std::size_t max_new) {
  TokenSequence ctx = prompt;
  TokenSequence out;
  for (std::size_t i = 0; i < max_new; ++i) {
    const auto logits = forward(m, ctx).logits;
    const TokenId y = argmax(logits.row(ctx.size() - 1));
    out.push_back(y);
    ctx.push_back(y);
  }
  return out;
}

struct AblationRow {
  std::string mode;
  double agreement_rate = 0.0;
  double mean_sparsity = 0.0;
  double wall_time_s = 0.0;
  double indicator_fire_rate_s = 0.0;
  double indicator_fire_rate_H = 0.0;
};

/// Next-token agreement of each mode against dense greedy decoding, with the
/// context teacher-forced to the dense continuation so every step compares
/// predictions from the same prefix.
inline std::vector<AblationRow> ablation_run(const ModelWeights& m, const std::vector<TokenSequence>& prompts,
                                             const ThresholdPolicy& policy, const std::vector<RuntimeMode>& modes,
                                             std::size_t max_new) {
  if (modes.empty()) throw EmptyInputError("ablation needs at least one mode");
  if (prompts.empty()) throw EmptyInputError("ablation needs at least one prompt");
  std::vector<TokenSequence> reference;
  for (const auto& p : prompts)
    reference.push_back(generate(m, p, policy, RuntimeMode::dense(), max_new).tokens);

  std::vector<AblationRow> rows;
  for (const auto& mode : modes) {
    AblationRow row;
    row.mode = mode.name();
    std::size_t agree = 0, total = 0, fires_s = 0, fires_h = 0, signal_steps = 0;
    double sparsity_sum = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      GenerationOptions opts;
      opts.forced = &reference[i];
      const auto r = generate(m, prompts[i], policy, mode, max_new, opts);
      for (std::size_t t = 0; t < max_new; ++t) agree += r.predicted[t] == reference[i][t];
      total += max_new;
      sparsity_sum += r.stats.mean_sparsity;
      row.wall_time_s += r.stats.wall_time_s;
      fires_s += r.stats.fires_s;
      fires_h += r.stats.fires_H;
      signal_steps += r.stats.fired_s.size();
    }
    row.agreement_rate = static_cast<double>(agree) / static_cast<double>(total);
    row.mean_sparsity = sparsity_sum / static_cast<double>(prompts.size());
    if (signal_steps > 0) {
      row.indicator_fire_rate_s = static_cast<double>(fires_s) / static_cast<double>(signal_steps);
      row.indicator_fire_rate_H = static_cast<double>(fires_h) / static_cast<double>(signal_steps);
    }
    rows.push_back(row);
  }
  return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& os) {
  os << "mode,agreement_rate,mean_sparsity,wall_time_s,indicator_fire_rate_s,indicator_fire_rate_H\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%.6f\n", r.agreement_rate, r.mean_sparsity, r.wall_time_s,
                  r.indicator_fire_rate_s, r.indicator_fire_rate_H);
    os << r.mode << buf;
  }
}

}  // namespace clada
