#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clada/error.hpp"
#include "clada/model.hpp"
#include "clada/tensor.hpp"
#include "clada/tokenizer.hpp"

namespace clada {

/// One boolean per MLP neuron; nonzero means the neuron is computed.
using NeuronMask = std::vector<std::uint8_t>;
/// One mask per layer.
using LayerMasks = std::vector<NeuronMask>;

inline LayerMasks full_masks(const ModelDims& d) { return LayerMasks(d.n_layers, NeuronMask(d.d_h, 1)); }

inline void check_masks(const ModelDims& d, const LayerMasks& masks) {
  if (masks.size() != d.n_layers)
    throw DimensionError("mask count " + std::to_string(masks.size()) + " != n_layers " +
                         std::to_string(d.n_layers));
  for (std::size_t l = 0; l < masks.size(); ++l)
    if (masks[l].size() != d.d_h)
      throw DimensionError("mask for layer " + std::to_string(l) + " has length " + std::to_string(masks[l].size()) +
                           ", expected d_h=" + std::to_string(d.d_h));
}

/// Which (layer, position) cells a forward pass records, and how much.
struct TraceConfig {
  std::optional<std::vector<std::size_t>> layers;     // nullopt = every layer
  std::optional<std::vector<std::size_t>> positions;  // nullopt = every position
  bool retain_contributions = false;                  // N matrices, d_h x d_model each
  bool retain_inputs = false;                         // post-norm MLP inputs

  static TraceConfig none() {
    TraceConfig c;
    c.layers = std::vector<std::size_t>{};
    return c;
  }

  bool wants(std::size_t layer, std::size_t pos) const {
    auto has = [](const auto& v, std::size_t x) { return !v || std::find(v->begin(), v->end(), x) != v->end(); };
    return has(layers, layer) && has(positions, pos);
  }
};

struct TraceRecord {
  std::size_t layer = 0;
  std::size_t position = 0;
  std::vector<float> magnitudes;  // A_j(t), length d_h
  std::vector<float> mlp_output;  // length d_model
  std::vector<float> mlp_input;   // length d_model, empty unless retained
  Matrix contributions;           // d_h x d_model (row j = n_j), empty unless retained
};

struct ActivationTrace {
  std::vector<TraceRecord> records;

  const TraceRecord* find(std::size_t layer, std::size_t pos) const {
    for (const auto& r : records)
      if (r.layer == layer && r.position == pos) return &r;
    return nullptr;
  }

  const TraceRecord& at(std::size_t layer, std::size_t pos) const {
    if (const auto* r = find(layer, pos)) return *r;
    throw IndexError("no trace record for layer " + std::to_string(layer) + ", position " + std::to_string(pos));
  }

  /// Records of one layer in position order.
  std::vector<const TraceRecord*> layer(std::size_t l) const {
    std::vector<const TraceRecord*> out;
    for (const auto& r : records)
      if (r.layer == l) out.push_back(&r);
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->position < b->position; });
    return out;
  }
};

/// Attention cache of one generation stream.
class DecodeState {
 public:
  explicit DecodeState(const ModelDims& d) : keys_(d.n_layers), values_(d.n_layers) {}
  std::size_t length() const { return length_; }

 private:
  friend class Engine;
  std::vector<std::vector<float>> keys_;    // per layer, length_ x d_model
  std::vector<std::vector<float>> values_;  // per layer, length_ x d_model
  std::size_t length_ = 0;
};

/// Receives the MLP internals of selected cells during Engine::step.
class TraceSink {
 public:
  virtual ~TraceSink() = default;
  virtual bool wants(std::size_t stream, std::size_t layer, std::size_t pos) const = 0;
  /// hidden[j] = sigma(W_in,j x) * (V_in,j x); zero for masked-out neurons.
  virtual void record(std::size_t stream, std::size_t layer, std::size_t pos, std::span<const float> mlp_input,
                      std::span<const float> hidden, std::span<const float> mlp_output) = 0;
};

inline void rms_norm(std::span<const float> x, std::span<const float> gain, std::span<float> out) {
  double ss = 0.0;
  for (float v : x) ss += static_cast<double>(v) * v;
  const auto inv = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-5));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

/// The gated MLP of one layer on one input, restricted to `active` neurons.
/// Every dense and masked path goes through this loop, which is what keeps
/// an all-true mask bit-identical to the dense pass.
template <typename Indices>
inline void mlp_accumulate(const LayerWeights& lw, Activation act, std::span<const float> x, const Indices& active,
                           std::span<float> out, float* hidden = nullptr) {
  std::fill(out.begin(), out.end(), 0.0f);
  for (auto j : active) {
    const float a = dot(lw.w_in.row(j), x);
    const float b = dot(lw.v_in.row(j), x);
    const float h = activate(act, a) * b;
    if (hidden) hidden[j] = h;
    axpy(h, lw.w_out_cols.row(j), out);
  }
}

/// Index range 0..n usable in range-for without materializing a vector.
struct IndexRange {
  std::size_t n;
  struct It {
    std::size_t i;
    std::size_t operator*() const { return i; }
    It& operator++() {
      ++i;
      return *this;
    }
    bool operator!=(const It& o) const { return i != o.i; }
  };
  It begin() const { return {0}; }
  It end() const { return {n}; }
};

/// Dense MLP output for one input.
inline std::vector<float> mlp_forward(const ModelWeights& m, std::size_t layer, std::span<const float> x) {
  if (x.size() != m.dims.d_model) throw DimensionError("hidden state length != d_model");
  std::vector<float> out(m.dims.d_model);
  mlp_accumulate(m.layer(layer), m.activation, x, IndexRange{m.dims.d_h}, std::span<float>(out));
  return out;
}

/// Stepwise decoder over one or more streams sharing immutable weights.
/// Streams in a batch are processed neuron-major so each weight row is read
/// once per step for the whole batch.
class Engine {
 public:
  explicit Engine(const ModelWeights& m) : m_(m) {
    const auto& d = m.dims;
    const std::size_t hd = d.head_dim();
    inv_freq_.resize(hd / 2);
    for (std::size_t i = 0; i < hd / 2; ++i)
      inv_freq_[i] = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
  }

  const ModelWeights& model() const { return m_; }

  /// MLP neuron evaluations so far; each costs 3 * d_model multiplies.
  std::uint64_t neuron_evals() const { return neuron_evals_; }
  std::uint64_t mlp_multiplies() const { return neuron_evals_ * 3 * m_.dims.d_model; }

  /// Advances every stream by one token. masks[b] == nullptr runs stream b
  /// densely. logits[b] must have vocab_size entries.
  void step(std::span<DecodeState* const> states, std::span<const TokenId> tokens,
            std::span<const LayerMasks* const> masks, std::span<const std::span<float>> logits,
            TraceSink* sink = nullptr) {
    const auto& d = m_.dims;
    const std::size_t B = states.size();
    const std::size_t dm = d.d_model;
    if (tokens.size() != B || masks.size() != B || logits.size() != B)
      throw DimensionError("batch arguments disagree in size");
    for (std::size_t b = 0; b < B; ++b) {
      if (tokens[b] >= d.vocab_size)
        throw RangeError("token id " + std::to_string(tokens[b]) + " >= vocab_size " + std::to_string(d.vocab_size));
      if (states[b]->length_ >= d.max_ctx)
        throw LengthError("context overflow: max_ctx=" + std::to_string(d.max_ctx));
      if (masks[b]) check_masks(d, *masks[b]);
      if (logits[b].size() != d.vocab_size) throw DimensionError("logits buffer length != vocab_size");
    }
    resize_scratch(B);

    for (std::size_t b = 0; b < B; ++b) {
      auto e = m_.token_embedding.row(tokens[b]);
      std::copy(e.begin(), e.end(), x_[b].begin());
    }

    for (std::size_t l = 0; l < d.n_layers; ++l) {
      const auto& lw = m_.layers[l];
      for (std::size_t b = 0; b < B; ++b) rms_norm(x_[b], lw.attn_norm, xn_[b]);
      matvec_batch(lw.wq, xn_, q_, B);
      matvec_batch(lw.wk, xn_, k_, B);
      matvec_batch(lw.wv, xn_, v_, B);
      for (std::size_t b = 0; b < B; ++b) {
        DecodeState& st = *states[b];
        rope(q_[b], st.length_);
        rope(k_[b], st.length_);
        st.keys_[l].insert(st.keys_[l].end(), k_[b].begin(), k_[b].end());
        st.values_[l].insert(st.values_[l].end(), v_[b].begin(), v_[b].end());
        attend(st, l, q_[b], att_[b]);
      }
      matvec_batch(lw.wo, att_, o_, B);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < dm; ++i) x_[b][i] += o_[b][i];
        rms_norm(x_[b], lw.mlp_norm, xn_[b]);
      }
      mlp_batch(l, masks, B, states, sink);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < dm; ++i) x_[b][i] += y_[b][i];
    }

    for (std::size_t b = 0; b < B; ++b) {
      rms_norm(x_[b], m_.final_norm, xn_[b]);
      states[b]->length_ += 1;
    }
    for (std::size_t r = 0; r < d.vocab_size; ++r) {
      auto w = m_.lm_head.row(r);
      for (std::size_t b = 0; b < B; ++b) logits[b][r] = dot(w, xn_[b]);
    }
  }

  /// Single-stream convenience wrapper.
  void step(DecodeState& st, TokenId token, const LayerMasks* masks, std::span<float> logits,
            TraceSink* sink = nullptr) {
    DecodeState* s[1] = {&st};
    const LayerMasks* mk[1] = {masks};
    std::span<float> lg[1] = {logits};
    step(std::span<DecodeState* const>(s), std::span<const TokenId>(&token, 1),
         std::span<const LayerMasks* const>(mk), std::span<const std::span<float>>(lg), sink);
  }

 private:
  void resize_scratch(std::size_t B) {
    const std::size_t dm = m_.dims.d_model;
    auto grow = [&](std::vector<std::vector<float>>& v, std::size_t n) {
      if (v.size() < B) v.resize(B);
      for (auto& e : v) e.resize(n);
    };
    grow(x_, dm);
    grow(xn_, dm);
    grow(q_, dm);
    grow(k_, dm);
    grow(v_, dm);
    grow(att_, dm);
    grow(o_, dm);
    grow(y_, dm);
    grow(hidden_, m_.dims.d_h);
    if (active_.size() < B) active_.resize(B);
  }

  static void matvec_batch(const Matrix& w, const std::vector<std::vector<float>>& xs,
                           std::vector<std::vector<float>>& ys, std::size_t B) {
    for (std::size_t r = 0; r < w.rows; ++r) {
      auto row = w.row(r);
      for (std::size_t b = 0; b < B; ++b) ys[b][r] = dot(row, xs[b]);
    }
  }

  void rope(std::vector<float>& v, std::size_t pos) const {
    const std::size_t hd = m_.dims.head_dim();
    const std::size_t half = hd / 2;
    for (std::size_t i = 0; i < half; ++i) {
      const double ang = static_cast<double>(pos) * inv_freq_[i];
      const auto c = static_cast<float>(std::cos(ang));
      const auto s = static_cast<float>(std::sin(ang));
      for (std::size_t h = 0; h < m_.dims.n_heads; ++h) {
        float* p = v.data() + h * hd + 2 * i;
        const float a = p[0], b = p[1];
        p[0] = a * c - b * s;
        p[1] = a * s + b * c;
      }
    }
  }

  void attend(const DecodeState& st, std::size_t l, std::span<const float> q, std::span<float> out) {
    const std::size_t hd = m_.dims.head_dim();
    const std::size_t dm = m_.dims.d_model;
    const std::size_t T = st.length_ + 1;  // includes the current token
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    scores_.resize(T);
    std::fill(out.begin(), out.end(), 0.0f);
    const float* K = st.keys_[l].data();
    const float* V = st.values_[l].data();
    for (std::size_t h = 0; h < m_.dims.n_heads; ++h) {
      auto qh = q.subspan(h * hd, hd);
      float mx = -INFINITY;
      for (std::size_t t = 0; t < T; ++t) {
        scores_[t] = dot(qh, std::span<const float>(K + t * dm + h * hd, hd)) * scale;
        mx = std::max(mx, scores_[t]);
      }
      float sum = 0.0f;
      for (std::size_t t = 0; t < T; ++t) {
        scores_[t] = std::exp(scores_[t] - mx);
        sum += scores_[t];
      }
      auto oh = out.subspan(h * hd, hd);
      for (std::size_t t = 0; t < T; ++t)
        axpy(scores_[t] / sum, std::span<const float>(V + t * dm + h * hd, hd), oh);
    }
  }

  void mlp_batch(std::size_t l, std::span<const LayerMasks* const> masks, std::size_t B,
                 std::span<DecodeState* const> states, TraceSink* sink) {
    const auto& lw = m_.layers[l];
    const std::size_t d_h = m_.dims.d_h;
    bool tracing[64] = {};
    const bool can_trace = sink && B <= 64;
    for (std::size_t b = 0; b < B; ++b) {
      if (can_trace && sink->wants(b, l, states[b]->length_)) {
        tracing[b] = true;
        std::fill(hidden_[b].begin(), hidden_[b].end(), 0.0f);
      }
    }

    if (B == 1) {
      float* hid = tracing[0] ? hidden_[0].data() : nullptr;
      if (masks[0]) {
        auto& act = active_[0];
        act.clear();
        const auto& mk = (*masks[0])[l];
        for (std::uint32_t j = 0; j < d_h; ++j)
          if (mk[j]) act.push_back(j);
        mlp_accumulate(lw, m_.activation, xn_[0], act, y_[0], hid);
        neuron_evals_ += act.size();
      } else {
        mlp_accumulate(lw, m_.activation, xn_[0], IndexRange{d_h}, y_[0], hid);
        neuron_evals_ += d_h;
      }
    } else {
      // Same per-stream arithmetic as mlp_accumulate, interleaved across streams.
      for (std::size_t b = 0; b < B; ++b) std::fill(y_[b].begin(), y_[b].end(), 0.0f);
      for (std::size_t j = 0; j < d_h; ++j) {
        auto wi = lw.w_in.row(j);
        auto vi = lw.v_in.row(j);
        auto wo = lw.w_out_cols.row(j);
        for (std::size_t b = 0; b < B; ++b) {
          if (masks[b] && !(*masks[b])[l][j]) continue;
          const float h = activate(m_.activation, dot(wi, xn_[b])) * dot(vi, xn_[b]);
          if (tracing[b]) hidden_[b][j] = h;
          axpy(h, wo, y_[b]);
          ++neuron_evals_;
        }
      }
    }

    for (std::size_t b = 0; b < B; ++b)
      if (sink && tracing[b]) sink->record(b, l, states[b]->length_, xn_[b], hidden_[b], y_[b]);
  }

  const ModelWeights& m_;
  std::vector<double> inv_freq_;
  std::vector<std::vector<float>> x_, xn_, q_, k_, v_, att_, o_, y_, hidden_;
  std::vector<std::vector<std::uint32_t>> active_;
  std::vector<float> scores_;
  std::uint64_t neuron_evals_ = 0;
};

/// Fills an ActivationTrace from Engine callbacks for a single stream.
class TraceCollector : public TraceSink {
 public:
  TraceCollector(const ModelWeights& m, TraceConfig cfg) : m_(m), cfg_(std::move(cfg)) {
    colnorms_.resize(m.dims.n_layers);
  }

  bool wants(std::size_t, std::size_t layer, std::size_t pos) const override { return cfg_.wants(layer, pos); }

  void record(std::size_t, std::size_t layer, std::size_t pos, std::span<const float> x,
              std::span<const float> hidden, std::span<const float> y) override {
    if (colnorms_[layer].empty()) colnorms_[layer] = m_.out_column_norms(layer);
    const auto& norms = colnorms_[layer];
    TraceRecord r;
    r.layer = layer;
    r.position = pos;
    r.magnitudes.resize(hidden.size());
    for (std::size_t j = 0; j < hidden.size(); ++j)
      r.magnitudes[j] = static_cast<float>(std::fabs(static_cast<double>(hidden[j])) * norms[j]);
    r.mlp_output.assign(y.begin(), y.end());
    if (cfg_.retain_inputs) r.mlp_input.assign(x.begin(), x.end());
    if (cfg_.retain_contributions) {
      const auto& cols = m_.layers[layer].w_out_cols;
      r.contributions = Matrix(cols.rows, cols.cols);
      for (std::size_t j = 0; j < cols.rows; ++j) {
        auto src = cols.row(j);
        auto dst = r.contributions.row(j);
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = hidden[j] * src[i];
      }
    }
    trace_.records.push_back(std::move(r));
  }

  ActivationTrace take() { return std::move(trace_); }

 private:
  const ModelWeights& m_;
  TraceConfig cfg_;
  std::vector<std::vector<float>> colnorms_;
  ActivationTrace trace_;
};

struct ForwardResult {
  Matrix logits;  // T x vocab_size
  ActivationTrace trace;
};

namespace detail {

inline void check_sequence(const ModelDims& d, const TokenSequence& tokens) {
  if (tokens.empty()) throw LengthError("forward pass needs at least one token");
  if (tokens.size() > d.max_ctx)
    throw LengthError("sequence length " + std::to_string(tokens.size()) + " exceeds max_ctx " +
                      std::to_string(d.max_ctx));
}

}  // namespace detail

/// Dense causal forward pass; positions are processed in order through the
/// attention cache, so row t of the logits depends only on tokens[0..t].
inline ForwardResult forward(const ModelWeights& m, const TokenSequence& tokens,
                             const TraceConfig& trace_cfg = TraceConfig::none()) {
  detail::check_sequence(m.dims, tokens);
  Engine eng(m);
  DecodeState st(m.dims);
  TraceCollector sink(m, trace_cfg);
  ForwardResult res;
  res.logits = Matrix(tokens.size(), m.dims.vocab_size);
  for (std::size_t t = 0; t < tokens.size(); ++t) eng.step(st, tokens[t], nullptr, res.logits.row(t), &sink);
  res.trace = sink.take();
  return res;
}

/// Forward pass computing only the neurons each layer's mask keeps.
inline Matrix forward_masked(const ModelWeights& m, const TokenSequence& tokens, const LayerMasks& masks,
                             std::uint64_t* mlp_multiplies = nullptr) {
  check_masks(m.dims, masks);
  detail::check_sequence(m.dims, tokens);
  Engine eng(m);
  DecodeState st(m.dims);
  Matrix logits(tokens.size(), m.dims.vocab_size);
  for (std::size_t t = 0; t < tokens.size(); ++t) eng.step(st, tokens[t], &masks, logits.row(t));
  if (mlp_multiplies) *mlp_multiplies = eng.mlp_multiplies();
  return logits;
}

inline TokenId argmax(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<TokenId>(best);
}

}  // namespace clada
